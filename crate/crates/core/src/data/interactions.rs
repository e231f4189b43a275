use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Chronologically ordered interactions per user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionDataset {
    pub users: Vec<UserRecord>,
    pub item_count: usize,
    /// Truncation cap in items, once applied.
    pub max_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user: u32,
    pub items: Vec<u32>,
}

/// String IDs behind the dense integer IDs, written as a JSON sidecar.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMap {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

impl IdMap {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InteractionFormat {
    Csv,
    Jsonl,
}

impl InteractionFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => InteractionFormat::Jsonl,
            _ => InteractionFormat::Csv,
        }
    }
}

struct Row {
    user: String,
    item: String,
    timestamp: f64,
    line: u64,
}

fn parse_timestamp(raw: &str, line: u64) -> Result<f64> {
    let ts: f64 = raw.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("timestamp {raw:?} is not a number"),
    })?;
    if ts.is_nan() {
        return Err(Error::Parse {
            line,
            message: "timestamp is NaN".into(),
        });
    }
    Ok(ts)
}

fn read_csv(path: &Path) -> Result<Vec<Row>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("header is missing the `{name}` column"),
        })
    };
    let (cu, ci, ct) = (col("user")?, col("item")?, col("timestamp")?);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |idx: usize, name: &str| {
            record
                .get(idx)
                .filter(|s| !s.is_empty())
                .map(str::to_owned)
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("missing `{name}` field"),
                })
        };
        let user = field(cu, "user")?;
        let item = field(ci, "item")?;
        let timestamp = parse_timestamp(&field(ct, "timestamp")?, line)?;
        rows.push(Row {
            user,
            item,
            timestamp,
            line,
        });
    }
    Ok(rows)
}

fn json_id(v: Option<&serde_json::Value>, name: &str, line: u64) -> Result<String> {
    match v {
        Some(serde_json::Value::String(s)) if !s.is_empty() => Ok(s.clone()),
        Some(serde_json::Value::Number(n)) => Ok(n.to_string()),
        _ => Err(Error::Parse {
            line,
            message: format!("missing `{name}` field"),
        }),
    }
}

fn read_jsonl(path: &Path) -> Result<Vec<Row>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i as u64 + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let user = json_id(value.get("user"), "user", line)?;
        let item = json_id(value.get("item"), "item", line)?;
        let timestamp = match value.get("timestamp") {
            Some(serde_json::Value::Number(n)) => n.as_f64().unwrap_or(f64::NAN),
            Some(serde_json::Value::String(s)) => parse_timestamp(s, line)?,
            _ => {
                return Err(Error::Parse {
                    line,
                    message: "missing `timestamp` field".into(),
                })
            }
        };
        rows.push(Row {
            user,
            item,
            timestamp,
            line,
        });
    }
    Ok(rows)
}

/// Loads `(user, item, timestamp)` rows and groups them per user in timestamp
/// order. Equal timestamps keep file order.
///
/// When `item_vocab` is given, item strings must appear in it and map to their
/// index there (the row order of the embedding table). Otherwise item and user
/// IDs are assigned densely in order of first appearance.
pub fn load_interactions(
    path: &Path,
    format: InteractionFormat,
    item_vocab: Option<&[String]>,
) -> Result<(InteractionDataset, IdMap)> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let rows = match format {
        InteractionFormat::Csv => read_csv(path)?,
        InteractionFormat::Jsonl => read_jsonl(path)?,
    };
    if rows.is_empty() {
        return Err(Error::Format(format!("{}: no interactions", path.display())));
    }

    let mut ids = IdMap::default();
    let mut item_index: HashMap<String, u32> = HashMap::new();
    if let Some(vocab) = item_vocab {
        ids.items = vocab.to_vec();
        for (i, s) in vocab.iter().enumerate() {
            item_index.insert(s.clone(), i as u32);
        }
    }
    let mut user_index: HashMap<String, u32> = HashMap::new();
    // (timestamp, row order, item) per user
    let mut grouped: Vec<Vec<(f64, usize, u32)>> = Vec::new();
    for (order, row) in rows.into_iter().enumerate() {
        let item = match item_index.get(&row.item) {
            Some(&i) => i,
            None if item_vocab.is_some() => {
                return Err(Error::Parse {
                    line: row.line,
                    message: format!("item {:?} is not in the item table", row.item),
                })
            }
            None => {
                let i = ids.items.len() as u32;
                ids.items.push(row.item.clone());
                item_index.insert(row.item, i);
                i
            }
        };
        let user = *user_index.entry(row.user.clone()).or_insert_with(|| {
            ids.users.push(row.user);
            grouped.push(Vec::new());
            (ids.users.len() - 1) as u32
        });
        grouped[user as usize].push((row.timestamp, order, item));
    }

    let users = grouped
        .into_iter()
        .enumerate()
        .map(|(u, mut events)| {
            events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            UserRecord {
                user: u as u32,
                items: events.into_iter().map(|e| e.2).collect(),
            }
        })
        .collect();
    let dataset = InteractionDataset {
        users,
        item_count: ids.items.len(),
        max_len: None,
    };
    Ok((dataset, ids))
}

impl InteractionDataset {
    pub fn interaction_count(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }

    /// Keeps the most recent `max_len` items of every sequence.
    pub fn truncate(mut self, max_len: usize) -> Self {
        for u in &mut self.users {
            if u.items.len() > max_len {
                u.items.drain(..u.items.len() - max_len);
            }
        }
        self.max_len = Some(max_len);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for u in &self.users {
            if let Some(&bad) = u.items.iter().find(|&&i| i as usize >= self.item_count) {
                return Err(Error::invalid(format!(
                    "user {} references item {bad} outside the item table ({} items)",
                    u.user, self.item_count
                )));
            }
        }
        Ok(())
    }
}

/// Standard 5-core filtering.
pub fn five_core_filter(ds: &InteractionDataset) -> Result<InteractionDataset> {
    k_core_filter(ds, 5)
}

/// Iteratively drops users and items with fewer than `k` interactions until
/// neither changes. Item IDs are kept stable (no re-indexing).
pub fn k_core_filter(ds: &InteractionDataset, k: usize) -> Result<InteractionDataset> {
    let mut users: Vec<UserRecord> = ds.users.clone();
    loop {
        let mut item_counts = vec![0usize; ds.item_count];
        for u in &users {
            for &i in &u.items {
                item_counts[i as usize] += 1;
            }
        }
        let mut changed = false;
        for u in &mut users {
            let before = u.items.len();
            u.items.retain(|&i| item_counts[i as usize] >= k);
            changed |= u.items.len() != before;
        }
        let before = users.len();
        users.retain(|u| u.items.len() >= k);
        changed |= users.len() != before;
        if !changed {
            break;
        }
    }
    if users.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    Ok(InteractionDataset {
        users,
        item_count: ds.item_count,
        max_len: ds.max_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn rows_sorted_by_timestamp() {
        let f = write_tmp("user,item,timestamp\nu,a,5\nu,b,1\nu,c,3\n", ".csv");
        let (ds, ids) = load_interactions(f.path(), InteractionFormat::Csv, None).unwrap();
        let names: Vec<&str> = ds.users[0].items.iter().map(|&i| ids.items[i as usize].as_str()).collect();
        assert_eq!(names, ["b", "c", "a"]);
    }

    #[test]
    fn equal_timestamps_keep_file_order() {
        let f = write_tmp("user,item,timestamp\nu,x,2\nu,y,2\nu,z,1\n", ".csv");
        let (ds, ids) = load_interactions(f.path(), InteractionFormat::Csv, None).unwrap();
        let names: Vec<&str> = ds.users[0].items.iter().map(|&i| ids.items[i as usize].as_str()).collect();
        assert_eq!(names, ["z", "x", "y"]);
    }

    #[test]
    fn missing_item_names_the_line() {
        let f = write_tmp("user,item,timestamp\nu,a,1\nu\n", ".csv");
        let err = load_interactions(f.path(), InteractionFormat::Csv, None).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("item"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_tmp("user,item,timestamp\n", ".csv");
        assert!(load_interactions(f.path(), InteractionFormat::Csv, None).is_err());
    }

    #[test]
    fn jsonl_matches_csv() {
        let c = write_tmp("user,item,timestamp\nu1,a,3\nu2,b,1\nu1,b,2\n", ".csv");
        let j = write_tmp(
            "{\"user\":\"u1\",\"item\":\"a\",\"timestamp\":3}\n{\"user\":\"u2\",\"item\":\"b\",\"timestamp\":1}\n{\"user\":\"u1\",\"item\":\"b\",\"timestamp\":2}\n",
            ".jsonl",
        );
        let a = load_interactions(c.path(), InteractionFormat::Csv, None).unwrap();
        let b = load_interactions(j.path(), InteractionFormat::from_path(j.path()), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn item_vocab_fixes_indices() {
        let f = write_tmp("user,item,timestamp\nu,b,1\nu,a,2\n", ".csv");
        let vocab = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let (ds, _) = load_interactions(f.path(), InteractionFormat::Csv, Some(&vocab)).unwrap();
        assert_eq!(ds.users[0].items, vec![1, 0]);
        assert_eq!(ds.item_count, 3);
        let g = write_tmp("user,item,timestamp\nu,zz,1\n", ".csv");
        assert!(load_interactions(g.path(), InteractionFormat::Csv, Some(&vocab)).is_err());
    }

    #[test]
    fn truncate_keeps_most_recent() {
        let ds = InteractionDataset {
            users: vec![UserRecord { user: 0, items: vec![1, 2, 3, 4, 5] }],
            item_count: 6,
            max_len: None,
        };
        assert_eq!(ds.truncate(3).users[0].items, vec![3, 4, 5]);
    }

    fn ds_from(seqs: Vec<Vec<u32>>, items: usize) -> InteractionDataset {
        InteractionDataset {
            users: seqs
                .into_iter()
                .enumerate()
                .map(|(u, items)| UserRecord { user: u as u32, items })
                .collect(),
            item_count: items,
            max_len: None,
        }
    }

    #[test]
    fn five_core_fixed_point_is_unchanged() {
        let seqs: Vec<Vec<u32>> = (0..5).map(|_| (0..5).collect()).collect();
        let ds = ds_from(seqs, 5);
        assert_eq!(five_core_filter(&ds).unwrap(), ds);
    }

    #[test]
    fn short_user_removed() {
        let mut seqs: Vec<Vec<u32>> = (0..5).map(|_| (0..5).collect()).collect();
        seqs.push(vec![0, 1, 2, 3]);
        let out = five_core_filter(&ds_from(seqs, 5)).unwrap();
        assert_eq!(out.users.len(), 5);
        assert!(out.users.iter().all(|u| u.user != 5));
    }

    /// Removes one offending interaction or user per pass until none remain.
    fn one_at_a_time_oracle(ds: &InteractionDataset, k: usize) -> Vec<UserRecord> {
        let mut users = ds.users.clone();
        loop {
            let mut counts = vec![0usize; ds.item_count];
            for u in &users {
                for &i in &u.items {
                    counts[i as usize] += 1;
                }
            }
            if let Some(pos) = users.iter().position(|u| u.items.len() < k) {
                users.remove(pos);
                continue;
            }
            let mut removed = false;
            'outer: for u in &mut users {
                for idx in 0..u.items.len() {
                    if counts[u.items[idx] as usize] < k {
                        u.items.remove(idx);
                        removed = true;
                        break 'outer;
                    }
                }
            }
            if !removed {
                return users;
            }
        }
    }

    #[test]
    fn chain_removal_matches_oracle() {
        // Item 9 appears exactly 5 times, once in the short user 5. Dropping
        // user 5 pushes item 9 below five, so it disappears everywhere.
        let mut seqs = vec![vec![0, 1, 2, 3, 4, 9]; 4];
        seqs.push(vec![0, 1, 2, 3, 4]);
        seqs.push(vec![9, 0, 1, 2]);
        let ds = ds_from(seqs, 10);
        let out = five_core_filter(&ds).unwrap();
        assert_eq!(out.users, one_at_a_time_oracle(&ds, 5));
        assert_eq!(out.users.len(), 5);
        assert!(out.users.iter().all(|u| u.items == vec![0, 1, 2, 3, 4]));
    }

    #[test]
    fn everything_filtered_is_an_error() {
        let ds = ds_from(vec![vec![0, 1]], 2);
        assert!(matches!(five_core_filter(&ds), Err(Error::EmptyAfterFilter)));
    }

    proptest::proptest! {
        #[test]
        fn filter_is_idempotent(seqs in proptest::collection::vec(proptest::collection::vec(0u32..8, 0..12), 1..12)) {
            let ds = ds_from(seqs, 8);
            if let Ok(once) = k_core_filter(&ds, 3) {
                let twice = k_core_filter(&once, 3).unwrap();
                proptest::prop_assert_eq!(&once, &twice);
                proptest::prop_assert_eq!(once.users, one_at_a_time_oracle(&ds, 3));
            }
        }
    }
}
