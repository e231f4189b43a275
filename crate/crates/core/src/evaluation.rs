//! Ranking metrics and split evaluation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EvalSplit, SplitUser};
use crate::dense::{unified_rerank, JointModel};
use crate::inference::{average_session_recall, BeamConfig, Decoder, RankedItems};
use crate::{rng, Error, Result, Scalar};

fn check_unique(ranked: &[u32]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ranked.len());
    if let Some(d) = ranked.iter().find(|&&x| !seen.insert(x)) {
        return Err(Error::invalid(format!("item {d} appears twice in a ranking")));
    }
    Ok(())
}

/// 1-based rank of `target` within the first `k` entries.
fn rank_within(ranked: &[u32], target: u32, k: usize) -> Option<usize> {
    ranked.iter().take(k).position(|&x| x == target).map(|p| p + 1)
}

/// 1 when `target` is among the first `k` items.
pub fn recall_at_k(ranked: &[u32], target: u32, k: usize) -> Result<f64> {
    check_unique(ranked)?;
    Ok(if rank_within(ranked, target, k).is_some() { 1.0 } else { 0.0 })
}

/// `1 / log2(rank + 1)` when `target` is at 1-based `rank ≤ k`, else 0.
pub fn ndcg_at_k(ranked: &[u32], target: u32, k: usize) -> Result<f64> {
    check_unique(ranked)?;
    Ok(rank_within(ranked, target, k).map_or(0.0, |r| 1.0 / ((r + 1) as f64).log2()))
}

/// Metrics at one cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub recall_x100: f64,
    pub ndcg_x100: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub users: usize,
    /// Users whose search returned fewer than `max(ks)` valid results.
    pub short_lists: usize,
    pub metrics: Vec<CutoffMetrics>,
    pub nfe_mean: f64,
    pub nfe_max: usize,
    pub forward_calls_mean: f64,
}

impl MetricReport {
    pub fn at(&self, k: usize) -> Option<&CutoffMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |m| m.recall)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |m| m.ndcg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned table in the ×100 convention.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<8}", "metric");
        for m in &self.metrics {
            let _ = write!(s, "{:>10}", format!("@{}", m.k));
        }
        s.push('\n');
        for (name, f) in [("recall", 0), ("ndcg", 1)] {
            let _ = write!(s, "{name:<8}");
            for m in &self.metrics {
                let v = if f == 0 { m.recall_x100 } else { m.ndcg_x100 };
                let _ = write!(s, "{v:>10.4}");
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "users {}  short lists {}  nfe mean {:.2} max {}",
            self.users, self.short_lists, self.nfe_mean, self.nfe_max
        );
        s
    }
}

/// Per-user outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserResult {
    pub user: u32,
    pub targets: Vec<u32>,
    /// Ranked predictions; each entry holds one item per target position.
    pub predictions: Vec<Vec<u32>>,
    pub scores: Vec<f64>,
    /// Recall and NDCG at each cutoff, aligned with the report's cutoffs.
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub short_list: bool,
    pub nfe: usize,
    pub forward_calls: usize,
    #[serde(skip)]
    pub beams: Vec<RankedItems>,
}

/// Ranked predictions for one context.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub sequences: Vec<Vec<u32>>,
    pub scores: Vec<f64>,
    pub short_list: bool,
    pub nfe: usize,
    pub forward_calls: usize,
    pub beams: Vec<RankedItems>,
}

/// Produces rankings of the next `k_items` items after a context.
pub trait Ranker: Sync {
    fn rank(&self, context: &[u32], k_items: usize, top_k: usize, seed: u64) -> Result<Ranking>;
}

/// Beam search, optionally followed by dense re-ranking.
pub struct BeamRanker<'a, T> {
    pub decoder: Decoder<'a, T>,
    pub beam: BeamConfig,
    /// Longest context kept, in items (most recent kept).
    pub max_context: usize,
    pub unified: Option<(JointModel<'a, T>, f64)>,
}

impl<T: Scalar> Ranker for BeamRanker<'_, T> {
    fn rank(&self, context: &[u32], k_items: usize, top_k: usize, seed: u64) -> Result<Ranking> {
        let keep = &context[context.len().saturating_sub(self.max_context)..];
        let tokens = self.decoder.catalog.encode(keep);
        let mut cfg = self.beam.clone();
        cfg.seed = seed;
        if self.unified.is_some() {
            cfg.top_k = cfg.width;
        } else {
            cfg.top_k = top_k;
        }
        let res = self.decoder.beam_search(&tokens, k_items, &cfg)?;
        let (sequences, scores, short_list) = match &self.unified {
            Some((joint, blend)) => {
                let dense = joint.scores(&tokens)?;
                let rr = unified_rerank(&res.ranked, &dense, *blend, top_k);
                (rr.items.iter().map(|&i| vec![i]).collect(), rr.scores, rr.short_list)
            }
            None => (
                res.ranked.iter().map(|r| r.items.clone()).collect(),
                res.ranked.iter().map(|r| r.score).collect(),
                res.short_list,
            ),
        };
        Ok(Ranking {
            sequences,
            scores,
            short_list,
            nfe: res.nfe,
            forward_calls: res.forward_calls + usize::from(self.unified.is_some()),
            beams: res.ranked,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Valid,
    #[default]
    Test,
}

/// Evaluates `ranker` on every user of `split` (or the first `max_users`).
///
/// Leave-one-out scores the single target; leave-two-out scores each
/// target position against the items at that position among the top
/// beams and averages over positions.
pub fn evaluate_split(
    ranker: &dyn Ranker,
    split: &EvalSplit,
    target: Target,
    ks: &[usize],
    beam_width: usize,
    max_users: Option<usize>,
    seed: u64,
) -> Result<(MetricReport, Vec<UserResult>)> {
    let max_k = *ks.iter().max().ok_or_else(|| Error::Config("no cutoffs requested".into()))?;
    if beam_width < max_k {
        return Err(Error::Config(format!("beam width {beam_width} is below the largest cutoff {max_k}")));
    }
    let users: Vec<(usize, &SplitUser)> = split
        .users
        .iter()
        .enumerate()
        .take(max_users.unwrap_or(usize::MAX))
        .collect();
    if users.is_empty() {
        return Err(Error::invalid("no users to evaluate"));
    }
    let results: Vec<UserResult> = users
        .par_iter()
        .map(|&(idx, u)| {
            let (context, targets) = match target {
                Target::Valid => (&u.valid_context, &u.valid_targets),
                Target::Test => (&u.test_context, &u.test_targets),
            };
            let r = ranker.rank(context, targets.len(), max_k, rng::derive(seed, &[idx as u64]))?;
            score_user(u.user, targets, r, ks)
        })
        .collect::<Result<_>>()?;
    Ok((aggregate(&results, ks), results))
}

fn score_user(user: u32, targets: &[u32], r: Ranking, ks: &[usize]) -> Result<UserResult> {
    let mut recall = Vec::with_capacity(ks.len());
    let mut ndcg = Vec::with_capacity(ks.len());
    for &k in ks {
        if targets.len() == 1 {
            let items: Vec<u32> = r.sequences.iter().map(|s| s[0]).collect();
            recall.push(recall_at_k(&items, targets[0], k)?);
            ndcg.push(ndcg_at_k(&items, targets[0], k)?);
        } else {
            recall.push(average_session_recall(std::slice::from_ref(&r.sequences), &[targets.to_vec()], k)?);
            let mut n = 0.0;
            for (q, &t) in targets.iter().enumerate() {
                let mut column: Vec<u32> = Vec::new();
                for s in r.sequences.iter().take(k) {
                    if !column.contains(&s[q]) {
                        column.push(s[q]);
                    }
                }
                n += ndcg_at_k(&column, t, k)?;
            }
            ndcg.push(n / targets.len() as f64);
        }
    }
    Ok(UserResult {
        user,
        targets: targets.to_vec(),
        predictions: r.sequences,
        scores: r.scores,
        recall,
        ndcg,
        short_list: r.short_list,
        nfe: r.nfe,
        forward_calls: r.forward_calls,
        beams: r.beams,
    })
}

/// Corpus means of per-user results.
pub fn aggregate(results: &[UserResult], ks: &[usize]) -> MetricReport {
    let n = results.len().max(1) as f64;
    let metrics = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let recall = results.iter().map(|r| r.recall[i]).sum::<f64>() / n;
            let ndcg = results.iter().map(|r| r.ndcg[i]).sum::<f64>() / n;
            CutoffMetrics {
                k,
                recall,
                ndcg,
                recall_x100: recall * 100.0,
                ndcg_x100: ndcg * 100.0,
            }
        })
        .collect();
    MetricReport {
        users: results.len(),
        short_lists: results.iter().filter(|r| r.short_list).count(),
        metrics,
        nfe_mean: results.iter().map(|r| r.nfe as f64).sum::<f64>() / n,
        nfe_max: results.iter().map(|r| r.nfe).max().unwrap_or(0),
        forward_calls_mean: results.iter().map(|r| r.forward_calls as f64).sum::<f64>() / n,
    }
}

/// Per-user CSV: user, targets, then recall and NDCG per cutoff.
pub fn write_user_csv(path: &Path, results: &[UserResult], ks: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut header = vec!["user".to_string(), "targets".to_string(), "short_list".to_string()];
    for k in ks {
        header.push(format!("recall@{k}"));
        header.push(format!("ndcg@{k}"));
    }
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(csv_err)?;
    for r in results {
        let mut row = vec![
            r.user.to_string(),
            r.targets.iter().map(u32::to_string).collect::<Vec<_>>().join(" "),
            r.short_list.to_string(),
        ];
        for i in 0..ks.len() {
            row.push(format!("{}", r.recall[i]));
            row.push(format!("{}", r.ndcg[i]));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
