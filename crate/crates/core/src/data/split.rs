use std::fs;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::InteractionDataset;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    LeaveOneOut,
    LeaveTwoOut,
}

impl SplitMode {
    /// Items held out per user for each of validation and test.
    pub fn targets(self) -> usize {
        match self {
            SplitMode::LeaveOneOut => 1,
            SplitMode::LeaveTwoOut => 2,
        }
    }

    pub fn min_len(self) -> usize {
        2 * self.targets() + 1
    }
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leave-one-out" | "loo" => Ok(SplitMode::LeaveOneOut),
            "leave-two-out" | "lto" => Ok(SplitMode::LeaveTwoOut),
            other => Err(Error::Config(format!("unknown split mode {other:?}"))),
        }
    }
}

/// Per-user split. Evaluation contexts are stored explicitly so that
/// sparsifying the training sequence leaves them untouched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitUser {
    pub user: u32,
    pub train: Vec<u32>,
    pub valid_context: Vec<u32>,
    pub valid_targets: Vec<u32>,
    pub test_context: Vec<u32>,
    pub test_targets: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub mode: SplitMode,
    pub item_count: usize,
    pub users: Vec<SplitUser>,
    /// Users dropped because their sequence was too short.
    pub dropped: usize,
}

impl EvalSplit {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Holds out the last item (or two) for test and the one (or two) before for
/// validation; training gets the rest.
pub fn make_split(ds: &InteractionDataset, mode: SplitMode) -> EvalSplit {
    let k = mode.targets();
    let mut users = Vec::with_capacity(ds.users.len());
    let mut dropped = 0;
    for u in &ds.users {
        let n = u.items.len();
        if n < mode.min_len() {
            dropped += 1;
            continue;
        }
        let s = &u.items;
        users.push(SplitUser {
            user: u.user,
            train: s[..n - 2 * k].to_vec(),
            valid_context: s[..n - 2 * k].to_vec(),
            valid_targets: s[n - 2 * k..n - k].to_vec(),
            test_context: s[..n - k].to_vec(),
            test_targets: s[n - k..].to_vec(),
        });
    }
    if dropped > 0 {
        log::info!("split: dropped {dropped} of {} users with fewer than {} items", ds.users.len(), mode.min_len());
    }
    EvalSplit {
        mode,
        item_count: ds.item_count,
        users,
        dropped,
    }
}

/// Number of training items never dropped below this floor.
pub const SPARSIFY_FLOOR: usize = 3;

/// Drops `⌊drop_frac · len⌋` uniformly chosen items from every training
/// sequence, never leaving fewer than three. Evaluation data is untouched.
pub fn sparsify_train(split: &EvalSplit, drop_frac: f64, seed: u64) -> Result<EvalSplit> {
    if !(0.0..1.0).contains(&drop_frac) {
        return Err(Error::invalid(format!("drop fraction {drop_frac} outside [0, 1)")));
    }
    let mut out = split.clone();
    for (idx, u) in out.users.iter_mut().enumerate() {
        let len = u.train.len();
        let want = (drop_frac * len as f64).floor() as usize;
        let drop = want.min(len.saturating_sub(SPARSIFY_FLOOR));
        if drop == 0 {
            continue;
        }
        let mut rng = rng::stream(seed, &[0x5350_4152, idx as u64]);
        let mut removed = vec![false; len];
        for i in index::sample(&mut rng, len, drop) {
            removed[i] = true;
        }
        u.train = u
            .train
            .iter()
            .zip(&removed)
            .filter(|(_, &r)| !r)
            .map(|(&i, _)| i)
            .collect();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UserRecord;
    use proptest::prelude::*;

    fn ds(seqs: Vec<Vec<u32>>) -> InteractionDataset {
        InteractionDataset {
            users: seqs
                .into_iter()
                .enumerate()
                .map(|(u, items)| UserRecord { user: u as u32, items })
                .collect(),
            item_count: 10,
            max_len: None,
        }
    }

    #[test]
    fn leave_one_out_layout() {
        let s = make_split(&ds(vec![vec![0, 1, 2, 3]]), SplitMode::LeaveOneOut);
        let u = &s.users[0];
        assert_eq!(u.train, vec![0, 1]);
        assert_eq!((u.valid_context.clone(), u.valid_targets.clone()), (vec![0, 1], vec![2]));
        assert_eq!((u.test_context.clone(), u.test_targets.clone()), (vec![0, 1, 2], vec![3]));
    }

    #[test]
    fn leave_two_out_layout() {
        let s = make_split(&ds(vec![vec![0, 1, 2, 3, 4, 5]]), SplitMode::LeaveTwoOut);
        let u = &s.users[0];
        assert_eq!(u.test_targets, vec![4, 5]);
        assert_eq!(u.test_context, vec![0, 1, 2, 3]);
        assert_eq!(u.valid_targets, vec![2, 3]);
        assert_eq!(u.valid_context, vec![0, 1]);
    }

    #[test]
    fn short_sequences_dropped_and_counted() {
        let s = make_split(&ds(vec![vec![0, 1], vec![0, 1, 2]]), SplitMode::LeaveOneOut);
        assert_eq!(s.users.len(), 1);
        assert_eq!(s.dropped, 1);
        let s = make_split(&ds(vec![vec![0, 1, 2, 3]]), SplitMode::LeaveTwoOut);
        assert_eq!(s.dropped, 1);
    }

    #[test]
    fn zero_drop_is_identity() {
        let s = make_split(&ds(vec![(0..9).collect()]), SplitMode::LeaveOneOut);
        assert_eq!(sparsify_train(&s, 0.0, 3).unwrap(), s);
    }

    #[test]
    fn floor_of_three() {
        let s = make_split(&ds(vec![vec![0, 1, 2, 3, 4]]), SplitMode::LeaveOneOut);
        assert_eq!(s.users[0].train.len(), 3);
        assert_eq!(sparsify_train(&s, 0.75, 3).unwrap(), s);
    }

    #[test]
    fn half_of_eight_removed_in_order() {
        let s = make_split(&ds(vec![(0..10).collect()]), SplitMode::LeaveOneOut);
        assert_eq!(s.users[0].train.len(), 8);
        let out = sparsify_train(&s, 0.5, 11).unwrap();
        let kept = &out.users[0].train;
        assert_eq!(kept.len(), 4);
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(out.users[0].test_context, s.users[0].test_context);
    }

    #[test]
    fn drop_frac_of_one_rejected() {
        let s = make_split(&ds(vec![(0..10).collect()]), SplitMode::LeaveOneOut);
        assert!(sparsify_train(&s, 1.0, 0).is_err());
    }

    fn is_subsequence(small: &[u32], big: &[u32]) -> bool {
        let mut it = big.iter();
        small.iter().all(|x| it.any(|y| y == x))
    }

    proptest! {
        #[test]
        fn split_reconstructs_sequences(seqs in prop::collection::vec(prop::collection::vec(0u32..10, 0..15), 1..10), two in any::<bool>()) {
            let mode = if two { SplitMode::LeaveTwoOut } else { SplitMode::LeaveOneOut };
            let d = ds(seqs);
            let s = make_split(&d, mode);
            prop_assert_eq!(s.users.len() + s.dropped, d.users.len());
            for u in &s.users {
                let orig = &d.users[u.user as usize].items;
                let mut rebuilt = u.train.clone();
                rebuilt.extend(&u.valid_targets);
                rebuilt.extend(&u.test_targets);
                prop_assert_eq!(&rebuilt, orig);
                let mut test_ctx = u.valid_context.clone();
                test_ctx.extend(&u.valid_targets);
                prop_assert_eq!(&test_ctx, &u.test_context);
            }
        }

        #[test]
        fn sparsify_deterministic_subsequence(seqs in prop::collection::vec(prop::collection::vec(0u32..10, 3..30), 1..8), frac in 0.0f64..0.99, seed in any::<u64>()) {
            let s = make_split(&ds(seqs), SplitMode::LeaveOneOut);
            let a = sparsify_train(&s, frac, seed).unwrap();
            prop_assert_eq!(&a, &sparsify_train(&s, frac, seed).unwrap());
            for (x, y) in a.users.iter().zip(&s.users) {
                prop_assert!(is_subsequence(&x.train, &y.train));
                let want = ((frac * y.train.len() as f64).floor() as usize).min(y.train.len().saturating_sub(3));
                prop_assert_eq!(x.train.len(), y.train.len() - want);
                prop_assert_eq!(&x.test_targets, &y.test_targets);
                prop_assert_eq!(&x.valid_context, &y.valid_context);
            }
        }
    }
}
