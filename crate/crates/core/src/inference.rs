//! Reverse-process decoding: sampling, beam search over the masked target
//! slots, and exact enumeration of the model's tuple distribution.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::ops::Range;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingTable;
use crate::dense::{plan_batch, DenseHead};
use crate::denoiser::{Denoiser, PositionDist};
use crate::diffusion::{MaskedSequence, SpecialTokens};
use crate::tokenizer::SidCatalog;
use crate::{rng, Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    #[default]
    Greedy,
    LeftToRight,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Greedy, Strategy::LeftToRight];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Greedy => "greedy",
            Strategy::LeftToRight => "left_to_right",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "random" => Ok(Strategy::Random),
            "greedy" | "margin" => Ok(Strategy::Greedy),
            "left_to_right" | "l2r" => Ok(Strategy::LeftToRight),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How many positions to fill at each of `T` steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnmaskSchedule {
    pub counts: Vec<usize>,
    pub strategy: Strategy,
}

impl UnmaskSchedule {
    pub fn new(counts: Vec<usize>, strategy: Strategy) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::Config("schedule needs at least one step and positive counts".into()));
        }
        Ok(Self { counts, strategy })
    }

    /// `T` steps over `masked` positions; the first `masked mod T` steps
    /// take one extra position.
    pub fn near_uniform(masked: usize, steps: usize, strategy: Strategy) -> Result<Self> {
        if steps == 0 || steps > masked {
            return Err(Error::Config(format!("cannot fill {masked} positions in {steps} steps")));
        }
        let (q, r) = (masked / steps, masked % steps);
        Self::new((0..steps).map(|i| q + usize::from(i < r)).collect(), strategy)
    }

    pub fn steps(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Positions to fill next among those in `dists`.
///
/// Random draws a uniform subset, greedy takes the largest top-1 minus
/// top-2 margins (ties to the lowest position), left-to-right the leftmost.
/// The result is sorted by position.
pub fn select_positions(dists: &[PositionDist], count: usize, strategy: Strategy, rng: Option<&mut rng::Rng>) -> Vec<usize> {
    assert!(count <= dists.len(), "cannot select {count} of {} positions", dists.len());
    let mut picked: Vec<usize> = match strategy {
        Strategy::LeftToRight => {
            let mut p: Vec<usize> = dists.iter().map(|d| d.position).collect();
            p.sort_unstable();
            p.truncate(count);
            p
        }
        Strategy::Greedy => {
            let mut scored: Vec<(f64, usize)> = dists.iter().map(|d| (margin(&d.probs), d.position)).collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scored.into_iter().take(count).map(|(_, p)| p).collect()
        }
        Strategy::Random => {
            let rng = rng.expect("random strategy needs a generator");
            let mut positions: Vec<usize> = dists.iter().map(|d| d.position).collect();
            positions.sort_unstable();
            index::sample(rng, positions.len(), count).into_iter().map(|i| positions[i]).collect()
        }
    };
    picked.sort_unstable();
    picked
}

/// Top-1 minus top-2 probability.
pub fn margin(probs: &[f64]) -> f64 {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in probs {
        if p > a {
            b = a;
            a = p;
        } else if p > b {
            b = p;
        }
    }
    if b == f64::NEG_INFINITY {
        a
    } else {
        a - b
    }
}

/// A partially filled target with its unmasking trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    /// Target slots; unfilled entries hold the mask token.
    pub tokens: Vec<u32>,
    /// Target-slot indices in fill order.
    pub unmask_order: Vec<usize>,
    /// Log conditional of each fill, aligned with `unmask_order`.
    pub fill_logprobs: Vec<f64>,
    pub logprob: f64,
    pub nfe_used: usize,
}

/// One drawn next-item tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub item: Option<u32>,
    pub beam: Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub width: usize,
    pub top_k: usize,
    pub strategy: Strategy,
    /// Function evaluations; `None` fills one position per step.
    pub nfe: Option<usize>,
    /// Explicit per-step counts; overrides `nfe`.
    pub counts: Option<Vec<usize>>,
    /// Restricts each slot's support to its layer's token range.
    pub restrict: bool,
    /// Seed for the random strategy.
    pub seed: u64,
    /// Doubles the width once when fewer than `top_k` valid results remain.
    pub widen_on_short: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 20,
            top_k: 10,
            strategy: Strategy::Greedy,
            nfe: None,
            counts: None,
            restrict: true,
            seed: 0,
            widen_on_short: true,
        }
    }
}

impl BeamConfig {
    /// Width `max(20, 2K)`.
    pub fn for_top_k(top_k: usize) -> Self {
        Self {
            width: (2 * top_k).max(20),
            top_k,
            ..Self::default()
        }
    }

    pub fn schedule(&self, masked: usize) -> Result<UnmaskSchedule> {
        match (&self.counts, self.nfe) {
            (Some(c), _) => {
                let s = UnmaskSchedule::new(c.clone(), self.strategy)?;
                if s.total() != masked {
                    return Err(Error::Config(format!("schedule fills {} of {masked} positions", s.total())));
                }
                Ok(s)
            }
            (None, Some(t)) => UnmaskSchedule::near_uniform(masked, t, self.strategy),
            (None, None) => UnmaskSchedule::near_uniform(masked, masked, self.strategy),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItems {
    pub items: Vec<u32>,
    pub score: f64,
    pub beam: Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub ranked: Vec<RankedItems>,
    pub short_list: bool,
    /// Evaluations per search pass (the schedule length).
    pub nfe: usize,
    /// Denoiser calls including a widened retry.
    pub forward_calls: usize,
    pub width_used: usize,
}

/// Next-item distribution over the catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemDistribution {
    pub probs: Vec<f64>,
    /// Mass on tuples that match no item.
    pub invalid: f64,
}

#[derive(Clone, Copy, PartialEq)]
struct Scored(f64);

impl Eq for Scored {}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// The `limit` best index combinations under a sum of per-position scores,
/// found by best-first traversal of the product lattice. Each `cands[p]`
/// must be sorted by descending score.
fn top_combinations(cands: &[Vec<(u32, f64)>], limit: usize) -> Vec<(Vec<usize>, f64)> {
    if cands.iter().any(Vec::is_empty) || limit == 0 {
        return Vec::new();
    }
    let score = |idx: &[usize]| idx.iter().zip(cands).map(|(&i, c)| c[i].1).sum::<f64>();
    let start = vec![0; cands.len()];
    let mut heap = BinaryHeap::new();
    let mut seen = HashSet::new();
    heap.push((Scored(score(&start)), std::cmp::Reverse(start.clone())));
    seen.insert(start);
    let mut out = Vec::with_capacity(limit);
    while let Some((s, std::cmp::Reverse(idx))) = heap.pop() {
        for p in 0..idx.len() {
            if idx[p] + 1 < cands[p].len() {
                let mut next = idx.clone();
                next[p] += 1;
                if seen.insert(next.clone()) {
                    heap.push((Scored(score(&next)), std::cmp::Reverse(next)));
                }
            }
        }
        out.push((idx, s.0));
        if out.len() == limit {
            break;
        }
    }
    out
}

/// Ordering key for partial states: unfilled slots sort first.
fn state_key(tokens: &[u32], mask: u32) -> Vec<Option<u32>> {
    tokens.iter().map(|&t| (t != mask).then_some(t)).collect()
}

/// Decoding against a fixed model and catalog.
pub struct Decoder<'a, T> {
    pub model: &'a Denoiser<T>,
    pub catalog: &'a SidCatalog,
    pub restrict: bool,
    /// Text fusion applied to fully visible items, for fused models.
    pub fusion: Option<(&'a DenseHead<T>, &'a EmbeddingTable<T>)>,
}

impl<'a, T: Scalar> Decoder<'a, T> {
    pub fn new(model: &'a Denoiser<T>, catalog: &'a SidCatalog, restrict: bool) -> Self {
        Self {
            model,
            catalog,
            restrict,
            fusion: None,
        }
    }

    pub fn with_fusion(mut self, head: &'a DenseHead<T>, text: &'a EmbeddingTable<T>) -> Self {
        self.fusion = Some((head, text));
        self
    }

    fn special(&self) -> SpecialTokens {
        SpecialTokens {
            mask: self.catalog.mask_token(),
            pad: self.catalog.pad_token(),
        }
    }

    fn ranges(&self) -> Option<Vec<Range<u32>>> {
        self.restrict
            .then(|| (0..self.catalog.m_tot()).map(|j| self.catalog.slot_range(j)).collect())
    }

    fn check_context(&self, context: &[u32], k_items: usize) -> Result<()> {
        let m_tot = self.catalog.m_tot();
        if !context.len().is_multiple_of(m_tot) {
            return Err(Error::invalid("context length is not a whole number of tuples"));
        }
        if context.len() + k_items * m_tot > self.model.config.max_positions {
            return Err(Error::invalid("context plus target exceeds the position limit"));
        }
        if k_items == 0 {
            return Err(Error::invalid("need at least one target item"));
        }
        Ok(())
    }

    fn sequence(&self, context: &[u32], target: &[u32]) -> MaskedSequence {
        let mut tokens = context.to_vec();
        tokens.extend_from_slice(target);
        MaskedSequence::clean(tokens, self.special(), 1.0)
    }

    /// Per-beam distributions at the unfilled target slots, keyed by target
    /// index.
    fn distributions(&self, context: &[u32], targets: &[&[u32]]) -> Result<Vec<Vec<PositionDist>>> {
        let seqs: Vec<MaskedSequence> = targets.iter().map(|t| self.sequence(context, t)).collect();
        let ranges = self.ranges();
        let extra = self.fusion.and_then(|(head, text)| {
            let plan = plan_batch(&seqs, None, self.catalog, true);
            head.fusion_matrix(&plan.fused, plan.rows, text)
        });
        let mut all = self
            .model
            .predict_distributions_batch_with(&seqs, ranges.as_deref(), extra.as_ref())?;
        for dists in &mut all {
            for d in dists.iter_mut() {
                d.position -= context.len();
            }
        }
        Ok(all)
    }

    /// Draws one next-item tuple from the reverse process.
    pub fn sample_next_item(&self, context: &[u32], schedule: &UnmaskSchedule, rng: &mut rng::Rng) -> Result<Sample> {
        self.check_context(context, 1)?;
        let m_tot = self.catalog.m_tot();
        if schedule.total() != m_tot {
            return Err(Error::Config(format!("schedule fills {} of {m_tot} slots", schedule.total())));
        }
        let mask = self.catalog.mask_token();
        let mut beam = Beam {
            tokens: vec![mask; m_tot],
            unmask_order: Vec::new(),
            fill_logprobs: Vec::new(),
            logprob: 0.0,
            nfe_used: 0,
        };
        for &count in &schedule.counts {
            let dists = self.distributions(context, &[&beam.tokens])?.remove(0);
            beam.nfe_used += 1;
            let picked = select_positions(&dists, count, schedule.strategy, Some(rng));
            for p in picked {
                let d = dists.iter().find(|d| d.position == p).unwrap();
                let tok = WeightedIndex::new(&d.probs)
                    .map_err(|e| Error::invalid(format!("degenerate distribution: {e}")))?
                    .sample(rng);
                let lp = d.probs[tok].ln();
                beam.tokens[p] = tok as u32;
                beam.unmask_order.push(p);
                beam.fill_logprobs.push(lp);
                beam.logprob += lp;
            }
        }
        Ok(Sample {
            item: self.catalog.lookup(&beam.tokens),
            tokens: beam.tokens.clone(),
            beam,
        })
    }

    pub fn beam_search_next_item(&self, context: &[u32], cfg: &BeamConfig) -> Result<SearchResult> {
        self.beam_search(context, 1, cfg)
    }

    /// Beam search over the slots of the next `k_items` items.
    pub fn beam_search(&self, context: &[u32], k_items: usize, cfg: &BeamConfig) -> Result<SearchResult> {
        if cfg.width < cfg.top_k {
            return Err(Error::Config(format!("beam width {} is below top-K {}", cfg.width, cfg.top_k)));
        }
        self.check_context(context, k_items)?;
        let schedule = cfg.schedule(k_items * self.catalog.m_tot())?;
        let mut result = self.search_pass(context, k_items, cfg.width, cfg, &schedule)?;
        if result.short_list && cfg.widen_on_short {
            let calls = result.forward_calls;
            result = self.search_pass(context, k_items, cfg.width * 2, cfg, &schedule)?;
            result.forward_calls += calls;
        }
        Ok(result)
    }

    fn search_pass(
        &self,
        context: &[u32],
        k_items: usize,
        width: usize,
        cfg: &BeamConfig,
        schedule: &UnmaskSchedule,
    ) -> Result<SearchResult> {
        let m_tot = self.catalog.m_tot();
        let len = k_items * m_tot;
        let mask = self.catalog.mask_token();
        let mut rng = rng::stream(cfg.seed, &[0x4245_414D]);
        let mut beams = vec![Beam {
            tokens: vec![mask; len],
            unmask_order: Vec::new(),
            fill_logprobs: Vec::new(),
            logprob: 0.0,
            nfe_used: 0,
        }];
        let mut calls = 0;
        for &count in &schedule.counts {
            let targets: Vec<&[u32]> = beams.iter().map(|b| b.tokens.as_slice()).collect();
            let all = self.distributions(context, &targets)?;
            calls += 1;
            // Every beam shares its masked set, so one random draw serves all.
            let shared = (schedule.strategy == Strategy::Random)
                .then(|| select_positions(&all[0], count, Strategy::Random, Some(&mut rng)));
            let mut pool: Vec<(Beam, Vec<Option<u32>>)> = Vec::new();
            for (beam, dists) in beams.iter().zip(&all) {
                let picked = match &shared {
                    Some(p) => p.clone(),
                    None => select_positions(dists, count, schedule.strategy, None),
                };
                let cands: Vec<Vec<(u32, f64)>> = picked
                    .iter()
                    .map(|&p| {
                        let d = dists.iter().find(|d| d.position == p).unwrap();
                        let mut c: Vec<(u32, f64)> = d
                            .probs
                            .iter()
                            .enumerate()
                            .filter(|(_, &q)| q > 0.0)
                            .map(|(t, &q)| (t as u32, q.ln()))
                            .collect();
                        c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                        c.truncate(width);
                        c
                    })
                    .collect();
                for (idx, _) in top_combinations(&cands, width) {
                    let mut next = beam.clone();
                    next.nfe_used += 1;
                    for (slot, (&p, &i)) in picked.iter().zip(&idx).enumerate() {
                        let (tok, lp) = cands[slot][i];
                        next.tokens[p] = tok;
                        next.unmask_order.push(p);
                        next.fill_logprobs.push(lp);
                        next.logprob += lp;
                    }
                    let key = state_key(&next.tokens, mask);
                    pool.push((next, key));
                }
            }
            pool.sort_by(|a, b| b.0.logprob.total_cmp(&a.0.logprob).then_with(|| a.1.cmp(&b.1)));
            let mut seen = HashSet::new();
            beams = pool
                .into_iter()
                .filter(|(_, key)| seen.insert(key.clone()))
                .take(width)
                .map(|(b, _)| b)
                .collect();
            if beams.is_empty() {
                break;
            }
        }
        let mut ranked: Vec<RankedItems> = Vec::new();
        for beam in beams {
            let items: Option<Vec<u32>> = beam.tokens.chunks(m_tot).map(|t| self.catalog.lookup(t)).collect();
            if let Some(items) = items {
                ranked.push(RankedItems {
                    items,
                    score: beam.logprob,
                    beam,
                });
            }
        }
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.beam.tokens.cmp(&b.beam.tokens)));
        let mut seen = HashSet::new();
        ranked.retain(|r| seen.insert(r.items.clone()));
        let short_list = ranked.len() < cfg.top_k;
        ranked.truncate(cfg.top_k);
        Ok(SearchResult {
            ranked,
            short_list,
            nfe: schedule.steps(),
            forward_calls: calls,
            width_used: width,
        })
    }

    /// Every complete next-item tuple with its probability under
    /// left-to-right single fills.
    pub fn enumerate_tuples(&self, context: &[u32]) -> Result<Vec<(Vec<u32>, f64)>> {
        self.check_context(context, 1)?;
        let m_tot = self.catalog.m_tot();
        let mask = self.catalog.mask_token();
        let mut frontier: Vec<(Vec<u32>, f64)> = vec![(vec![mask; m_tot], 1.0)];
        for slot in 0..m_tot {
            let targets: Vec<&[u32]> = frontier.iter().map(|(t, _)| t.as_slice()).collect();
            let all = self.distributions(context, &targets)?;
            let mut next = Vec::new();
            for ((tokens, p), dists) in frontier.iter().zip(&all) {
                let d = dists.iter().find(|d| d.position == slot).unwrap();
                for (tok, &q) in d.probs.iter().enumerate() {
                    if q > 0.0 {
                        let mut t = tokens.clone();
                        t[slot] = tok as u32;
                        next.push((t, p * q));
                    }
                }
            }
            frontier = next;
        }
        Ok(frontier)
    }

    pub fn item_distribution(&self, context: &[u32]) -> Result<ItemDistribution> {
        let mut probs = vec![0.0; self.catalog.item_count()];
        let mut invalid = 0.0;
        for (tuple, p) in self.enumerate_tuples(context)? {
            match self.catalog.lookup(&tuple) {
                Some(i) => probs[i as usize] += p,
                None => invalid += p,
            }
        }
        Ok(ItemDistribution { probs, invalid })
    }
}

/// Mean over users and target positions of whether the target at each
/// position appears at that position among the top `k` predicted sequences.
pub fn average_session_recall(predictions: &[Vec<Vec<u32>>], targets: &[Vec<u32>], k: usize) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::invalid("predictions must be non-empty and match the targets"));
    }
    let mut total = 0.0;
    for (preds, tgt) in predictions.iter().zip(targets) {
        let mut hits = 0usize;
        for (q, t) in tgt.iter().enumerate() {
            let found = preds.iter().take(k).any(|seq| seq.get(q) == Some(t));
            hits += usize::from(found);
        }
        total += hits as f64 / tgt.len() as f64;
    }
    Ok(total / predictions.len() as f64)
}

/// Total-variation distance between an item distribution and a reference,
/// counting mass on invalid tuples as disagreement.
pub fn total_variation(model: &ItemDistribution, reference: &[f64]) -> f64 {
    let diff: f64 = model.probs.iter().zip(reference).map(|(a, b)| (a - b).abs()).sum();
    0.5 * (diff + model.invalid)
}

/// Counts of each distinct value, for empirical distributions.
pub fn histogram<K: std::hash::Hash + Eq>(xs: impl IntoIterator<Item = K>) -> HashMap<K, usize> {
    let mut h = HashMap::new();
    for x in xs {
        *h.entry(x).or_insert(0) += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(position: usize, probs: &[f64]) -> PositionDist {
        PositionDist {
            position,
            probs: probs.to_vec(),
        }
    }

    #[test]
    fn greedy_picks_largest_margin() {
        let d = vec![dist(0, &[0.95, 0.05]), dist(1, &[0.55, 0.45]), dist(2, &[0.75, 0.25])];
        assert_eq!(select_positions(&d, 1, Strategy::Greedy, None), vec![0]);
        assert_eq!(select_positions(&d, 2, Strategy::Greedy, None), vec![0, 2]);
        let tie = vec![dist(4, &[0.5, 0.5]), dist(1, &[0.5, 0.5])];
        assert_eq!(select_positions(&tie, 1, Strategy::Greedy, None), vec![1]);
    }

    #[test]
    fn left_to_right_and_random() {
        let d = vec![dist(3, &[1.0]), dist(5, &[1.0]), dist(7, &[1.0])];
        assert_eq!(select_positions(&d, 2, Strategy::LeftToRight, None), vec![3, 5]);
        let a = select_positions(&d, 2, Strategy::Random, Some(&mut rng::seeded(9)));
        let b = select_positions(&d, 2, Strategy::Random, Some(&mut rng::seeded(9)));
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn near_uniform_counts() {
        assert_eq!(UnmaskSchedule::near_uniform(5, 2, Strategy::Greedy).unwrap().counts, vec![3, 2]);
        assert_eq!(UnmaskSchedule::near_uniform(8, 3, Strategy::Greedy).unwrap().counts, vec![3, 3, 2]);
        assert_eq!(UnmaskSchedule::near_uniform(4, 4, Strategy::Greedy).unwrap().counts, vec![1; 4]);
        assert!(UnmaskSchedule::near_uniform(3, 4, Strategy::Greedy).is_err());
        assert!(UnmaskSchedule::new(vec![2, 0], Strategy::Greedy).is_err());
    }

    #[test]
    fn lazy_product_matches_full_sort() {
        let a: Vec<(u32, f64)> = vec![(0, -0.1), (1, -1.0), (2, -2.5)];
        let b = vec![(5, -0.3), (6, -0.4), (7, -3.0)];
        let c = vec![(9, -0.2), (8, -0.9)];
        let cands = vec![a, b, c];
        let mut all: Vec<f64> = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..2 {
                    all.push(cands[0][i].1 + cands[1][j].1 + cands[2][k].1);
                }
            }
        }
        all.sort_by(|x, y| y.total_cmp(x));
        let got = top_combinations(&cands, 7);
        for (g, w) in got.iter().zip(&all) {
            assert!((g.1 - w).abs() < 1e-12);
        }
        assert_eq!(got.len(), 7);
    }

    #[test]
    fn session_recall_cases() {
        let preds = vec![vec![vec![1, 2], vec![3, 4]]];
        assert_eq!(average_session_recall(&preds, &[vec![3, 2]], 10).unwrap(), 1.0);
        assert_eq!(average_session_recall(&preds, &[vec![2, 1]], 10).unwrap(), 0.0);
        // User 1 hits position 0 only; user 2 hits both; (0.5 + 1) / 2.
        let preds = vec![vec![vec![1, 2]], vec![vec![5, 6], vec![7, 8]]];
        let got = average_session_recall(&preds, &[vec![1, 9], vec![7, 6]], 2).unwrap();
        assert!((got - 0.75).abs() < 1e-12);
        // With K = 1 user 2 loses the hit at position 0.
        let got = average_session_recall(&preds, &[vec![1, 9], vec![7, 6]], 1).unwrap();
        assert!((got - 0.5).abs() < 1e-12);
        assert!(average_session_recall(&[], &[], 1).is_err());
    }

    #[test]
    fn strategy_names_parse() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!("left-to-right".parse::<Strategy>().unwrap(), Strategy::LeftToRight);
    }
}
