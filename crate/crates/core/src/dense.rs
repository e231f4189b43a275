//! Dense-retrieval extension: text-fused inputs, item-level joint masking,
//! an embedding-prediction head on an intermediate layer, its catalog
//! softmax loss, and re-ranking of generated candidates.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_xent, Tape, Var};
use crate::data::EmbeddingTable;
use crate::denoiser::{Denoiser, ParamStore, Recorded};
use crate::diffusion::{forward_mask, MaskedSequence, SpecialTokens};
use crate::inference::RankedItems;
use crate::optim::{AdamW, AdamWConfig};
use crate::tokenizer::SidCatalog;
use crate::{rng, Error, Matrix, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DenseScoring {
    #[default]
    Dot,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenseConfig {
    pub enabled: bool,
    /// Probability that a sequence is masked item-by-item.
    pub beta: f64,
    /// Blocks before the tapped hidden state; `None` taps half-way.
    pub tap_layer: Option<usize>,
    pub rank: usize,
    pub hidden: usize,
    /// Weight of the dense loss in the joint objective.
    pub lambda: f64,
    /// Adds projected text embeddings to fully visible items' inputs.
    pub fuse_text: bool,
    pub scoring: DenseScoring,
    /// Weight of the generative log-probability in the re-rank score.
    pub blend: f64,
    pub rerank_width: usize,
    pub rerank_k: usize,
}

impl Default for DenseConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            beta: 0.2,
            tap_layer: None,
            rank: 32,
            hidden: 256,
            lambda: 1.0,
            fuse_text: true,
            scoring: DenseScoring::Dot,
            blend: 0.0,
            rerank_width: 20,
            rerank_k: 10,
        }
    }
}

impl DenseConfig {
    pub fn tap_for(&self, layers: usize) -> usize {
        self.tap_layer.unwrap_or(layers / 2)
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config("dense.beta must lie in [0, 1]".into()));
        }
        if self.tap_for(layers) >= layers {
            return Err(Error::Config(format!(
                "dense.tap_layer {} must be below the layer count {layers}",
                self.tap_for(layers)
            )));
        }
        if self.rank == 0 || self.hidden == 0 {
            return Err(Error::Config("dense head sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Per-slot text projections and the low-rank map from concatenated tap
/// states to text space.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseHead<T> {
    pub m_tot: usize,
    pub embed_dim: usize,
    pub text_dim: usize,
    pub rank: usize,
    pub hidden: usize,
    pub scoring: DenseScoring,
    pub params: ParamStore<T>,
}

const G1: [&str; 3] = ["g1.u", "g1.v", "g1.b"];
const G2: [&str; 3] = ["g2.u", "g2.v", "g2.b"];

fn slot_name(j: usize) -> String {
    format!("a.{j}")
}

impl<T: Scalar> DenseHead<T> {
    /// Text projections start at zero, so fusion is initially a no-op.
    pub fn new(cfg: &DenseConfig, m_tot: usize, embed_dim: usize, text_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, &[0x4445_4E53]);
        let mut randn = |r: usize, c: usize, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            Matrix::from_vec(r, c, (0..r * c).map(|_| T::of(normal.sample(&mut rng))).collect())
        };
        let input = m_tot * embed_dim;
        let (r, h) = (cfg.rank, cfg.hidden);
        let mut p = ParamStore::default();
        for j in 0..m_tot {
            p.push(slot_name(j), Matrix::zeros(text_dim, embed_dim));
        }
        p.push(G1[0], randn(input, r, (input as f64).powf(-0.5)));
        p.push(G1[1], randn(r, h, (r as f64).powf(-0.5)));
        p.push(G1[2], Matrix::zeros(1, h));
        p.push(G2[0], randn(h, r, (h as f64).powf(-0.5)));
        p.push(G2[1], randn(r, text_dim, (r as f64).powf(-0.5)));
        p.push(G2[2], Matrix::zeros(1, text_dim));
        let head = Self::from_params(m_tot, embed_dim, text_dim, cfg.scoring, p)?;
        log::info!(
            "dense head: {} map parameters (full rank would need {})",
            head.map_param_count(),
            head.full_rank_count()
        );
        Ok(head)
    }

    pub fn from_params(m_tot: usize, embed_dim: usize, text_dim: usize, scoring: DenseScoring, params: ParamStore<T>) -> Result<Self> {
        let shape = |n: &str| {
            params
                .get(n)
                .map(Matrix::shape)
                .ok_or_else(|| Error::Format(format!("missing dense parameter {n}")))
        };
        let (_, rank) = shape(G1[0])?;
        let (_, hidden) = shape(G1[1])?;
        let mut want = vec![
            (G1[0].to_string(), (m_tot * embed_dim, rank)),
            (G1[1].to_string(), (rank, hidden)),
            (G1[2].to_string(), (1, hidden)),
            (G2[0].to_string(), (hidden, rank)),
            (G2[1].to_string(), (rank, text_dim)),
            (G2[2].to_string(), (1, text_dim)),
        ];
        want.extend((0..m_tot).map(|j| (slot_name(j), (text_dim, embed_dim))));
        for (n, s) in want {
            if shape(&n)? != s {
                return Err(Error::Format(format!("dense parameter {n} should have shape {s:?}")));
            }
        }
        Ok(Self {
            m_tot,
            embed_dim,
            text_dim,
            rank,
            hidden,
            scoring,
            params,
        })
    }

    /// Parameters of the hidden-to-text map (factors plus biases).
    pub fn map_param_count(&self) -> usize {
        let input = self.m_tot * self.embed_dim;
        self.rank * (input + self.hidden) + self.rank * (self.hidden + self.text_dim) + self.hidden + self.text_dim
    }

    /// The same map with unfactored weight matrices.
    pub fn full_rank_count(&self) -> usize {
        let input = self.m_tot * self.embed_dim;
        input * self.hidden + self.hidden * self.text_dim + self.hidden + self.text_dim
    }

    fn idx(&self, name: &str) -> usize {
        self.params.index_of(name).expect("validated at construction")
    }

    /// Input rows `sid_embeddings[j] + A_j · text` for each slot `j`.
    pub fn fuse_inputs(&self, sid_embeddings: &Matrix<T>, text: &[T]) -> Matrix<T> {
        assert_eq!(sid_embeddings.shape(), (self.m_tot, self.embed_dim));
        let mut out = sid_embeddings.clone();
        for j in 0..self.m_tot {
            let a = &self.params.tensors()[self.idx(&slot_name(j))];
            let proj = Matrix::matmul(&Matrix::from_vec(1, self.text_dim, text.to_vec()), false, a, false);
            for (o, &p) in out.row_mut(j).iter_mut().zip(proj.data()) {
                *o += p;
            }
        }
        out
    }

    /// Records the fusion term for packed `rows` on a tape.
    pub fn record_fusion(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        plan: &[FusedRow],
        rows: usize,
        text: &EmbeddingTable<T>,
    ) -> Option<Var> {
        let mut total: Option<Var> = None;
        for j in 0..self.m_tot {
            let mut t = Matrix::zeros(rows, self.text_dim);
            let mut any = false;
            for f in plan.iter().filter(|f| f.slot == j) {
                t.row_mut(f.row).copy_from_slice(text.row(f.item as usize));
                any = true;
            }
            if !any {
                continue;
            }
            let tc = tape.constant(t);
            let term = tape.matmul(tc, vars[self.idx(&slot_name(j))]);
            total = Some(match total {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
        total
    }

    /// Fusion term as a plain matrix.
    pub fn fusion_matrix(&self, plan: &[FusedRow], rows: usize, text: &EmbeddingTable<T>) -> Option<Matrix<T>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        self.record_fusion(&mut tape, &vars, plan, rows, text).map(|v| tape.value(v).clone())
    }

    /// `g(H̃)` for each group of packed tap rows.
    pub fn record_query(&self, tape: &mut Tape<T>, vars: &[Var], tap: Var, groups: Vec<Vec<usize>>) -> Var {
        let h = tape.gather_concat(tap, groups);
        let i = |n: &str| vars[self.idx(n)];
        let z = tape.matmul(h, i(G1[0]));
        let z = tape.matmul(z, i(G1[1]));
        let z = tape.add_row(z, i(G1[2]));
        let z = tape.gelu(z);
        let z = tape.matmul(z, i(G2[0]));
        let z = tape.matmul(z, i(G2[1]));
        let z = tape.add_row(z, i(G2[2]));
        match self.scoring {
            DenseScoring::Dot => z,
            DenseScoring::Cosine => tape.normalize_rows(z),
        }
    }

    /// Catalog text table as scored against queries.
    pub fn score_table(&self, text: &EmbeddingTable<T>) -> Matrix<T> {
        match self.scoring {
            DenseScoring::Dot => text.vectors.clone(),
            DenseScoring::Cosine => {
                let mut t = Tape::new();
                let v = t.constant(text.vectors.clone());
                let n = t.normalize_rows(v);
                t.value(n).clone()
            }
        }
    }

    /// Mean catalog softmax cross-entropy of the queries.
    pub fn record_loss(&self, tape: &mut Tape<T>, query: Var, text: &EmbeddingTable<T>, targets: &[u32]) -> Var {
        let table = tape.constant(self.score_table(text));
        let scores = tape.matmul_t(query, table);
        let w = T::of(1.0 / targets.len() as f64);
        let t: Vec<Option<usize>> = targets.iter().map(|&x| Some(x as usize)).collect();
        tape.softmax_xent(scores, &t, &vec![w; targets.len()])
    }
}

/// A packed input row that receives text fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusedRow {
    pub row: usize,
    pub slot: usize,
    pub item: u32,
}

/// Fusion rows and fully masked target items of a packed batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensePlan {
    pub fused: Vec<FusedRow>,
    /// Packed rows of each fully masked item, with its true item.
    pub targets: Vec<(Vec<usize>, u32)>,
    pub rows: usize,
}

/// Splits each sequence into item tuples from its first non-pad position.
/// Fully visible tuples that name an item get fused; fully masked tuples
/// become dense targets when `seq_0` supplies their identity.
pub fn plan_batch(seqs: &[MaskedSequence], seq_0: Option<&[Vec<u32>]>, catalog: &SidCatalog, fuse: bool) -> DensePlan {
    let m_tot = catalog.m_tot();
    let mut plan = DensePlan::default();
    let mut offset = 0;
    for (b, s) in seqs.iter().enumerate() {
        let start = s.content_start();
        let mut g = start;
        while g + m_tot <= s.len() {
            let slots = g..g + m_tot;
            if fuse && !s.mask_flags[slots.clone()].iter().any(|&m| m) {
                if let Some(item) = catalog.lookup(&s.tokens[slots.clone()]) {
                    for (j, i) in slots.clone().enumerate() {
                        plan.fused.push(FusedRow {
                            row: offset + i,
                            slot: j,
                            item,
                        });
                    }
                }
            }
            if let Some(s0) = seq_0 {
                if s.mask_flags[slots.clone()].iter().all(|&m| m) {
                    if let Some(item) = catalog.lookup(&s0[b][slots.clone()]) {
                        plan.targets.push((slots.map(|i| offset + i).collect(), item));
                    }
                }
            }
            g += m_tot;
        }
        offset += s.len();
    }
    plan.rows = offset;
    plan
}

/// Masks whole items with probability `t` on a `beta` fraction of
/// sequences; otherwise defers to token-level masking. No branch draw is
/// consumed when `beta` is 0 or 1.
pub fn item_joint_mask(
    seq: &[u32],
    t: f64,
    beta: f64,
    m_tot: usize,
    special: SpecialTokens,
    rng: &mut rng::Rng,
) -> MaskedSequence {
    let joint = if beta <= 0.0 {
        false
    } else if beta >= 1.0 {
        true
    } else {
        rng.random::<f64>() < beta
    };
    if !joint {
        return forward_mask(seq, t, special, rng);
    }
    let mut ms = MaskedSequence::clean(seq.to_vec(), special, t);
    let start = ms.content_start();
    debug_assert_eq!((seq.len() - start) % m_tot, 0, "sequence is not whole tuples");
    let mut g = start;
    while g + m_tot <= seq.len() {
        if rng.random::<f64>() < t {
            for i in g..g + m_tot {
                ms.mask_at(i, special);
            }
        }
        g += m_tot;
    }
    ms
}

/// Mean softmax cross-entropy of score rows against the true columns.
pub fn catalog_softmax_loss<T: Scalar>(scores: &Matrix<T>, targets: &[usize]) -> T {
    if targets.is_empty() {
        return T::zero();
    }
    let w = vec![T::of(1.0 / targets.len() as f64); targets.len()];
    let t: Vec<Option<usize>> = targets.iter().map(|&x| Some(x)).collect();
    softmax_xent(scores, &t, &w).0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointStats {
    pub elbo: f64,
    pub dense: f64,
    pub total: f64,
    pub masked: usize,
    /// Fully masked items scored by the dense loss.
    pub dense_items: usize,
}

/// A denoiser plus optional dense head and its text table.
pub struct JointModel<'a, T> {
    pub model: &'a Denoiser<T>,
    pub head: &'a DenseHead<T>,
    pub text: &'a EmbeddingTable<T>,
    pub catalog: &'a SidCatalog,
    pub fuse: bool,
}

impl<T: Scalar> JointModel<'_, T> {
    /// Records the joint loss on `tape`; returns the loss node, its parts,
    /// and the parameter handles (denoiser first, then head).
    #[allow(clippy::type_complexity)]
    pub fn record(
        &self,
        tape: &mut Tape<T>,
        batch: &[MaskedSequence],
        seq_0: &[Vec<u32>],
        lambda: f64,
        dropout_rng: Option<&mut rng::Rng>,
    ) -> Result<(Var, Var, Option<Var>, usize, usize, Vec<Var>, Vec<Var>)> {
        if seq_0.len() != batch.len() {
            return Err(Error::invalid("targets and batch differ in length"));
        }
        let mvars = self.model.params.bind(tape, true);
        let hvars = self.head.params.bind(tape, true);
        let plan = plan_batch(batch, Some(seq_0), self.catalog, self.fuse);
        let extra = self.head.record_fusion(tape, &hvars, &plan.fused, plan.rows, self.text);
        let rec: Recorded = self.model.record(tape, &mvars, batch, extra, dropout_rng)?;
        let (elbo, masked) = self.model.record_loss(tape, &rec, batch, seq_0)?;
        let tap = rec
            .tap
            .ok_or_else(|| Error::Config("joint training needs a dense tap layer".into()))?;
        let mut dense = None;
        let mut total = elbo;
        if !plan.targets.is_empty() {
            let groups = plan.targets.iter().map(|(g, _)| g.clone()).collect();
            let items: Vec<u32> = plan.targets.iter().map(|(_, i)| *i).collect();
            let q = self.head.record_query(tape, &hvars, tap, groups);
            let d = self.head.record_loss(tape, q, self.text, &items);
            total = tape.add_scaled(elbo, d, T::of(lambda));
            dense = Some(d);
        }
        Ok((total, elbo, dense, masked, plan.targets.len(), mvars, hvars))
    }

    /// Loss parts and gradients for the denoiser and the head.
    #[allow(clippy::type_complexity)]
    pub fn loss_and_grads(
        &self,
        batch: &[MaskedSequence],
        seq_0: &[Vec<u32>],
        lambda: f64,
        dropout_rng: Option<&mut rng::Rng>,
    ) -> Result<(JointStats, Vec<Matrix<T>>, Vec<Matrix<T>>)> {
        let mut tape = Tape::new();
        let (total, elbo, dense, masked, dense_items, mvars, hvars) = self.record(&mut tape, batch, seq_0, lambda, dropout_rng)?;
        let stats = JointStats {
            elbo: tape.scalar(elbo).as_f64(),
            dense: dense.map_or(0.0, |d| tape.scalar(d).as_f64()),
            total: tape.scalar(total).as_f64(),
            masked,
            dense_items,
        };
        if !stats.total.is_finite() {
            let index = batch.iter().position(|b| !b.t.is_finite()).unwrap_or(0);
            return Err(Error::NonFiniteLoss { index });
        }
        let mut g = tape.backward(total);
        let take = |g: &mut crate::autodiff::Gradients<T>, vars: &[Var], params: &ParamStore<T>| -> Vec<Matrix<T>> {
            vars.iter()
                .zip(params.tensors())
                .map(|(&v, p)| g.take(v).unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
                .collect()
        };
        let gm = take(&mut g, &mvars, &self.model.params);
        let gh = take(&mut g, &hvars, &self.head.params);
        Ok((stats, gm, gh))
    }

    /// `g(H̃)` for the fully masked next item after `context`.
    pub fn query(&self, context: &[u32]) -> Result<Vec<T>> {
        let m_tot = self.catalog.m_tot();
        let special = SpecialTokens {
            mask: self.catalog.mask_token(),
            pad: self.catalog.pad_token(),
        };
        let mut tokens = context.to_vec();
        tokens.extend(std::iter::repeat_n(special.mask, m_tot));
        let ms = MaskedSequence::clean(tokens, special, 1.0);
        let plan = plan_batch(std::slice::from_ref(&ms), None, self.catalog, self.fuse);
        let mut tape = Tape::new();
        let mvars = self.model.params.bind(&mut tape, false);
        let hvars = self.head.params.bind(&mut tape, false);
        let extra = self.head.record_fusion(&mut tape, &hvars, &plan.fused, plan.rows, self.text);
        let rec = self.model.record(&mut tape, &mvars, std::slice::from_ref(&ms), extra, None)?;
        let tap = rec.tap.ok_or_else(|| Error::Config("model has no dense tap layer".into()))?;
        let group: Vec<usize> = (context.len()..context.len() + m_tot).collect();
        let q = self.head.record_query(&mut tape, &hvars, tap, vec![group]);
        Ok(tape.value(q).row(0).to_vec())
    }

    /// Dense score of every catalog item for the next position.
    pub fn scores(&self, context: &[u32]) -> Result<Vec<f64>> {
        let q = self.query(context)?;
        let table = self.head.score_table(self.text);
        Ok((0..table.rows())
            .map(|i| crate::matrix::dot(&q, table.row(i)).as_f64())
            .collect())
    }
}

/// One optimizer step on `elbo + lambda · dense`.
#[allow(clippy::too_many_arguments)]
pub fn train_joint<T: Scalar>(
    model: &mut Denoiser<T>,
    head: &mut DenseHead<T>,
    text: &EmbeddingTable<T>,
    catalog: &SidCatalog,
    cfg: &DenseConfig,
    batch: &[MaskedSequence],
    seq_0: &[Vec<u32>],
    opt_model: &mut AdamW<T>,
    opt_head: &mut AdamW<T>,
    hyper: &AdamWConfig,
    dropout_rng: Option<&mut rng::Rng>,
) -> Result<JointStats> {
    let (stats, gm, gh) = JointModel {
        model,
        head,
        text,
        catalog,
        fuse: cfg.fuse_text,
    }
    .loss_and_grads(batch, seq_0, cfg.lambda, dropout_rng)?;
    opt_model.update(model.params.tensors_mut(), &gm, hyper);
    opt_head.update(head.params.tensors_mut(), &gh, hyper);
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reranked {
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
    pub short_list: bool,
}

/// Stable re-rank of beam candidates by `dense + blend · logprob`.
pub fn unified_rerank(candidates: &[RankedItems], dense_scores: &[f64], blend: f64, k: usize) -> Reranked {
    let mut order: Vec<(usize, f64)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (i, dense_scores[c.items[0] as usize] + blend * c.score))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    order.truncate(k);
    Reranked {
        items: order.iter().map(|&(i, _)| candidates[i].items[0]).collect(),
        scores: order.iter().map(|&(_, s)| s).collect(),
        short_list: candidates.len() < k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::Beam;

    const SP: SpecialTokens = SpecialTokens { mask: 9, pad: 10 };

    fn head(text_dim: usize) -> DenseHead<f64> {
        let cfg = DenseConfig {
            rank: 2,
            hidden: 5,
            ..Default::default()
        };
        DenseHead::new(&cfg, 3, 4, text_dim, 1).unwrap()
    }

    #[test]
    fn fusion_is_sum_of_terms() {
        let mut h = head(2);
        let sid = Matrix::from_vec(3, 4, (0..12).map(|x| x as f64).collect());
        assert_eq!(h.fuse_inputs(&sid, &[0.3, -0.2]), sid);
        for j in 0..3 {
            let a = h.params.get_mut(&slot_name(j)).unwrap();
            for (k, x) in a.data_mut().iter_mut().enumerate() {
                *x = (j * 8 + k) as f64 * 0.1;
            }
        }
        assert_eq!(h.fuse_inputs(&sid, &[0.0, 0.0]), sid);
        let fused = h.fuse_inputs(&sid, &[1.0, 2.0]);
        for j in 0..3 {
            for c in 0..4 {
                let a = h.params.get(&slot_name(j)).unwrap();
                let want = sid.get(j, c) + a.get(0, c) + 2.0 * a.get(1, c);
                assert!((fused.get(j, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn joint_mask_is_all_or_none() {
        let seq: Vec<u32> = (0..30_000).map(|i| i % 3).collect();
        let mut r = rng::seeded(2);
        let ms = item_joint_mask(&seq, 0.5, 1.0, 3, SP, &mut r);
        let mut masked_items = 0;
        for g in ms.mask_flags.chunks(3) {
            assert!(g.iter().all(|&m| m) || g.iter().all(|&m| !m));
            masked_items += usize::from(g[0]);
        }
        let rate = masked_items as f64 / 1e4;
        assert!((rate - 0.5).abs() < 3.0 * (0.25f64 / 1e4).sqrt());
        let full = item_joint_mask(&seq[..9], 1.0, 1.0, 3, SP, &mut r);
        assert!(full.mask_flags.iter().all(|&m| m));
        let a = item_joint_mask(&seq[..300], 0.4, 0.0, 3, SP, &mut rng::seeded(7));
        let b = forward_mask(&seq[..300], 0.4, SP, &mut rng::seeded(7));
        assert_eq!(a, b);
    }

    #[test]
    fn hand_scores_loss() {
        let scores = Matrix::from_vec(1, 4, vec![2.0f64, 1.0, 0.0, -1.0]);
        let lse = (2.0f64.exp() + 1.0f64.exp() + 1.0 + (-1.0f64).exp()).ln();
        assert!((catalog_softmax_loss(&scores, &[0]) - (lse - 2.0)).abs() < 1e-12);
        assert_eq!(catalog_softmax_loss(&Matrix::from_vec(1, 1, vec![3.0f64]), &[0]), 0.0);
        let padded = Matrix::from_vec(1, 6, vec![2.0f64, 1.0, 0.0, -1.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert_eq!(catalog_softmax_loss(&padded, &[0]), catalog_softmax_loss(&scores, &[0]));
    }

    #[test]
    fn low_rank_head_is_smaller() {
        let cfg = DenseConfig::default();
        let h = DenseHead::<f32>::new(&cfg, 5, 128, 4096, 0).unwrap();
        assert!(h.map_param_count() < h.full_rank_count());
        assert!(h.full_rank_count() > 1_000_000);
        assert!(h.map_param_count() <= 32 * ((640 + 256) + (256 + 4096)) + 256 + 4096);
    }

    fn cand(item: u32, score: f64) -> RankedItems {
        RankedItems {
            items: vec![item],
            score,
            beam: Beam {
                tokens: vec![],
                unmask_order: vec![],
                fill_logprobs: vec![],
                logprob: score,
                nfe_used: 0,
            },
        }
    }

    #[test]
    fn rerank_rules() {
        let cands: Vec<_> = (0..5).map(|i| cand(i, -(i as f64))).collect();
        let equal = unified_rerank(&cands, &[1.0; 5], 0.0, 3);
        assert_eq!(equal.items, vec![0, 1, 2]);
        let rev = unified_rerank(&cands, &[0.0, 1.0, 2.0, 3.0, 4.0], 0.0, 5);
        assert_eq!(rev.items, vec![4, 3, 2, 1, 0]);
        let short = unified_rerank(&cands, &[0.0; 5], 0.0, 10);
        assert!(short.short_list);
        assert_eq!(short.items.len(), 5);
    }
}
