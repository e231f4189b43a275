//! Bidirectional transformer encoder mapping a partially masked token
//! sequence to per-position logits over the predictable vocabulary.

use std::ops::Range;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Segment, Tape, Var};
use crate::diffusion::{loss_targets, MaskedSequence};
use crate::optim::{AdamW, AdamWConfig};
use crate::{rng, Error, Matrix, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormPlacement {
    #[default]
    Pre,
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Input vocabulary, including mask and pad.
    pub vocab_size: usize,
    /// Width of the logit vector (semantic plus dedup tokens).
    pub output_vocab: usize,
    pub max_positions: usize,
    /// Tuple length; sizes the learned slot table.
    pub m_tot: usize,
    /// Adds a learned embedding for the slot index within each item tuple.
    pub slot_embeddings: bool,
    /// Blocks applied before the hidden state handed to the dense head.
    pub dense_tap_layer: Option<usize>,
    pub norm: NormPlacement,
    /// Residual dropout probability during training.
    pub dropout: f64,
    pub rope_base: f64,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DenoiserConfig {
    /// Small config for CPU runs.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            embed_dim: 64,
            heads: 4,
            mlp_hidden: 256,
            vocab_size: 0,
            output_vocab: 0,
            max_positions: 1024,
            m_tot: 1,
            slot_embeddings: true,
            dense_tap_layer: None,
            norm: NormPlacement::Pre,
            dropout: 0.0,
            rope_base: 10_000.0,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }

    /// 8 layers, width 128, 8 heads, feed-forward 3072.
    pub fn paper() -> Self {
        Self {
            layers: 8,
            embed_dim: 128,
            heads: 8,
            mlp_hidden: 3072,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.embed_dim == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return bad("model sizes must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.heads) || !(self.embed_dim / self.heads).is_multiple_of(2) {
            return bad(format!(
                "embed_dim {} must split into {} heads of even width",
                self.embed_dim, self.heads
            ));
        }
        if self.output_vocab == 0 || self.vocab_size < self.output_vocab {
            return bad("vocabulary sizes are inconsistent".into());
        }
        if let Some(eta) = self.dense_tap_layer {
            if eta >= self.layers {
                return bad(format!("dense tap layer {eta} must be below layer count {}", self.layers));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Matrix<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn push(&mut self, name: impl Into<String>, value: Matrix<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Matrix::cast).collect(),
        }
    }

    /// Records every tensor on `tape`, as parameters or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }
}

struct LayerIdx {
    ln1: (usize, usize),
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2: (usize, usize),
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Resolved tensor indices, so the forward pass never looks names up.
struct Layout {
    tok: usize,
    slot: Option<usize>,
    layers: Vec<LayerIdx>,
    final_ln: Option<(usize, usize)>,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug, Clone)]
pub struct DenoiserOutput<T> {
    pub logits: Matrix<T>,
    /// Hidden state after the tap layer, when one is configured.
    pub hidden: Option<Matrix<T>>,
}

/// Tape handles produced by one recorded forward pass over a packed batch.
pub struct Recorded {
    pub logits: Var,
    pub tap: Option<Var>,
    pub segments: Vec<Segment>,
}

/// Probabilities at one masked position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionDist {
    pub position: usize,
    /// Indexed by output token; zero outside the allowed range.
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub masked: usize,
}

#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    pub config: DenoiserConfig,
    pub params: ParamStore<T>,
    layout_ok: bool,
}

impl<T: Scalar> PartialEq for Denoiser<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

fn layer_name(l: usize, s: &str) -> String {
    format!("layers.{l}.{s}")
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[0x494E_4954]);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut randn = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| T::of(normal.sample(&mut rng))).collect();
            Matrix::from_vec(r, c, data)
        };
        let d = config.embed_dim;
        let h = config.mlp_hidden;
        let mut p = ParamStore::default();
        p.push("tok_emb", randn(config.vocab_size, d));
        if config.slot_embeddings {
            p.push("slot_emb", randn(config.m_tot.max(1), d));
        }
        for l in 0..config.layers {
            p.push(layer_name(l, "ln1.gain"), Matrix::filled(1, d, T::one()));
            p.push(layer_name(l, "ln1.bias"), Matrix::zeros(1, d));
            for w in ["q", "k", "v", "o"] {
                p.push(layer_name(l, &format!("attn.w{w}")), randn(d, d));
                p.push(layer_name(l, &format!("attn.b{w}")), Matrix::zeros(1, d));
            }
            p.push(layer_name(l, "ln2.gain"), Matrix::filled(1, d, T::one()));
            p.push(layer_name(l, "ln2.bias"), Matrix::zeros(1, d));
            p.push(layer_name(l, "mlp.w1"), randn(d, h));
            p.push(layer_name(l, "mlp.b1"), Matrix::zeros(1, h));
            p.push(layer_name(l, "mlp.w2"), randn(h, d));
            p.push(layer_name(l, "mlp.b2"), Matrix::zeros(1, d));
        }
        if config.norm == NormPlacement::Pre {
            p.push("final_ln.gain", Matrix::filled(1, d, T::one()));
            p.push("final_ln.bias", Matrix::zeros(1, d));
        }
        p.push("out.w", randn(d, config.output_vocab));
        p.push("out.b", Matrix::zeros(1, config.output_vocab));
        let model = Self::from_params(config, p)?;
        log::info!("denoiser: {} parameters", model.params.scalar_count());
        Ok(model)
    }

    /// Wraps existing tensors, checking names and shapes.
    pub fn from_params(config: DenoiserConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut model = Self {
            config,
            params,
            layout_ok: false,
        };
        model.layout()?;
        model.layout_ok = true;
        Ok(model)
    }

    fn layout(&self) -> Result<Layout> {
        let cfg = &self.config;
        let (d, h) = (cfg.embed_dim, cfg.mlp_hidden);
        let find = |name: &str, shape: (usize, usize)| -> Result<usize> {
            let i = self
                .params
                .index_of(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if self.params.tensors[i].shape() != shape {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    self.params.tensors[i].shape()
                )));
            }
            Ok(i)
        };
        let row = (1, d);
        let layers = (0..cfg.layers)
            .map(|l| {
                let f = |s: &str, shape| find(&layer_name(l, s), shape);
                Ok(LayerIdx {
                    ln1: (f("ln1.gain", row)?, f("ln1.bias", row)?),
                    wq: f("attn.wq", (d, d))?,
                    bq: f("attn.bq", row)?,
                    wk: f("attn.wk", (d, d))?,
                    bk: f("attn.bk", row)?,
                    wv: f("attn.wv", (d, d))?,
                    bv: f("attn.bv", row)?,
                    wo: f("attn.wo", (d, d))?,
                    bo: f("attn.bo", row)?,
                    ln2: (f("ln2.gain", row)?, f("ln2.bias", row)?),
                    w1: f("mlp.w1", (d, h))?,
                    b1: f("mlp.b1", (1, h))?,
                    w2: f("mlp.w2", (h, d))?,
                    b2: f("mlp.b2", row)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Layout {
            tok: find("tok_emb", (cfg.vocab_size, d))?,
            slot: if cfg.slot_embeddings {
                Some(find("slot_emb", (cfg.m_tot.max(1), d))?)
            } else {
                None
            },
            layers,
            final_ln: if cfg.norm == NormPlacement::Pre {
                Some((find("final_ln.gain", row)?, find("final_ln.bias", row)?))
            } else {
                None
            },
            out_w: find("out.w", (d, cfg.output_vocab))?,
            out_b: find("out.b", (1, cfg.output_vocab))?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Checks token ranges and lengths of a batch.
    pub fn check_input(&self, seqs: &[MaskedSequence]) -> Result<()> {
        for (b, s) in seqs.iter().enumerate() {
            if s.len() > self.config.max_positions {
                return Err(Error::invalid(format!(
                    "sequence {b} has {} positions, limit is {}",
                    s.len(),
                    self.config.max_positions
                )));
            }
            if s.is_empty() {
                return Err(Error::invalid(format!("sequence {b} is empty")));
            }
            if let Some(&t) = s.tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::invalid(format!("sequence {b}: token {t} outside the vocabulary")));
            }
        }
        Ok(())
    }

    /// Packs `seqs` and records the forward pass.
    ///
    /// `extra` is added to the input embeddings (one row per packed
    /// position). Dropout draws from `dropout_rng` when given and the
    /// configured rate is positive.
    pub fn record(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        seqs: &[MaskedSequence],
        extra: Option<Var>,
        mut dropout_rng: Option<&mut rng::Rng>,
    ) -> Result<Recorded> {
        debug_assert!(self.layout_ok);
        self.check_input(seqs)?;
        let lay = self.layout()?;
        let cfg = &self.config;
        let m_tot = cfg.m_tot.max(1);
        let mut ids = Vec::new();
        let mut slots = Vec::new();
        let mut positions = Vec::new();
        let mut key_valid = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            segments.push(Segment {
                start: ids.len(),
                len: s.len(),
            });
            let start = s.content_start();
            for i in 0..s.len() {
                ids.push(s.tokens[i] as usize);
                let rel = i.saturating_sub(start);
                positions.push(rel);
                slots.push(rel % m_tot);
                key_valid.push(!s.pad_flags[i]);
            }
        }
        let rows = ids.len();
        let mut x = tape.gather(vars[lay.tok], ids);
        if let Some(slot) = lay.slot {
            let s = tape.gather(vars[slot], slots);
            x = tape.add(x, s);
        }
        if let Some(e) = extra {
            x = tape.add(x, e);
        }
        let p_drop = cfg.dropout;
        let mut dropout = |tape: &mut Tape<T>, v: Var, width: usize| -> Var {
            match dropout_rng.as_deref_mut() {
                Some(r) if p_drop > 0.0 => {
                    let keep = T::of(1.0 / (1.0 - p_drop));
                    let f = (0..rows * width)
                        .map(|_| if r.random::<f64>() < p_drop { T::zero() } else { keep })
                        .collect();
                    tape.mul_const(v, f)
                }
                _ => v,
            }
        };
        let d = cfg.embed_dim;
        x = dropout(tape, x, d);
        let eps = T::of(cfg.ln_eps);
        let affine = |tape: &mut Tape<T>, x: Var, w: usize, b: usize| {
            let y = tape.matmul(x, vars[w]);
            tape.add_row(y, vars[b])
        };
        let mut tap = if cfg.dense_tap_layer == Some(0) { Some(x) } else { None };
        for (l, li) in lay.layers.iter().enumerate() {
            let pre = cfg.norm == NormPlacement::Pre;
            let a_in = if pre {
                tape.layer_norm(x, vars[li.ln1.0], vars[li.ln1.1], eps)
            } else {
                x
            };
            let q = affine(tape, a_in, li.wq, li.bq);
            let k = affine(tape, a_in, li.wk, li.bk);
            let v = affine(tape, a_in, li.wv, li.bv);
            let q = tape.rope(q, &positions, cfg.heads, cfg.rope_base);
            let k = tape.rope(k, &positions, cfg.heads, cfg.rope_base);
            let att = tape.attention(q, k, v, segments.clone(), &key_valid, cfg.heads);
            let att = affine(tape, att, li.wo, li.bo);
            let att = dropout(tape, att, d);
            x = tape.add(x, att);
            if !pre {
                x = tape.layer_norm(x, vars[li.ln1.0], vars[li.ln1.1], eps);
            }
            let f_in = if pre {
                tape.layer_norm(x, vars[li.ln2.0], vars[li.ln2.1], eps)
            } else {
                x
            };
            let hdn = affine(tape, f_in, li.w1, li.b1);
            let hdn = tape.gelu(hdn);
            let ff = affine(tape, hdn, li.w2, li.b2);
            let ff = dropout(tape, ff, d);
            x = tape.add(x, ff);
            if !pre {
                x = tape.layer_norm(x, vars[li.ln2.0], vars[li.ln2.1], eps);
            }
            if cfg.dense_tap_layer == Some(l + 1) {
                tap = Some(x);
            }
        }
        if let Some((g, b)) = lay.final_ln {
            x = tape.layer_norm(x, vars[g], vars[b], eps);
        }
        let logits = affine(tape, x, lay.out_w, lay.out_b);
        Ok(Recorded { logits, tap, segments })
    }

    pub fn forward(&self, ms: &MaskedSequence) -> Result<DenoiserOutput<T>> {
        Ok(self.forward_batch(std::slice::from_ref(ms))?.remove(0))
    }

    /// One packed pass over several sequences.
    pub fn forward_batch(&self, seqs: &[MaskedSequence]) -> Result<Vec<DenoiserOutput<T>>> {
        self.forward_batch_with(seqs, None)
    }

    /// Like [`forward_batch`](Self::forward_batch) with `extra` added to the
    /// packed input embeddings.
    pub fn forward_batch_with(&self, seqs: &[MaskedSequence], extra: Option<&Matrix<T>>) -> Result<Vec<DenoiserOutput<T>>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let extra = extra.map(|e| tape.constant(e.clone()));
        let rec = self.record(&mut tape, &vars, seqs, extra, None)?;
        let logits = tape.value(rec.logits);
        let hidden = rec.tap.map(|t| tape.value(t));
        Ok(rec
            .segments
            .iter()
            .map(|s| {
                let slice = |m: &Matrix<T>| {
                    Matrix::from_vec(s.len, m.cols(), m.data()[s.start * m.cols()..(s.start + s.len) * m.cols()].to_vec())
                };
                DenoiserOutput {
                    logits: slice(logits),
                    hidden: hidden.map(slice),
                }
            })
            .collect())
    }

    /// Records the batch loss; returns its node and the number of scored
    /// positions.
    pub fn record_loss(
        &self,
        tape: &mut Tape<T>,
        rec: &Recorded,
        batch: &[MaskedSequence],
        seq_0: &[Vec<u32>],
    ) -> Result<(Var, usize)> {
        if seq_0.len() != batch.len() {
            return Err(Error::invalid("targets and batch differ in length"));
        }
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for (ms, s0) in batch.iter().zip(seq_0) {
            if s0.len() != ms.len() {
                return Err(Error::invalid("target sequence length differs"));
            }
            let (t, w) = loss_targets::<T>(s0, ms, batch.len());
            if t.iter().flatten().any(|&x| x >= self.config.output_vocab) {
                return Err(Error::invalid("target token outside the output vocabulary"));
            }
            targets.extend(t);
            weights.extend(w);
        }
        let masked = targets.iter().filter(|t| t.is_some()).count();
        Ok((tape.softmax_xent(rec.logits, &targets, &weights), masked))
    }

    /// Loss and gradient for every parameter tensor.
    pub fn loss_and_grads(
        &self,
        batch: &[MaskedSequence],
        seq_0: &[Vec<u32>],
        dropout_rng: Option<&mut rng::Rng>,
    ) -> Result<(T, Vec<Matrix<T>>, usize)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, true);
        let rec = self.record(&mut tape, &vars, batch, None, dropout_rng)?;
        let (loss, masked) = self.record_loss(&mut tape, &rec, batch, seq_0)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                index: first_non_finite(&tape, &rec, batch, seq_0),
            });
        }
        let mut g = tape.backward(loss);
        let grads = vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect();
        Ok((value, grads, masked))
    }

    /// One optimizer step on the masked-diffusion loss.
    pub fn train_step(
        &mut self,
        batch: &[MaskedSequence],
        seq_0: &[Vec<u32>],
        opt: &mut AdamW<T>,
        hyper: &AdamWConfig,
        dropout_rng: Option<&mut rng::Rng>,
    ) -> Result<StepStats> {
        let (loss, grads, masked) = self.loss_and_grads(batch, seq_0, dropout_rng)?;
        opt.update(self.params.tensors_mut(), &grads, hyper);
        Ok(StepStats {
            loss: loss.as_f64(),
            masked,
        })
    }

    pub fn optimizer(&self) -> AdamW<T> {
        AdamW::new(self.params.tensors())
    }

    /// Softmax at every masked position of each sequence, from one packed
    /// pass. With `restrict`, position `i`'s support is `restrict[slot(i)]`
    /// where `slot(i)` is the index within its item tuple.
    pub fn predict_distributions_batch(
        &self,
        seqs: &[MaskedSequence],
        restrict: Option<&[Range<u32>]>,
    ) -> Result<Vec<Vec<PositionDist>>> {
        self.predict_distributions_batch_with(seqs, restrict, None)
    }

    pub fn predict_distributions_batch_with(
        &self,
        seqs: &[MaskedSequence],
        restrict: Option<&[Range<u32>]>,
        extra: Option<&Matrix<T>>,
    ) -> Result<Vec<Vec<PositionDist>>> {
        let outs = self.forward_batch_with(seqs, extra)?;
        let m_tot = self.config.m_tot.max(1);
        Ok(outs
            .iter()
            .zip(seqs)
            .map(|(out, ms)| {
                let start = ms.content_start();
                ms.masked_positions()
                    .into_iter()
                    .map(|i| {
                        let range = restrict.map(|r| r[(i - start) % m_tot].clone());
                        PositionDist {
                            position: i,
                            probs: softmax_restricted(out.logits.row(i), range),
                        }
                    })
                    .collect()
            })
            .collect())
    }

    pub fn predict_distributions(&self, ms: &MaskedSequence, restrict: Option<&[Range<u32>]>) -> Result<Vec<PositionDist>> {
        if ms.masked_count() == 0 {
            return Err(Error::invalid("no masked position to predict"));
        }
        Ok(self.predict_distributions_batch(std::slice::from_ref(ms), restrict)?.remove(0))
    }
}

fn first_non_finite<T: Scalar>(tape: &Tape<T>, rec: &Recorded, batch: &[MaskedSequence], seq_0: &[Vec<u32>]) -> usize {
    let logits = tape.value(rec.logits);
    for (b, s) in rec.segments.iter().enumerate() {
        let rows = &logits.data()[s.start * logits.cols()..(s.start + s.len) * logits.cols()];
        if rows.iter().any(|x| !x.is_finite()) || !batch[b].t.is_finite() || seq_0[b].len() != s.len {
            return b;
        }
    }
    0
}

/// Softmax in f64 over `range` (the whole row when `None`).
pub fn softmax_restricted<T: Scalar>(logits: &[T], range: Option<Range<u32>>) -> Vec<f64> {
    let r = range.map_or(0..logits.len(), |r| r.start as usize..r.end as usize);
    let mut probs = vec![0.0; logits.len()];
    let max = logits[r.clone()].iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for i in r.clone() {
        let e = (logits[i].as_f64() - max).exp();
        probs[i] = e;
        denom += e;
    }
    for p in &mut probs[r] {
        *p /= denom;
    }
    probs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{forward_mask, SpecialTokens};

    const SP: SpecialTokens = SpecialTokens { mask: 6, pad: 7 };

    fn tiny(seed: u64, std: f64) -> Denoiser<f64> {
        let cfg = DenoiserConfig {
            layers: 2,
            embed_dim: 8,
            heads: 2,
            mlp_hidden: 12,
            vocab_size: 8,
            output_vocab: 6,
            max_positions: 32,
            m_tot: 3,
            init_std: std,
            ..DenoiserConfig::desk()
        };
        Denoiser::new(cfg, seed).unwrap()
    }

    #[test]
    fn shapes_and_length_limit() {
        let d = tiny(0, 0.1);
        let out = d.forward(&MaskedSequence::clean(vec![6], SP, 1.0)).unwrap();
        assert_eq!(out.logits.shape(), (1, 6));
        let long = MaskedSequence::clean(vec![0; 33], SP, 1.0);
        assert!(d.forward(&long).is_err());
        let bad = MaskedSequence::clean(vec![9], SP, 1.0);
        assert!(d.forward(&bad).is_err());
    }

    #[test]
    fn pad_positions_do_not_leak() {
        let d = tiny(1, 0.3);
        let a = MaskedSequence::clean(vec![7, 7, 1, 6, 4], SP, 0.5);
        let b = MaskedSequence::clean(vec![1, 6, 4], SP, 0.5);
        let oa = d.forward(&a).unwrap();
        let ob = d.forward(&b).unwrap();
        for i in 0..3 {
            for (x, y) in oa.logits.row(i + 2).iter().zip(ob.logits.row(i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_equals_single() {
        let d = tiny(2, 0.3);
        let seqs = vec![
            MaskedSequence::clean(vec![1, 2, 6], SP, 0.5),
            MaskedSequence::clean(vec![7, 0, 6, 6, 3], SP, 0.5),
        ];
        let batch = d.forward_batch(&seqs).unwrap();
        for (s, o) in seqs.iter().zip(&batch) {
            assert_eq!(d.forward(s).unwrap().logits, o.logits);
        }
    }

    #[test]
    fn zero_output_projection_is_uniform() {
        let mut d = tiny(3, 0.3);
        *d.params.get_mut("out.w").unwrap() = Matrix::zeros(8, 6);
        let mut ms = MaskedSequence::clean(vec![0, 1, 2], SP, 1.0);
        ms.mask_at(1, SP);
        let dist = d.predict_distributions(&ms, None).unwrap();
        assert!(dist[0].probs.iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-12));
        let ranges = [0..2, 2..4, 4..6];
        let dist = d.predict_distributions(&ms, Some(&ranges)).unwrap();
        assert_eq!(dist[0].probs, vec![0.0, 0.0, 0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn loss_matches_standalone_elbo() {
        let d = tiny(4, 0.3);
        let mut r = rng::seeded(4);
        let s0 = vec![vec![0u32, 2, 4, 1, 3, 5], vec![1, 3, 5]];
        let batch: Vec<_> = s0.iter().map(|s| forward_mask(s, 0.7, SP, &mut r)).collect();
        let (loss, _, masked) = d.loss_and_grads(&batch, &s0, None).unwrap();
        let logits: Vec<_> = d.forward_batch(&batch).unwrap().into_iter().map(|o| o.logits).collect();
        let e = crate::diffusion::elbo_loss(&logits, &s0, &batch).unwrap();
        assert!((loss - e.loss).abs() < 1e-12);
        assert_eq!(masked, e.masked);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut d = tiny(5, 0.1);
        let before = d.params.clone();
        let mut opt = d.optimizer();
        let s0 = vec![vec![0u32, 2, 4]];
        let mut ms = MaskedSequence::clean(s0[0].clone(), SP, 0.5);
        ms.mask_at(0, SP);
        let cfg = AdamWConfig { lr: 0.0, ..Default::default() };
        let st = d.train_step(&[ms], &s0, &mut opt, &cfg, None).unwrap();
        assert!(st.loss > 0.0);
        assert_eq!(d.params, before);
    }

    #[test]
    fn post_norm_and_dropout_run() {
        let cfg = DenoiserConfig {
            norm: NormPlacement::Post,
            dropout: 0.2,
            embed_dim: 8,
            heads: 2,
            mlp_hidden: 8,
            vocab_size: 8,
            output_vocab: 6,
            m_tot: 3,
            ..DenoiserConfig::desk()
        };
        let mut d = Denoiser::<f32>::new(cfg, 0).unwrap();
        assert!(d.params.get("final_ln.gain").is_none());
        let s0 = vec![vec![0u32, 2, 4]];
        let mut ms = MaskedSequence::clean(s0[0].clone(), SP, 0.5);
        ms.mask_at(2, SP);
        let mut opt = d.optimizer();
        let mut r = rng::seeded(0);
        let st = d.train_step(&[ms], &s0, &mut opt, &AdamWConfig::default(), Some(&mut r)).unwrap();
        assert!(st.loss.is_finite());
    }

    #[test]
    fn config_validation() {
        let mut c = DenoiserConfig::desk();
        c.vocab_size = 10;
        c.output_vocab = 8;
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 4;
        c.dense_tap_layer = Some(2);
        assert!(c.validate().is_err());
    }
}
