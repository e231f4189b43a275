//! Training loop: seeded batch sampling, masked-diffusion (optionally joint
//! dense) updates, periodic validation with early stopping, and resumable
//! state.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{EmbeddingTable, EvalSplit};
use crate::dense::{item_joint_mask, train_joint, DenseConfig, DenseHead, DenseScoring, JointModel};
use crate::denoiser::{Denoiser, DenoiserConfig, ParamStore};
use crate::diffusion::{forward_mask, sample_noise_level, stratified_noise_levels, MaskedSequence, SpecialTokens};
use crate::evaluation::{evaluate_split, BeamRanker, Target};
use crate::inference::{BeamConfig, Decoder};
use crate::optim::{AdamW, AdamWConfig};
use crate::tokenizer::SidCatalog;
use crate::{rng, Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from `lr` to zero over `steps`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Upper bound on optimizer steps.
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Linear ramp from zero over this many steps.
    pub warmup_steps: u64,
    pub weight_decay: f64,
    /// Validate every this many steps; 0 disables validation.
    pub eval_every: u64,
    /// Validations without improvement before stopping; 0 never stops.
    pub patience: usize,
    /// Validation users (all when unset).
    pub eval_users: Option<usize>,
    pub eval_k: usize,
    /// Draws the batch's noise levels from equal strata of `[ε, 1]` instead
    /// of independently.
    pub stratified_t: bool,
    /// Longest training window in items; longer histories are cropped at a
    /// random offset.
    pub max_items: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            lr: 0.005,
            lr_schedule: LrSchedule::Constant,
            warmup_steps: 0,
            weight_decay: 0.001,
            eval_every: 250,
            patience: 4,
            eval_users: Some(500),
            eval_k: 10,
            stratified_t: false,
            max_items: 20,
        }
    }
}

impl TrainConfig {
    /// Learning rate for the update that follows `step` completed steps.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = if step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decay = match self.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let p = (step as f64 / self.steps.max(1) as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        };
        self.lr * warm * decay
    }

    pub fn hyper(&self, step: u64) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr_at(step),
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

const STEP_TAG: u64 = 0x5354_4550;
const EPOCH_TAG: u64 = 0x4550_4F43;

/// Training inputs shared across steps.
pub struct TrainData<'a, T> {
    pub split: &'a EvalSplit,
    pub catalog: &'a SidCatalog,
    /// Item text embeddings, required in dense mode.
    pub text: Option<&'a EmbeddingTable<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Best<T> {
    pub step: u64,
    pub recall: f64,
    pub model: ParamStore<T>,
    pub head: Option<ParamStore<T>>,
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: Denoiser<T>,
    pub opt: AdamW<T>,
    pub head: Option<(DenseHead<T>, AdamW<T>)>,
    pub step: u64,
    pub best: Option<Best<T>>,
    pub evals_since_best: usize,
    pub stopped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub elbo: f64,
    pub dense: f64,
    pub masked: usize,
    pub dense_items: usize,
    pub valid_recall: Option<f64>,
}

/// Model config matching a catalog: vocabulary, tuple length, and tap layer.
pub fn model_config(base: &DenoiserConfig, catalog: &SidCatalog, dense: &DenseConfig) -> DenoiserConfig {
    DenoiserConfig {
        vocab_size: catalog.vocab_size(),
        output_vocab: catalog.output_vocab(),
        m_tot: catalog.m_tot(),
        dense_tap_layer: dense.enabled.then(|| dense.tap_for(base.layers)),
        ..base.clone()
    }
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: DenoiserConfig, dense: &DenseConfig, text_dim: Option<usize>, seed: u64) -> Result<Self> {
        let model = Denoiser::new(config, rng::derive(seed, &[1]))?;
        let opt = model.optimizer();
        let head = if dense.enabled {
            dense.validate(model.config.layers)?;
            let text_dim = text_dim.ok_or_else(|| Error::Config("dense mode needs item embeddings".into()))?;
            let h = DenseHead::new(dense, model.config.m_tot, model.config.embed_dim, text_dim, rng::derive(seed, &[2]))?;
            let o = AdamW::new(h.params.tensors());
            Some((h, o))
        } else {
            None
        };
        Ok(Self {
            model,
            opt,
            head,
            step: 0,
            best: None,
            evals_since_best: 0,
            stopped: false,
        })
    }

    /// The model to evaluate: best validated weights if any, else current.
    pub fn final_model(&self) -> Result<(Denoiser<T>, Option<DenseHead<T>>)> {
        match &self.best {
            Some(b) => {
                let model = Denoiser::from_params(self.model.config.clone(), b.model.clone())?;
                let head = match (&self.head, &b.head) {
                    (Some((h, _)), Some(p)) => Some(DenseHead { params: p.clone(), ..h.clone() }),
                    _ => None,
                };
                Ok((model, head))
            }
            None => Ok((self.model.clone(), self.head.as_ref().map(|(h, _)| h.clone()))),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "train_state",
            "model": self.model.config,
            "dense": self.head.as_ref().map(|(h, _)| head_meta(h)),
            "step": self.step,
            "opt_step": self.opt.step,
            "dense_opt_step": self.head.as_ref().map(|(_, o)| o.step),
            "best_step": self.best.as_ref().map(|b| b.step),
            "best_recall": self.best.as_ref().map(|b| b.recall),
            "evals_since_best": self.evals_since_best,
            "stopped": self.stopped,
        }));
        ck.add_store("model.", &self.model.params);
        add_moments(&mut ck, "opt.model", &self.model.params, &self.opt);
        if let Some((h, o)) = &self.head {
            ck.add_store("dense.", &h.params);
            add_moments(&mut ck, "opt.dense", &h.params, o);
        }
        if let Some(b) = &self.best {
            ck.add_store("best.model.", &b.model);
            if let Some(p) = &b.head {
                ck.add_store("best.dense.", p);
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.meta;
        let get = |k: &str| meta.get(k).cloned().unwrap_or(serde_json::Value::Null);
        let config: DenoiserConfig = serde_json::from_value(get("model"))?;
        let model = Denoiser::from_params(config, ck.store("model."))?;
        let mut opt = moments(ck, "opt.model", &model.params)?;
        opt.step = serde_json::from_value(get("opt_step"))?;
        let head = match serde_json::from_value::<Option<HeadMeta>>(get("dense"))? {
            Some(hm) => {
                let h = hm.build(ck.store("dense."))?;
                let mut o = moments(ck, "opt.dense", &h.params)?;
                o.step = serde_json::from_value::<Option<u64>>(get("dense_opt_step"))?.unwrap_or(0);
                Some((h, o))
            }
            None => None,
        };
        let best = match serde_json::from_value::<Option<u64>>(get("best_step"))? {
            Some(step) => Some(Best {
                step,
                recall: serde_json::from_value(get("best_recall"))?,
                model: ck.store("best.model."),
                head: ck.has_prefix("best.dense.").then(|| ck.store("best.dense.")),
            }),
            None => None,
        };
        Ok(Self {
            model,
            opt,
            head,
            step: serde_json::from_value(get("step"))?,
            best,
            evals_since_best: serde_json::from_value(get("evals_since_best"))?,
            stopped: serde_json::from_value(get("stopped"))?,
        })
    }
}

impl<T: Scalar> PartialEq for TrainState<T> {
    fn eq(&self, o: &Self) -> bool {
        self.model == o.model
            && self.opt == o.opt
            && self.head == o.head
            && self.step == o.step
            && self.best == o.best
            && self.evals_since_best == o.evals_since_best
            && self.stopped == o.stopped
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadMeta {
    m_tot: usize,
    embed_dim: usize,
    text_dim: usize,
    scoring: DenseScoring,
}

impl HeadMeta {
    fn build<T: Scalar>(&self, params: ParamStore<T>) -> Result<DenseHead<T>> {
        DenseHead::from_params(self.m_tot, self.embed_dim, self.text_dim, self.scoring, params)
    }
}

fn head_meta<T: Scalar>(h: &DenseHead<T>) -> HeadMeta {
    HeadMeta {
        m_tot: h.m_tot,
        embed_dim: h.embed_dim,
        text_dim: h.text_dim,
        scoring: h.scoring,
    }
}

fn add_moments<T: Scalar>(ck: &mut Checkpoint, prefix: &str, params: &ParamStore<T>, opt: &AdamW<T>) {
    for ((n, m), v) in params.names().iter().zip(&opt.m).zip(&opt.v) {
        ck.tensors.push((format!("{prefix}.m.{n}"), m.cast()));
        ck.tensors.push((format!("{prefix}.v.{n}"), v.cast()));
    }
}

fn moments<T: Scalar>(ck: &Checkpoint, prefix: &str, params: &ParamStore<T>) -> Result<AdamW<T>> {
    let m = ck.store::<T>(&format!("{prefix}.m."));
    let v = ck.store::<T>(&format!("{prefix}.v."));
    let mut opt = AdamW::new(params.tensors());
    for (i, n) in params.names().iter().enumerate() {
        let (Some(mi), Some(vi)) = (m.get(n), v.get(n)) else {
            return Err(Error::Format(format!("checkpoint lacks optimizer state for {n}")));
        };
        opt.m[i] = mi.clone();
        opt.v[i] = vi.clone();
    }
    Ok(opt)
}

/// Saves the weights used for evaluation (no optimizer state).
pub fn model_checkpoint<T: Scalar>(model: &Denoiser<T>, head: Option<&DenseHead<T>>, extra: serde_json::Value) -> Checkpoint {
    let mut ck = Checkpoint::new(serde_json::json!({
        "kind": "model",
        "model": model.config,
        "dense": head.map(head_meta),
        "info": extra,
    }));
    ck.add_store("model.", &model.params);
    if let Some(h) = head {
        ck.add_store("dense.", &h.params);
    }
    ck
}

/// Loads weights from a model or train-state checkpoint (best weights
/// preferred for the latter).
pub fn load_model<T: Scalar>(ck: &Checkpoint) -> Result<(Denoiser<T>, Option<DenseHead<T>>)> {
    if ck.meta.get("kind").and_then(|k| k.as_str()) == Some("train_state") {
        return TrainState::<T>::from_checkpoint(ck)?.final_model();
    }
    let config: DenoiserConfig = serde_json::from_value(ck.meta.get("model").cloned().unwrap_or_default())?;
    let model = Denoiser::from_params(config, ck.store("model."))?;
    let head = match serde_json::from_value::<Option<HeadMeta>>(ck.meta.get("dense").cloned().unwrap_or_default())? {
        Some(hm) if ck.has_prefix("dense.") => Some(hm.build(ck.store("dense."))?),
        _ => None,
    };
    Ok((model, head))
}

/// Trains against a fixed dataset and config.
pub struct Trainer<'a, T> {
    pub cfg: &'a TrainConfig,
    pub dense: &'a DenseConfig,
    pub data: TrainData<'a, T>,
    /// Beam settings for validation.
    pub beam: BeamConfig,
    pub seed: u64,
}

impl<T: Scalar> Trainer<'_, T> {
    fn special(&self) -> SpecialTokens {
        SpecialTokens {
            mask: self.data.catalog.mask_token(),
            pad: self.data.catalog.pad_token(),
        }
    }

    /// The users and masked sequences of step `step`; depends only on the
    /// seed and the step index.
    pub fn batch(&self, step: u64) -> (Vec<MaskedSequence>, Vec<Vec<u32>>) {
        let users = &self.data.split.users;
        let n = users.len() as u64;
        let b = self.cfg.batch_size as u64;
        let mut rng = rng::stream(self.seed, &[STEP_TAG, step]);
        let mut perm_cache: Option<(u64, Vec<usize>)> = None;
        let m_tot = self.data.catalog.m_tot();
        let mut seqs = Vec::with_capacity(b as usize);
        let mut clean = Vec::with_capacity(b as usize);
        let strata = self.cfg.stratified_t.then(|| stratified_noise_levels(b as usize, &mut rng));
        for k in 0..b {
            let pos = step * b + k;
            let epoch = pos / n;
            if perm_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut p: Vec<usize> = (0..users.len()).collect();
                p.shuffle(&mut rng::stream(self.seed, &[EPOCH_TAG, epoch]));
                perm_cache = Some((epoch, p));
            }
            let u = &users[perm_cache.as_ref().unwrap().1[(pos % n) as usize]];
            let items = &u.train;
            let window = if items.len() > self.cfg.max_items {
                let start = rng.random_range(0..=items.len() - self.cfg.max_items);
                &items[start..start + self.cfg.max_items]
            } else {
                &items[..]
            };
            let tokens = self.data.catalog.encode(window);
            let t = match &strata {
                Some(ts) => ts[k as usize],
                None => sample_noise_level(&mut rng),
            };
            let ms = if self.dense.enabled {
                item_joint_mask(&tokens, t, self.dense.beta, m_tot, self.special(), &mut rng)
            } else {
                forward_mask(&tokens, t, self.special(), &mut rng)
            };
            seqs.push(ms);
            clean.push(tokens);
        }
        (seqs, clean)
    }

    /// One optimizer step.
    pub fn step(&self, state: &mut TrainState<T>) -> Result<StepLog> {
        let (batch, clean) = self.batch(state.step);
        let mut drop_rng = rng::stream(self.seed, &[STEP_TAG, state.step, 1]);
        let hyper = self.cfg.hyper(state.step);
        let log = match &mut state.head {
            Some((head, hopt)) => {
                let text = self
                    .data
                    .text
                    .ok_or_else(|| Error::Config("dense mode needs item embeddings".into()))?;
                let s = train_joint(
                    &mut state.model,
                    head,
                    text,
                    self.data.catalog,
                    self.dense,
                    &batch,
                    &clean,
                    &mut state.opt,
                    hopt,
                    &hyper,
                    Some(&mut drop_rng),
                )?;
                StepLog {
                    step: state.step,
                    loss: s.total,
                    elbo: s.elbo,
                    dense: s.dense,
                    masked: s.masked,
                    dense_items: s.dense_items,
                    valid_recall: None,
                }
            }
            None => {
                let s = state.model.train_step(&batch, &clean, &mut state.opt, &hyper, Some(&mut drop_rng))?;
                StepLog {
                    step: state.step,
                    loss: s.loss,
                    elbo: s.loss,
                    dense: 0.0,
                    masked: s.masked,
                    dense_items: 0,
                    valid_recall: None,
                }
            }
        };
        state.step += 1;
        Ok(log)
    }

    /// Validation Recall@`eval_k` of the current weights.
    pub fn validate(&self, state: &TrainState<T>) -> Result<f64> {
        let mut decoder = Decoder::new(&state.model, self.data.catalog, self.beam.restrict);
        if let (Some((h, _)), Some(text)) = (&state.head, self.data.text) {
            if self.dense.fuse_text {
                decoder = decoder.with_fusion(h, text);
            }
        }
        let k = self.cfg.eval_k;
        let beam = BeamConfig {
            width: self.beam.width.max(k),
            top_k: k,
            ..self.beam.clone()
        };
        let k_items = self.data.split.mode.targets();
        let max_context = max_context(&state.model.config, self.data.catalog.m_tot(), self.cfg.max_items, k_items);
        let ranker = BeamRanker {
            decoder,
            beam: beam.clone(),
            max_context,
            unified: None,
        };
        let (report, _) = evaluate_split(
            &ranker,
            self.data.split,
            Target::Valid,
            &[k],
            beam.width,
            self.cfg.eval_users,
            rng::derive(self.seed, &[0x5641_4C49]),
        )?;
        Ok(report.recall(k))
    }

    /// Runs until the step budget, early stopping, or `until` steps.
    pub fn run(&self, state: &mut TrainState<T>, until: Option<u64>, mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        let end = until.unwrap_or(self.cfg.steps).min(self.cfg.steps);
        while state.step < end && !state.stopped {
            let mut log = self.step(state)?;
            let evaluate = self.cfg.eval_every > 0 && (state.step.is_multiple_of(self.cfg.eval_every) || state.step == self.cfg.steps);
            if evaluate {
                let r = self.validate(state)?;
                log.valid_recall = Some(r);
                log::info!("step {}: loss {:.4}, valid recall@{} {:.4}", state.step, log.loss, self.cfg.eval_k, r);
                if state.best.as_ref().is_none_or(|b| r > b.recall) {
                    state.best = Some(Best {
                        step: state.step,
                        recall: r,
                        model: state.model.params.clone(),
                        head: state.head.as_ref().map(|(h, _)| h.params.clone()),
                    });
                    state.evals_since_best = 0;
                } else {
                    state.evals_since_best += 1;
                    if self.cfg.patience > 0 && state.evals_since_best >= self.cfg.patience {
                        log::info!("early stop at step {}", state.step);
                        state.stopped = true;
                    }
                }
            }
            on_step(&log);
        }
        Ok(())
    }
}

/// Context items kept at inference: the training window minus the
/// predicted items, within the position limit.
pub fn max_context(model: &DenoiserConfig, m_tot: usize, window: usize, k_items: usize) -> usize {
    let by_positions = (model.max_positions / m_tot.max(1)).saturating_sub(k_items);
    window.saturating_sub(k_items).min(by_positions).max(1)
}

/// Bundles a trained joint model for scoring.
pub fn joint<'a, T: Scalar>(
    model: &'a Denoiser<T>,
    head: &'a DenseHead<T>,
    text: &'a EmbeddingTable<T>,
    catalog: &'a SidCatalog,
    fuse: bool,
) -> JointModel<'a, T> {
    JointModel {
        model,
        head,
        text,
        catalog,
        fuse,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_split, InteractionDataset, SplitMode, UserRecord};

    fn fixture() -> (EvalSplit, SidCatalog) {
        let users = (0..12)
            .map(|u| UserRecord {
                user: u,
                items: (0..6).map(|i| (u + i) % 6).collect(),
            })
            .collect();
        let ds = InteractionDataset {
            users,
            item_count: 6,
            max_len: None,
        };
        (make_split(&ds, SplitMode::LeaveOneOut), SidCatalog::item_ids(6).unwrap())
    }

    fn small_model(cat: &SidCatalog) -> DenoiserConfig {
        let base = DenoiserConfig {
            embed_dim: 8,
            heads: 2,
            mlp_hidden: 16,
            ..DenoiserConfig::desk()
        };
        model_config(&base, cat, &DenseConfig::default())
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        let (split, cat) = fixture();
        let cfg = TrainConfig {
            batch_size: 5,
            ..Default::default()
        };
        let dense = DenseConfig::default();
        let tr = Trainer::<f32> {
            cfg: &cfg,
            dense: &dense,
            data: TrainData {
                split: &split,
                catalog: &cat,
                text: None,
            },
            beam: BeamConfig::default(),
            seed: 3,
        };
        assert_eq!(tr.batch(4), tr.batch(4));
        assert_ne!(tr.batch(4).0, tr.batch(5).0);
    }

    #[test]
    fn state_round_trips_through_checkpoint() {
        let (split, cat) = fixture();
        let cfg = TrainConfig {
            batch_size: 4,
            steps: 3,
            eval_every: 2,
            eval_users: Some(4),
            ..Default::default()
        };
        let dense = DenseConfig::default();
        let tr = Trainer::<f32> {
            cfg: &cfg,
            dense: &dense,
            data: TrainData {
                split: &split,
                catalog: &cat,
                text: None,
            },
            beam: BeamConfig::for_top_k(10),
            seed: 1,
        };
        let mut st = TrainState::new(small_model(&cat), &dense, None, 1).unwrap();
        tr.run(&mut st, Some(2), |_| {}).unwrap();
        assert!(st.best.is_some());
        let back = TrainState::<f32>::from_checkpoint(&Checkpoint::from_bytes(&st.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, st);
    }
}
