//! Pipeline stages behind the command-line subcommands. Every stage writes
//! its resolved config and a digest of its inputs next to its outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{hash_inputs, DenseMode, RunConfig};
use crate::data::{
    generate_synthetic, k_core_filter, load_interactions, make_split, sparsify_train, EmbeddingTable, EvalSplit,
    InteractionFormat,
};
use crate::dense::DenseHead;
use crate::denoiser::Denoiser;
use crate::evaluation::{evaluate_split, write_user_csv, BeamRanker, MetricReport};
use crate::inference::{Decoder, Strategy};
use crate::tokenizer::{assign_sids, fit_residual_kmeans, randomize_sids, CodebookStack, SidCatalog};
use crate::train::{load_model, model_checkpoint, model_config, joint, StepLog, TrainData, TrainState, Trainer};
use crate::{rng, Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const INPUTS_FILE: &str = "inputs.json";
pub const CATALOG_FILE: &str = "catalog.sid";
pub const CODEBOOKS_FILE: &str = "codebooks.bin";
pub const SPLIT_FILE: &str = "split.json";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const LOSS_CSV: &str = "loss.csv";
pub const NFE_CSV: &str = "nfe_curve.csv";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

/// Creates `out` and records the resolved config and input digests.
pub fn init_run_dir(out: &Path, cfg: &RunConfig, inputs: &[&Path]) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let hashes = hash_inputs(inputs)?;
    write_file(&out.join(INPUTS_FILE), json(&hashes).as_bytes())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthReport {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub split_users: usize,
}

/// Writes a synthetic dataset: interactions, item table, embeddings, the
/// exact next-item conditional and a split.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<SynthReport> {
    init_run_dir(out, cfg, &[])?;
    let data = generate_synthetic(&cfg.data.synthetic)?;
    let mut w = csv::Writer::from_path(out.join("interactions.csv")).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["user", "item", "timestamp"]).map_err(|e| Error::Format(e.to_string()))?;
    for u in &data.dataset.users {
        for (t, i) in u.items.iter().enumerate() {
            w.write_record([u.user.to_string(), i.to_string(), t.to_string()])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| Error::io(out.join("interactions.csv"), e))?;
    let items: String = (0..data.dataset.item_count).map(|i| format!("{i}\n")).collect();
    write_file(&out.join("items.txt"), items.as_bytes())?;
    data.embeddings.write(&out.join("embeddings.bin"))?;
    let rows: Vec<&[f64]> = (0..data.true_conditionals.rows()).map(|r| data.true_conditionals.row(r)).collect();
    write_file(&out.join("true_conditionals.json"), serde_json::to_string(&rows)?.as_bytes())?;
    let split = make_split(&data.dataset, cfg.data.split);
    split.write(&out.join(SPLIT_FILE))?;
    Ok(SynthReport {
        users: data.dataset.users.len(),
        items: data.dataset.item_count,
        interactions: data.dataset.interaction_count(),
        split_users: split.users.len(),
    })
}

/// Loads, filters, truncates and splits an interaction log. `items` lists
/// item IDs in embedding-row order, one per line.
pub fn build_split(cfg: &RunConfig, interactions: &Path, items: Option<&Path>) -> Result<EvalSplit> {
    let vocab = match items {
        Some(p) => Some(
            fs::read_to_string(p)
                .map_err(|e| Error::io(p, e))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_owned)
                .collect::<Vec<_>>(),
        ),
        None => None,
    };
    let (mut ds, _) = load_interactions(interactions, InteractionFormat::from_path(interactions), vocab.as_deref())?;
    if cfg.data.min_interactions > 1 {
        ds = k_core_filter(&ds, cfg.data.min_interactions)?;
    }
    let ds = ds.truncate(cfg.data.max_len);
    let split = make_split(&ds, cfg.data.split);
    if split.users.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    Ok(split)
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerStats {
    pub layer: usize,
    pub used: usize,
    pub capacity: usize,
    pub utilization: f64,
    pub residual_mse: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TokenizeReport {
    pub items: usize,
    pub m: usize,
    pub c: usize,
    pub d_max: usize,
    pub collisions: usize,
    pub randomized: bool,
    pub layers: Vec<LayerStats>,
}

impl TokenizeReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "items {}  m {}  c {}  d_max {}  colliding items {}{}\n",
            self.items,
            self.m,
            self.c,
            self.d_max,
            self.collisions,
            if self.randomized { "  (random)" } else { "" }
        );
        s.push_str("layer      used  capacity  util    residual_mse\n");
        for l in &self.layers {
            let mse = l.residual_mse.map_or("-".to_string(), |x| format!("{x:.6}"));
            s.push_str(&format!(
                "{:<6} {:>8} {:>9}  {:>5.3}  {mse}\n",
                l.layer, l.used, l.capacity, l.utilization
            ));
        }
        s
    }
}

fn tokenize_report(cat: &SidCatalog, cb: Option<&CodebookStack<f64>>, randomized: bool) -> TokenizeReport {
    let usage = cat.slot_usage();
    let layers = usage
        .iter()
        .enumerate()
        .map(|(j, &used)| {
            let capacity = cat.slot_range(j).len();
            LayerStats {
                layer: j,
                used,
                capacity,
                utilization: used as f64 / capacity.max(1) as f64,
                residual_mse: cb.and_then(|cb| cb.residual_mse.get(j).copied()).filter(|_| !randomized),
            }
        })
        .collect();
    TokenizeReport {
        items: cat.item_count(),
        m: cat.m(),
        c: cat.c(),
        d_max: cat.d_max(),
        collisions: cat.collisions(),
        randomized,
        layers,
    }
}

/// Fits codebooks and writes the catalog, codebooks and per-layer stats.
pub fn tokenize(cfg: &RunConfig, embeddings: &Path, out: &Path, randomize: bool) -> Result<TokenizeReport> {
    require(embeddings)?;
    init_run_dir(out, cfg, &[embeddings])?;
    let emb = EmbeddingTable::<f64>::read(embeddings)?;
    let t = &cfg.tokenizer;
    let cb = fit_residual_kmeans(&emb, t.m, t.c, t.iters, rng::derive(cfg.seed, &[0x544F_4B4E]))?;
    let mut cat = assign_sids(&emb, &cb)?;
    let randomize = randomize || t.randomize;
    if randomize {
        cat = randomize_sids(&cat, rng::derive(cfg.seed, &[0x5241_4E44]))?;
    }
    cat.write(&out.join(CATALOG_FILE))?;
    cb.to_table().cast::<f32>().write(&out.join(CODEBOOKS_FILE))?;
    let report = tokenize_report(&cat, Some(&cb), randomize);
    write_file(&out.join("tokenize.json"), json(&report).as_bytes())?;
    Ok(report)
}

/// Drops training items and writes the new split.
pub fn sparsify(cfg: &RunConfig, split: &Path, drop_frac: f64, out: &Path) -> Result<EvalSplit> {
    require(split)?;
    init_run_dir(out, cfg, &[split])?;
    let s = sparsify_train(&EvalSplit::read(split)?, drop_frac, rng::derive(cfg.seed, &[0x5350_4152]))?;
    s.write(&out.join(SPLIT_FILE))?;
    Ok(s)
}

/// Where training data comes from.
#[derive(Debug, Clone, Default)]
pub struct TrainInputs {
    pub split: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub items: Option<PathBuf>,
    /// Required unless training over raw item IDs.
    pub catalog: Option<PathBuf>,
    /// Text embeddings for dense mode.
    pub embeddings: Option<PathBuf>,
    /// A `last.ckpt` to continue from.
    pub resume: Option<PathBuf>,
    pub item_ids: bool,
}

impl TrainInputs {
    fn paths(&self) -> Vec<&Path> {
        [&self.split, &self.interactions, &self.items, &self.catalog, &self.embeddings, &self.resume]
            .into_iter()
            .flatten()
            .map(PathBuf::as_path)
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps: u64,
    pub stopped_early: bool,
    pub best_step: Option<u64>,
    pub best_valid_recall: Option<f64>,
    pub final_loss: f64,
    pub params: usize,
    pub empty_batches: u64,
}

fn load_catalog(inputs: &TrainInputs, split: &EvalSplit) -> Result<SidCatalog> {
    let cat = if inputs.item_ids {
        SidCatalog::item_ids(split.item_count)?
    } else {
        let p = inputs
            .catalog
            .as_deref()
            .ok_or_else(|| Error::Config("training needs a catalog unless item-ID mode is on".into()))?;
        require(p)?;
        SidCatalog::read(p)?
    };
    if cat.item_count() != split.item_count {
        return Err(Error::invalid(format!(
            "catalog covers {} items, the split references {}",
            cat.item_count(),
            split.item_count
        )));
    }
    Ok(cat)
}

fn load_text(path: Option<&Path>, needed: bool, items: usize) -> Result<Option<EmbeddingTable<f32>>> {
    match path {
        Some(p) if needed => {
            require(p)?;
            let t = EmbeddingTable::<f32>::read(p)?;
            if t.item_count() != items {
                return Err(Error::invalid(format!("embedding table has {} rows, catalog {items}", t.item_count())));
            }
            Ok(Some(t))
        }
        None if needed => Err(Error::Config("dense mode needs item embeddings".into())),
        _ => Ok(None),
    }
}

/// Trains with periodic validation; writes the loss curve, `best.ckpt` (the
/// weights to evaluate) and `last.ckpt` (resumable state).
pub fn train(cfg: &RunConfig, inputs: &TrainInputs, out: &Path) -> Result<TrainReport> {
    for p in inputs.paths() {
        require(p)?;
    }
    init_run_dir(out, cfg, &inputs.paths())?;
    let split = match (&inputs.split, &inputs.interactions) {
        (Some(s), _) => EvalSplit::read(s)?,
        (None, Some(i)) => build_split(cfg, i, inputs.items.as_deref())?,
        (None, None) => return Err(Error::Config("training needs a split or an interaction log".into())),
    };
    split.write(&out.join(SPLIT_FILE))?;
    let catalog = load_catalog(inputs, &split)?;
    catalog.write(&out.join(CATALOG_FILE))?;
    let text = load_text(inputs.embeddings.as_deref(), cfg.dense.enabled, catalog.item_count())?;

    let model_cfg = model_config(&cfg.model.denoiser(), &catalog, &cfg.dense);
    if cfg.train.max_items * catalog.m_tot() > model_cfg.max_positions {
        return Err(Error::Config(format!(
            "train.max_items {} × tuple length {} exceeds model.max_positions {}",
            cfg.train.max_items,
            catalog.m_tot(),
            model_cfg.max_positions
        )));
    }
    let mut state = match &inputs.resume {
        Some(p) => TrainState::<f32>::from_checkpoint(&Checkpoint::read(p)?)?,
        None => TrainState::new(model_cfg, &cfg.dense, text.as_ref().map(|t| t.dim()), cfg.seed)?,
    };
    log::info!("denoiser parameters: {}", state.model.param_count());

    let trainer = Trainer {
        cfg: &cfg.train,
        dense: &cfg.dense,
        data: TrainData {
            split: &split,
            catalog: &catalog,
            text: text.as_ref(),
        },
        beam: cfg.infer.beam(cfg.seed),
        seed: cfg.seed,
    };

    let loss_path = out.join(LOSS_CSV);
    let fresh = inputs.resume.is_none() || !loss_path.exists();
    let mut loss_file = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&loss_path)
        .map_err(|e| Error::io(&loss_path, e))?;
    if fresh {
        writeln!(loss_file, "step,loss,elbo,dense,masked,dense_items,valid_recall")
            .map_err(|e| Error::io(&loss_path, e))?;
    }
    let mut last: Option<StepLog> = None;
    let mut io_err: Option<std::io::Error> = None;
    let empty_before = crate::diffusion::empty_batch_count();
    let res = trainer.run(&mut state, None, |l| {
        let line = format!(
            "{},{},{},{},{},{},{}",
            l.step + 1,
            l.loss,
            l.elbo,
            l.dense,
            l.masked,
            l.dense_items,
            l.valid_recall.map_or(String::new(), |r| r.to_string())
        );
        if let Err(e) = writeln!(loss_file, "{line}") {
            io_err.get_or_insert(e);
        }
        last = Some(*l);
    });
    if let Err(e) = res {
        // keep the resumable state for post-mortem
        state.to_checkpoint().write(&out.join(LAST_CKPT))?;
        return Err(match e {
            Error::NonFiniteLoss { index } => Error::Invalid(format!(
                "non-finite loss at step {} (batch element {index}); state saved to {}",
                state.step + 1,
                out.join(LAST_CKPT).display()
            )),
            other => other,
        });
    }
    if let Some(e) = io_err {
        return Err(Error::io(&loss_path, e));
    }
    state.to_checkpoint().write(&out.join(LAST_CKPT))?;
    let (model, head) = state.final_model()?;
    let info = serde_json::json!({
        "step": state.step,
        "best_step": state.best.as_ref().map(|b| b.step),
    });
    model_checkpoint(&model, head.as_ref(), info).write(&out.join(BEST_CKPT))?;
    let report = TrainReport {
        steps: state.step,
        stopped_early: state.stopped,
        best_step: state.best.as_ref().map(|b| b.step),
        best_valid_recall: state.best.as_ref().map(|b| b.recall),
        final_loss: last.map_or(f64::NAN, |l| l.loss),
        params: model.param_count(),
        empty_batches: crate::diffusion::empty_batch_count() - empty_before,
    };
    write_file(&out.join("train.json"), json(&report).as_bytes())?;
    Ok(report)
}

/// Trained weights plus the catalog and (for dense models) text table.
pub struct LoadedModel {
    pub model: Denoiser<f32>,
    pub head: Option<DenseHead<f32>>,
    pub catalog: SidCatalog,
    pub text: Option<EmbeddingTable<f32>>,
}

impl LoadedModel {
    pub fn load(checkpoint: &Path, catalog: &Path, embeddings: Option<&Path>) -> Result<Self> {
        require(checkpoint)?;
        require(catalog)?;
        let (model, head) = load_model::<f32>(&Checkpoint::read(checkpoint)?)?;
        let catalog = SidCatalog::read(catalog)?;
        if model.config.vocab_size != catalog.vocab_size() || model.config.m_tot != catalog.m_tot() {
            return Err(Error::invalid("checkpoint and catalog disagree on the vocabulary"));
        }
        let text = load_text(embeddings, head.is_some(), catalog.item_count())?;
        Ok(Self {
            model,
            head,
            catalog,
            text,
        })
    }

    fn decoder(&self, restrict: bool, fuse: bool) -> Decoder<'_, f32> {
        let d = Decoder::new(&self.model, &self.catalog, restrict);
        match (&self.head, &self.text) {
            (Some(h), Some(t)) if fuse => d.with_fusion(h, t),
            _ => d,
        }
    }


    fn ranker(&self, cfg: &RunConfig, strategy: Strategy, nfe: Option<usize>, k_items: usize) -> Result<BeamRanker<'_, f32>> {
        let mut beam = cfg.infer.beam(cfg.seed);
        beam.strategy = strategy;
        beam.nfe = nfe;
        let unified = match cfg.eval.dense_mode {
            DenseMode::Off => None,
            DenseMode::Unified => {
                let (Some(h), Some(t)) = (&self.head, &self.text) else {
                    return Err(Error::Config("unified evaluation needs a dense checkpoint and embeddings".into()));
                };
                beam.width = cfg.dense.rerank_width;
                beam.top_k = cfg.dense.rerank_k;
                Some((joint(&self.model, h, t, &self.catalog, cfg.dense.fuse_text), cfg.dense.blend))
            }
        };
        Ok(BeamRanker {
            decoder: self.decoder(beam.restrict, cfg.dense.fuse_text),
            beam,
            max_context: crate::train::max_context(&self.model.config, self.catalog.m_tot(), cfg.train.max_items, k_items),
            unified,
        })
    }
}

/// One evaluated (strategy, NFE) combination.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRun {
    pub label: String,
    pub strategy: Strategy,
    pub nfe: Option<usize>,
    pub report: MetricReport,
}

/// Evaluates every requested (strategy, NFE) combination, writing one
/// report pair per combination and the NFE curve CSV.
pub fn evaluate(cfg: &RunConfig, loaded: &LoadedModel, split_path: &Path, out: &Path, inputs: &[&Path]) -> Result<Vec<EvalRun>> {
    require(split_path)?;
    let mut all_inputs = inputs.to_vec();
    all_inputs.push(split_path);
    init_run_dir(out, cfg, &all_inputs)?;
    let split = EvalSplit::read(split_path)?;
    let runs = evaluate_in_memory(cfg, loaded, &split, Some(out))?;
    let mut csv = String::from("strategy,nfe,nfe_mean,users");
    for k in &cfg.eval.ks {
        csv.push_str(&format!(",recall@{k},ndcg@{k}"));
    }
    csv.push('\n');
    for r in &runs {
        csv.push_str(&format!(
            "{},{},{},{}",
            r.strategy.name(),
            r.nfe.map_or(String::new(), |n| n.to_string()),
            r.report.nfe_mean,
            r.report.users
        ));
        for k in &cfg.eval.ks {
            csv.push_str(&format!(",{},{}", r.report.recall(*k), r.report.ndcg(*k)));
        }
        csv.push('\n');
    }
    write_file(&out.join(NFE_CSV), csv.as_bytes())?;
    Ok(runs)
}

/// The sweep of [`evaluate`]; writes per-combination files when `out` is set.
pub fn evaluate_in_memory(cfg: &RunConfig, loaded: &LoadedModel, split: &EvalSplit, out: Option<&Path>) -> Result<Vec<EvalRun>> {
    let strategies = if cfg.eval.strategies.is_empty() {
        vec![cfg.infer.strategy]
    } else {
        cfg.eval.strategies.clone()
    };
    let nfes: Vec<Option<usize>> = if cfg.eval.nfes.is_empty() {
        vec![cfg.infer.nfe]
    } else {
        cfg.eval.nfes.iter().map(|&n| Some(n)).collect()
    };
    let k_items = split.mode.targets();
    let mut runs = Vec::new();
    for &strategy in &strategies {
        for &nfe in &nfes {
            let ranker = loaded.ranker(cfg, strategy, nfe, k_items)?;
            let (report, users) = evaluate_split(
                &ranker,
                split,
                cfg.eval.target,
                &cfg.eval.ks,
                ranker.beam.width,
                cfg.eval.max_users,
                rng::derive(cfg.seed, &[0x4556_414C]),
            )?;
            let label = match nfe {
                Some(n) => format!("{}_nfe{n}", strategy.name()),
                None => strategy.name().to_string(),
            };
            if let Some(out) = out {
                write_file(&out.join(format!("report_{label}.json")), report.to_json().as_bytes())?;
                write_file(&out.join(format!("report_{label}.txt")), report.to_table().as_bytes())?;
                if cfg.eval.per_user_csv {
                    write_user_csv(&out.join(format!("users_{label}.csv")), &users, &cfg.eval.ks)?;
                }
            }
            runs.push(EvalRun {
                label,
                strategy,
                nfe,
                report,
            });
        }
    }
    Ok(runs)
}

#[derive(Debug, Clone, Serialize)]
struct Prediction {
    user: u32,
    context: Vec<u32>,
    predictions: Vec<Vec<u32>>,
    scores: Vec<f64>,
    short_list: bool,
}

/// Ranks the next `infer.k_items` items after each user's test context and
/// writes `predictions.jsonl`. Returns the number of users written.
pub fn infer(cfg: &RunConfig, loaded: &LoadedModel, split_path: &Path, out: &Path, inputs: &[&Path]) -> Result<usize> {
    use crate::evaluation::Ranker;
    require(split_path)?;
    let mut all_inputs = inputs.to_vec();
    all_inputs.push(split_path);
    init_run_dir(out, cfg, &all_inputs)?;
    let split = EvalSplit::read(split_path)?;
    let k_items = cfg.infer.k_items;
    let ranker = loaded.ranker(cfg, cfg.infer.strategy, cfg.infer.nfe, k_items)?;
    let users: Vec<_> = split.users.iter().take(cfg.eval.max_users.unwrap_or(usize::MAX)).collect();
    let mut lines = String::new();
    for (idx, u) in users.iter().enumerate() {
        let r = ranker.rank(&u.test_context, k_items, cfg.infer.top_k, rng::derive(cfg.seed, &[idx as u64]))?;
        let p = Prediction {
            user: u.user,
            context: u.test_context.clone(),
            predictions: r.sequences,
            scores: r.scores,
            short_list: r.short_list,
        };
        lines.push_str(&serde_json::to_string(&p)?);
        lines.push('\n');
    }
    write_file(&out.join("predictions.jsonl"), lines.as_bytes())?;
    Ok(users.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.synthetic.n_users = 60;
        cfg.data.synthetic.n_items = 16;
        cfg.data.synthetic.n_clusters = 4;
        cfg.data.synthetic.seq_len = 6;
        cfg.tokenizer.m = 2;
        cfg.tokenizer.c = 4;
        cfg.model.embed_dim = 16;
        cfg.model.heads = 2;
        cfg.model.mlp_hidden = 32;
        cfg.train.steps = 6;
        cfg.train.batch_size = 8;
        cfg.train.eval_every = 3;
        cfg.train.eval_users = Some(10);
        cfg.eval.max_users = Some(10);
        cfg
    }

    #[test]
    fn stages_chain_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let cfg = tiny();
        synth(&cfg, &d.join("data")).unwrap();
        let rep = tokenize(&cfg, &d.join("data/embeddings.bin"), &d.join("tok"), false).unwrap();
        assert_eq!(rep.layers.len(), 3);
        let inputs = TrainInputs {
            split: Some(d.join("data").join(SPLIT_FILE)),
            catalog: Some(d.join("tok").join(CATALOG_FILE)),
            ..Default::default()
        };
        let tr = train(&cfg, &inputs, &d.join("run")).unwrap();
        assert_eq!(tr.steps, 6);
        let loss = fs::read_to_string(d.join("run").join(LOSS_CSV)).unwrap();
        assert_eq!(loss.lines().count(), 7);
        let loaded = LoadedModel::load(&d.join("run").join(BEST_CKPT), &d.join("run").join(CATALOG_FILE), None).unwrap();
        let runs = evaluate(&cfg, &loaded, &d.join("data").join(SPLIT_FILE), &d.join("eval"), &[]).unwrap();
        assert_eq!(runs.len(), 1);
        assert!(d.join("eval/report_greedy.json").exists());
        assert!(d.join("eval").join(CONFIG_FILE).exists());
        assert_eq!(infer(&cfg, &loaded, &d.join("data").join(SPLIT_FILE), &d.join("inf"), &[]).unwrap(), 10);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let mut cfg = tiny();
        synth(&cfg, &d.join("data")).unwrap();
        let mk = |resume: Option<PathBuf>| TrainInputs {
            split: Some(d.join("data").join(SPLIT_FILE)),
            item_ids: true,
            resume,
            ..Default::default()
        };
        train(&cfg, &mk(None), &d.join("full")).unwrap();
        // stop on a validation step so both runs validate at the same steps
        cfg.train.steps = 3;
        train(&cfg, &mk(None), &d.join("part")).unwrap();
        cfg.train.steps = 6;
        train(&cfg, &mk(Some(d.join("part").join(LAST_CKPT))), &d.join("part")).unwrap();
        let same = fs::read(d.join("full").join(LAST_CKPT)).unwrap() == fs::read(d.join("part").join(LAST_CKPT)).unwrap();
        assert!(same, "resumed state differs");
        assert_eq!(
            fs::read_to_string(d.join("full").join(LOSS_CSV)).unwrap(),
            fs::read_to_string(d.join("part").join(LOSS_CSV)).unwrap()
        );
    }

    #[test]
    fn missing_embeddings_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nope.bin");
        let e = tokenize(&RunConfig::default(), &p, &dir.path().join("o"), false).unwrap_err();
        assert!(e.to_string().contains("nope.bin"));
    }
}
