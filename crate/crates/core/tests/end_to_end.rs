#![allow(clippy::field_reassign_with_default)]

use std::path::Path;

use maskrec::checkpoint::Checkpoint;
use maskrec::config::RunConfig;
use maskrec::data::{EvalSplit, SplitMode, SyntheticConfig};
use maskrec::pipeline::{self, LoadedModel, TrainInputs};
use maskrec::tokenizer::SidCatalog;
use maskrec::train::TrainState;

fn config(split: SplitMode) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.data.split = split;
    cfg.data.synthetic = SyntheticConfig {
        n_users: 120,
        n_items: 32,
        n_clusters: 4,
        seq_len: 9,
        seed: 3,
        ..SyntheticConfig::default()
    };
    cfg.tokenizer.m = 2;
    cfg.tokenizer.c = 4;
    cfg.tokenizer.iters = 20;
    cfg.model.embed_dim = 16;
    cfg.model.mlp_hidden = 32;
    cfg.train.steps = 12;
    cfg.train.batch_size = 8;
    cfg.train.eval_every = 6;
    cfg.train.eval_users = Some(20);
    cfg.eval.max_users = Some(30);
    cfg
}

fn prepare(cfg: &RunConfig, dir: &Path) -> TrainInputs {
    pipeline::synth(cfg, dir).unwrap();
    pipeline::tokenize(cfg, &dir.join("embeddings.bin"), &dir.join("tok"), false).unwrap();
    TrainInputs {
        split: Some(dir.join(pipeline::SPLIT_FILE)),
        catalog: Some(dir.join("tok").join(pipeline::CATALOG_FILE)),
        ..TrainInputs::default()
    }
}

#[test]
fn trained_model_reloads_and_ranks_users() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(SplitMode::LeaveOneOut);
    let inputs = prepare(&cfg, dir.path());
    let out = dir.path().join("train");
    let report = pipeline::train(&cfg, &inputs, &out).unwrap();
    assert_eq!(report.steps, 12);
    assert!(report.final_loss.is_finite());

    let last = TrainState::<f32>::from_checkpoint(&Checkpoint::read(&out.join(pipeline::LAST_CKPT)).unwrap()).unwrap();
    assert_eq!(last.step, 12);

    let catalog = out.join(pipeline::CATALOG_FILE);
    let loaded = LoadedModel::load(&out.join(pipeline::BEST_CKPT), &catalog, None).unwrap();
    let split_path = out.join(pipeline::SPLIT_FILE);
    let split = EvalSplit::read(&split_path).unwrap();
    let a = pipeline::evaluate_in_memory(&cfg, &loaded, &split, None).unwrap();
    let again = LoadedModel::load(&out.join(pipeline::BEST_CKPT), &catalog, None).unwrap();
    let b = pipeline::evaluate_in_memory(&cfg, &again, &split, None).unwrap();
    assert_eq!(a[0].report, b[0].report);

    let written = pipeline::infer(&cfg, &loaded, &split_path, &dir.path().join("infer"), &[]).unwrap();
    assert_eq!(written, 30);
    let lines = std::fs::read_to_string(dir.path().join("infer").join("predictions.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), written);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let preds = v["predictions"].as_array().unwrap();
        assert!(!preds.is_empty() && preds.len() <= cfg.infer.top_k);
    }
}

#[test]
fn leave_two_out_scores_item_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(SplitMode::LeaveTwoOut);
    cfg.infer.k_items = 2;
    let inputs = prepare(&cfg, dir.path());
    let out = dir.path().join("train");
    pipeline::train(&cfg, &inputs, &out).unwrap();
    let loaded = LoadedModel::load(&out.join(pipeline::BEST_CKPT), &out.join(pipeline::CATALOG_FILE), None).unwrap();
    let split = EvalSplit::read(&out.join(pipeline::SPLIT_FILE)).unwrap();
    assert!(split.users.iter().all(|u| u.test_targets.len() == 2));
    let runs = pipeline::evaluate_in_memory(&cfg, &loaded, &split, None).unwrap();
    let r = &runs[0].report;
    assert_eq!(r.users, 30);
    for m in &r.metrics {
        assert!(m.ndcg <= m.recall + 1e-12);
    }
    // Two items of m_tot slots each, one slot per evaluation.
    assert_eq!(r.nfe_max, 2 * loaded.catalog.m_tot());
}

#[test]
fn item_id_mode_needs_no_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(SplitMode::LeaveOneOut);
    pipeline::synth(&cfg, dir.path()).unwrap();
    let inputs = TrainInputs {
        split: Some(dir.path().join(pipeline::SPLIT_FILE)),
        item_ids: true,
        ..TrainInputs::default()
    };
    let out = dir.path().join("train");
    pipeline::train(&cfg, &inputs, &out).unwrap();
    let catalog = SidCatalog::read(&out.join(pipeline::CATALOG_FILE)).unwrap();
    assert_eq!((catalog.m(), catalog.c(), catalog.m_tot()), (1, 32, 2));
    let loaded = LoadedModel::load(&out.join(pipeline::BEST_CKPT), &out.join(pipeline::CATALOG_FILE), None).unwrap();
    let split = EvalSplit::read(&out.join(pipeline::SPLIT_FILE)).unwrap();
    let runs = pipeline::evaluate_in_memory(&cfg, &loaded, &split, None).unwrap();
    assert_eq!(runs[0].report.short_lists, 0);
}
