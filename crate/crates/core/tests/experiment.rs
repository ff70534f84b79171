use std::fs;
use std::path::Path;

use pefll_core::analysis::{parse_metrics_csv, BoundConfig};
use pefll_core::data::{dataset_to_csv, DatasetFormat};
use pefll_core::experiment::{
    analyze_checkpoint, eval_checkpoint, predict_cli, run, Algorithm, Checkpoint, ExperimentConfig, ExperimentError,
    ModelState, PredictRequest, TransportKind, CHECKPOINT_FILE, METRICS_FILE,
};
use pefll_core::models::EmbeddingKind;
use pefll_core::nn::decode_fragment;
use tempfile::TempDir;

fn small(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(
        "data.classes = 4\n\
         data.per_class = 40\n\
         data.image_size = 16\n\
         data.channels = 1\n\
         data.clients = 10\n\
         data.classes_per_client = 2\n\
         model.hyper = S\n\
         model.hidden_width = 32\n\
         model.descriptor_dim = 3\n\
         train.local_steps = 2\n\
         train.clients_per_round = 3\n\
         train.descriptor_batch = 8\n\
         train.local_batch = 8\n\
         run.rounds = 6\n\
         run.eval_every = 2\n\
         eval.predict_batch = 8\n\
         eval.mask = true\n\
         eval.grad_norm = true\n\
         eval.spearman = true\n",
    )
    .unwrap();
    cfg.run.out = out.to_path_buf();
    cfg
}

fn metrics(dir: &Path) -> String {
    fs::read_to_string(dir.join(METRICS_FILE)).unwrap()
}

#[test]
fn rows_cover_rounds_and_bytes() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(tmp.path());
    let outcome = run(&cfg, false).unwrap();
    let rounds: Vec<u32> = outcome.rows.iter().map(|r| r.round).collect();
    assert_eq!(rounds, [0, 2, 4, 6]);
    assert_eq!(outcome.rows[0].bytes_up, 0);
    assert!(outcome.rows[1..].iter().all(|r| r.bytes_up > 0 && r.bytes_down > 0));
    assert!(outcome.rows.iter().all(|r| r.unseen_client_acc.is_some() && r.mean_grad_norm_sq.is_some()));
    assert_eq!(parse_metrics_csv(&metrics(tmp.path())).unwrap(), outcome.rows);
    let ck = Checkpoint::load(&tmp.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.round, 6);
    assert_eq!(ck.config().unwrap(), cfg);
}

#[test]
fn rerun_and_resume_are_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let full = run(&small(a.path()), false).unwrap();
    let again = run(&small(b.path()), false).unwrap();
    assert_eq!(metrics(a.path()), metrics(b.path()));
    assert_eq!(full.state, again.state);

    let c = TempDir::new().unwrap();
    let mut short = small(c.path());
    short.run.rounds = 4;
    run(&short, false).unwrap();
    let resumed = run(&small(c.path()), true).unwrap();
    assert_eq!(resumed.state, full.state);
    assert_eq!(metrics(c.path()), metrics(a.path()));
}

#[test]
fn resume_rejects_other_config() {
    let tmp = TempDir::new().unwrap();
    run(&small(tmp.path()), false).unwrap();
    let mut other = small(tmp.path());
    other.train.beta *= 2.0;
    assert!(matches!(run(&other, true), Err(ExperimentError::Checkpoint(_))));
}

#[test]
fn tcp_matches_loopback() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let lo = run(&small(a.path()), false).unwrap();
    let mut cfg = small(b.path());
    cfg.run.transport = TransportKind::Tcp;
    let tcp = run(&cfg, false).unwrap();
    assert_eq!(lo.state, tcp.state);
    assert_eq!(metrics(a.path()), metrics(b.path()));
}

#[test]
fn baselines_run() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small(tmp.path());
    cfg.run.algorithm = Algorithm::FedAvg;
    let fed = run(&cfg, false).unwrap();
    assert!(matches!(fed.state, ModelState::FedAvg(_)));
    assert_eq!(fed.rows.len(), 4);
    assert!(fed.rows.iter().all(|r| r.spearman.is_none() && r.mean_grad_norm_sq.is_none()));

    cfg.run.algorithm = Algorithm::Local;
    cfg.train.local_epochs = 1;
    let local = run(&cfg, false).unwrap();
    assert_eq!(local.rows.len(), 1);
    assert!(local.rows[0].train_client_acc > 0.0);
}

fn client_file(dir: &Path) -> std::path::PathBuf {
    let tmp_cfg = small(dir);
    let setup = pefll_core::experiment::Setup::new(&tmp_cfg).unwrap();
    let client = &setup.population.clients[setup.population.unseen_ids[0] as usize];
    let sub = setup.dataset.subset(&client.train);
    let path = dir.join("client.csv");
    fs::write(&path, dataset_to_csv(&sub)).unwrap();
    path
}

#[test]
fn predict_writes_model_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let run_dir = tmp.path().join("run");
    run(&small(&run_dir), false).unwrap();
    let data = client_file(tmp.path());
    let req = |out: &str, unlabeled| PredictRequest {
        checkpoint: run_dir.join(CHECKPOINT_FILE),
        data: data.clone(),
        format: DatasetFormat::Csv,
        unlabeled,
        out: tmp.path().join(out),
        batch: 8,
        seed: 5,
    };
    let first = predict_cli(&req("a.bin", false)).unwrap();
    let second = predict_cli(&req("b.bin", false)).unwrap();
    let a = fs::read(&first.model_path).unwrap();
    assert_eq!(a, fs::read(&second.model_path).unwrap());
    let mut pos = 0;
    let (dims, values) = decode_fragment::<f32>(&a, &mut pos).unwrap();
    assert_eq!(dims, [first.params]);
    assert!(values.iter().all(|v| v.is_finite()));
    let manifest = fs::read_to_string(&first.manifest_path).unwrap();
    assert!(manifest.contains(&format!("params = {}", first.params)));
    assert!(manifest.contains("checkpoint_round = 6"));
    predict_cli(&req("c.bin", true)).unwrap();
}

#[test]
fn unlabeled_linear_embedding_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let run_dir = tmp.path().join("run");
    let mut cfg = small(&run_dir);
    cfg.model.embedding = EmbeddingKind::LinearOneHot;
    cfg.run.rounds = 2;
    run(&cfg, false).unwrap();
    let data = client_file(tmp.path());
    let err = predict_cli(&PredictRequest {
        checkpoint: run_dir.join(CHECKPOINT_FILE),
        data,
        format: DatasetFormat::Csv,
        unlabeled: true,
        out: tmp.path().join("m.bin"),
        batch: 8,
        seed: 0,
    })
    .unwrap_err();
    assert!(matches!(err, ExperimentError::Config { .. }), "{err}");
}

#[test]
fn eval_and_analyze_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let outcome = run(&small(tmp.path()), false).unwrap();
    let ck = tmp.path().join(CHECKPOINT_FILE);
    let (seen, unseen) = eval_checkpoint(&ck, None).unwrap();
    let last = outcome.rows.last().unwrap();
    assert_eq!(seen, last.train_client_acc);
    assert_eq!(unseen, last.unseen_client_acc);
    let (unmasked, _) = eval_checkpoint(&ck, Some(false)).unwrap();
    assert!(unmasked <= seen);
    let report = analyze_checkpoint(&ck, &BoundConfig { samples: 2, ..BoundConfig::default() }).unwrap();
    assert_eq!(report.round, 6);
    assert!(report.bound.mean.is_finite() && report.grad_norm_sq >= 0.0);
}
