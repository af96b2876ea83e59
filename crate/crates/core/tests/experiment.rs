mod common;

use std::fs;

use bioprop::data::{self, DatasetKind};
use bioprop::experiment::cli;
use bioprop::experiment::runner::{self, evaluate, split_data, CHECKPOINT_FILE, METRICS_FILE, TEST_RESULTS_FILE};
use bioprop::experiment::{load_config, run_benchmark, ExperimentConfig};
use bioprop::net::load_checkpoint;
use common::{run_dir, smoke_config, val_rows, write_mnist};
use tempfile::TempDir;

fn setup(learnable: bool) -> (TempDir, ExperimentConfig) {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    write_mnist(&data, 700, 300, 1, learnable);
    let mut cfg = smoke_config(&data, &tmp.path().join("runs"));
    cfg.data.train_limit = None;
    cfg.data.test_limit = None;
    cfg.data.validation_size = 100;
    cfg.training.hyperparameters.epochs = 3;
    cfg.training.hyperparameters.batch_size = 32;
    cfg.training.optimizer.lr = 0.01;
    (tmp, cfg)
}

fn write_config(tmp: &TempDir, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let p = tmp.path().join("config.yaml");
    fs::write(&p, cfg.to_yaml()).unwrap();
    p
}

#[test]
fn benchmark_command_writes_all_artifacts() {
    let (tmp, cfg) = setup(true);
    let path = write_config(&tmp, &cfg);
    assert_eq!(cli::run(["bioprop", "benchmark", "--config", path.to_str().unwrap()]), 0);
    let dir = run_dir(&cfg);
    for f in [CHECKPOINT_FILE, runner::CONFIG_FILE, TEST_RESULTS_FILE, METRICS_FILE, runner::SUMMARY_FILE] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    // The stored copy re-parses to the executed config.
    assert_eq!(load_config(&dir.join(runner::CONFIG_FILE)).unwrap(), load_config(&path).unwrap());
    let leftovers: Vec<_> = fs::read_dir(tmp.path().join("runs")).unwrap().collect();
    assert_eq!(leftovers.len(), 1);
    let results: runner::TestResults =
        serde_json::from_str(&fs::read_to_string(dir.join(TEST_RESULTS_FILE)).unwrap()).unwrap();
    assert!(results.evaluated);
    assert!(results.top1.unwrap() > 0.5, "{results:?}");
}

#[test]
fn same_seed_gives_identical_bytes() {
    let (tmp, mut cfg) = setup(true);
    cfg.model.mode.kind = "brsf".into();
    let a = run_benchmark(&cfg).unwrap();
    cfg.experiment.output_dir = tmp.path().join("again").display().to_string();
    let b = run_benchmark(&cfg).unwrap();
    for f in [METRICS_FILE, CHECKPOINT_FILE, TEST_RESULTS_FILE] {
        assert_eq!(fs::read(a.dir.join(f)).unwrap(), fs::read(b.dir.join(f)).unwrap(), "{f}");
    }
    cfg.experiment.seed += 1;
    cfg.experiment.output_dir = tmp.path().join("other").display().to_string();
    let c = run_benchmark(&cfg).unwrap();
    assert_ne!(fs::read(a.dir.join(CHECKPOINT_FILE)).unwrap(), fs::read(c.dir.join(CHECKPOINT_FILE)).unwrap());
}

#[test]
fn stored_checkpoint_has_the_best_logged_validation_accuracy() {
    let (_tmp, mut cfg) = setup(true);
    cfg.training.hyperparameters.epochs = 4;
    let a = run_benchmark(&cfg).unwrap();
    let logged = val_rows(&fs::read_to_string(&a.metrics).unwrap());
    assert_eq!(logged.len(), 4);
    let best = logged.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let root = data::resolve_root(cfg.data.dataset_path.as_deref());
    let (train, test) = data::load(DatasetKind::Mnist, &root).unwrap();
    let splits = split_data(&cfg, train, test).unwrap();
    let net = load_checkpoint(&a.checkpoint).unwrap().to_network().unwrap();
    assert_eq!(evaluate(&net, &splits.val, 64, 5).unwrap().top1, best);
    assert_eq!(a.summary.best_val_top1, best);
    // Ties go to the earlier epoch.
    let first = logged.iter().position(|r| r.1 == best).unwrap();
    assert_eq!(a.summary.best_epoch, first + 1);
}

#[test]
fn untrained_model_scores_near_chance() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    write_mnist(&data, 600, 1000, 2, false);
    let mut cfg = smoke_config(&data, &tmp.path().join("runs"));
    cfg.data.train_limit = None;
    cfg.data.test_limit = None;
    cfg.training.hyperparameters.epochs = 0;
    let a = run_benchmark(&cfg).unwrap();
    assert!(a.checkpoint.is_file() && a.metrics.is_file() && a.config.is_file());
    let top1 = a.summary.final_test_top1.unwrap();
    assert!((top1 - 0.10).abs() <= 0.03, "{top1}");
}

#[test]
fn failed_run_leaves_nothing_behind() {
    let (tmp, mut cfg) = setup(true);
    cfg.model.checkpoint = Some(tmp.path().join("missing.ckpt").display().to_string());
    assert!(run_benchmark(&cfg).is_err());
    let left: Vec<_> = fs::read_dir(tmp.path().join("runs")).unwrap().collect();
    assert!(left.is_empty(), "{left:?}");

    let (tmp, mut cfg) = setup(true);
    cfg.data.dataset_path = Some(tmp.path().join("nowhere").display().to_string());
    let path = write_config(&tmp, &cfg);
    assert_eq!(cli::run(["bioprop", "benchmark", "--config", path.to_str().unwrap()]), 1);
    assert!(!run_dir(&cfg).exists());
}

#[test]
fn attack_report_and_eval_commands() {
    let (tmp, cfg) = setup(true);
    let path = write_config(&tmp, &cfg);
    let p = path.to_str().unwrap();
    assert_eq!(cli::run(["bioprop", "benchmark", "--config", p]), 0);
    let dir = run_dir(&cfg);
    assert_eq!(
        cli::run(["bioprop", "attack", "--config", p, "--attack", "fgsm", "--grid", "0,0.05,0.1", "--samples", "80"]),
        0
    );
    let csv = fs::read_to_string(dir.join("attack_fgsm.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "attack,param_grid_value,n_samples,accuracy");
    assert_eq!(lines.len(), 4);
    for (l, g) in lines[1..].iter().zip(["0", "0.05", "0.1"]) {
        let c: Vec<&str> = l.split(',').collect();
        assert_eq!((c[0], c[1], c[2]), ("fgsm", g, "80"));
        let acc: f64 = c[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    let out = tmp.path().join("sq.csv");
    let args = [
        "bioprop", "attack", "--config", p, "--attack", "square", "--grid", "0.1", "--samples", "5", "--queries", "20",
        "--output", out.to_str().unwrap(),
    ];
    assert_eq!(cli::run(args), 0);
    assert!(fs::read_to_string(&out).unwrap().starts_with("attack,param_grid_value"));
    let args = [
        "bioprop", "attack", "--config", p, "--attack", "few_pixel", "--grid", "1", "--samples", "3", "--population",
        "8", "--iterations", "2",
    ];
    assert_eq!(cli::run(args), 0);
    assert_eq!(cli::run(["bioprop", "attack", "--config", p, "--attack", "deepfool"]), 1);

    assert_eq!(cli::run(["bioprop", "report", "--run-dir", dir.to_str().unwrap()]), 0);
    assert!(dir.join("report_accuracy.csv").is_file() && dir.join("report_alignment.csv").is_file());

    let ckpt = dir.join(CHECKPOINT_FILE);
    let root = cfg.data.dataset_path.clone().unwrap();
    let args = ["bioprop", "eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", "mnist", "--data-root", &root];
    assert_eq!(cli::run(args), 0);
    assert_eq!(cli::run(["bioprop", "eval", "--checkpoint", ckpt.to_str().unwrap()]), 1);
}
