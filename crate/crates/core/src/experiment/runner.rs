//! Config-driven training runs and their on-disk artifacts.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, OptimizerKind};
use crate::data::{self, Augment, BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::init::InitSpec;
use crate::metrics::{layer_diagnostics, topk_hits, LayerDiagnostics};
use crate::net::{build_architecture, cross_entropy, Checkpoint, InputNorm, Network};
use crate::optim::{clip_gradients, Adam, Optimizer, Sgd};

pub const CONFIG_FILE: &str = "config.yaml";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TEST_RESULTS_FILE: &str = "test_results.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_HEADER: &str = "step,layer,angle_deg,norm_ratio,train_loss,train_top1,val_top1,val_topk";

/// Train, validation and test sets ready for a run.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResults {
    pub evaluated: bool,
    pub top1: Option<f64>,
    pub topk: Option<f64>,
    pub k: usize,
    pub error_pct: Option<f64>,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_test_top1: Option<f64>,
    pub best_val_top1: f64,
    pub best_epoch: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub config: PathBuf,
    pub test_results: PathBuf,
    pub metrics: PathBuf,
    pub summary: RunSummary,
}

/// Sees the network at every logged step, diagnostics included.
pub trait RunObserver {
    fn on_log(&mut self, step: usize, net: &Network, diagnostics: &[LayerDiagnostics]);
}

impl RunObserver for () {
    fn on_log(&mut self, _: usize, _: &Network, _: &[LayerDiagnostics]) {}
}

/// Resizes images of `ds` to `target` if needed.
fn fit_size(ds: Dataset, target: usize, cfg: &ExperimentConfig) -> Result<Dataset> {
    let [_, h, w] = ds.image_shape();
    if h == target && w == target {
        return Ok(ds);
    }
    ds.resized(target, cfg.resize_method()?)
}

/// Loads the configured dataset and applies resizing, the validation split
/// and sample limits.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Splits> {
    let root = data::resolve_root(cfg.data.dataset_path.as_deref());
    let (train, test) = data::load(cfg.dataset()?, &root)?;
    split_data(cfg, train, test)
}

/// [`prepare_data`] for already-loaded train and test sets.
pub fn split_data(cfg: &ExperimentConfig, train: Dataset, test: Dataset) -> Result<Splits> {
    let (train, test) = match cfg.data.target_size {
        Some(t) => (fit_size(train, t, cfg)?, fit_size(test, t, cfg)?),
        None => (train, test),
    };
    let (mut train, val) = data::split_validation(&train, cfg.data.validation_size, cfg.experiment.seed)
        .map_err(|e| Error::config("data.validation_size", e.to_string()))?;
    if let Some(n) = cfg.data.train_limit {
        train = train.head(n);
    }
    let test = match cfg.data.test_limit {
        Some(n) => test.head(n),
        None => test,
    };
    Ok(Splits { train, val, test })
}

/// Builds the configured network, with input statistics from `train`.
pub fn build_network(cfg: &ExperimentConfig, train: &Dataset) -> Result<Network> {
    let init = InitSpec {
        forward: cfg.forward_init()?,
    };
    let mut net = build_architecture(&cfg.model.architecture, cfg.mode()?, &init, cfg.experiment.seed)?;
    let shape = train.image_shape();
    if net.input_shape() != shape {
        return Err(Error::config(
            "data.target_size",
            format!(
                "{} expects {:?} inputs but the data is {:?}",
                cfg.model.architecture,
                net.input_shape(),
                shape
            ),
        ));
    }
    if train.classes() != net.classes() {
        return Err(Error::config(
            "data.dataset",
            format!("{} classes but the network predicts {}", train.classes(), net.classes()),
        ));
    }
    if cfg.data.normalize {
        let (mean, std) = train.channel_stats()?;
        net.set_input_norm(Some(InputNorm { mean, std }))?;
    }
    if let Some(path) = &cfg.model.checkpoint {
        crate::net::load_checkpoint(Path::new(path))?.restore(&mut net)?;
    }
    Ok(net)
}

pub fn build_optimizer(cfg: &ExperimentConfig) -> Result<Optimizer> {
    let o = &cfg.training.optimizer;
    Ok(match cfg.optimizer_kind()? {
        OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(o.lr, o.momentum, o.weight_decay)),
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(o.lr, (o.betas[0], o.betas[1]), o.weight_decay)),
    })
}

/// Top-1 and top-k accuracy in evaluation mode.
pub fn evaluate(net: &Network, ds: &Dataset, batch_size: usize, k: usize) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let (mut top1, mut topk) = (0, 0);
    for (x, y) in BatchIterator::sequential(ds, batch_size)? {
        let logits = net.predict(&x)?;
        top1 += topk_hits(&logits, &y, 1)?;
        topk += topk_hits(&logits, &y, k)?;
    }
    let n = ds.len();
    Ok(Evaluation {
        top1: top1 as f64 / n as f64,
        topk: topk as f64 / n as f64,
        k,
        n_samples: n,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

struct MetricLog<W: Write> {
    out: W,
}

impl<W: Write> MetricLog<W> {
    fn row(&mut self, cells: [String; 8]) -> std::io::Result<()> {
        writeln!(self.out, "{}", cells.join(","))
    }

    fn train(&mut self, step: usize, loss: Option<f64>, top1: Option<f64>) -> std::io::Result<()> {
        let e = String::new;
        self.row([step.to_string(), e(), e(), e(), opt(loss), opt(top1), e(), e()])
    }

    fn layers(&mut self, step: usize, d: &[LayerDiagnostics], angle: bool, ratio: bool) -> std::io::Result<()> {
        let e = String::new;
        for l in d {
            let a = if angle { opt(l.angle_deg) } else { e() };
            let r = if ratio { l.norm_ratio.to_string() } else { e() };
            self.row([step.to_string(), l.layer.to_string(), a, r, e(), e(), e(), e()])?;
        }
        Ok(())
    }

    fn val(&mut self, step: usize, ev: &Evaluation) -> std::io::Result<()> {
        let e = String::new;
        self.row([step.to_string(), e(), e(), e(), e(), e(), ev.top1.to_string(), ev.topk.to_string()])
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(format!("writing {}", path.display()), e)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Loads data per the config and runs it.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let splits = prepare_data(cfg)?;
    run_with_data(cfg, &splits, &mut ())
}

/// Trains, selects the best validation checkpoint, optionally evaluates it
/// on the test set and writes everything to `output_dir/name/`. Nothing is
/// left behind on failure.
pub fn run_with_data(cfg: &ExperimentConfig, splits: &Splits, observer: &mut dyn RunObserver) -> Result<RunArtifacts> {
    cfg.validate()?;
    let parent = PathBuf::from(&cfg.experiment.output_dir);
    let dir = parent.join(&cfg.experiment.name);
    let partial = parent.join(format!(".{}.partial", cfg.experiment.name));
    if partial.exists() {
        fs::remove_dir_all(&partial).map_err(|e| Error::io(format!("clearing {}", partial.display()), e))?;
    }
    fs::create_dir_all(&partial).map_err(|e| Error::io(format!("creating {}", partial.display()), e))?;
    let outcome = execute(cfg, splits, &partial, observer);
    let summary = match outcome {
        Ok(s) => s,
        Err(e) => {
            let _ = fs::remove_dir_all(&partial);
            return Err(e);
        }
    };
    if dir.exists() {
        log::warn!("replacing existing run directory {}", dir.display());
        fs::remove_dir_all(&dir).map_err(|e| Error::io(format!("removing {}", dir.display()), e))?;
    }
    fs::rename(&partial, &dir).map_err(|e| Error::io(format!("moving results to {}", dir.display()), e))?;
    Ok(RunArtifacts {
        checkpoint: dir.join(CHECKPOINT_FILE),
        config: dir.join(CONFIG_FILE),
        test_results: dir.join(TEST_RESULTS_FILE),
        metrics: dir.join(METRICS_FILE),
        dir,
        summary,
    })
}

fn execute(cfg: &ExperimentConfig, splits: &Splits, out: &Path, observer: &mut dyn RunObserver) -> Result<RunSummary> {
    let started = Instant::now();
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_yaml()).map_err(io_err(&config_path))?;

    let seed = cfg.experiment.seed;
    let batch = cfg.batch_size();
    let m = &cfg.training.metrics;
    let k = m.top_k;
    let (angle, ratio) = (m.weight_alignment, m.weight_ratio);
    let clip = cfg.model.mode.options.gradient_clip;
    let schedule = cfg.schedule()?;
    let augment = cfg.augment()?.then(Augment::default);
    let base_lr = cfg.training.optimizer.lr;

    let mut net = build_network(cfg, &splits.train)?;
    let mut optimizer = build_optimizer(cfg)?;

    let metrics_path = out.join(METRICS_FILE);
    let file = fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    let mut log = MetricLog { out: BufWriter::new(file) };
    let werr = io_err(&metrics_path);
    writeln!(log.out, "{METRICS_HEADER}").map_err(&werr)?;

    let mut step = 0;
    let log_layers = |step: usize, net: &Network, log: &mut MetricLog<_>, observer: &mut dyn RunObserver| {
        let d = layer_diagnostics(net);
        observer.on_log(step, net, &d);
        if angle || ratio {
            log.layers(step, &d, angle, ratio)?;
        }
        std::io::Result::Ok(())
    };
    log.train(0, None, None).map_err(&werr)?;
    log_layers(0, &net, &mut log, observer).map_err(&werr)?;

    let mut best = None::<(f64, usize, Checkpoint)>;
    if cfg.epochs() == 0 {
        let ev = evaluate(&net, &splits.val, batch, k)?;
        log.val(0, &ev).map_err(&werr)?;
        best = Some((ev.top1, 0, Checkpoint::of(&net)));
    }
    let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
    for epoch in 0..cfg.epochs() {
        let lr = schedule.lr_at(base_lr, epoch);
        optimizer.set_lr(lr);
        let (mut ep_loss, mut ep_batches) = (0.0, 0usize);
        for (x, y) in BatchIterator::shuffled(&splits.train, batch, seed, epoch, augment)? {
            let (logits, cache) = net.forward(&x)?;
            let (loss, delta) = cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::invalid("train", format!("loss diverged at step {step}")));
            }
            let mut grads = net.backward(&delta, &cache)?;
            if clip {
                clip_gradients(&mut grads, 1.0);
            }
            optimizer.step(&mut net.parameters_mut(), &grads)?;
            step += 1;
            loss_sum += loss * y.len() as f64;
            hits += topk_hits(&logits, &y, 1)?;
            seen += y.len();
            ep_loss += loss;
            ep_batches += 1;
            if step % m.display_iterations == 0 {
                log.train(step, Some(loss_sum / seen as f64), Some(hits as f64 / seen as f64))
                    .map_err(&werr)?;
                log_layers(step, &net, &mut log, observer).map_err(&werr)?;
                (loss_sum, hits, seen) = (0.0, 0, 0);
            }
        }
        let ev = evaluate(&net, &splits.val, batch, k)?;
        log.val(step, &ev).map_err(&werr)?;
        log::info!(
            "epoch {}/{}: lr {lr}, train loss {:.4}, val top-1 {:.4}",
            epoch + 1,
            cfg.epochs(),
            ep_loss / ep_batches.max(1) as f64,
            ev.top1
        );
        if best.as_ref().is_none_or(|b| ev.top1 > b.0) {
            best = Some((ev.top1, epoch + 1, Checkpoint::of(&net)));
        }
    }
    log.out.flush().map_err(&werr)?;
    drop(log);

    let (best_val, best_epoch, ckpt) = best.expect("at least one validation pass");
    let ckpt_path = out.join(CHECKPOINT_FILE);
    {
        let file = fs::File::create(&ckpt_path).map_err(io_err(&ckpt_path))?;
        let mut w = BufWriter::new(file);
        ckpt.write_to(&mut w).and_then(|_| w.flush()).map_err(io_err(&ckpt_path))?;
    }

    let test = if cfg.evaluation {
        ckpt.restore(&mut net)?;
        Some(evaluate(&net, &splits.test, batch, k)?)
    } else {
        None
    };
    write_json(
        &out.join(TEST_RESULTS_FILE),
        &TestResults {
            evaluated: test.is_some(),
            top1: test.map(|t| t.top1),
            topk: test.map(|t| t.topk),
            k,
            error_pct: test.map(|t| 100.0 * (1.0 - t.top1)),
            n_samples: test.map_or(0, |t| t.n_samples),
        },
    )?;
    let summary = RunSummary {
        final_test_top1: test.map(|t| t.top1),
        best_val_top1: best_val,
        best_epoch,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}
