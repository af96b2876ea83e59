//! Command-line interface.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use super::config::load_config;
use super::runner::{self, evaluate, prepare_data, METRICS_FILE, SUMMARY_FILE, TEST_RESULTS_FILE};
use crate::attacks::{robustness_curve, AttackKind, AttackSettings, GradientModel, RobustnessCurve, TrueGradient};
use crate::data::{self, ResizeMethod};
use crate::error::{Error, Result};
use crate::net::load_checkpoint;

#[derive(Debug, Parser)]
#[command(name = "bioprop", version, about = "Train and attack networks with feedback-alignment backward passes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and evaluate the experiment described by a config file.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
    },
    /// Robustness curve of a trained checkpoint under one attack.
    Attack(AttackArgs),
    /// Summarize a run directory and write plot-ready CSVs into it.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Test-set accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: String,
        /// Dataset root; defaults to $BIOPROP_DATA_ROOT, then ./data.
        #[arg(long)]
        data_root: Option<String>,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// Evaluate only the first N test images.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value = "pad")]
        resize: String,
    },
}

#[derive(Debug, Args)]
struct AttackArgs {
    #[arg(long)]
    config: PathBuf,
    /// fgsm, pgd, apgd, tpgd, few_pixel or square.
    #[arg(long)]
    attack: String,
    /// Defaults to best.ckpt in the config's run directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated eps values (pixel counts for few_pixel).
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Number of test images; black-box attacks default to 500.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    /// Iterations of PGD, APGD and TPGD.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Square-attack query budget per image.
    #[arg(long, default_value_t = 1000)]
    queries: usize,
    /// Few-Pixel population size.
    #[arg(long, default_value_t = 400)]
    population: usize,
    /// Few-Pixel generations.
    #[arg(long, default_value_t = 75)]
    iterations: usize,
    /// Use backpropagated input gradients whatever the training mode.
    #[arg(long)]
    true_gradient: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to attack_<name>.csv in the run directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<String> {
    match cmd {
        Command::Benchmark { config } => benchmark(&config),
        Command::Attack(a) => attack(&a),
        Command::Report { run_dir } => report(&run_dir),
        Command::Eval {
            checkpoint,
            dataset,
            data_root,
            batch_size,
            top_k,
            limit,
            resize,
        } => eval(&checkpoint, &dataset, data_root.as_deref(), batch_size, top_k, limit, &resize),
    }
}

fn benchmark(path: &Path) -> Result<String> {
    let cfg = load_config(path)?;
    let a = runner::run_benchmark(&cfg)?;
    let mut out = format!("run directory: {}\n", a.dir.display());
    writeln!(out, "best validation top-1: {:.4} (epoch {})", a.summary.best_val_top1, a.summary.best_epoch).unwrap();
    if let Some(t) = a.summary.final_test_top1 {
        writeln!(out, "test top-1: {t:.4} (error {:.2}%)", 100.0 * (1.0 - t)).unwrap();
    }
    writeln!(out, "wall time: {:.1}s", a.summary.wall_time_s).unwrap();
    Ok(out)
}

fn attack(a: &AttackArgs) -> Result<String> {
    let cfg = load_config(&a.config)?;
    let kind: AttackKind = a.attack.parse()?;
    let run_dir = Path::new(&cfg.experiment.output_dir).join(&cfg.experiment.name);
    let ckpt_path = a.checkpoint.clone().unwrap_or_else(|| run_dir.join(runner::CHECKPOINT_FILE));
    let net = load_checkpoint(&ckpt_path)?.to_network()?;
    let splits = prepare_data(&cfg)?;
    let grid = a.grid.clone().unwrap_or_else(|| kind.default_grid());
    let samples = a.samples.or(kind.default_sample_limit());
    let settings = AttackSettings {
        steps: a.steps,
        square_queries: a.queries,
        few_pixel: crate::attacks::FewPixelParams {
            population: a.population,
            iterations: a.iterations,
            ..Default::default()
        },
        seed: a.seed,
        ..AttackSettings::default()
    };
    let bp = TrueGradient(&net);
    let model: &dyn GradientModel = if a.true_gradient { &bp } else { &net };
    let curve = robustness_curve(model, &splits.test, kind, &grid, samples, a.batch_size, &settings)?;
    let text = curve_csv(&curve);
    let out_path = a.output.clone().unwrap_or_else(|| run_dir.join(format!("attack_{kind}.csv")));
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(&out_path, &text).map_err(|e| Error::io(format!("writing {}", out_path.display()), e))?;
    Ok(format!("{text}written to {}\n", out_path.display()))
}

pub fn curve_csv(curve: &RobustnessCurve) -> String {
    let mut s = format!("{}\n", RobustnessCurve::CSV_HEADER);
    for row in curve.csv_rows() {
        s.push_str(&row);
        s.push('\n');
    }
    s
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn report(dir: &Path) -> Result<String> {
    let mut out = String::new();
    let summary: runner::RunSummary = serde_json::from_str(&read(&dir.join(SUMMARY_FILE))?)
        .map_err(|e| Error::Format {
            path: dir.join(SUMMARY_FILE),
            msg: e.to_string(),
        })?;
    let tests: runner::TestResults = serde_json::from_str(&read(&dir.join(TEST_RESULTS_FILE))?)
        .map_err(|e| Error::Format {
            path: dir.join(TEST_RESULTS_FILE),
            msg: e.to_string(),
        })?;
    writeln!(out, "run: {}", dir.display()).unwrap();
    writeln!(out, "best validation top-1: {:.4} (epoch {})", summary.best_val_top1, summary.best_epoch).unwrap();
    match (tests.top1, tests.topk) {
        (Some(t1), Some(tk)) => writeln!(
            out,
            "test top-1: {t1:.4}  top-{}: {tk:.4}  error: {:.2}%  ({} images)",
            tests.k,
            100.0 * (1.0 - t1),
            tests.n_samples
        )
        .unwrap(),
        _ => writeln!(out, "test set not evaluated").unwrap(),
    }

    let metrics_path = dir.join(METRICS_FILE);
    let metrics = read(&metrics_path)?;
    let mut accuracy = String::from("step,train_loss,train_top1,val_top1,val_topk\n");
    let mut alignment = String::from("step,layer,angle_deg,norm_ratio\n");
    let mut last_layers: Vec<Vec<String>> = Vec::new();
    let mut last_step = String::new();
    for (i, line) in metrics.lines().enumerate().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 8 {
            return Err(Error::Format {
                path: metrics_path.clone(),
                msg: format!("line {}: expected 8 columns", i + 1),
            });
        }
        if c[1].is_empty() {
            if !(c[4].is_empty() && c[6].is_empty()) {
                writeln!(accuracy, "{},{},{},{},{}", c[0], c[4], c[5], c[6], c[7]).unwrap();
            }
        } else {
            writeln!(alignment, "{},{},{},{}", c[0], c[1], c[2], c[3]).unwrap();
            if c[0] != last_step {
                last_step = c[0].to_string();
                last_layers.clear();
            }
            last_layers.push(c.iter().map(|s| s.to_string()).collect());
        }
    }
    writeln!(out, "\nvalidation by step:\n{:>8}  {:>8}  {:>8}", "step", "top1", "topk").unwrap();
    for line in accuracy.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        if !c[3].is_empty() {
            writeln!(out, "{:>8}  {:>8}  {:>8}", c[0], c[3], c[4]).unwrap();
        }
    }
    if !last_layers.is_empty() {
        writeln!(out, "\nlayer diagnostics at step {last_step}:\n{:>6}  {:>10}  {:>10}", "layer", "angle", "ratio")
            .unwrap();
        for c in &last_layers {
            writeln!(out, "{:>6}  {:>10}  {:>10}", c[1], short(&c[2]), short(&c[3])).unwrap();
        }
    }

    let mut attacks: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("attack_") && n.ends_with(".csv"))
        })
        .collect();
    attacks.sort();
    for p in attacks {
        writeln!(out, "\n{}:", p.file_name().unwrap().to_string_lossy()).unwrap();
        for line in read(&p)?.lines().skip(1) {
            let c: Vec<&str> = line.split(',').collect();
            if c.len() == 4 {
                writeln!(out, "  {:>8}  accuracy {}", c[1], short(c[3])).unwrap();
            }
        }
    }

    for (name, body) in [("report_accuracy.csv", &accuracy), ("report_alignment.csv", &alignment)] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    }
    writeln!(out, "\nwrote report_accuracy.csv and report_alignment.csv").unwrap();
    Ok(out)
}

fn short(cell: &str) -> String {
    cell.parse::<f64>().map(|v| format!("{v:.4}")).unwrap_or_else(|_| "-".into())
}

fn eval(
    checkpoint: &Path,
    dataset: &str,
    data_root: Option<&str>,
    batch_size: usize,
    top_k: usize,
    limit: Option<usize>,
    resize: &str,
) -> Result<String> {
    let net = load_checkpoint(checkpoint)?.to_network()?;
    let kind: data::DatasetKind = dataset.parse()?;
    let method: ResizeMethod = resize.parse()?;
    let (_, mut test) = data::load(kind, &data::resolve_root(data_root))?;
    let target = net.input_shape()[1];
    if test.image_shape()[1] != target {
        test = test.resized(target, method)?;
    }
    if let Some(n) = limit {
        test = test.head(n);
    }
    let ev = evaluate(&net, &test, batch_size.max(1), top_k)?;
    Ok(serde_json::to_string_pretty(&ev).expect("serializable") + "\n")
}
