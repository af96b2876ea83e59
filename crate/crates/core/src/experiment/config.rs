//! Six-section YAML experiment configuration.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetKind, ResizeMethod};
use crate::error::{Error, Result};
use crate::init::ForwardInit;
use crate::net::{FeedbackMode, ARCHITECTURES};
use crate::optim::LrSchedule;

pub const SECTIONS: [&str; 6] = ["experiment", "data", "model", "training", "infrastructure", "evaluation"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub infrastructure: InfrastructureSection,
    pub evaluation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub output_dir: String,
    pub seed: u64,
    #[serde(default = "yes")]
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dataset: String,
    #[serde(default)]
    pub dataset_path: Option<String>,
    #[serde(default)]
    pub target_size: Option<usize>,
    #[serde(default)]
    pub num_workers: usize,
    /// Training images held out for model selection.
    #[serde(default = "default_validation_size")]
    pub validation_size: usize,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Random crop and flip; defaults to on for CIFAR-10.
    #[serde(default)]
    pub augment: Option<bool>,
    #[serde(default = "default_resize")]
    pub resize: String,
    /// Per-channel standardization with training-split statistics.
    #[serde(default = "yes")]
    pub normalize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: String,
    pub mode: ModeSection,
    #[serde(default)]
    pub pretrained: bool,
    /// Checkpoint whose weights replace the initialization.
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub loss_function: LossSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSection {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub options: ModeOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeOptions {
    #[serde(default = "default_init")]
    pub init: String,
    #[serde(default)]
    pub gradient_clip: bool,
}

impl Default for ModeOptions {
    fn default() -> Self {
        Self {
            init: default_init(),
            gradient_clip: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub name: String,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            name: "cross_entropy".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub hyperparameters: Hyperparameters,
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub lr_scheduler: SchedulerSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    pub epochs: i64,
    pub batch_size: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(rename = "type")]
    pub kind: String,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub milestones: Vec<usize>,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            kind: "constant".into(),
            gamma: default_gamma(),
            milestones: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_display")]
    pub display_iterations: usize,
    #[serde(default)]
    pub weight_alignment: bool,
    #[serde(default)]
    pub weight_ratio: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            top_k: default_top_k(),
            display_iterations: default_display(),
            weight_alignment: false,
            weight_ratio: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfrastructureSection {
    #[serde(default = "cpu")]
    pub gpus: Gpus,
}

/// `-1` for CPU, or device indices; only the CPU path exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gpus {
    One(i64),
    Many(Vec<i64>),
}

fn yes() -> bool {
    true
}
fn default_validation_size() -> usize {
    5000
}
fn default_resize() -> String {
    "pad".into()
}
fn default_init() -> String {
    "xavier".into()
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_gamma() -> f64 {
    0.1
}
fn default_top_k() -> usize {
    5
}
fn default_display() -> usize {
    500
}
fn cpu() -> Gpus {
    Gpus::One(-1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

fn check(ok: bool, path: &str, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(path, msg()))
    }
}

fn at(path: &str, e: Error) -> Error {
    let msg = match e {
        Error::InvalidArgument { msg, .. } => msg,
        other => other.to_string(),
    };
    Error::config(path, msg)
}

impl ExperimentConfig {
    pub fn mode(&self) -> Result<FeedbackMode> {
        self.model.mode.kind.parse().map_err(|e| at("model.mode.type", e))
    }

    pub fn forward_init(&self) -> Result<ForwardInit> {
        self.model.mode.options.init.parse().map_err(|e| at("model.mode.options.init", e))
    }

    pub fn dataset(&self) -> Result<DatasetKind> {
        self.data.dataset.parse().map_err(|e| at("data.dataset", e))
    }

    pub fn resize_method(&self) -> Result<ResizeMethod> {
        self.data.resize.parse().map_err(|e| at("data.resize", e))
    }

    pub fn optimizer_kind(&self) -> Result<OptimizerKind> {
        match self.training.optimizer.kind.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config(
                "training.optimizer.type",
                format!("unknown optimizer `{other}` (expected SGD or Adam)"),
            )),
        }
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        let s = &self.training.lr_scheduler;
        match s.kind.to_ascii_lowercase().as_str() {
            "multistep_lr" | "multistep" => {
                LrSchedule::new(s.milestones.clone(), s.gamma).map_err(|e| at("training.lr_scheduler", e))
            }
            "constant" | "none" => Ok(LrSchedule::constant()),
            other => Err(Error::config(
                "training.lr_scheduler.type",
                format!("unknown scheduler `{other}` (expected multistep_lr or constant)"),
            )),
        }
    }

    pub fn epochs(&self) -> usize {
        self.training.hyperparameters.epochs.max(0) as usize
    }

    pub fn batch_size(&self) -> usize {
        self.training.hyperparameters.batch_size.max(1) as usize
    }

    /// Defaults to on for CIFAR-10 when not set.
    pub fn augment(&self) -> Result<bool> {
        Ok(self.data.augment.unwrap_or(self.dataset()?.is_cifar()))
    }

    pub fn validate(&self) -> Result<()> {
        let name = &self.experiment.name;
        check(
            !name.is_empty() && !name.contains(['/', '\\']) && name != "." && name != "..",
            "experiment.name",
            || format!("`{name}` is not a usable directory name"),
        )?;
        self.dataset()?;
        self.resize_method()?;
        check(self.data.validation_size > 0, "data.validation_size", || "must be positive".into())?;
        if let Some(t) = self.data.target_size {
            check(t > 0, "data.target_size", || "must be positive".into())?;
        }
        if let Some(n) = self.data.train_limit {
            check(n > 0, "data.train_limit", || "must be positive".into())?;
        }
        if let Some(n) = self.data.test_limit {
            check(n > 0, "data.test_limit", || "must be positive".into())?;
        }
        let arch = &self.model.architecture;
        check(ARCHITECTURES.contains(&arch.as_str()), "model.architecture", || {
            format!("unknown architecture `{arch}` (expected one of: {})", ARCHITECTURES.join(", "))
        })?;
        self.mode()?;
        self.forward_init()?;
        check(
            !self.model.pretrained || self.model.checkpoint.is_some(),
            "model.pretrained",
            || "no pretrained weights are bundled; set model.checkpoint".into(),
        )?;
        let loss = &self.model.loss_function.name;
        check(loss == "cross_entropy", "model.loss_function.name", || {
            format!("unsupported loss `{loss}` (expected cross_entropy)")
        })?;
        let h = &self.training.hyperparameters;
        check(h.epochs >= 0, "training.hyperparameters.epochs", || {
            format!("must be non-negative, got {}", h.epochs)
        })?;
        check(h.batch_size > 0, "training.hyperparameters.batch_size", || {
            format!("must be positive, got {}", h.batch_size)
        })?;
        self.optimizer_kind()?;
        let o = &self.training.optimizer;
        check(o.lr > 0.0 && o.lr.is_finite(), "training.optimizer.lr", || {
            format!("must be positive, got {}", o.lr)
        })?;
        check(o.weight_decay >= 0.0 && o.weight_decay.is_finite(), "training.optimizer.weight_decay", || {
            format!("must be non-negative, got {}", o.weight_decay)
        })?;
        check((0.0..1.0).contains(&o.momentum), "training.optimizer.momentum", || {
            format!("must lie in [0, 1), got {}", o.momentum)
        })?;
        check(o.betas.iter().all(|b| (0.0..1.0).contains(b)), "training.optimizer.betas", || {
            format!("must lie in [0, 1), got {:?}", o.betas)
        })?;
        self.schedule()?;
        let m = &self.training.metrics;
        check(m.top_k > 0, "training.metrics.top_k", || "must be positive".into())?;
        check(m.display_iterations > 0, "training.metrics.display_iterations", || {
            "must be positive".into()
        })?;
        Ok(())
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }
}

/// Parses and validates a configuration, filling defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let value: serde_yaml::Value =
        serde_yaml::from_str(text).map_err(|e| Error::config("<root>", format!("invalid YAML: {e}")))?;
    let map = match &value {
        serde_yaml::Value::Null => None,
        serde_yaml::Value::Mapping(m) => Some(m),
        _ => return Err(Error::config("<root>", "expected a mapping of sections")),
    };
    for section in SECTIONS {
        if !map.is_some_and(|m| m.contains_key(section)) {
            return Err(Error::config(section, format!("missing section: {section}")));
        }
    }
    let config: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })?;
    config.validate()?;
    if config.infrastructure.gpus != Gpus::One(-1) {
        log::warn!("infrastructure.gpus = {:?}: only CPU execution is available", config.infrastructure.gpus);
    }
    Ok(config)
}

pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const LISTING: &str = include_str!("../../../../configs/benchmark_config_example.yaml");

    #[test]
    fn example_file_parses() {
        let c = parse_config(LISTING).unwrap();
        assert_eq!(c.mode().unwrap(), FeedbackMode::Fa);
        assert_eq!(c.training.optimizer.lr, 0.1);
        assert_eq!(c.training.lr_scheduler.milestones, vec![100, 150, 200]);
        assert_eq!(c.experiment.seed, 2021);
        assert_eq!(c.experiment.name, "fa_lr_0.1");
        assert_eq!(c.data.dataset_path, None);
        assert_eq!(c.training.metrics.top_k, 5);
        assert_eq!(c.infrastructure.gpus, Gpus::One(0));
        assert_eq!(c.optimizer_kind().unwrap(), OptimizerKind::Sgd);
        assert!(c.augment().unwrap());
    }

    #[test]
    fn serialized_copy_reparses_equal() {
        let c = parse_config(LISTING).unwrap();
        assert_eq!(parse_config(&c.to_yaml()).unwrap(), c);
    }

    #[test]
    fn empty_text_names_first_missing_section() {
        let e = parse_config("").unwrap_err();
        assert!(e.to_string().contains("missing section: experiment"), "{e}");
        let e = parse_config(&LISTING.replace("infrastructure:\n  gpus: 0\n", "")).unwrap_err();
        assert!(e.to_string().contains("missing section: infrastructure"), "{e}");
    }

    #[test]
    fn unknown_mode_lists_valid_modes() {
        let e = parse_config(&LISTING.replace("type: \"fa\"", "type: \"xyz\"")).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("model.mode.type"), "{msg}");
        for m in FeedbackMode::ALL {
            assert!(msg.contains(m.as_str()), "{msg}");
        }
    }

    #[test]
    fn errors_carry_key_paths() {
        let cases = [
            ("batch_size: 128", "batch_size: 0", "training.hyperparameters.batch_size"),
            ("epochs: 250", "epochs: -1", "training.hyperparameters.epochs"),
            ("top_k: 5", "top_k: 5\n    colour: red", "training.metrics"),
            ("lr: 0.1", "lr: \"fast\"", "training.optimizer.lr"),
            ("milestones: [100, 150, 200]", "milestones: [150, 100]", "training.lr_scheduler"),
            ("architecture: \"resnet20\"", "architecture: \"vgg\"", "model.architecture"),
            ("init: \"xavier\"", "init: \"orthogonal\"", "model.mode.options.init"),
            ("type: \"SGD\"", "type: \"rmsprop\"", "training.optimizer.type"),
        ];
        for (from, to, path) in cases {
            let text = LISTING.replace(from, to);
            assert_ne!(text, LISTING, "{from}");
            let e = parse_config(&text).unwrap_err();
            assert!(e.to_string().contains(path), "{to}: {e}");
        }
    }

    #[test]
    fn zero_epochs_is_allowed() {
        let c = parse_config(&LISTING.replace("epochs: 250", "epochs: 0")).unwrap();
        assert_eq!(c.epochs(), 0);
    }
}
