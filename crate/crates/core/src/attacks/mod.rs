//! Adversarial attacks in `[0, 1]` pixel space under an L∞ budget, and
//! robustness curves.

mod few_pixel;
mod gradient;
mod square;

use std::fmt;
use std::str::FromStr;

use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::metrics::topk_hits;
use crate::net::{cross_entropy, softmax, Network};
use crate::tensor::{Rng, Tensor};

pub use few_pixel::{few_pixel, FewPixelParams};
pub use gradient::{apgd, averaged_gradient, fgsm, kl_divergence, pgd, tpgd, ApgdParams, PgdParams, TpgdParams};
pub use square::{margin, square_attack, SquareParams, SquareTrace};

/// Anything that maps an `N×C×H×W` batch to `N×classes` logits.
pub trait Model {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

/// What a white-box attack ascends.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// Mean cross-entropy against these labels.
    CrossEntropy(&'a [usize]),
    /// Mean `KL(p ‖ softmax(f(x)))` for fixed clean probabilities `p`.
    KlFrom(&'a Tensor),
}

impl Objective<'_> {
    /// Derivative of the objective with respect to the logits.
    pub fn logit_gradient(&self, logits: &Tensor) -> Result<Tensor> {
        match self {
            Objective::CrossEntropy(labels) => Ok(cross_entropy(logits, labels)?.1),
            Objective::KlFrom(p) => {
                let q = softmax(logits)?;
                if p.shape() != q.shape() {
                    return Err(Error::shape("kl objective", p.shape(), q.shape()));
                }
                Ok(q.sub(p)?.scale(1.0 / logits.dim(0) as f64))
            }
        }
    }
}

/// A model that also supplies input gradients of an objective.
pub trait GradientModel: Model {
    fn input_gradient(&self, x: &Tensor, objective: Objective<'_>) -> Result<Tensor>;
}

impl Model for Network {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.predict(x)
    }
}

fn network_gradient(net: &Network, x: &Tensor, objective: Objective<'_>, force_bp: bool) -> Result<Tensor> {
    let (logits, cache) = net.forward_eval(x)?;
    let delta = objective.logit_gradient(&logits)?;
    net.input_gradient(&delta, &cache, force_bp)
}

/// Gradients transported by the network's own feedback mode.
impl GradientModel for Network {
    fn input_gradient(&self, x: &Tensor, objective: Objective<'_>) -> Result<Tensor> {
        network_gradient(self, x, objective, false)
    }
}

/// Attacks a network through true backpropagated input gradients regardless
/// of its training mode.
pub struct TrueGradient<'a>(pub &'a Network);

impl Model for TrueGradient<'_> {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.0.predict(x)
    }
}

impl GradientModel for TrueGradient<'_> {
    fn input_gradient(&self, x: &Tensor, objective: Objective<'_>) -> Result<Tensor> {
        network_gradient(self.0, x, objective, true)
    }
}

/// Projects `v` onto the L∞ ball of radius `eps` around `x`, then onto `[0, 1]`.
pub(crate) fn project(v: &mut Tensor, x: &Tensor, eps: f64) {
    for (a, &o) in v.data_mut().iter_mut().zip(x.data()) {
        *a = a.clamp(o - eps, o + eps).clamp(0.0, 1.0);
    }
}

pub(crate) fn check_eps(op: &'static str, eps: f64) -> Result<()> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::invalid(op, format!("eps must be finite and non-negative, got {eps}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Apgd,
    Tpgd,
    FewPixel,
    Square,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::Fgsm,
        AttackKind::Pgd,
        AttackKind::Apgd,
        AttackKind::Tpgd,
        AttackKind::FewPixel,
        AttackKind::Square,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Apgd => "apgd",
            AttackKind::Tpgd => "tpgd",
            AttackKind::FewPixel => "few_pixel",
            AttackKind::Square => "square",
        }
    }

    pub fn is_black_box(&self) -> bool {
        matches!(self, AttackKind::FewPixel | AttackKind::Square)
    }

    /// The swept quantity: `eps`, or the pixel count for Few-Pixel.
    pub fn default_grid(&self) -> Vec<f64> {
        match self {
            AttackKind::FewPixel => vec![0.0, 1.0, 2.0, 3.0, 5.0],
            _ => (0..=10).map(|i| i as f64 / 100.0).collect(),
        }
    }

    /// Evaluation cap; black-box attacks are costly.
    pub fn default_sample_limit(&self) -> Option<usize> {
        self.is_black_box().then_some(500)
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        AttackKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm || (norm == "fewpixel" && *k == AttackKind::FewPixel))
            .ok_or_else(|| {
                Error::invalid(
                    "attack",
                    format!("unknown attack `{s}` (expected fgsm, pgd, apgd, tpgd, few_pixel or square)"),
                )
            })
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-attack settings other than the swept grid value.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSettings {
    pub steps: usize,
    /// Step size as a multiple of `eps / steps`; the default 2 gives `α = 2ε/steps`.
    pub alpha_factor: f64,
    pub random_start: bool,
    pub apgd_samples: usize,
    pub apgd_noise: f64,
    pub few_pixel: FewPixelParams,
    /// Few-Pixel grids count pixels; this fixes nothing else.
    pub square_queries: usize,
    pub square_eps: f64,
    pub seed: u64,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            steps: 10,
            alpha_factor: 2.0,
            random_start: true,
            apgd_samples: 4,
            apgd_noise: 0.25,
            few_pixel: FewPixelParams::default(),
            square_queries: 1000,
            square_eps: 0.05,
            seed: 0,
        }
    }
}

/// Runs `kind` at grid value `value` on one batch.
pub fn run_attack(
    model: &dyn GradientModel,
    kind: AttackKind,
    value: f64,
    x: &Tensor,
    y: &[usize],
    settings: &AttackSettings,
    rng: &mut Rng,
) -> Result<Tensor> {
    let steps = settings.steps;
    let alpha = if steps > 0 { settings.alpha_factor * value / steps as f64 } else { 0.0 };
    let pgd_params = PgdParams {
        eps: value,
        alpha,
        steps,
        random_start: settings.random_start,
    };
    match kind {
        AttackKind::Fgsm => fgsm(model, x, y, value),
        AttackKind::Pgd => pgd(model, x, y, &pgd_params, rng),
        AttackKind::Apgd => apgd(
            model,
            x,
            y,
            &ApgdParams {
                pgd: pgd_params,
                samples: settings.apgd_samples,
                noise: settings.apgd_noise,
            },
            rng,
        ),
        AttackKind::Tpgd => tpgd(
            model,
            x,
            &TpgdParams {
                eps: value,
                alpha,
                steps,
            },
            rng,
        ),
        AttackKind::FewPixel => {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(Error::invalid("few_pixel", format!("pixel count must be a whole number, got {value}")));
            }
            let params = FewPixelParams {
                n_pixels: value as usize,
                ..settings.few_pixel.clone()
            };
            few_pixel(model, x, y, &params, rng)
        }
        AttackKind::Square => {
            let params = SquareParams {
                eps: value,
                query_budget: settings.square_queries,
                ..SquareParams::default()
            };
            Ok(square_attack(model, x, y, &params, rng)?.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessCurve {
    pub attack: AttackKind,
    pub grid: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub n_samples: usize,
}

impl RobustnessCurve {
    pub const CSV_HEADER: &'static str = "attack,param_grid_value,n_samples,accuracy";

    pub fn csv_rows(&self) -> Vec<String> {
        self.grid
            .iter()
            .zip(&self.accuracy)
            .map(|(g, a)| format!("{},{},{},{}", self.attack, g, self.n_samples, a))
            .collect()
    }
}

/// Accuracy on attacked copies of the first `sample_limit` samples of `ds`
/// at each grid value.
pub fn robustness_curve(
    model: &dyn GradientModel,
    ds: &Dataset,
    kind: AttackKind,
    grid: &[f64],
    sample_limit: Option<usize>,
    batch_size: usize,
    settings: &AttackSettings,
) -> Result<RobustnessCurve> {
    if grid.is_empty() {
        return Err(Error::invalid("robustness_curve", "empty grid"));
    }
    let ds = match sample_limit {
        Some(n) => ds.head(n),
        None => ds.clone(),
    };
    if ds.is_empty() {
        return Err(Error::invalid("robustness_curve", "empty dataset"));
    }
    let mut accuracy = Vec::with_capacity(grid.len());
    for (gi, &value) in grid.iter().enumerate() {
        let mut correct = 0;
        for (bi, (x, y)) in BatchIterator::sequential(&ds, batch_size)?.enumerate() {
            let mut rng = Rng::derive(settings.seed, &[gi as u64, bi as u64]);
            let adv = run_attack(model, kind, value, &x, &y, settings, &mut rng)?;
            correct += topk_hits(&model.logits(&adv)?, &y, 1)?;
        }
        accuracy.push(correct as f64 / ds.len() as f64);
    }
    Ok(RobustnessCurve {
        attack: kind,
        grid: grid.to_vec(),
        accuracy,
        n_samples: ds.len(),
    })
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use std::cell::Cell;

    /// Single linear layer `logits = W·vec(x)`, with analytic gradients.
    pub struct LinearModel {
        pub w: Tensor,
        pub calls: Cell<usize>,
    }

    impl LinearModel {
        pub fn new(w: Tensor) -> Self {
            Self { w, calls: Cell::new(0) }
        }
    }

    impl Model for LinearModel {
        fn logits(&self, x: &Tensor) -> Result<Tensor> {
            self.calls.set(self.calls.get() + x.dim(0));
            let n = x.dim(0);
            crate::tensor::matmul_nt(&x.reshaped(&[n, x.len() / n])?, &self.w)
        }
    }

    impl GradientModel for LinearModel {
        fn input_gradient(&self, x: &Tensor, objective: Objective<'_>) -> Result<Tensor> {
            let d = objective.logit_gradient(&self.logits(x)?)?;
            crate::tensor::matmul(&d, &self.w)?.reshape(x.shape())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testing::LinearModel;
    use super::*;
    use crate::data::Split;

    #[test]
    fn attack_names() {
        for k in AttackKind::ALL {
            assert_eq!(k.as_str().parse::<AttackKind>().unwrap(), k);
        }
        assert_eq!("few-pixel".parse::<AttackKind>().unwrap(), AttackKind::FewPixel);
        assert!("cw".parse::<AttackKind>().is_err());
    }

    #[test]
    fn zero_grid_gives_clean_accuracy() {
        let mut rng = Rng::new(0);
        let model = LinearModel::new(rng.normal(&[3, 4], 0.0, 1.0).unwrap());
        let pixels: Vec<u8> = (0..20 * 4).map(|_| rng.below(256) as u8).collect();
        let labels: Vec<usize> = (0..20).map(|_| rng.below(3)).collect();
        let ds = Dataset::from_bytes("toy", Split::Test, [1, 2, 2], pixels, labels, 3).unwrap();
        let (x, y) = ds.gather(&(0..20).collect::<Vec<_>>());
        let clean = topk_hits(&model.logits(&x).unwrap(), &y, 1).unwrap() as f64 / 20.0;
        for kind in [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Apgd, AttackKind::Tpgd, AttackKind::Square] {
            let c = robustness_curve(&model, &ds, kind, &[0.0], None, 7, &AttackSettings::default()).unwrap();
            assert_eq!(c.accuracy, vec![clean], "{kind}");
        }
        let c = robustness_curve(&model, &ds, AttackKind::Fgsm, &[0.0, 0.1, 0.3], Some(10), 4, &AttackSettings::default())
            .unwrap();
        assert_eq!(c.accuracy.len(), 3);
        assert_eq!(c.n_samples, 10);
        assert_eq!(c.csv_rows()[1], format!("fgsm,0.1,10,{}", c.accuracy[1]));
        assert!(robustness_curve(&model, &ds, AttackKind::Fgsm, &[], None, 4, &AttackSettings::default()).is_err());
    }
}
