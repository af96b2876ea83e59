//! Layers, feedback modes, loss and the network executor.

mod arch;
mod checkpoint;
mod layers;
mod loss;
mod network;

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

pub use arch::{build_architecture, ARCHITECTURES};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use layers::{BatchNorm2d, Conv2d, Feedback, Layer, Linear, ResidualBlock, Shortcut, Trainable};
pub use loss::{cross_entropy, softmax};
pub use network::{ForwardCache, Gradients, InputNorm, LayerSpec, Network};

/// How errors travel backwards through trainable layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeedbackMode {
    Bp,
    Fa,
    Dfa,
    Usf,
    Brsf,
    Frsf,
}

impl FeedbackMode {
    pub const ALL: [FeedbackMode; 6] = [
        FeedbackMode::Bp,
        FeedbackMode::Fa,
        FeedbackMode::Dfa,
        FeedbackMode::Usf,
        FeedbackMode::Brsf,
        FeedbackMode::Frsf,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FeedbackMode::Bp => "bp",
            FeedbackMode::Fa => "fa",
            FeedbackMode::Dfa => "dfa",
            FeedbackMode::Usf => "usf",
            FeedbackMode::Brsf => "brsf",
            FeedbackMode::Frsf => "frsf",
        }
    }

    /// uSF, brSF and frSF share the sign of the forward weights.
    pub fn is_sign_concordant(&self) -> bool {
        matches!(self, FeedbackMode::Usf | FeedbackMode::Brsf | FeedbackMode::Frsf)
    }
}

impl FromStr for FeedbackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        FeedbackMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::invalid(
                    "feedback mode",
                    format!("unknown mode `{s}` (expected bp, fa, dfa, usf, brsf or frsf)"),
                )
            })
    }
}

impl fmt::Display for FeedbackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in FeedbackMode::ALL {
            assert_eq!(m.as_str().parse::<FeedbackMode>().unwrap(), m);
        }
        assert_eq!("BRSF".parse::<FeedbackMode>().unwrap(), FeedbackMode::Brsf);
        assert!("tp".parse::<FeedbackMode>().is_err());
    }
}
