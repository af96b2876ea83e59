//! Built-in architectures.

use crate::error::{Error, Result};
use crate::init::InitSpec;

use super::network::{LayerSpec, Network};
use super::FeedbackMode;

pub const ARCHITECTURES: [&str; 6] = ["lenet_mnist", "lenet_cifar", "resnet20", "resnet32", "resnet44", "resnet56"];

fn conv(filters: usize, kernel: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        filters,
        kernel,
        stride,
        padding,
    }
}

const POOL: LayerSpec = LayerSpec::MaxPool2d { kernel: 2, stride: 2 };

fn lenet(channels: usize, kernel: usize, widths: [usize; 3], hidden: usize) -> (Vec<usize>, Vec<LayerSpec>) {
    let specs = vec![
        conv(widths[0], kernel, 1, 0),
        LayerSpec::Relu,
        POOL,
        conv(widths[1], kernel, 1, 0),
        LayerSpec::Relu,
        POOL,
        conv(widths[2], kernel, 1, 0),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Linear { out: hidden },
        LayerSpec::Relu,
        LayerSpec::Linear { out: 10 },
    ];
    (vec![channels, 32, 32], specs)
}

/// CIFAR-style ResNet of depth `6n + 2`: 16/32/64-channel stages with
/// subsample-and-pad shortcuts.
fn resnet(depth: usize) -> (Vec<usize>, Vec<LayerSpec>) {
    let n = (depth - 2) / 6;
    let mut specs = vec![conv(16, 3, 1, 1), LayerSpec::BatchNorm2d, LayerSpec::Relu];
    for stage in 0..3 {
        for block in 0..n {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            specs.push(LayerSpec::Residual {
                planes: 16 << stage,
                stride,
            });
        }
    }
    specs.extend([LayerSpec::GlobalAvgPool, LayerSpec::Flatten, LayerSpec::Linear { out: 10 }]);
    (vec![3, 32, 32], specs)
}

pub fn build_architecture(name: &str, mode: FeedbackMode, init: &InitSpec, seed: u64) -> Result<Network> {
    let (input, specs) = match name {
        "lenet_mnist" => lenet(1, 5, [6, 16, 120], 84),
        "lenet_cifar" => lenet(3, 3, [32, 64, 128], 256),
        "resnet20" => resnet(20),
        "resnet32" => resnet(32),
        "resnet44" => resnet(44),
        "resnet56" => resnet(56),
        other => return Err(Error::UnknownArchitecture(other.to_string())),
    };
    Network::from_specs(name, &input, &specs, mode, init, seed)
}
