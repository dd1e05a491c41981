//! Named architectures sized for small images (8×8 by default).
//!
//! Each entry is a scaled-down analogue of a standard CIFAR backbone so that
//! teacher/student pairs keep the same relative shape (deep vs. shallow,
//! plain vs. residual vs. depthwise) while training on one CPU core.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::backbone::Backbone;
use super::layers::{Conv2d, Layer, Linear, Residual, Shortcut};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ArchSpec {
    pub name: &'static str,
    pub feature_dim: usize,
    pub base_lr: f64,
    pub analogue: &'static str,
}

pub const ARCHS: &[ArchSpec] = &[
    ArchSpec {
        name: "small-convnet-T",
        feature_dim: 64,
        base_lr: 0.05,
        analogue: "generic deeper teacher",
    },
    ArchSpec {
        name: "small-convnet-S",
        feature_dim: 16,
        base_lr: 0.05,
        analogue: "generic shallow student",
    },
    ArchSpec {
        name: "resnet-32x4-like",
        feature_dim: 64,
        base_lr: 0.05,
        analogue: "ResNet32x4",
    },
    ArchSpec {
        name: "resnet-8x4-like",
        feature_dim: 32,
        base_lr: 0.05,
        analogue: "ResNet8x4",
    },
    ArchSpec {
        name: "vgg-8-like",
        feature_dim: 64,
        base_lr: 0.05,
        analogue: "VGG8",
    },
    ArchSpec {
        name: "mobilenet-v2-like",
        feature_dim: 64,
        base_lr: 0.01,
        analogue: "MobileNetV2",
    },
];

pub fn arch_spec(name: &str) -> Result<&'static ArchSpec> {
    ARCHS.iter().find(|a| a.name == name).ok_or_else(|| {
        let known: Vec<_> = ARCHS.iter().map(|a| a.name).collect();
        Error::Config(format!("unknown architecture '{name}' (known: {})", known.join(", ")))
    })
}

fn conv(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Conv(Conv2d::new(cin, cout, 3, stride, 1, 1, rng))
}

/// Without normalization layers, residual branches start at zero so each block
/// is initially its shortcut and deep stacks train at the base rate.
fn zero_last_conv(body: &mut [Layer]) {
    if let Some(Layer::Conv(c)) = body.iter_mut().rev().find(|l| matches!(l, Layer::Conv(_))) {
        c.weight.fill(0.0);
        c.bias.fill(0.0);
    }
}

fn basic_block(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let mut body = vec![conv(cin, cout, stride, rng), Layer::Relu, conv(cout, cout, 1, rng)];
    zero_last_conv(&mut body);
    let shortcut = if cin == cout && stride == 1 {
        Shortcut::Identity
    } else {
        Shortcut::Projection(Conv2d::new(cin, cout, 1, stride, 0, 1, rng))
    };
    vec![Layer::Residual(Residual { body, shortcut }), Layer::Relu]
}

fn inverted_residual(cin: usize, cout: usize, expand: usize, stride: usize, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let hidden = cin * expand;
    let mut body = vec![
        Layer::Conv(Conv2d::new(cin, hidden, 1, 1, 0, 1, rng)),
        Layer::Relu,
        Layer::Conv(Conv2d::new(hidden, hidden, 3, stride, 1, hidden, rng)),
        Layer::Relu,
        Layer::Conv(Conv2d::new(hidden, cout, 1, 1, 0, 1, rng)),
    ];
    if cin == cout && stride == 1 {
        zero_last_conv(&mut body);
        vec![Layer::Residual(Residual {
            body,
            shortcut: Shortcut::Identity,
        })]
    } else {
        body
    }
}

fn body_for(name: &str, c: usize, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    match name {
        "small-convnet-T" => vec![
            conv(c, 32, 1, rng),
            Layer::Relu,
            conv(32, 32, 1, rng),
            Layer::Relu,
            Layer::AvgPool2,
            conv(32, 64, 1, rng),
            Layer::Relu,
        ],
        "small-convnet-S" => vec![conv(c, 8, 1, rng), Layer::Relu, Layer::AvgPool2, conv(8, 16, 1, rng), Layer::Relu],
        "resnet-32x4-like" => {
            let mut l = vec![conv(c, 32, 1, rng), Layer::Relu];
            l.extend(basic_block(32, 32, 1, rng));
            l.extend(basic_block(32, 32, 1, rng));
            l.extend(basic_block(32, 64, 2, rng));
            l.extend(basic_block(64, 64, 1, rng));
            l
        }
        "resnet-8x4-like" => {
            let mut l = vec![conv(c, 16, 1, rng), Layer::Relu];
            l.extend(basic_block(16, 16, 1, rng));
            l.extend(basic_block(16, 32, 2, rng));
            l
        }
        "vgg-8-like" => vec![
            conv(c, 16, 1, rng),
            Layer::Relu,
            Layer::AvgPool2,
            conv(16, 32, 1, rng),
            Layer::Relu,
            Layer::AvgPool2,
            conv(32, 64, 1, rng),
            Layer::Relu,
            conv(64, 64, 1, rng),
            Layer::Relu,
        ],
        "mobilenet-v2-like" => {
            let mut l = vec![conv(c, 16, 1, rng), Layer::Relu];
            l.extend(inverted_residual(16, 16, 3, 1, rng));
            l.extend(inverted_residual(16, 24, 3, 2, rng));
            l.push(Layer::Conv(Conv2d::new(24, 64, 1, 1, 0, 1, rng)));
            l.push(Layer::Relu);
            l
        }
        _ => unreachable!("validated by arch_spec"),
    }
}

/// Builds a freshly initialized backbone; the same `(name, seed)` always
/// yields identical weights.
pub fn build_backbone(name: &str, num_classes: usize, in_channels: usize, init_seed: u64) -> Result<Backbone> {
    let spec = arch_spec(name)?;
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    if in_channels == 0 {
        return Err(Error::Config("input must have at least one channel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(init_seed, seed::INIT, 0));
    let body = body_for(name, in_channels, &mut rng);
    let classifier = Linear::new(spec.feature_dim, num_classes, &mut rng);
    Ok(Backbone {
        arch: name.to_string(),
        in_channels,
        body,
        classifier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn every_arch_builds_and_reports_its_width() {
        let x = Array4::from_shape_fn((2, 3, 8, 8), |(n, c, h, w)| ((n + c + h * w) as f64).sin());
        for spec in ARCHS {
            let net = build_backbone(spec.name, 5, 3, 0).unwrap();
            let out = net.forward(&x);
            assert_eq!(out.features.dim(), (2, spec.feature_dim), "{}", spec.name);
            assert_eq!(out.logits.dim(), (2, 5));
            assert!(out.logits.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = build_backbone("vgg-8-like", 4, 3, 11).unwrap();
        let b = build_backbone("vgg-8-like", 4, 3, 11).unwrap();
        let c = build_backbone("vgg-8-like", 4, 3, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn unknown_arch_is_a_config_error() {
        assert!(matches!(build_backbone("resnet-1000", 3, 3, 0), Err(Error::Config(_))));
        assert!(matches!(build_backbone("vgg-8-like", 1, 3, 0), Err(Error::Config(_))));
    }
}
