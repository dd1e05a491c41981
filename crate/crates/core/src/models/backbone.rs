use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{backward_sequence, forward_sequence, Layer, LayerCache, Linear, Tensor4};
use crate::linalg::Matrix;

/// Feature extractor followed by global average pooling and a linear classifier.
///
/// The pooled vector fed to the classifier is the representation tapped for
/// distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub arch: String,
    pub in_channels: usize,
    pub body: Vec<Layer>,
    pub classifier: Linear,
}

#[derive(Debug, Clone)]
pub struct BackboneOutput {
    /// `[b, d]`
    pub features: Matrix,
    /// `[b, classes]`
    pub logits: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    caches: Vec<LayerCache>,
    spatial_dim: (usize, usize, usize, usize),
    features: Matrix,
}

/// Gradients in the same order as [`Backbone::params`].
pub type ParamGrads = Vec<Vec<f64>>;

fn global_avg_pool(x: &Tensor4) -> Matrix {
    let (b, c, h, w) = x.dim();
    let area = (h * w) as f64;
    let flat = x.view().into_shape_with_order((b, c, h * w)).expect("contiguous");
    flat.sum_axis(Axis(2)) / area
}

impl Backbone {
    pub fn feature_dim(&self) -> usize {
        self.classifier.weight.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.weight.nrows()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.body {
            l.collect_params(&mut out);
        }
        out.push(self.classifier.weight.as_slice().expect("standard layout"));
        out.push(self.classifier.bias.as_slice().expect("standard layout"));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.body {
            l.collect_params_mut(&mut out);
        }
        out.push(self.classifier.weight.as_slice_mut().expect("standard layout"));
        out.push(self.classifier.bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn zero_grads(&self) -> ParamGrads {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, images: &Array4<f64>) {
        assert_eq!(
            images.dim().1,
            self.in_channels,
            "{} expects {} input channels",
            self.arch,
            self.in_channels
        );
    }

    pub fn forward(&self, images: &Array4<f64>) -> BackboneOutput {
        self.forward_trace(images).0
    }

    pub fn forward_trace(&self, images: &Array4<f64>) -> (BackboneOutput, ForwardTrace) {
        self.check_input(images);
        let (spatial, caches) = forward_sequence(&self.body, images);
        let features = global_avg_pool(&spatial);
        let logits = self.classifier.forward(&features);
        let trace = ForwardTrace {
            caches,
            spatial_dim: spatial.dim(),
            features: features.clone(),
        };
        (BackboneOutput { features, logits }, trace)
    }

    /// Features and logits for a large image set, evaluated in chunks to bound memory.
    pub fn forward_chunked(&self, images: &Array4<f64>, chunk: usize) -> BackboneOutput {
        let n = images.dim().0;
        let chunk = chunk.max(1);
        let (mut feats, mut logits) = (Vec::new(), Vec::new());
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let out = self.forward(&images.slice(ndarray::s![start..end, .., .., ..]).to_owned());
            feats.push(out.features);
            logits.push(out.logits);
            start = end;
        }
        let cat = |parts: &[Matrix], width: usize| -> Matrix {
            if parts.is_empty() {
                return Array2::zeros((0, width));
            }
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("consistent widths")
        };
        BackboneOutput {
            features: cat(&feats, self.feature_dim()),
            logits: cat(&logits, self.num_classes()),
        }
    }

    pub fn features(&self, images: &Array4<f64>, chunk: usize) -> Matrix {
        self.forward_chunked(images, chunk).features
    }

    pub fn logits(&self, images: &Array4<f64>, chunk: usize) -> Matrix {
        self.forward_chunked(images, chunk).logits
    }

    /// Backpropagates gradients arriving at the logits and, optionally, at
    /// the pooled features.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &Matrix, grad_features: Option<&Matrix>) -> ParamGrads {
        let mut grads = self.zero_grads();
        let n_head = 2;
        let split = grads.len() - n_head;
        let (body_grads, head_grads) = grads.split_at_mut(split);
        let mut g_feat = self.classifier.backward(&trace.features, grad_logits, head_grads);
        if let Some(extra) = grad_features {
            g_feat += extra;
        }
        let (b, c, h, w) = trace.spatial_dim;
        let area = (h * w) as f64;
        let g_spatial = Array4::from_shape_fn((b, c, h, w), |(n, ch, _, _)| g_feat[[n, ch]] / area);
        backward_sequence(&self.body, &trace.caches, &g_spatial, body_grads);
        grads
    }

    /// Replaces the classifier with a freshly initialized one.
    pub fn reset_classifier<R: Rng + ?Sized>(&mut self, num_classes: usize, rng: &mut R) {
        self.classifier = Linear::new(self.feature_dim(), num_classes, rng);
    }
}
