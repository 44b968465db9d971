//! Strided convolutional frontend: raw waveform to frame features.
//!
//! Each layer is an im2col patch extraction followed by a dense
//! projection, bias, and GELU, so the whole stack runs on the same
//! autodiff primitives as the transformer.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Precision, TensorId};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub channels: usize,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16000,
            channels: 64,
            kernels: vec![10, 3, 3],
            strides: vec![5, 2, 2],
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() || self.kernels.len() != self.strides.len() {
            return Err(CoreError::Config(format!(
                "{} kernels against {} strides",
                self.kernels.len(),
                self.strides.len()
            )));
        }
        if self.kernels.iter().chain(&self.strides).any(|&v| v == 0) {
            return Err(CoreError::Config("zero kernel or stride".into()));
        }
        if self.channels == 0 {
            return Err(CoreError::Config("zero frontend channels".into()));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.kernels.len()
    }

    /// Total downsampling factor: samples per output frame step.
    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop() as f64
    }

    /// Fewest input samples yielding one output frame.
    pub fn min_samples(&self) -> usize {
        let mut need = 1usize;
        for (&k, &s) in self.kernels.iter().zip(&self.strides).rev() {
            need = (need - 1) * s + k;
        }
        need
    }

    /// Output frame count by per-layer floor arithmetic.
    pub fn frame_count(&self, n_samples: usize) -> Result<usize> {
        let mut t = n_samples;
        for (i, (&k, &s)) in self.kernels.iter().zip(&self.strides).enumerate() {
            if t < k {
                return Err(CoreError::Shape {
                    op: "conv_feature_extractor",
                    detail: format!(
                        "{} samples too short at layer {}; need at least {} input samples",
                        n_samples,
                        i,
                        self.min_samples()
                    ),
                });
            }
            t = (t - k) / s + 1;
        }
        Ok(t)
    }

    /// Parameter names and shapes, in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_c = 1;
        for (l, &k) in self.kernels.iter().enumerate() {
            out.push((format!("frontend.conv{}.w", l), vec![in_c * k, self.channels]));
            out.push((format!("frontend.conv{}.b", l), vec![self.channels]));
            in_c = self.channels;
        }
        out
    }
}

/// Run the conv stack inside a graph. `samples` enters as a constant;
/// parameter leaves come from `get`, so gradients flow to them during
/// pretraining and nowhere else.
pub fn forward<F>(g: &mut Graph, cfg: &FrontendConfig, samples: &[f64], get: F) -> Result<TensorId>
where
    F: Fn(&str) -> Result<TensorId>,
{
    cfg.frame_count(samples.len())?;
    if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
        return Err(CoreError::Numerical(format!("non-finite sample at {}", i)));
    }
    let mut x = g.constant(samples.to_vec(), vec![samples.len(), 1])?;
    for (l, (&k, &s)) in cfg.kernels.iter().zip(&cfg.strides).enumerate() {
        let patches = g.frame_patches(x, k, s)?;
        let w = get(&format!("frontend.conv{}.w", l))?;
        let b = get(&format!("frontend.conv{}.b", l))?;
        let proj = g.matmul(patches, w)?;
        let biased = g.broadcast_add_row(proj, b)?;
        x = g.gelu(biased)?;
    }
    Ok(x)
}

/// Feature extraction with no gradient intent: a throwaway graph keeps
/// the arithmetic bit-identical to the trainable path.
pub fn extract_features(
    params: &ParamStore,
    cfg: &FrontendConfig,
    samples: &[f64],
    precision: Precision,
) -> Result<(Vec<f64>, usize)> {
    let mut g = Graph::new(precision);
    let binding = params.bind_where(&mut g, |n| n.starts_with("frontend."));
    let out = forward(&mut g, cfg, samples, |name| {
        binding
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::Missing(format!("parameter {}", name)))
    })?;
    let t = g.shape(out)[0];
    Ok((g.value(out).to_vec(), t))
}
