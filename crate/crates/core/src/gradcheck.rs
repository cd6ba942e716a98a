//! Finite-difference verification of the analytic backward pass.
//!
//! Runs in `f64`. Each parameter is nudged by `h = 1e-5 * (|w| + 1)` in both
//! directions and the central difference of the cross-entropy loss is
//! compared against the analytic gradient using
//! `|a - n| / max(|a|, |n|, 1e-8)`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{
    init_params, model_backward, model_forward, param_count, InputSize, ModelConfig, ModelParams,
    Variant,
};
use crate::tensor::Tensor;
use crate::training::cross_entropy_loss;

pub const MAX_PARAMS: usize = 5_000;
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-8;
const BATCH: usize = 2;

/// Configurations small enough for exhaustive finite differences.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    match variant {
        Variant::Conv => ModelConfig::conv(
            InputSize {
                height: 8,
                width: 8,
                channels: 1,
            },
            &[4, 3],
        ),
        Variant::Dense => ModelConfig::dense(
            InputSize {
                height: 4,
                width: 4,
                channels: 1,
            },
            &[5],
        ),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    /// Index into the layer's weights followed by its bias.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    /// e.g. `conv1` or `dense2`, numbered from 1 per kind.
    pub name: String,
    pub shape: Vec<usize>,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Coordinates above [`TOLERANCE`].
    pub failures: Vec<Mismatch>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub variant: Variant,
    pub layers: Vec<LayerCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.failures.is_empty())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.max_rel_error)
            .fold(0.0, f64::max)
    }

    /// Turns a failing report into an error listing the offending coordinates.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let mut msg = String::new();
        for l in self.layers.iter().filter(|l| !l.failures.is_empty()) {
            for m in &l.failures {
                msg.push_str(&format!(
                    "{}[{}]: analytic {:.6e} numeric {:.6e} (rel {:.3e}); ",
                    l.name, m.index, m.analytic, m.numeric, m.rel_error
                ));
            }
        }
        Err(Error::GradCheck(msg.trim_end_matches("; ").to_string()))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            let dims: Vec<String> = l.shape.iter().map(|d| d.to_string()).collect();
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{:.3e}\t{}",
                self.variant,
                l.name,
                dims.join("x"),
                l.checked,
                l.max_rel_error,
                if l.failures.is_empty() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn loss(config: &ModelConfig, params: &ModelParams<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    let (probs, _) = model_forward(config, params, x)?;
    Ok(cross_entropy_loss(&probs, y)?.0)
}

/// A seeded batch of inputs in `[0, 1]` with one target per class.
pub fn probe_batch(config: &ModelConfig, seed: u64) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let InputSize {
        height,
        width,
        channels,
    } = config.input_size;
    let x = Tensor::from_fn(&[BATCH, height, width, channels], |_| rng.gen_range(0.0..1.0))?;
    let y = Tensor::from_fn(&[BATCH, 2], |i| if i % 3 == 0 { 1.0 } else { 0.0 })?;
    Ok((x, y))
}

/// Compares `analytic` against central differences of the loss at `params`.
pub fn compare_gradients(
    config: &ModelConfig,
    params: &ModelParams<f64>,
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    analytic: &ModelParams<f64>,
) -> Result<GradCheckReport> {
    let count = param_count(config)?;
    if count > MAX_PARAMS {
        return Err(Error::usage(format!(
            "{count} parameters is too many for a finite-difference check (limit {MAX_PARAMS})"
        )));
    }
    params.check_matches(config)?;
    analytic.check_matches(config)?;

    let flat = params.flatten();
    let grads = analytic.flatten();
    let mut probe = flat.clone();
    let mut layers = Vec::with_capacity(params.layers.len());
    let mut offset = 0;
    let mut seen = [0usize; 2];
    for layer in &params.layers {
        let kind = usize::from(layer.kind() == "dense");
        seen[kind] += 1;
        let len = layer.weights().len() + layer.bias().len();
        let mut check = LayerCheck {
            name: format!("{}{}", layer.kind(), seen[kind]),
            shape: layer.weights().dims().to_vec(),
            checked: len,
            max_rel_error: 0.0,
            failures: Vec::new(),
        };
        for index in 0..len {
            let i = offset + index;
            let h = STEP * (flat[i].abs() + 1.0);
            probe[i] = flat[i] + h;
            let up = loss(config, &ModelParams::from_flat(config, &probe)?, x, y)?;
            probe[i] = flat[i] - h;
            let down = loss(config, &ModelParams::from_flat(config, &probe)?, x, y)?;
            probe[i] = flat[i];
            let numeric = (up - down) / (2.0 * h);
            let a = grads[i];
            let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            check.max_rel_error = check.max_rel_error.max(rel_error);
            if rel_error > TOLERANCE {
                check.failures.push(Mismatch {
                    index,
                    analytic: a,
                    numeric,
                    rel_error,
                });
            }
        }
        offset += len;
        layers.push(check);
    }
    Ok(GradCheckReport {
        variant: config.variant,
        layers,
    })
}

/// Checks the analytic gradient at the given parameters on a seeded batch.
pub fn check_params(config: &ModelConfig, params: &ModelParams<f64>, seed: u64) -> Result<GradCheckReport> {
    if param_count(config)? > MAX_PARAMS {
        return Err(Error::usage(format!(
            "configuration exceeds {MAX_PARAMS} parameters"
        )));
    }
    let (x, y) = probe_batch(config, seed)?;
    let (probs, cache) = model_forward(config, params, &x)?;
    let (_, grad_logits) = cross_entropy_loss(&probs, &y)?;
    let analytic = model_backward(config, params, &cache, &grad_logits)?;
    compare_gradients(config, params, &x, &y, &analytic)
}

/// Per-layer report for a He-initialised model; never fails on tolerance.
pub fn check_report(config: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let params = init_params::<f64>(config, seed)?;
    check_params(config, &params, seed.wrapping_add(1))
}

/// As [`check_report`], but any layer above [`TOLERANCE`] is an error.
pub fn gradient_check(config: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    check_report(config, seed)?.into_result()
}
