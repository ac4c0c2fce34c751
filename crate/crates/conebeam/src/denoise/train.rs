//! Per-stage denoiser training: aligned patch pairs, seeded shuffling, and
//! minibatch Adam on the mean-squared-error loss.
//!
//! Each stage is trained independently of every other stage's parameters;
//! stage n+1 simply sees the volumes advanced through stage n's denoise +
//! data-consistency update.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamHyper, AdamState};
use super::patches::{extract_patches, PatchSet};
use super::unet::{unet_loss_grad, DenoiserParams, Gradients};
use crate::error::{Error, Result};
use crate::types::Volume3D;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub seed: u64,
    /// Percentile of the pooled stage inputs that maps to 1.0 before the
    /// network; robust to streak outliers.
    pub norm_percentile: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 64,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            patch_size: 256,
            patch_stride: 256,
            seed: 0,
            norm_percentile: 99.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("adam_epsilon", self.adam_epsilon),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidSpec(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.patch_size == 0 || self.patch_stride == 0 {
            return Err(Error::InvalidSpec(
                "batch_size, patch_size and patch_stride must be positive".into(),
            ));
        }
        if !(self.norm_percentile > 0.0 && self.norm_percentile <= 100.0) {
            return Err(Error::InvalidSpec(format!(
                "norm_percentile must be in (0, 100], got {}",
                self.norm_percentile
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// Mean over all elements of the squared difference.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::DimMismatch(format!(
            "mse_loss: {} vs {} elements",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

/// Nearest-rank percentile (pct in (0, 100]) of the pooled values.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub struct TrainOutcome {
    pub params: DenoiserParams,
    /// Mean minibatch loss per epoch (normalized units).
    pub epoch_losses: Vec<f64>,
}

/// Build the aligned, normalized patch pairs for one stage.
fn stage_patches(
    inputs: &[Volume3D],
    targets: &[Volume3D],
    cfg: &TrainConfig,
    scale: f64,
) -> Result<Vec<PatchSet>> {
    let mut sets = Vec::with_capacity(inputs.len());
    for (vid, (x, t)) in inputs.iter().zip(targets).enumerate() {
        if !x.same_grid(t) {
            return Err(Error::DimMismatch(format!(
                "training pair {vid}: input {:?} vs target {:?}",
                x.dims, t.dims
            )));
        }
        let mut pin = extract_patches(x, cfg.patch_size, cfg.patch_stride, vid)?;
        let mut ptg = extract_patches(t, cfg.patch_size, cfg.patch_stride, vid)?;
        let inv = 1.0 / scale;
        for patch in pin.data.iter_mut().chain(ptg.data.iter_mut()) {
            for v in patch.iter_mut() {
                *v *= inv;
            }
        }
        sets.push(PatchSet::pair(pin, ptg)?);
    }
    Ok(sets)
}

/// Train one stage denoiser on aligned (iterate, ground-truth) volumes.
/// Epochs of seeded-shuffle minibatch Adam on the patch MSE; deterministic at
/// a fixed thread count (per-sample gradients are reduced in sample order).
///
/// The stage normalization scale is the configured percentile of the pooled
/// input volumes, recorded into the returned parameters; when `init` already
/// carries a scale (shared-weight training continuing from a previous stage)
/// it is kept instead.
pub fn train_stage(
    inputs: &[Volume3D],
    targets: &[Volume3D],
    cfg: &TrainConfig,
    init: DenoiserParams,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.validate()?;
    if inputs.len() != targets.len() {
        return Err(Error::DimMismatch(format!(
            "{} input volumes vs {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { params: init, epoch_losses: Vec::new() });
    }
    if inputs.is_empty() {
        return Err(Error::InvalidSpec("empty training set".into()));
    }
    let side_div = 1usize << init.arch.depth;
    if cfg.patch_size % side_div != 0 {
        return Err(Error::InvalidSpec(format!(
            "patch_size {} not divisible by 2^depth = {side_div}",
            cfg.patch_size
        )));
    }

    let mut params = init;
    let scale = if params.norm_scale > 0.0 {
        params.norm_scale
    } else {
        let pooled: Vec<f64> = inputs.iter().flat_map(|v| v.data.iter().copied()).collect();
        let p = percentile(&pooled, cfg.norm_percentile);
        if p > 0.0 && p.is_finite() {
            p
        } else {
            1.0
        }
    };
    params.norm_scale = scale;

    let sets = stage_patches(inputs, targets, cfg, scale)?;
    let pairs: Vec<(&[f64], &[f64])> = sets
        .iter()
        .flat_map(|s| {
            s.inputs
                .data
                .iter()
                .zip(&s.targets.data)
                .map(|(a, b)| (a.as_slice(), b.as_slice()))
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::InvalidSpec("empty patch set".into()));
    }
    if cfg.batch_size > pairs.len() {
        return Err(Error::InvalidSpec(format!(
            "batch_size {} exceeds the {} available patches",
            cfg.batch_size,
            pairs.len()
        )));
    }

    let p = cfg.patch_size;
    let hyper = cfg.adam();
    let mut state = AdamState::zeros_like(&params);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = rand::rngs::StdRng::seed_from_u64(cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let per_sample: Vec<(f64, Gradients)> = chunk
                .par_iter()
                .map(|&idx| {
                    let (x, t) = pairs[idx];
                    unet_loss_grad(&params, x, t, p, p).expect("patch shapes validated")
                })
                .collect();
            let inv_b = 1.0 / chunk.len() as f64;
            let mut batch_grad = Gradients::zeros_like(&params);
            let mut batch_loss = 0.0;
            for (loss, g) in &per_sample {
                batch_loss += loss * inv_b;
                batch_grad.add_assign(g);
            }
            batch_grad.scale(inv_b);
            adam_step(&mut params, &batch_grad, &mut state, &hyper)?;
            epoch_loss += batch_loss;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }
    Ok(TrainOutcome { params, epoch_losses })
}
