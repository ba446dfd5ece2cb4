//! Adam optimization of the negative ELBO.
//!
//! The loop is deterministic given the seed: batch composition, per-step
//! latent noise, and every reduction happen in a fixed order, and RNG
//! streams are derived statelessly from (seed, stream, step). Resuming
//! from a checkpoint therefore reproduces the uninterrupted run bit for
//! bit.

use std::collections::BTreeMap;

use crate::dataio::{batch, window_history, TrainingSample};
use crate::error::{ClodeError, Result};
use crate::model::{elbo, ModelParams};
use crate::rng::{derive_rng, mix, standard_normal_vec, SALT_NOISE};
use crate::tensor::{GradientTape, Tensor};
use crate::trajectory::Trajectory;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dt: f64,
    /// Training window length L.
    pub history_len: usize,
    pub stride: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    pub beta: f64,
    /// Linear KL warm-up 0 -> beta over the first 10% of steps.
    pub beta_warmup: bool,
    pub seed: u64,
    /// Emit a checkpoint every this many steps (0 = off).
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            learning_rate: 1e-3,
            dt: 0.1,
            history_len: 5,
            stride: 1,
            epochs: 1,
            grad_clip: 5.0,
            beta: 1.0,
            beta_warmup: false,
            seed: 0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(ClodeError::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(ClodeError::InvalidArgument("learning rate must be > 0".into()));
        }
        if self.dt <= 0.0 {
            return Err(ClodeError::InvalidArgument("dt must be > 0".into()));
        }
        if self.history_len < 2 {
            return Err(ClodeError::InvalidArgument("history_len must be >= 2".into()));
        }
        if self.stride == 0 {
            return Err(ClodeError::InvalidArgument("stride must be >= 1".into()));
        }
        if self.beta < 0.0 {
            return Err(ClodeError::InvalidArgument("beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Adam first/second moments for one parameter block.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Per-parameter Adam state plus the global step count.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Bias-corrected Adam update of one flat block, in place.
pub fn adam_update_block(
    values: &mut [f64],
    grad: &[f64],
    moments: &mut Moments,
    lr: f64,
    step: u64,
) {
    let t = step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for i in 0..values.len() {
        moments.m[i] = ADAM_BETA1 * moments.m[i] + (1.0 - ADAM_BETA1) * grad[i];
        moments.v[i] = ADAM_BETA2 * moments.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = moments.m[i] / bc1;
        let v_hat = moments.v[i] / bc2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// One Adam step over all parameters. `grads` must carry the canonical
/// parameter names in canonical order.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[(String, Vec<f64>)],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let step = state.step;
    let mut idx = 0;
    let mut result = Ok(());
    params.visit_mut(&mut |name, tensor| {
        if result.is_err() {
            return;
        }
        let Some((gname, grad)) = grads.get(idx) else {
            result = Err(ClodeError::InvalidArgument(
                "adam_step: fewer gradient blocks than parameters".into(),
            ));
            return;
        };
        idx += 1;
        if gname != &name {
            result = Err(ClodeError::InvalidArgument(format!(
                "adam_step: gradient block `{gname}` does not match parameter `{name}`"
            )));
            return;
        }
        if grad.len() != tensor.numel() {
            result = Err(ClodeError::ShapeMismatch {
                op: "adam_step".into(),
                lhs: tensor.shape().to_vec(),
                rhs: vec![grad.len()],
            });
            return;
        }
        let moments = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
        });
        if moments.m.len() != grad.len() {
            result = Err(ClodeError::ShapeMismatch {
                op: "adam_step".into(),
                lhs: vec![moments.m.len()],
                rhs: vec![grad.len()],
            });
            return;
        }
        let mut values = tensor.data().to_vec();
        adam_update_block(&mut values, grad, moments, lr, step);
        match Tensor::new(tensor.shape().to_vec(), values) {
            Ok(new) => *tensor = new,
            Err(e) => result = Err(e),
        }
    });
    if result.is_ok() && idx != grads.len() {
        return Err(ClodeError::InvalidArgument(
            "adam_step: more gradient blocks than parameters".into(),
        ));
    }
    result
}

/// Scale all gradient blocks so the global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [(String, Vec<f64>)], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, g) in grads.iter() {
        for v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// One row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct TrainLogRow {
    pub step: u64,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

/// Training log CSV: `step,elbo,recon,kl,grad_norm`.
pub fn training_log_csv(rows: &[TrainLogRow]) -> String {
    let mut out = String::from("step,elbo,recon,kl,grad_norm\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step,
            crate::dataio::fmt_f64(r.elbo),
            crate::dataio::fmt_f64(r.recon),
            crate::dataio::fmt_f64(r.kl),
            crate::dataio::fmt_f64(r.grad_norm),
        ));
    }
    out
}

/// Called on checkpoint intervals with (step, params, optimizer).
pub type CheckpointSink<'a> = &'a mut dyn FnMut(u64, &ModelParams, &OptimizerState) -> Result<()>;

/// Optimize `params` against the mean negative ELBO of the windowed
/// dataset. Training continues from `optimizer.step`, so resuming a
/// loaded checkpoint replays the uninterrupted schedule exactly.
pub fn train(
    params: &mut ModelParams,
    optimizer: &mut OptimizerState,
    config: &TrainConfig,
    dataset: &[Trajectory],
    mut checkpoint_sink: Option<CheckpointSink<'_>>,
) -> Result<Vec<TrainLogRow>> {
    config.validate()?;
    let mut samples: Vec<TrainingSample> = Vec::new();
    for traj in dataset {
        samples.extend(window_history(traj, config.history_len, config.stride)?);
    }
    if samples.is_empty() {
        return Err(ClodeError::InvalidArgument(format!(
            "dataset is empty after windowing (L={}, stride={})",
            config.history_len, config.stride
        )));
    }

    let steps_per_epoch = samples.len().div_ceil(config.batch_size);
    let total_steps = (config.epochs * steps_per_epoch) as u64;
    let warmup_steps = (total_steps as f64 * 0.1).ceil() as u64;
    let latent_dim = params.dims.latent_dim;

    let mut log = Vec::new();
    let mut cached_epoch: Option<(u64, Vec<Vec<usize>>)> = None;

    let mut global_step = optimizer.step;
    while global_step < total_steps {
        let epoch = global_step / steps_per_epoch as u64;
        let batch_index = (global_step % steps_per_epoch as u64) as usize;
        if cached_epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let order: Vec<Vec<usize>> = {
                let indices: Vec<usize> = (0..samples.len()).collect();
                batch(&indices, config.batch_size, mix(config.seed, epoch))?
                    .into_iter()
                    .map(|b| b.into_iter().copied().collect())
                    .collect()
            };
            cached_epoch = Some((epoch, order));
        }
        let batch_indices = &cached_epoch.as_ref().expect("cached above").1[batch_index];

        let beta = if config.beta_warmup && warmup_steps > 0 {
            config.beta * ((global_step + 1) as f64 / warmup_steps as f64).min(1.0)
        } else {
            config.beta
        };

        let mut noise_rng = derive_rng(config.seed, SALT_NOISE, global_step);
        let mut grad_acc: Vec<(String, Vec<f64>)> = params
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, vec![0.0; t.numel()]))
            .collect();
        let mut elbo_sum = 0.0;
        let mut recon_sum = 0.0;
        let mut kl_sum = 0.0;

        for &sample_idx in batch_indices {
            let sample = &samples[sample_idx];
            let noise = Tensor::from_vec(standard_normal_vec(&mut noise_rng, latent_dim))?;
            let tape = GradientTape::new();
            let watched = params.watched(&tape);
            let (value, terms) = elbo(&watched, &sample.window, &noise, beta)?;
            let loss = value.neg()?;
            let loss_value = loss.scalar_value()?;
            if !loss_value.is_finite() {
                return Err(ClodeError::NonFiniteLoss {
                    step: global_step,
                    diagnostics: format!("recon={}, kl={}", terms.recon, terms.kl),
                });
            }
            elbo_sum += value.scalar_value()?;
            recon_sum += terms.recon;
            kl_sum += terms.kl;

            let grads = tape.backward(&loss)?;
            for ((_, acc), (_, wt)) in grad_acc.iter_mut().zip(watched.named_params().iter()) {
                let g = grads.get(wt).expect("every watched leaf has a gradient");
                for (a, v) in acc.iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }

        let inv = 1.0 / batch_indices.len() as f64;
        for (_, g) in grad_acc.iter_mut() {
            for v in g.iter_mut() {
                *v *= inv;
            }
        }
        let grad_norm = clip_global_norm(&mut grad_acc, config.grad_clip);
        adam_step(params, &grad_acc, optimizer, config.learning_rate)?;
        global_step = optimizer.step;

        log.push(TrainLogRow {
            step: global_step,
            elbo: elbo_sum * inv,
            recon: recon_sum * inv,
            kl: kl_sum * inv,
            grad_norm,
        });

        if config.checkpoint_interval > 0
            && global_step % config.checkpoint_interval as u64 == 0
        {
            if let Some(sink) = checkpoint_sink.as_mut() {
                sink(global_step, params, optimizer)?;
            }
        }
    }
    Ok(log)
}
