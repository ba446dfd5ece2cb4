//! The cLODE network.
//!
//! Encoder: each (observation, action) step is embedded by an MLP; a
//! GRU hidden state is propagated backward in time between steps by an
//! ODE-RNN and updated at each step, ending in a diagonal Gaussian
//! posterior over the initial latent state. Decoder: the latent state
//! evolves forward under a learned ODE and an MLP readout maps each
//! latent to a Gaussian action distribution. Training maximizes the
//! per-trajectory ELBO with a reparameterized single-sample estimate.

use rand_chacha::ChaCha8Rng;

use crate::error::{ClodeError, Result};
use crate::nn::{GruParams, MlpParams};
use crate::odesolve::{solve, solve_backward_in_time, Dynamics, SolveMethod, SolveRequest};
use crate::rng::{derive_rng, SALT_INIT};
use crate::tensor::{ln_2pi, GradientTape, Tensor};
use crate::trajectory::{History, Trajectory};

/// Floor added to every Gaussian scale so likelihoods cannot blow up.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Internal RK4 substeps per observation interval.
pub const RK4_SUBSTEPS: f64 = 4.0;

/// Network widths. Parameter count is a pure function of this record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub embed_dim: usize,
    pub latent_dim: usize,
    /// Hidden width of the encoder dynamics MLP (two hidden layers).
    pub enc_dyn_hidden: usize,
    /// Hidden width of the decoder dynamics MLP (three hidden layers).
    pub dec_dyn_hidden: usize,
    /// Hidden width of the action readout MLP (two hidden layers).
    pub readout_hidden: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            obs_dim: 66,
            action_dim: 2,
            embed_dim: 64,
            latent_dim: 16,
            enc_dyn_hidden: 64,
            dec_dyn_hidden: 256,
            readout_hidden: 64,
        }
    }
}

impl Dims {
    fn validate(&self) -> Result<()> {
        let all = [
            self.obs_dim,
            self.action_dim,
            self.embed_dim,
            self.latent_dim,
            self.enc_dyn_hidden,
            self.dec_dyn_hidden,
            self.readout_hidden,
        ];
        if all.iter().any(|&d| d == 0) {
            return Err(ClodeError::InvalidArgument(format!(
                "all dims must be nonzero: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Diagonal Gaussian over the initial latent state.
#[derive(Debug, Clone)]
pub struct LatentPosterior {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Gaussian action distribution at one decoded step.
#[derive(Debug, Clone)]
pub struct ActionDistribution {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// All learnable weights.
#[derive(Clone)]
pub struct ModelParams {
    pub dims: Dims,
    /// (obs + action) -> embedding, 6 dense layers.
    pub embed: MlpParams,
    /// Encoder hidden-state dynamics, embed -> embed.
    pub enc_dyn: MlpParams,
    /// Encoder recurrent update.
    pub gru: GruParams,
    /// Final hidden state -> (mu, raw sigma) of the posterior.
    pub head: MlpParams,
    /// Latent decoder dynamics f(z), latent -> latent.
    pub dec_dyn: MlpParams,
    /// Latent -> (mu, raw sigma) of the action distribution, 3 dense layers.
    pub readout: MlpParams,
}

impl std::fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ModelParams({:?}, {} params)", self.dims, self.param_count())
    }
}

impl ModelParams {
    pub fn init(dims: Dims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng: ChaCha8Rng = derive_rng(seed, SALT_INIT, 0);
        let e = dims.embed_dim;
        let embed_in = dims.obs_dim + dims.action_dim;
        let embed = MlpParams::init(&[embed_in, e, e, e, e, e, e], &mut rng)?;
        let h = dims.enc_dyn_hidden;
        let enc_dyn = MlpParams::init(&[e, h, h, e], &mut rng)?;
        let gru = GruParams::init(e, e, &mut rng)?;
        let head = MlpParams::init(&[e, 2 * dims.latent_dim], &mut rng)?;
        let d = dims.dec_dyn_hidden;
        let dec_dyn = MlpParams::init(&[dims.latent_dim, d, d, d, dims.latent_dim], &mut rng)?;
        let r = dims.readout_hidden;
        let readout = MlpParams::init(&[dims.latent_dim, r, r, 2 * dims.action_dim], &mut rng)?;
        Ok(ModelParams {
            dims,
            embed,
            enc_dyn,
            gru,
            head,
            dec_dyn,
            readout,
        })
    }

    /// Parameters in canonical order, used for gradients, the optimizer,
    /// and checkpoints.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.embed.visit("embed", f);
        self.enc_dyn.visit("enc_dyn", f);
        self.gru.visit("gru", f);
        self.head.visit("head", f);
        self.dec_dyn.visit("dec_dyn", f);
        self.readout.visit("readout", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.embed.visit_mut("embed", f);
        self.enc_dyn.visit_mut("enc_dyn", f);
        self.gru.visit_mut("gru", f);
        self.head.visit_mut("head", f);
        self.dec_dyn.visit_mut("dec_dyn", f);
        self.readout.visit_mut("readout", f);
    }

    /// Overwrite one named parameter block (checkpoint load path).
    pub fn set_param(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        let mut found = false;
        let mut result = Ok(());
        self.visit_mut(&mut |n, t| {
            if n == name && !found {
                found = true;
                if t.shape() != shape {
                    result = Err(ClodeError::Checkpoint(format!(
                        "block `{name}` has shape {:?}, expected {:?}",
                        shape,
                        t.shape()
                    )));
                    return;
                }
                match Tensor::new(shape.to_vec(), data.to_vec()) {
                    Ok(new) => *t = new,
                    Err(e) => result = Err(e),
                }
            }
        });
        if !found {
            return Err(ClodeError::Checkpoint(format!("unknown block name `{name}`")));
        }
        result
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Copy with every tensor bound to the tape as a differentiable leaf.
    pub fn watched(&self, tape: &GradientTape) -> ModelParams {
        ModelParams {
            dims: self.dims,
            embed: self.embed.watched(tape),
            enc_dyn: self.enc_dyn.watched(tape),
            gru: self.gru.watched(tape),
            head: self.head.watched(tape),
            dec_dyn: self.dec_dyn.watched(tape),
            readout: self.readout.watched(tape),
        }
    }
}

struct MlpDynamics<'a> {
    mlp: &'a MlpParams,
}

impl Dynamics for MlpDynamics<'_> {
    fn eval(&self, z: &Tensor, _t: f64) -> Result<Tensor> {
        self.mlp.forward(z)
    }
}

/// Embed one (observation, action) pair.
pub fn embed_step(params: &ModelParams, observation: &Tensor, action: &Tensor) -> Result<Tensor> {
    if observation.shape() != [params.dims.obs_dim] || action.shape() != [params.dims.action_dim] {
        return Err(ClodeError::ShapeMismatch {
            op: "embed_step".into(),
            lhs: vec![params.dims.obs_dim, params.dims.action_dim],
            rhs: [observation.shape(), action.shape()].concat(),
        });
    }
    params.embed.forward(&Tensor::concat(&[observation, action], 0)?)
}

fn split_gaussian(out: &Tensor, dim: usize) -> Result<(Tensor, Tensor)> {
    let mu = out.slice(0, 0, dim)?;
    let sigma = out.slice(0, dim, dim)?.softplus()?.add_scalar(SIGMA_FLOOR)?;
    Ok((mu, sigma))
}

/// Posterior q(z | history) from the backward ODE-RNN encoder.
///
/// The hidden state starts at zero at the newest step, is updated there
/// by the GRU, then alternates ODE evolution backward over each
/// inter-step interval with GRU updates, oldest step last. A step whose
/// action is absent embeds a zero action vector.
pub fn encode(params: &ModelParams, history: &History) -> Result<LatentPosterior> {
    let t_len = history.len();
    if t_len == 0 {
        return Err(ClodeError::InvalidArgument("encode: empty history".into()));
    }
    let zero_action = Tensor::zeros(&[params.dims.action_dim]);
    let mut embeds = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let obs = Tensor::from_vec(history.observations[t].clone())?;
        let action = match &history.actions[t] {
            Some(a) => Tensor::from_vec(a.clone())?,
            None => zero_action.clone(),
        };
        embeds.push(embed_step(params, &obs, &action)?);
    }

    let dynamics = MlpDynamics { mlp: &params.enc_dyn };
    let method = SolveMethod::Rk4 {
        dt: history.dt / RK4_SUBSTEPS,
    };
    let mut hidden = Tensor::zeros(&[params.dims.embed_dim]);
    for t in (0..t_len).rev() {
        if t + 1 < t_len {
            let times = [history.times[t + 1], history.times[t]];
            let evolved = solve_backward_in_time(&SolveRequest {
                dynamics: &dynamics,
                z0: &hidden,
                times: &times,
                method,
            })?;
            hidden = evolved.into_iter().next_back().expect("one state per time");
        }
        hidden = params.gru.step(&hidden, &embeds[t])?;
    }

    let out = params.head.forward(&hidden)?;
    let (mu, sigma) = split_gaussian(&out, params.dims.latent_dim)?;
    Ok(LatentPosterior { mu, sigma })
}

/// Reparameterized sample z = mu + sigma .* noise.
pub fn sample_latent(posterior: &LatentPosterior, noise: &Tensor) -> Result<Tensor> {
    if noise.shape() != posterior.mu.shape() {
        return Err(ClodeError::ShapeMismatch {
            op: "sample_latent".into(),
            lhs: posterior.mu.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    posterior.mu.add(&posterior.sigma.mul(noise)?)
}

/// Evolve z1 through the decoder dynamics and read out one action
/// distribution per requested time. times[0] is z1's own time.
pub fn decode(params: &ModelParams, z1: &Tensor, times: &[f64]) -> Result<Vec<ActionDistribution>> {
    if times.is_empty() {
        return Err(ClodeError::InvalidArgument("decode: empty time grid".into()));
    }
    if times.len() > 1 && !times.windows(2).all(|w| w[1] > w[0]) {
        return Err(ClodeError::InvalidArgument(format!(
            "decode: times must be strictly increasing, got {times:?}"
        )));
    }
    let states = if times.len() == 1 {
        vec![z1.clone()]
    } else {
        let dynamics = MlpDynamics { mlp: &params.dec_dyn };
        solve(&SolveRequest {
            dynamics: &dynamics,
            z0: z1,
            times,
            method: SolveMethod::Rk4 {
                dt: (times[1] - times[0]) / RK4_SUBSTEPS,
            },
        })?
    };
    states
        .iter()
        .map(|z| {
            let out = params.readout.forward(z)?;
            let (mu, sigma) = split_gaussian(&out, params.dims.action_dim)?;
            Ok(ActionDistribution { mu, sigma })
        })
        .collect()
}

/// Diagonal Gaussian log density of x under dist.
pub fn gaussian_log_prob(x: &Tensor, dist: &ActionDistribution) -> Result<Tensor> {
    if x.shape() != dist.mu.shape() {
        return Err(ClodeError::ShapeMismatch {
            op: "gaussian_log_prob".into(),
            lhs: dist.mu.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    if dist.sigma.data().iter().any(|&s| s < SIGMA_FLOOR - 1e-12) {
        return Err(ClodeError::InvalidArgument(format!(
            "gaussian_log_prob: sigma below floor {SIGMA_FLOOR} (upstream bug)"
        )));
    }
    let d = x.numel() as f64;
    let diff = x.sub(&dist.mu)?;
    let quad = diff
        .square()?
        .div(&dist.sigma.square()?.scale(2.0)?)?
        .sum_all()?;
    let log_scales = dist.sigma.log()?.sum_all()?;
    log_scales
        .add(&quad)?
        .neg()?
        .add_scalar(-0.5 * ln_2pi() * d)
}

/// KL(q || N(0, I)) for a diagonal Gaussian q, in closed form.
pub fn kl_diag_gaussian(posterior: &LatentPosterior) -> Result<Tensor> {
    let s2 = posterior.sigma.square()?;
    posterior
        .mu
        .square()?
        .add(&s2)?
        .sub(&s2.log()?)?
        .add_scalar(-1.0)?
        .sum_all()?
        .scale(0.5)
}

/// Reconstruction and KL terms of one ELBO evaluation, as plain values.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl: f64,
}

/// Single-sample ELBO of one trajectory:
/// sum_t log p(a_t | z_t) - beta * KL(q(z | h_T) || p(z)).
pub fn elbo(
    params: &ModelParams,
    trajectory: &Trajectory,
    noise: &Tensor,
    beta: f64,
) -> Result<(Tensor, ElboTerms)> {
    if beta < 0.0 {
        return Err(ClodeError::InvalidArgument(format!(
            "elbo: beta must be >= 0, got {beta}"
        )));
    }
    let posterior = encode(params, &trajectory.full_history())?;
    let z1 = sample_latent(&posterior, noise)?;
    let dists = decode(params, &z1, &trajectory.times)?;
    let mut recon: Option<Tensor> = None;
    for (action, dist) in trajectory.actions.iter().zip(&dists) {
        let lp = gaussian_log_prob(&Tensor::from_vec(action.clone())?, dist)?;
        recon = Some(match recon {
            Some(acc) => acc.add(&lp)?,
            None => lp,
        });
    }
    let recon = recon.expect("trajectory is non-empty");
    let kl = kl_diag_gaussian(&posterior)?;
    let value = recon.sub(&kl.scale(beta)?)?;
    let terms = ElboTerms {
        recon: recon.scalar_value()?,
        kl: kl.scalar_value()?,
    };
    Ok((value, terms))
}

/// Distributions for the next k actions after a history. Deterministic
/// mode (no noise) decodes from the posterior mean.
pub fn predict(
    params: &ModelParams,
    history: &History,
    horizon: usize,
    noise: Option<&Tensor>,
) -> Result<Vec<ActionDistribution>> {
    if horizon == 0 {
        return Err(ClodeError::InvalidArgument("predict: horizon must be >= 1".into()));
    }
    if history.is_empty() {
        return Err(ClodeError::InvalidArgument("predict: empty history".into()));
    }
    let posterior = encode(params, history)?;
    let z1 = match noise {
        Some(n) => sample_latent(&posterior, n)?,
        None => posterior.mu.clone(),
    };
    let last = *history.times.last().expect("non-empty");
    let mut times = history.times.clone();
    times.extend((1..=horizon).map(|i| last + i as f64 * history.dt));
    let mut dists = decode(params, &z1, &times)?;
    Ok(dists.split_off(history.len()))
}
