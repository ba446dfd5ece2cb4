//! Policies that drive closed-loop rollouts.

use crate::error::Result;
use crate::model::{predict, ModelParams};
use crate::rng::{derive_rng, mix, standard_normal_vec, SALT_POLICY};
use crate::simenv::Policy;
use crate::tensor::Tensor;
use crate::trajectory::History;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// Decode from the posterior mean.
    Deterministic,
    /// Reparameterized latent sample per prediction.
    Sampled,
}

/// Drives agents with the cLODE model: encode the (windowed) history,
/// decode one step ahead, emit the action mean.
pub struct ClodePolicy<'a> {
    pub params: &'a ModelParams,
    pub mode: RolloutMode,
    pub seed: u64,
    /// Condition on at most this many most-recent steps. Keeping this at
    /// the training window length matches the training distribution and
    /// bounds per-step cost; None encodes the full history.
    pub max_history: Option<usize>,
}

impl<'a> ClodePolicy<'a> {
    pub fn new(params: &'a ModelParams, mode: RolloutMode, seed: u64) -> Self {
        ClodePolicy {
            params,
            mode,
            seed,
            max_history: None,
        }
    }

    pub fn with_max_history(mut self, max_history: usize) -> Self {
        self.max_history = Some(max_history);
        self
    }
}

impl Policy for ClodePolicy<'_> {
    fn act(&mut self, agent_id: usize, history: &History) -> Result<Vec<f64>> {
        let window;
        let conditioned = match self.max_history {
            Some(w) if history.len() > w => {
                window = history.tail(w);
                &window
            }
            _ => history,
        };
        let noise = match self.mode {
            RolloutMode::Deterministic => None,
            RolloutMode::Sampled => {
                // keyed by (agent, step) so agent iteration order is irrelevant
                let mut rng = derive_rng(
                    self.seed,
                    SALT_POLICY,
                    mix(agent_id as u64, history.len() as u64),
                );
                Some(Tensor::from_vec(standard_normal_vec(
                    &mut rng,
                    self.params.dims.latent_dim,
                ))?)
            }
        };
        let dists = predict(self.params, conditioned, 1, noise.as_ref())?;
        Ok(dists[0].mu.data().to_vec())
    }
}

/// Zero action: speed and heading stay constant.
pub struct ConstantVelocityPolicy;

impl Policy for ConstantVelocityPolicy {
    fn act(&mut self, _agent_id: usize, _history: &History) -> Result<Vec<f64>> {
        Ok(vec![0.0, 0.0])
    }
}

/// Replays a fixed per-agent action sequence; each call consumes the
/// next action. Used for ground-truth re-integration oracles and for
/// open-loop evaluation of precomputed predictions.
pub struct ReplayPolicy {
    actions: Vec<Vec<Vec<f64>>>,
    cursors: Vec<usize>,
}

impl ReplayPolicy {
    pub fn new(actions: Vec<Vec<Vec<f64>>>) -> Self {
        let n = actions.len();
        ReplayPolicy {
            actions,
            cursors: vec![0; n],
        }
    }
}

impl Policy for ReplayPolicy {
    fn act(&mut self, agent_id: usize, _history: &History) -> Result<Vec<f64>> {
        let cursor = self.cursors[agent_id];
        let action = self.actions[agent_id]
            .get(cursor)
            .ok_or_else(|| {
                crate::error::ClodeError::InvalidArgument(format!(
                    "replay exhausted for agent {agent_id} after {cursor} actions"
                ))
            })?
            .clone();
        self.cursors[agent_id] += 1;
        Ok(action)
    }
}
