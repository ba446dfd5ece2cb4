//! Time-indexed (action, observation) sequences and their prediction-time
//! prefixes.

use crate::error::{ClodeError, Result};
use crate::simenv::VehicleState;

/// One agent's recorded episode: uniformly spaced times, the vehicle
/// state at each step, the action taken there, and the observation seen
/// there. States carry the positional ground truth used by evaluation;
/// the model itself consumes only times, actions, and observations.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<VehicleState>,
    pub actions: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
}

const DT_TOL: f64 = 1e-9;

impl Trajectory {
    pub fn new(
        dt: f64,
        times: Vec<f64>,
        states: Vec<VehicleState>,
        actions: Vec<Vec<f64>>,
        observations: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if dt <= 0.0 || !dt.is_finite() {
            return Err(ClodeError::InvalidArgument(format!(
                "trajectory dt must be positive, got {dt}"
            )));
        }
        if times.is_empty() {
            return Err(ClodeError::InvalidArgument("empty trajectory".into()));
        }
        if states.len() != times.len()
            || actions.len() != times.len()
            || observations.len() != times.len()
        {
            return Err(ClodeError::InvalidArgument(format!(
                "trajectory field lengths disagree: times {}, states {}, actions {}, observations {}",
                times.len(),
                states.len(),
                actions.len(),
                observations.len()
            )));
        }
        for w in times.windows(2) {
            if (w[1] - w[0] - dt).abs() > DT_TOL {
                return Err(ClodeError::InvalidArgument(format!(
                    "trajectory times not uniformly spaced by dt={dt}: {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        let finite = times.iter().all(|v| v.is_finite())
            && actions.iter().flatten().all(|v| v.is_finite())
            && observations.iter().flatten().all(|v| v.is_finite())
            && states.iter().all(|s| {
                s.x.is_finite() && s.y.is_finite() && s.heading.is_finite() && s.speed.is_finite()
            });
        if !finite {
            return Err(ClodeError::InvalidArgument(
                "trajectory contains non-finite entries".into(),
            ));
        }
        Ok(Trajectory {
            dt,
            times,
            states,
            actions,
            observations,
        })
    }

    /// Model-side constructor for data with no simulator states.
    pub fn from_sequences(
        dt: f64,
        times: Vec<f64>,
        actions: Vec<Vec<f64>>,
        observations: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let states = vec![VehicleState::default(); times.len()];
        Trajectory::new(dt, times, states, actions, observations)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn action_dim(&self) -> usize {
        self.actions[0].len()
    }

    pub fn obs_dim(&self) -> usize {
        self.observations[0].len()
    }

    /// Copy of steps [start, start+len).
    pub fn window(&self, start: usize, len: usize) -> Result<Trajectory> {
        if start + len > self.len() || len == 0 {
            return Err(ClodeError::InvalidArgument(format!(
                "window [{start}, {}) out of range for length {}",
                start + len,
                self.len()
            )));
        }
        Ok(Trajectory {
            dt: self.dt,
            times: self.times[start..start + len].to_vec(),
            states: self.states[start..start + len].to_vec(),
            actions: self.actions[start..start + len].to_vec(),
            observations: self.observations[start..start + len].to_vec(),
        })
    }

    /// The whole trajectory as an encoder input (every action present).
    pub fn full_history(&self) -> History {
        History {
            dt: self.dt,
            times: self.times.clone(),
            observations: self.observations.clone(),
            actions: self.actions.iter().cloned().map(Some).collect(),
        }
    }

    /// First `len` steps as a prediction-time history. With
    /// `mask_last_action` the final step's action is withheld, matching
    /// the moment a policy is asked to act.
    pub fn history_prefix(&self, len: usize, mask_last_action: bool) -> Result<History> {
        if len == 0 || len > self.len() {
            return Err(ClodeError::InvalidArgument(format!(
                "history prefix {len} out of range for length {}",
                self.len()
            )));
        }
        let mut actions: Vec<Option<Vec<f64>>> =
            self.actions[..len].iter().cloned().map(Some).collect();
        if mask_last_action {
            actions[len - 1] = None;
        }
        Ok(History {
            dt: self.dt,
            times: self.times[..len].to_vec(),
            observations: self.observations[..len].to_vec(),
            actions,
        })
    }
}

/// A trajectory prefix for conditioning. The final action may be absent
/// (None) when the policy has not acted yet at the newest step.
#[derive(Debug, Clone)]
pub struct History {
    pub dt: f64,
    pub times: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Option<Vec<f64>>>,
}

impl History {
    pub fn new(dt: f64) -> Self {
        History {
            dt,
            times: Vec::new(),
            observations: Vec::new(),
            actions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_time(&self) -> Option<f64> {
        self.times.last().copied()
    }

    /// Append a newly observed step with its action still unknown.
    pub fn push_step(&mut self, time: f64, observation: Vec<f64>) {
        self.times.push(time);
        self.observations.push(observation);
        self.actions.push(None);
    }

    /// Fill in the action chosen at the newest step.
    pub fn set_last_action(&mut self, action: Vec<f64>) {
        if let Some(slot) = self.actions.last_mut() {
            *slot = Some(action);
        }
    }

    /// The most recent `max_len` steps (the whole history if shorter).
    pub fn tail(&self, max_len: usize) -> History {
        let skip = self.len().saturating_sub(max_len);
        History {
            dt: self.dt,
            times: self.times[skip..].to_vec(),
            observations: self.observations[skip..].to_vec(),
            actions: self.actions[skip..].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(n: usize) -> Trajectory {
        let dt = 0.1;
        Trajectory::new(
            dt,
            (0..n).map(|i| i as f64 * dt).collect(),
            vec![VehicleState::default(); n],
            (0..n).map(|i| vec![i as f64, -(i as f64)]).collect(),
            (0..n).map(|i| vec![i as f64; 3]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_non_uniform_times() {
        let err = Trajectory::new(
            0.1,
            vec![0.0, 0.1, 0.3],
            vec![VehicleState::default(); 3],
            vec![vec![0.0]; 3],
            vec![vec![0.0]; 3],
        );
        assert!(err.is_err());
    }

    #[test]
    fn window_copies_the_right_steps() {
        let t = traj(10);
        let w = t.window(3, 4).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(w.times[0], t.times[3]);
        assert_eq!(w.actions[0], t.actions[3]);
    }

    #[test]
    fn history_prefix_masks_last_action() {
        let t = traj(5);
        let h = t.history_prefix(3, true).unwrap();
        assert_eq!(h.len(), 3);
        assert!(h.actions[0].is_some() && h.actions[1].is_some());
        assert!(h.actions[2].is_none());
    }

    #[test]
    fn tail_keeps_newest_steps() {
        let t = traj(8);
        let h = t.full_history().tail(3);
        assert_eq!(h.len(), 3);
        assert_eq!(h.times[0], t.times[5]);
        let whole = t.full_history().tail(100);
        assert_eq!(whole.len(), 8);
    }
}
