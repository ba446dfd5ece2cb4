//! RMSE metrics, multi-horizon rollout evaluation, and the
//! observation-history ablation.
//!
//! Errors follow the convention of the evaluation protocol: both
//! trajectories are expressed in the frame fixed at the ground-truth
//! start pose, longitudinal along the start heading, lateral across it,
//! and p = sqrt(x^2 + y^2) per sample. Per-step RMSE pools all agents
//! and rollout runs; a per-agent breakdown is emitted alongside.

use crate::dataio::fmt_f64;
use crate::error::{ClodeError, Result};
use crate::model::{predict, Dims, ModelParams};
use crate::policy::{ClodePolicy, ConstantVelocityPolicy, ReplayPolicy, RolloutMode};
use crate::rng::mix;
use crate::simenv::{rollout, LaneGeometry, ObservationSpec, Policy, VehicleState, WorldState};
use crate::trainer::{train, OptimizerState, TrainConfig};
use crate::trajectory::Trajectory;

/// Per-step longitudinal/lateral/total positional error of one sample.
#[derive(Debug, Clone, Copy)]
pub struct PositionalError {
    pub longitudinal: f64,
    pub lateral: f64,
    pub total: f64,
}

fn errors_against_anchor(
    pred: &[VehicleState],
    gt: &[VehicleState],
    anchor: &VehicleState,
) -> Vec<PositionalError> {
    let (sin_h, cos_h) = anchor.heading.sin_cos();
    pred.iter()
        .zip(gt)
        .map(|(p, g)| {
            let (dx, dy) = (p.x - g.x, p.y - g.y);
            let longitudinal = cos_h * dx + sin_h * dy;
            let lateral = -sin_h * dx + cos_h * dy;
            PositionalError {
                longitudinal,
                lateral,
                total: (longitudinal * longitudinal + lateral * lateral).sqrt(),
            }
        })
        .collect()
}

/// Per-step errors of a predicted trajectory against ground truth, in
/// the frame anchored at the ground-truth start pose.
pub fn positional_errors(pred: &Trajectory, gt: &Trajectory) -> Result<Vec<PositionalError>> {
    if pred.len() != gt.len() {
        return Err(ClodeError::InvalidArgument(format!(
            "positional_errors: length mismatch {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if (pred.dt - gt.dt).abs() > 1e-9 {
        return Err(ClodeError::InvalidArgument(format!(
            "positional_errors: dt mismatch {} vs {}",
            pred.dt, gt.dt
        )));
    }
    Ok(errors_against_anchor(&pred.states, &gt.states, &gt.states[0]))
}

/// sqrt(mean((v - v_hat)^2)) over samples.
pub fn rmse(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    if actual.is_empty() || actual.len() != predicted.len() {
        return Err(ClodeError::InvalidArgument(format!(
            "rmse: need equal nonzero sample counts, got {} and {}",
            actual.len(),
            predicted.len()
        )));
    }
    let sq: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p) * (a - p))
        .sum();
    Ok((sq / actual.len() as f64).sqrt())
}

/// Per-step RMSE table over a prediction horizon. Row j is j*dt seconds
/// after the conditioning window ends; row 0 is the shared start state.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub dt: f64,
    pub rmse_long: Vec<f64>,
    pub rmse_lat: Vec<f64>,
    pub rmse_total: Vec<f64>,
    /// Std of the per-sample total positional error at each step.
    pub std_pos: Vec<f64>,
    /// Samples pooled per step (agents x rollout runs).
    pub sample_count: usize,
    /// Trajectories skipped for insufficient length.
    pub skipped: usize,
    /// (agent id, per-step total RMSE across that agent's runs).
    pub per_agent_total: Vec<(usize, Vec<f64>)>,
}

impl MetricsRecord {
    pub fn horizon(&self) -> usize {
        self.rmse_total.len().saturating_sub(1)
    }

    /// (longitudinal, lateral, total) at row `step`.
    pub fn at_step(&self, step: usize) -> Option<(f64, f64, f64)> {
        if step < self.rmse_total.len() {
            Some((self.rmse_long[step], self.rmse_lat[step], self.rmse_total[step]))
        } else {
            None
        }
    }

    /// Metrics CSV: `step,time_s,rmse_long,rmse_lat,rmse_total,std_pos,m`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,time_s,rmse_long,rmse_lat,rmse_total,std_pos,m\n");
        for j in 0..self.rmse_total.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                j,
                fmt_f64(j as f64 * self.dt),
                fmt_f64(self.rmse_long[j]),
                fmt_f64(self.rmse_lat[j]),
                fmt_f64(self.rmse_total[j]),
                fmt_f64(self.std_pos[j]),
                self.sample_count,
            ));
        }
        out
    }

    /// Per-agent breakdown CSV: `agent_id,step,time_s,rmse_total`.
    pub fn per_agent_csv(&self) -> String {
        let mut out = String::from("agent_id,step,time_s,rmse_total\n");
        for (agent, series) in &self.per_agent_total {
            for (j, v) in series.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    agent,
                    j,
                    fmt_f64(j as f64 * self.dt),
                    fmt_f64(*v),
                ));
            }
        }
        out
    }
}

/// Which policy drives the evaluation rollouts.
#[derive(Clone, Copy)]
pub enum EvalPolicy<'a> {
    Clode {
        params: &'a ModelParams,
        /// Condition on at most this many recent steps (None = full).
        max_history: Option<usize>,
    },
    ConstantVelocity,
    /// Replay the ground-truth actions (re-integration oracle).
    GroundTruthReplay,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub history_len: usize,
    pub horizon: usize,
    /// Rollout runs per dataset in sampled mode (1 in deterministic).
    pub n_samples: usize,
    pub mode: RolloutMode,
    pub seed: u64,
    /// Encode once from the conditioning prefix and apply the decoded
    /// action means open loop, instead of re-encoding each step.
    pub open_loop: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            history_len: 5,
            horizon: 25,
            n_samples: 1,
            mode: RolloutMode::Deterministic,
            seed: 0,
            open_loop: false,
        }
    }
}

/// World and per-agent histories conditioned on the first `history_len`
/// steps of each trajectory: the world sits at the newest conditioning
/// state and every history has its final action masked, awaiting the
/// policy's first prediction.
pub fn conditioned_world(
    dataset: &[&Trajectory],
    lanes: &LaneGeometry,
    history_len: usize,
) -> Result<(WorldState, Vec<crate::trajectory::History>)> {
    let l = history_len;
    if l < 2 {
        return Err(ClodeError::InvalidArgument(
            "conditioning needs history_len >= 2".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(ClodeError::InvalidArgument("empty dataset".into()));
    }
    if dataset.iter().any(|t| t.len() < l) {
        return Err(ClodeError::InvalidArgument(format!(
            "every trajectory needs at least {l} steps for conditioning"
        )));
    }
    let dt = dataset[0].dt;
    let mut world = WorldState::new(
        dataset.iter().map(|t| t.states[l - 1]).collect(),
        lanes.clone(),
        dt,
    )?;
    world.time = dataset[0].times[l - 1];
    for (i, t) in dataset.iter().enumerate() {
        world.prev_actions[i] = t.actions[l - 2].clone();
    }
    let histories = dataset
        .iter()
        .map(|t| t.history_prefix(l, true))
        .collect::<Result<_>>()?;
    Ok((world, histories))
}

/// Closed-loop (or open-loop) evaluation of a policy against held-out
/// trajectories: condition on the first L steps, roll out H steps in
/// the simulator, and pool per-step positional errors across agents
/// and runs.
pub fn evaluate_rollout(
    policy: EvalPolicy<'_>,
    dataset: &[Trajectory],
    lanes: &LaneGeometry,
    spec: &ObservationSpec,
    cfg: &EvalConfig,
) -> Result<MetricsRecord> {
    let l = cfg.history_len;
    let h = cfg.horizon;
    if l < 2 || h == 0 {
        return Err(ClodeError::InvalidArgument(
            "evaluate_rollout: need history_len >= 2 and horizon >= 1".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(ClodeError::InvalidArgument("evaluate_rollout: empty dataset".into()));
    }
    let dt = dataset[0].dt;
    let usable: Vec<&Trajectory> = dataset.iter().filter(|t| t.len() >= l + h).collect();
    let skipped = dataset.len() - usable.len();
    if usable.is_empty() {
        return Ok(MetricsRecord {
            dt,
            rmse_long: vec![],
            rmse_lat: vec![],
            rmse_total: vec![],
            std_pos: vec![],
            sample_count: 0,
            skipped,
            per_agent_total: vec![],
        });
    }

    let runs = match cfg.mode {
        RolloutMode::Deterministic => 1,
        RolloutMode::Sampled => cfg.n_samples.max(1),
    };
    let n = usable.len();
    // per step: pooled errors across (run, agent)
    let mut pooled: Vec<Vec<PositionalError>> = vec![Vec::with_capacity(runs * n); h + 1];
    let mut per_agent_sq: Vec<Vec<f64>> = vec![vec![0.0; h + 1]; n];

    for run in 0..runs {
        let run_seed = mix(cfg.seed, run as u64);
        let (mut world, histories) = conditioned_world(&usable, lanes, l)?;

        let result = match policy {
            EvalPolicy::Clode { params, max_history } if cfg.open_loop => {
                // encode once per agent, decode the whole horizon, replay
                let mut sequences = Vec::with_capacity(n);
                for (i, t) in usable.iter().enumerate() {
                    let prefix = t.history_prefix(l, true)?;
                    let window = match max_history {
                        Some(w) if prefix.len() > w => prefix.tail(w),
                        _ => prefix,
                    };
                    let noise = match cfg.mode {
                        RolloutMode::Deterministic => None,
                        RolloutMode::Sampled => {
                            let mut rng =
                                crate::rng::derive_rng(run_seed, crate::rng::SALT_EVAL, i as u64);
                            Some(crate::tensor::Tensor::from_vec(
                                crate::rng::standard_normal_vec(&mut rng, params.dims.latent_dim),
                            )?)
                        }
                    };
                    let dists = predict(params, &window, h, noise.as_ref())?;
                    sequences.push(dists.iter().map(|d| d.mu.data().to_vec()).collect());
                }
                let mut replay = ReplayPolicy::new(sequences);
                rollout(&mut world, &mut replay, h, spec, Some(histories))?
            }
            EvalPolicy::Clode { params, max_history } => {
                let mut p = ClodePolicy {
                    params,
                    mode: cfg.mode,
                    seed: run_seed,
                    max_history,
                };
                rollout(&mut world, &mut p, h, spec, Some(histories))?
            }
            EvalPolicy::ConstantVelocity => {
                rollout(&mut world, &mut ConstantVelocityPolicy, h, spec, Some(histories))?
            }
            EvalPolicy::GroundTruthReplay => {
                let sequences: Vec<Vec<Vec<f64>>> = usable
                    .iter()
                    .map(|t| t.actions[l - 1..l - 1 + h].to_vec())
                    .collect();
                let mut replay = ReplayPolicy::new(sequences);
                rollout(&mut world, &mut replay, h, spec, Some(histories))?
            }
        };

        for (i, t) in usable.iter().enumerate() {
            let mut pred_states = result.trajectories[i].states.clone();
            pred_states.push(result.final_states[i]);
            let gt_states = &t.states[l - 1..l + h];
            let anchor = t.states[l - 1];
            let errors = errors_against_anchor(&pred_states, gt_states, &anchor);
            for (j, e) in errors.iter().enumerate() {
                pooled[j].push(*e);
                per_agent_sq[i][j] += e.total * e.total;
            }
        }
    }

    let m = runs * n;
    let mut rmse_long = Vec::with_capacity(h + 1);
    let mut rmse_lat = Vec::with_capacity(h + 1);
    let mut rmse_total = Vec::with_capacity(h + 1);
    let mut std_pos = Vec::with_capacity(h + 1);
    for step in &pooled {
        let inv = 1.0 / step.len() as f64;
        let sx: f64 = step.iter().map(|e| e.longitudinal * e.longitudinal).sum();
        let sy: f64 = step.iter().map(|e| e.lateral * e.lateral).sum();
        let sp: f64 = step.iter().map(|e| e.total * e.total).sum();
        let mean_p: f64 = step.iter().map(|e| e.total).sum::<f64>() * inv;
        rmse_long.push((sx * inv).sqrt());
        rmse_lat.push((sy * inv).sqrt());
        rmse_total.push((sp * inv).sqrt());
        std_pos.push((sp * inv - mean_p * mean_p).max(0.0).sqrt());
    }
    let per_agent_total = per_agent_sq
        .into_iter()
        .enumerate()
        .map(|(i, sq)| {
            (
                i,
                sq.into_iter().map(|s| (s / runs as f64).sqrt()).collect::<Vec<f64>>(),
            )
        })
        .collect();

    Ok(MetricsRecord {
        dt,
        rmse_long,
        rmse_lat,
        rmse_total,
        std_pos,
        sample_count: m,
        skipped,
        per_agent_total,
    })
}

/// One trained-and-evaluated record per history length, shared seed and
/// budget.
pub fn ablation(
    dims: Dims,
    train_data: &[Trajectory],
    eval_data: &[Trajectory],
    lanes: &LaneGeometry,
    spec: &ObservationSpec,
    history_lengths: &[usize],
    horizon: usize,
    base_config: &TrainConfig,
) -> Result<Vec<(usize, MetricsRecord)>> {
    if history_lengths.is_empty() {
        return Err(ClodeError::InvalidArgument("ablation: empty length list".into()));
    }
    let mut out = Vec::with_capacity(history_lengths.len());
    for &l in history_lengths {
        let mut params = ModelParams::init(dims, mix(base_config.seed, l as u64))?;
        let mut opt = OptimizerState::new();
        let config = TrainConfig {
            history_len: l,
            ..base_config.clone()
        };
        train(&mut params, &mut opt, &config, train_data, None)?;
        let record = evaluate_rollout(
            EvalPolicy::Clode {
                params: &params,
                max_history: Some(l),
            },
            eval_data,
            lanes,
            spec,
            &EvalConfig {
                history_len: l,
                horizon,
                seed: base_config.seed,
                ..Default::default()
            },
        )?;
        out.push((l, record));
    }
    Ok(out)
}

/// Ablation CSV: metrics rows with a leading `history_len` column.
pub fn ablation_csv(rows: &[(usize, MetricsRecord)]) -> String {
    let mut out = String::from("history_len,step,time_s,rmse_long,rmse_lat,rmse_total,std_pos,m\n");
    for (l, record) in rows {
        for j in 0..record.rmse_total.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                l,
                j,
                fmt_f64(j as f64 * record.dt),
                fmt_f64(record.rmse_long[j]),
                fmt_f64(record.rmse_lat[j]),
                fmt_f64(record.rmse_total[j]),
                fmt_f64(record.std_pos[j]),
                record.sample_count,
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::{generate_expert, ExpertConfig};
    use proptest::prelude::*;

    #[test]
    fn identical_trajectories_have_zero_errors() {
        let trajs = generate_expert(&ExpertConfig {
            agents: 1,
            steps: 10,
            ..Default::default()
        })
        .unwrap();
        let errors = positional_errors(&trajs[0], &trajs[0]).unwrap();
        assert!(errors.iter().all(|e| e.total == 0.0));
    }

    #[test]
    fn three_four_five_errors() {
        let base = generate_expert(&ExpertConfig {
            agents: 1,
            steps: 5,
            noise_scale: 0.0,
            lateral_jitter: 0.0,
            lane_change_fraction: 0.0,
            ..Default::default()
        })
        .unwrap()
        .remove(0);
        // ground truth heads along +x, so world x is longitudinal
        let mut pred = base.clone();
        pred.states[3].x += 3.0;
        pred.states[3].y += 4.0;
        let errors = positional_errors(&pred, &base).unwrap();
        assert!((errors[3].longitudinal - 3.0).abs() < 1e-12);
        assert!((errors[3].lateral - 4.0).abs() < 1e-12);
        assert!((errors[3].total - 5.0).abs() < 1e-12);
    }

    #[test]
    fn errors_invariant_under_rigid_transforms() {
        let mut rng = crate::rng::derive_rng(5, crate::rng::SALT_EVAL, 0);
        use rand::Rng;
        let base = generate_expert(&ExpertConfig {
            agents: 1,
            steps: 12,
            ..Default::default()
        })
        .unwrap()
        .remove(0);
        let mut pred = base.clone();
        for s in pred.states.iter_mut() {
            s.x += 0.3;
            s.y -= 0.1;
        }
        let reference = positional_errors(&pred, &base).unwrap();
        for _ in 0..5 {
            let angle: f64 = rng.gen_range(-3.0..3.0);
            let (tx, ty): (f64, f64) = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
            let rotate = |t: &Trajectory| {
                let mut out = t.clone();
                let (s, c) = angle.sin_cos();
                for st in out.states.iter_mut() {
                    let (x, y) = (st.x, st.y);
                    st.x = c * x - s * y + tx;
                    st.y = s * x + c * y + ty;
                    st.heading = crate::simenv::wrap_angle(st.heading + angle);
                }
                out
            };
            let errors = positional_errors(&rotate(&pred), &rotate(&base)).unwrap();
            for (a, b) in errors.iter().zip(&reference) {
                assert!((a.longitudinal - b.longitudinal).abs() < 1e-9);
                assert!((a.lateral - b.lateral).abs() < 1e-9);
                assert!((a.total - b.total).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rmse_known_values() {
        assert!((rmse(&[1.0, 3.0], &[1.0, 1.0]).unwrap() - 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(rmse(&[2.0, -1.0], &[2.0, -1.0]).unwrap(), 0.0);
        assert!(rmse(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn prop_rmse_permutation_invariant_and_nonnegative(
            pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..20)
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let direct = rmse(&a, &b).unwrap();
            prop_assert!(direct >= 0.0);
            let mut shuffled = pairs.clone();
            shuffled.reverse();
            let a2: Vec<f64> = shuffled.iter().map(|p| p.0).collect();
            let b2: Vec<f64> = shuffled.iter().map(|p| p.1).collect();
            prop_assert!((direct - rmse(&a2, &b2).unwrap()).abs() < 1e-12);
            let zero_iff = direct == 0.0;
            let all_equal = pairs.iter().all(|p| p.0 == p.1);
            prop_assert_eq!(zero_iff, all_equal);
        }
    }

    #[test]
    fn ground_truth_replay_has_machine_zero_rmse() {
        let config = ExpertConfig {
            agents: 3,
            steps: 40,
            ..Default::default()
        };
        let data = generate_expert(&config).unwrap();
        let lanes = LaneGeometry::parallel(config.lane_count, config.lane_width).unwrap();
        let spec = ObservationSpec {
            neighbor_count: config.neighbor_count,
        };
        let record = evaluate_rollout(
            EvalPolicy::GroundTruthReplay,
            &data,
            &lanes,
            &spec,
            &EvalConfig {
                history_len: 5,
                horizon: 20,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(record.sample_count, 3);
        assert!(record.rmse_total.iter().all(|&v| v <= 1e-9));
    }

    #[test]
    fn constant_velocity_rmse_grows_on_curved_experts() {
        let config = ExpertConfig {
            agents: 4,
            steps: 60,
            noise_scale: 0.5,
            lateral_jitter: 1.0,
            ..Default::default()
        };
        let data = generate_expert(&config).unwrap();
        let lanes = LaneGeometry::parallel(config.lane_count, config.lane_width).unwrap();
        let spec = ObservationSpec {
            neighbor_count: config.neighbor_count,
        };
        let record = evaluate_rollout(
            EvalPolicy::ConstantVelocity,
            &data,
            &lanes,
            &spec,
            &EvalConfig {
                history_len: 5,
                horizon: 40,
                ..Default::default()
            },
        )
        .unwrap();
        // the action first moves the position two steps after it is taken
        assert_eq!(record.rmse_total[1], 0.0);
        assert!(record.rmse_total[2] > 0.0);
        assert!(*record.rmse_total.last().unwrap() > 0.0);
        // smoothed over 5-step windows, the error profile should not decrease
        let smooth: Vec<f64> = record
            .rmse_total
            .windows(5)
            .map(|w| w.iter().sum::<f64>() / 5.0)
            .collect();
        for w in smooth.windows(2) {
            assert!(w[1] >= w[0] * 0.98, "smoothed RMSE regressed: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn too_short_trajectories_are_skipped() {
        let config = ExpertConfig {
            agents: 2,
            steps: 10,
            ..Default::default()
        };
        let data = generate_expert(&config).unwrap();
        let lanes = LaneGeometry::parallel(config.lane_count, config.lane_width).unwrap();
        let spec = ObservationSpec {
            neighbor_count: config.neighbor_count,
        };
        let record = evaluate_rollout(
            EvalPolicy::ConstantVelocity,
            &data,
            &lanes,
            &spec,
            &EvalConfig {
                history_len: 5,
                horizon: 25,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(record.sample_count, 0);
        assert_eq!(record.skipped, 2);
    }

    #[test]
    fn metrics_csv_row_count_matches_horizon() {
        let config = ExpertConfig {
            agents: 2,
            steps: 30,
            ..Default::default()
        };
        let data = generate_expert(&config).unwrap();
        let lanes = LaneGeometry::parallel(config.lane_count, config.lane_width).unwrap();
        let spec = ObservationSpec {
            neighbor_count: config.neighbor_count,
        };
        let record = evaluate_rollout(
            EvalPolicy::ConstantVelocity,
            &data,
            &lanes,
            &spec,
            &EvalConfig {
                history_len: 5,
                horizon: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let csv = record.to_csv();
        assert_eq!(csv.lines().count(), 1 + 11); // header + rows 0..=10
        assert!(csv.starts_with("step,time_s,rmse_long"));
    }
}
