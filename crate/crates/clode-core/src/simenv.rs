//! Multi-agent kinematic driving world.
//!
//! Unicycle agents on parallel straight lanes. Actions are (longitudinal
//! acceleration m/s^2, yaw rate rad/s); observations are deterministic
//! functions of the world state, so recorded trajectories re-integrate
//! exactly. A proportional lane-keeping/lane-changing controller plays
//! the expert for synthetic data.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ClodeError, Result};
use crate::rng::{derive_rng, SALT_EXPERT};
use crate::trajectory::{History, Trajectory};

/// Pose and speed of one agent. Heading is wrapped to (-pi, pi];
/// speed never goes negative.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        VehicleState {
            x,
            y,
            heading: wrap_angle(heading),
            speed: speed.max(0.0),
        }
    }
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut r = a % tau;
    if r <= -std::f64::consts::PI {
        r += tau;
    } else if r > std::f64::consts::PI {
        r -= tau;
    }
    r
}

/// Explicit Euler with pre-update values; speed clamps at zero.
pub fn kinematic_step(state: &VehicleState, action: &[f64], dt: f64) -> Result<VehicleState> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(ClodeError::InvalidArgument(format!(
            "kinematic_step: dt must be positive, got {dt}"
        )));
    }
    if action.len() != 2 || action.iter().any(|v| !v.is_finite()) {
        return Err(ClodeError::InvalidArgument(format!(
            "kinematic_step: action must be 2 finite values, got {action:?}"
        )));
    }
    let (accel, yaw_rate) = (action[0], action[1]);
    Ok(VehicleState {
        x: state.x + state.speed * state.heading.cos() * dt,
        y: state.y + state.speed * state.heading.sin() * dt,
        heading: wrap_angle(state.heading + yaw_rate * dt),
        speed: (state.speed + accel * dt).max(0.0),
    })
}

/// Parallel straight lanes along the x axis.
#[derive(Debug, Clone)]
pub struct LaneGeometry {
    pub centerline_offsets: Vec<f64>,
    pub lane_width: f64,
}

impl LaneGeometry {
    pub fn parallel(lane_count: usize, lane_width: f64) -> Result<Self> {
        if lane_count == 0 {
            return Err(ClodeError::InvalidArgument(
                "lane geometry needs at least one lane".into(),
            ));
        }
        if lane_width <= 0.0 {
            return Err(ClodeError::InvalidArgument(format!(
                "lane width must be positive, got {lane_width}"
            )));
        }
        Ok(LaneGeometry {
            centerline_offsets: (0..lane_count).map(|i| i as f64 * lane_width).collect(),
            lane_width,
        })
    }

    pub fn lane_count(&self) -> usize {
        self.centerline_offsets.len()
    }

    /// Nearest centerline: (lane index, signed offset y - center).
    /// Ties go to the lower index.
    pub fn nearest_center(&self, y: f64) -> (usize, f64) {
        let mut best = (0usize, y - self.centerline_offsets[0]);
        for (i, c) in self.centerline_offsets.iter().enumerate().skip(1) {
            let off = y - c;
            if off.abs() < best.1.abs() {
                best = (i, off);
            }
        }
        best
    }

    pub fn left_edge(&self) -> f64 {
        self.centerline_offsets.last().unwrap() + self.lane_width / 2.0
    }

    pub fn right_edge(&self) -> f64 {
        self.centerline_offsets[0] - self.lane_width / 2.0
    }
}

/// Snapshot of every agent plus the road, advanced synchronously.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub agents: Vec<VehicleState>,
    pub lanes: LaneGeometry,
    pub time: f64,
    pub dt: f64,
    /// Action each agent applied on the previous step (zeros at t=0);
    /// feeds the ego features of the observation.
    pub prev_actions: Vec<Vec<f64>>,
}

impl WorldState {
    pub fn new(agents: Vec<VehicleState>, lanes: LaneGeometry, dt: f64) -> Result<Self> {
        if agents.is_empty() {
            return Err(ClodeError::InvalidArgument("world needs at least one agent".into()));
        }
        if dt <= 0.0 {
            return Err(ClodeError::InvalidArgument(format!(
                "world dt must be positive, got {dt}"
            )));
        }
        let n = agents.len();
        Ok(WorldState {
            agents,
            lanes,
            time: 0.0,
            dt,
            prev_actions: vec![vec![0.0, 0.0]; n],
        })
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    /// Advance every agent one step with its action, synchronously.
    pub fn advance(&mut self, actions: &[Vec<f64>]) -> Result<()> {
        if actions.len() != self.agents.len() {
            return Err(ClodeError::InvalidArgument(format!(
                "advance: {} actions for {} agents",
                actions.len(),
                self.agents.len()
            )));
        }
        let mut next = Vec::with_capacity(self.agents.len());
        for (state, action) in self.agents.iter().zip(actions) {
            next.push(kinematic_step(state, action, self.dt)?);
        }
        self.agents = next;
        self.prev_actions = actions.to_vec();
        self.time += self.dt;
        Ok(())
    }
}

pub const EGO_FEATURES: usize = 6;
pub const NEIGHBOR_FEATURES: usize = 7;
pub const LANE_CONTEXT_FEATURES: usize = 4;

/// Observation layout. Per agent:
/// ego [v, heading, lateral offset, |lateral offset|, prev accel,
/// prev yaw rate], then `neighbor_count` blocks of [rel x, rel y,
/// rel vx, rel vy, rel speed, rel heading, presence] in ascending
/// distance order (ego frame), then lane context [dist to left edge,
/// dist to right edge, lane width, nearest lane index].
/// The default K=8 gives 6 + 8*7 + 4 = 66.
#[derive(Debug, Clone, Copy)]
pub struct ObservationSpec {
    pub neighbor_count: usize,
}

impl Default for ObservationSpec {
    fn default() -> Self {
        ObservationSpec { neighbor_count: 8 }
    }
}

impl ObservationSpec {
    pub fn total_dim(&self) -> usize {
        EGO_FEATURES + self.neighbor_count * NEIGHBOR_FEATURES + LANE_CONTEXT_FEATURES
    }
}

/// Observation vector for one agent; dim == spec.total_dim() always.
pub fn observe(world: &WorldState, agent_id: usize, spec: &ObservationSpec) -> Result<Vec<f64>> {
    if agent_id >= world.agents.len() {
        return Err(ClodeError::InvalidArgument(format!(
            "observe: agent {agent_id} out of range ({} agents)",
            world.agents.len()
        )));
    }
    let ego = &world.agents[agent_id];
    let (lane_idx, offset) = world.lanes.nearest_center(ego.y);
    let prev = &world.prev_actions[agent_id];

    let mut obs = Vec::with_capacity(spec.total_dim());
    obs.extend_from_slice(&[
        ego.speed,
        ego.heading,
        offset,
        offset.abs(),
        prev[0],
        prev[1],
    ]);

    // neighbors by ascending Euclidean distance, ties to the lower id
    let mut order: Vec<usize> = (0..world.agents.len()).filter(|&j| j != agent_id).collect();
    let dist2 = |j: usize| {
        let o = &world.agents[j];
        (o.x - ego.x).powi(2) + (o.y - ego.y).powi(2)
    };
    order.sort_by(|&a, &b| dist2(a).partial_cmp(&dist2(b)).unwrap().then(a.cmp(&b)));

    let (sin_h, cos_h) = ego.heading.sin_cos();
    let ego_v = (ego.speed * cos_h, ego.speed * sin_h);
    for slot in 0..spec.neighbor_count {
        match order.get(slot) {
            Some(&j) => {
                let other = &world.agents[j];
                let (dx, dy) = (other.x - ego.x, other.y - ego.y);
                let (sin_o, cos_o) = other.heading.sin_cos();
                let (dvx, dvy) = (
                    other.speed * cos_o - ego_v.0,
                    other.speed * sin_o - ego_v.1,
                );
                obs.extend_from_slice(&[
                    cos_h * dx + sin_h * dy,
                    -sin_h * dx + cos_h * dy,
                    cos_h * dvx + sin_h * dvy,
                    -sin_h * dvx + cos_h * dvy,
                    other.speed - ego.speed,
                    wrap_angle(other.heading - ego.heading),
                    1.0,
                ]);
            }
            None => obs.extend_from_slice(&[0.0; NEIGHBOR_FEATURES]),
        }
    }

    obs.extend_from_slice(&[
        world.lanes.left_edge() - ego.y,
        ego.y - world.lanes.right_edge(),
        world.lanes.lane_width,
        lane_idx as f64,
    ]);
    Ok(obs)
}

// Expert controller gains and action bounds.
const K_SPEED: f64 = 0.8;
const K_LAT: f64 = 0.15;
const K_HEAD: f64 = 2.0;
const ACCEL_MIN: f64 = -4.0;
const ACCEL_MAX: f64 = 3.0;
const YAW_RATE_MAX: f64 = 0.5;

/// Synthetic expert configuration.
#[derive(Debug, Clone)]
pub struct ExpertConfig {
    pub agents: usize,
    pub steps: usize,
    pub dt: f64,
    pub lane_count: usize,
    pub lane_width: f64,
    /// Fraction of agents that perform one lane change; the rest keep lane.
    pub lane_change_fraction: f64,
    /// Std-dev of the acceleration noise (m/s^2); yaw-rate noise is
    /// 0.15x this. Noise is clamped to the action bounds.
    pub noise_scale: f64,
    pub seed: u64,
    pub speed_range: (f64, f64),
    /// Max initial lateral offset from the lane centerline (m).
    pub lateral_jitter: f64,
    /// Base longitudinal spacing between agents in the same lane (m).
    pub spacing: f64,
    pub neighbor_count: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            agents: 22,
            steps: 500,
            dt: 0.1,
            lane_count: 5,
            lane_width: 3.7,
            lane_change_fraction: 0.2,
            noise_scale: 0.3,
            seed: 0,
            speed_range: (8.0, 15.0),
            lateral_jitter: 0.3,
            spacing: 20.0,
            neighbor_count: 8,
        }
    }
}

struct ExpertAgent {
    target_lane: usize,
    v_target: f64,
    /// Step at which the lane change triggers, if any, and its direction.
    change: Option<(usize, isize)>,
}

fn expert_action(state: &VehicleState, target_center: f64, v_target: f64) -> Vec<f64> {
    let accel = (K_SPEED * (v_target - state.speed)).clamp(ACCEL_MIN, ACCEL_MAX);
    let offset = state.y - target_center;
    let yaw = (-K_LAT * offset - K_HEAD * state.heading).clamp(-YAW_RATE_MAX, YAW_RATE_MAX);
    vec![accel, yaw]
}

/// Generate `config.agents` expert trajectories of length `config.steps`.
/// Recorded actions re-integrate to the recorded states exactly.
pub fn generate_expert(config: &ExpertConfig) -> Result<Vec<Trajectory>> {
    if config.agents == 0 {
        return Err(ClodeError::InvalidArgument("expert: agents must be >= 1".into()));
    }
    if config.steps < 2 {
        return Err(ClodeError::InvalidArgument("expert: steps must be >= 2".into()));
    }
    if !(0.0..=1.0).contains(&config.lane_change_fraction) {
        return Err(ClodeError::InvalidArgument(
            "expert: lane_change_fraction must be in [0, 1]".into(),
        ));
    }
    if config.noise_scale < 0.0 {
        return Err(ClodeError::InvalidArgument("expert: noise_scale must be >= 0".into()));
    }
    let lanes = LaneGeometry::parallel(config.lane_count, config.lane_width)?;
    let spec = ObservationSpec {
        neighbor_count: config.neighbor_count,
    };

    let mut setup_rng = derive_rng(config.seed, SALT_EXPERT, 0);
    let mut agents = Vec::with_capacity(config.agents);
    let mut expert_plans: Vec<ExpertAgent> = Vec::with_capacity(config.agents);
    for i in 0..config.agents {
        let lane = i % config.lane_count;
        let slot = (i / config.lane_count) as f64;
        let x = slot * config.spacing + setup_rng.gen_range(-2.0..=2.0);
        let y_jitter = if config.lateral_jitter > 0.0 {
            setup_rng.gen_range(-config.lateral_jitter..=config.lateral_jitter)
        } else {
            0.0
        };
        let y = lanes.centerline_offsets[lane] + y_jitter;
        let v = setup_rng.gen_range(config.speed_range.0..=config.speed_range.1);
        agents.push(VehicleState::new(x, y, 0.0, v));

        let is_changer = setup_rng.gen_range(0.0..1.0) < config.lane_change_fraction;
        let change = if is_changer && config.lane_count > 1 {
            let lo = config.steps / 5;
            let hi = (4 * config.steps) / 5;
            let step = setup_rng.gen_range(lo..hi.max(lo + 1));
            let dir: isize = if lane == 0 {
                1
            } else if lane == config.lane_count - 1 {
                -1
            } else if setup_rng.gen_range(0.0..1.0) < 0.5 {
                -1
            } else {
                1
            };
            Some((step, dir))
        } else {
            None
        };
        expert_plans.push(ExpertAgent {
            target_lane: lane,
            v_target: v,
            change,
        });
    }

    let mut world = WorldState::new(agents, lanes, config.dt)?;
    let mut noise_rng = derive_rng(config.seed, SALT_EXPERT, 1);
    let n = config.agents;
    let mut times = Vec::with_capacity(config.steps);
    let mut rec_states: Vec<Vec<VehicleState>> = vec![Vec::with_capacity(config.steps); n];
    let mut rec_actions: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(config.steps); n];
    let mut rec_obs: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(config.steps); n];

    for step in 0..config.steps {
        times.push(step as f64 * config.dt);
        for plan in expert_plans.iter_mut() {
            if let Some((change_step, dir)) = plan.change {
                if step == change_step {
                    let target = plan.target_lane as isize + dir;
                    plan.target_lane = target.clamp(0, config.lane_count as isize - 1) as usize;
                }
            }
        }
        let mut actions = Vec::with_capacity(n);
        for (i, plan) in expert_plans.iter().enumerate() {
            let state = &world.agents[i];
            let center = world.lanes.centerline_offsets[plan.target_lane];
            let mut action = expert_action(state, center, plan.v_target);
            if config.noise_scale > 0.0 {
                let na: f64 = noise_rng.sample(StandardNormal);
                let nw: f64 = noise_rng.sample(StandardNormal);
                action[0] = (action[0] + na * config.noise_scale).clamp(ACCEL_MIN, ACCEL_MAX);
                action[1] = (action[1] + nw * 0.15 * config.noise_scale)
                    .clamp(-YAW_RATE_MAX, YAW_RATE_MAX);
            }
            actions.push(action);
        }
        for i in 0..n {
            rec_states[i].push(world.agents[i]);
            rec_actions[i].push(actions[i].clone());
            rec_obs[i].push(observe(&world, i, &spec)?);
        }
        world.advance(&actions)?;
    }

    (0..n)
        .map(|i| {
            Trajectory::new(
                config.dt,
                times.clone(),
                std::mem::take(&mut rec_states[i]),
                std::mem::take(&mut rec_actions[i]),
                std::mem::take(&mut rec_obs[i]),
            )
        })
        .collect()
}

/// Per-agent action source for closed-loop rollouts.
pub trait Policy {
    fn act(&mut self, agent_id: usize, history: &History) -> Result<Vec<f64>>;
}

/// Result of a closed-loop rollout: one trajectory per agent (state at
/// each decision point) plus the state reached after the final action.
#[derive(Debug)]
pub struct RolloutResult {
    pub trajectories: Vec<Trajectory>,
    pub final_states: Vec<VehicleState>,
}

/// Drive every agent for `steps` steps. Per step: all observations from
/// the same pre-step world, then all actions, then one synchronous
/// advance. Histories may be pre-seeded with a conditioning prefix whose
/// newest step coincides with the current world state.
pub fn rollout(
    world: &mut WorldState,
    policy: &mut dyn Policy,
    steps: usize,
    spec: &ObservationSpec,
    initial_histories: Option<Vec<History>>,
) -> Result<RolloutResult> {
    if steps == 0 {
        return Err(ClodeError::InvalidArgument("rollout: steps must be >= 1".into()));
    }
    let n = world.agent_count();
    let mut histories = match initial_histories {
        Some(h) => {
            if h.len() != n {
                return Err(ClodeError::InvalidArgument(format!(
                    "rollout: {} histories for {} agents",
                    h.len(),
                    n
                )));
            }
            h
        }
        None => vec![History::new(world.dt); n],
    };

    let mut times = Vec::with_capacity(steps);
    let mut rec_states: Vec<Vec<VehicleState>> = vec![Vec::with_capacity(steps); n];
    let mut rec_actions: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(steps); n];
    let mut rec_obs: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(steps); n];

    for step in 0..steps {
        times.push(world.time);
        let mut observations = Vec::with_capacity(n);
        for i in 0..n {
            observations.push(observe(world, i, spec)?);
        }
        for i in 0..n {
            // the pre-seeded prefix already contains the current step
            let already_current = histories[i]
                .last_time()
                .is_some_and(|t| t >= world.time - world.dt / 2.0);
            if !already_current {
                histories[i].push_step(world.time, observations[i].clone());
            }
        }
        let mut actions = Vec::with_capacity(n);
        for i in 0..n {
            let action = policy
                .act(i, &histories[i])
                .map_err(|e| ClodeError::PolicyFailure {
                    agent: i,
                    step,
                    source: Box::new(e),
                })?;
            histories[i].set_last_action(action.clone());
            actions.push(action);
        }
        for i in 0..n {
            rec_states[i].push(world.agents[i]);
            rec_actions[i].push(actions[i].clone());
            rec_obs[i].push(observations[i].clone());
        }
        world.advance(&actions)?;
    }

    let trajectories = (0..n)
        .map(|i| {
            Trajectory::new(
                world.dt,
                times.clone(),
                std::mem::take(&mut rec_states[i]),
                std::mem::take(&mut rec_actions[i]),
                std::mem::take(&mut rec_obs[i]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutResult {
        trajectories,
        final_states: world.agents.clone(),
    })
}
