//! Trajectory persistence, training-sample windowing, batching, and
//! model checkpointing.
//!
//! Trajectory CSV: UTF-8, header `time,agent_id,x,y,theta,v,accel,yaw_rate`,
//! `\n` line endings, 17-significant-digit decimals, no quoting. Rows are
//! grouped by agent with strictly increasing times and one uniform dt per
//! file. Observations are not stored; they are recomputed at load time
//! from the states, so the observation layout stays single-sourced.
//!
//! Checkpoints are little-endian binary: magic, format version, the dims
//! record, the step counter, named f64 parameter blocks, and optimizer
//! moment blocks. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{ClodeError, Result};
use crate::model::{Dims, ModelParams};
use crate::rng::{derive_rng, SALT_SHUFFLE};
use crate::simenv::{LaneGeometry, ObservationSpec, VehicleState, WorldState};
use crate::trainer::{Moments, OptimizerState};
use crate::trajectory::Trajectory;

pub const CSV_HEADER: &str = "time,agent_id,x,y,theta,v,accel,yaw_rate";
const CHECKPOINT_MAGIC: &[u8; 8] = b"CLODECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// 17 significant digits: enough to round-trip any f64 exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write bytes to `path` atomically (temp file in the same directory,
/// then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialize trajectories; the list index becomes the agent id.
pub fn save_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (agent_id, traj) in trajectories.iter().enumerate() {
        for i in 0..traj.len() {
            let s = &traj.states[i];
            let a = &traj.actions[i];
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                fmt_f64(traj.times[i]),
                agent_id,
                fmt_f64(s.x),
                fmt_f64(s.y),
                fmt_f64(s.heading),
                fmt_f64(s.speed),
                fmt_f64(a[0]),
                fmt_f64(a[1]),
            ));
        }
    }
    write_atomic(path, out.as_bytes())
}

struct Row {
    time: f64,
    agent: usize,
    state: VehicleState,
    action: [f64; 2],
}

fn parse_row(line: &str, line_no: usize) -> Result<Row> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 8 {
        return Err(ClodeError::DataFormat {
            line: line_no,
            message: format!("expected 8 fields, got {}", fields.len()),
        });
    }
    let num = |idx: usize, what: &str| -> Result<f64> {
        fields[idx].trim().parse::<f64>().map_err(|_| ClodeError::DataFormat {
            line: line_no,
            message: format!("bad {what}: `{}`", fields[idx]),
        })
    };
    let agent = fields[1]
        .trim()
        .parse::<usize>()
        .map_err(|_| ClodeError::DataFormat {
            line: line_no,
            message: format!("bad agent_id: `{}`", fields[1]),
        })?;
    Ok(Row {
        time: num(0, "time")?,
        agent,
        state: VehicleState {
            x: num(2, "x")?,
            y: num(3, "y")?,
            heading: num(4, "theta")?,
            speed: num(5, "v")?,
        },
        action: [num(6, "accel")?, num(7, "yaw_rate")?],
    })
}

/// Load a trajectory file and rebuild each agent's observations via
/// `observe` over the reconstructed per-step world.
pub fn load_trajectories(
    path: &Path,
    lanes: &LaneGeometry,
    spec: &ObservationSpec,
) -> Result<Vec<Trajectory>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(ClodeError::DataFormat {
                line: 1,
                message: format!("bad header `{header}`, expected `{CSV_HEADER}`"),
            })
        }
        None => {
            return Err(ClodeError::DataFormat {
                line: 1,
                message: "empty file (missing header)".into(),
            })
        }
    }

    // rows grouped by agent, times strictly increasing within a group
    let mut order: Vec<usize> = Vec::new();
    let mut groups: BTreeMap<usize, (Vec<f64>, Vec<VehicleState>, Vec<Vec<f64>>)> = BTreeMap::new();
    let mut current: Option<usize> = None;
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let row = parse_row(line, line_no)?;
        if current != Some(row.agent) {
            if groups.contains_key(&row.agent) {
                return Err(ClodeError::DataFormat {
                    line: line_no,
                    message: format!("agent {} appears in two separate blocks", row.agent),
                });
            }
            order.push(row.agent);
            groups.insert(row.agent, (Vec::new(), Vec::new(), Vec::new()));
            current = Some(row.agent);
        }
        let entry = groups.get_mut(&row.agent).expect("inserted above");
        if let Some(&last) = entry.0.last() {
            if row.time <= last {
                return Err(ClodeError::DataFormat {
                    line: line_no,
                    message: format!("time {} does not increase past {}", row.time, last),
                });
            }
        }
        entry.0.push(row.time);
        entry.1.push(row.state);
        entry.2.push(row.action.to_vec());
    }
    if order.is_empty() {
        return Ok(Vec::new());
    }

    let first = &groups[&order[0]];
    let steps = first.0.len();
    if steps < 2 {
        return Err(ClodeError::DataFormat {
            line: 2,
            message: "need at least 2 steps per agent".into(),
        });
    }
    let dt = first.0[1] - first.0[0];
    for agent in &order {
        let (times, ..) = &groups[agent];
        if times.len() != steps {
            return Err(ClodeError::DataFormat {
                line: 1,
                message: format!(
                    "agent {agent} has {} steps, expected {steps}; agents must share the time grid",
                    times.len()
                ),
            });
        }
        for (i, w) in times.windows(2).enumerate() {
            if (w[1] - w[0] - dt).abs() > 1e-9 {
                return Err(ClodeError::DataFormat {
                    line: 1,
                    message: format!(
                        "non-uniform dt for agent {agent}: {} -> {} at step {i} (dt={dt})",
                        w[0], w[1]
                    ),
                });
            }
        }
        for (a, b) in times.iter().zip(&first.0) {
            if (a - b).abs() > 1e-12 {
                return Err(ClodeError::DataFormat {
                    line: 1,
                    message: format!("agent {agent} time grid differs from agent {}", order[0]),
                });
            }
        }
    }

    // rebuild observations step by step over the shared world
    let n = order.len();
    let mut world = WorldState::new(
        order.iter().map(|a| groups[a].1[0]).collect(),
        lanes.clone(),
        dt,
    )?;
    let mut observations: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(steps); n];
    for step in 0..steps {
        world.time = first.0[step];
        for (slot, agent) in order.iter().enumerate() {
            world.agents[slot] = groups[agent].1[step];
            world.prev_actions[slot] = if step == 0 {
                vec![0.0, 0.0]
            } else {
                groups[agent].2[step - 1].clone()
            };
        }
        for slot in 0..n {
            observations[slot].push(crate::simenv::observe(&world, slot, spec)?);
        }
    }

    order
        .iter()
        .enumerate()
        .map(|(slot, agent)| {
            let (times, states, actions) = groups[agent].clone();
            Trajectory::new(dt, times, states, actions, std::mem::take(&mut observations[slot]))
        })
        .collect()
}

/// One training window: the history fed to the encoder is also the
/// reconstruction target.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub window: Trajectory,
}

/// Windows of length `len` starting at 0, stride, 2*stride, ...
pub fn window_history(traj: &Trajectory, len: usize, stride: usize) -> Result<Vec<TrainingSample>> {
    if len < 2 {
        return Err(ClodeError::InvalidArgument(format!(
            "window length must be >= 2, got {len}"
        )));
    }
    if stride == 0 {
        return Err(ClodeError::InvalidArgument("stride must be >= 1".into()));
    }
    let mut out = Vec::new();
    if traj.len() >= len {
        let mut start = 0;
        while start + len <= traj.len() {
            out.push(TrainingSample {
                window: traj.window(start, len)?,
            });
            start += stride;
        }
    }
    Ok(out)
}

/// Shuffle with the seeded generator and split into ceil(n/b) batches;
/// the last batch may be short. Every sample appears exactly once.
pub fn batch<T>(samples: &[T], batch_size: usize, seed: u64) -> Result<Vec<Vec<&T>>> {
    if batch_size == 0 {
        return Err(ClodeError::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    let mut rng = derive_rng(seed, SALT_SHUFFLE, 0);
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    Ok(idx
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| &samples[i]).collect())
        .collect())
}

// ── checkpoint serialization ────────────────────────────────────────

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn name(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(ClodeError::Checkpoint(format!(
                "truncated file while reading {what}"
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(8 * n, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn name(&mut self, what: &str) -> Result<String> {
        let len = self.u64(what)? as usize;
        if len > 4096 {
            return Err(ClodeError::Checkpoint(format!(
                "implausible name length {len} while reading {what}"
            )));
        }
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| ClodeError::Checkpoint(format!("non-UTF8 name while reading {what}")))
    }
}

fn dims_to_words(d: &Dims) -> [u64; 7] {
    [
        d.obs_dim as u64,
        d.action_dim as u64,
        d.embed_dim as u64,
        d.latent_dim as u64,
        d.enc_dyn_hidden as u64,
        d.dec_dyn_hidden as u64,
        d.readout_hidden as u64,
    ]
}

pub fn save_checkpoint(
    params: &ModelParams,
    optimizer: &OptimizerState,
    step: u64,
    path: &Path,
) -> Result<()> {
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    for word in dims_to_words(&params.dims) {
        w.u64(word);
    }
    w.u64(step);

    let named = params.named_params();
    w.u64(named.len() as u64);
    for (name, tensor) in &named {
        w.name(name);
        w.u64(tensor.ndim() as u64);
        for &d in tensor.shape() {
            w.u64(d as u64);
        }
        w.f64s(tensor.data());
    }

    w.u64(optimizer.step);
    w.u64(optimizer.moments.len() as u64);
    for (name, m) in &optimizer.moments {
        w.name(name);
        w.u64(m.m.len() as u64);
        w.f64s(&m.m);
        w.f64s(&m.v);
    }
    write_atomic(path, &w.buf)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, OptimizerState, u64)> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    let magic = r.take(8, "magic/version header")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ClodeError::Checkpoint(
            "bad magic: not a checkpoint file (version header unreadable)".into(),
        ));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ClodeError::Checkpoint(format!(
            "version mismatch: file has {version}, supported {CHECKPOINT_VERSION}"
        )));
    }
    let mut words = [0u64; 7];
    for w in &mut words {
        *w = r.u64("dims")?;
    }
    let dims = Dims {
        obs_dim: words[0] as usize,
        action_dim: words[1] as usize,
        embed_dim: words[2] as usize,
        latent_dim: words[3] as usize,
        enc_dyn_hidden: words[4] as usize,
        dec_dyn_hidden: words[5] as usize,
        readout_hidden: words[6] as usize,
    };
    let step = r.u64("step")?;

    let mut params = ModelParams::init(dims, 0)?;
    let expected: usize = params.named_params().len();
    let count = r.u64("param count")? as usize;
    if count != expected {
        return Err(ClodeError::Checkpoint(format!(
            "checkpoint has {count} parameter blocks, model needs {expected}"
        )));
    }
    for _ in 0..count {
        let name = r.name("param name")?;
        let ndim = r.u64("param ndim")? as usize;
        if ndim > 8 {
            return Err(ClodeError::Checkpoint(format!(
                "implausible rank {ndim} for block `{name}`"
            )));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("param shape")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel, &format!("block `{name}`"))?;
        params.set_param(&name, &shape, &data)?;
    }

    let opt_step = r.u64("optimizer step")?;
    let opt_count = r.u64("optimizer block count")? as usize;
    let mut moments = BTreeMap::new();
    let valid_names: std::collections::HashSet<String> =
        params.named_params().into_iter().map(|(n, _)| n).collect();
    for _ in 0..opt_count {
        let name = r.name("optimizer block name")?;
        if !valid_names.contains(&name) {
            return Err(ClodeError::Checkpoint(format!(
                "unknown block name `{name}` in optimizer state"
            )));
        }
        let numel = r.u64("moment length")? as usize;
        let m = r.f64s(numel, &format!("first moment `{name}`"))?;
        let v = r.f64s(numel, &format!("second moment `{name}`"))?;
        moments.insert(name, Moments { m, v });
    }
    let optimizer = OptimizerState {
        step: opt_step,
        moments,
    };
    Ok((params, optimizer, step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::{generate_expert, ExpertConfig};
    use tempfile::tempdir;

    fn small_dataset() -> (Vec<Trajectory>, LaneGeometry, ObservationSpec) {
        let config = ExpertConfig {
            agents: 3,
            steps: 12,
            ..Default::default()
        };
        let lanes = LaneGeometry::parallel(config.lane_count, config.lane_width).unwrap();
        let spec = ObservationSpec {
            neighbor_count: config.neighbor_count,
        };
        (generate_expert(&config).unwrap(), lanes, spec)
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let (trajs, lanes, spec) = small_dataset();
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.csv");
        save_trajectories(&path, &trajs).unwrap();
        let loaded = load_trajectories(&path, &lanes, &spec).unwrap();
        assert_eq!(loaded.len(), trajs.len());
        for (a, b) in loaded.iter().zip(&trajs) {
            assert_eq!(a.times, b.times);
            assert_eq!(a.actions, b.actions);
            assert_eq!(a.observations, b.observations);
            for (sa, sb) in a.states.iter().zip(&b.states) {
                assert_eq!(sa, sb);
            }
        }
    }

    #[test]
    fn header_only_file_loads_empty() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, format!("{CSV_HEADER}\n")).unwrap();
        let lanes = LaneGeometry::parallel(2, 3.7).unwrap();
        let loaded = load_trajectories(&path, &lanes, &ObservationSpec::default()).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn decreasing_time_names_the_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut text = format!("{CSV_HEADER}\n");
        text.push_str("0,0,0,0,0,10,0,0\n");
        text.push_str("-0.1,0,1,0,0,10,0,0\n");
        std::fs::write(&path, text).unwrap();
        let lanes = LaneGeometry::parallel(2, 3.7).unwrap();
        let err = load_trajectories(&path, &lanes, &ObservationSpec::default()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn malformed_row_names_the_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, format!("{CSV_HEADER}\n0,0,zap,0,0,10,0,0\n")).unwrap();
        let lanes = LaneGeometry::parallel(2, 3.7).unwrap();
        let err = load_trajectories(&path, &lanes, &ObservationSpec::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("zap"), "{msg}");
    }

    #[test]
    fn non_uniform_dt_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut text = format!("{CSV_HEADER}\n");
        text.push_str("0,0,0,0,0,10,0,0\n");
        text.push_str("0.1,0,1,0,0,10,0,0\n");
        text.push_str("0.3,0,2,0,0,10,0,0\n");
        std::fs::write(&path, text).unwrap();
        let lanes = LaneGeometry::parallel(2, 3.7).unwrap();
        let err = load_trajectories(&path, &lanes, &ObservationSpec::default()).unwrap_err();
        assert!(err.to_string().contains("non-uniform"), "{err}");
    }

    #[test]
    fn window_counts() {
        let (trajs, ..) = small_dataset();
        let t = &trajs[0]; // 12 steps
        assert_eq!(window_history(t, 5, 1).unwrap().len(), 8);
        assert_eq!(window_history(t, 12, 1).unwrap().len(), 1);
        assert_eq!(window_history(t, 13, 1).unwrap().len(), 0);
        assert_eq!(window_history(t, 5, 5).unwrap().len(), 2);
    }

    #[test]
    fn window_spec_examples() {
        // T=10, L=5, stride=1 -> 6; T=4, L=5 -> 0; T=100, L=5, stride=5 -> 20
        let mk = |n: usize| {
            let dt = 0.1;
            Trajectory::from_sequences(
                dt,
                (0..n).map(|i| i as f64 * dt).collect(),
                vec![vec![0.0, 0.0]; n],
                vec![vec![0.0; 4]; n],
            )
            .unwrap()
        };
        assert_eq!(window_history(&mk(10), 5, 1).unwrap().len(), 6);
        assert_eq!(window_history(&mk(4), 5, 1).unwrap().len(), 0);
        assert_eq!(window_history(&mk(100), 5, 5).unwrap().len(), 20);
    }

    #[test]
    fn batching_partitions_exactly_once() {
        let samples: Vec<usize> = (0..100).collect();
        let batches = batch(&samples, 50, 7).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.len() == 50));
        let mut seen: Vec<usize> = batches.iter().flatten().map(|&&v| v).collect();
        seen.sort_unstable();
        assert_eq!(seen, samples);

        let short = batch(&samples[..5], 50, 7).unwrap();
        assert_eq!(short.len(), 1);
        assert_eq!(short[0].len(), 5);
    }

    #[test]
    fn batching_is_seed_deterministic() {
        let samples: Vec<usize> = (0..37).collect();
        let a: Vec<usize> = batch(&samples, 10, 3)
            .unwrap()
            .iter()
            .flatten()
            .map(|&&v| v)
            .collect();
        let b: Vec<usize> = batch(&samples, 10, 3)
            .unwrap()
            .iter()
            .flatten()
            .map(|&&v| v)
            .collect();
        let c: Vec<usize> = batch(&samples, 10, 4)
            .unwrap()
            .iter()
            .flatten()
            .map(|&&v| v)
            .collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dims = Dims {
            obs_dim: 6,
            action_dim: 2,
            embed_dim: 4,
            latent_dim: 3,
            enc_dyn_hidden: 4,
            dec_dyn_hidden: 8,
            readout_hidden: 8,
        };
        let params = ModelParams::init(dims, 123).unwrap();
        let mut opt = OptimizerState::new();
        opt.step = 17;
        opt.moments.insert(
            "gru.b_update".into(),
            Moments {
                m: vec![0.25; 4],
                v: vec![1e-9; 4],
            },
        );
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &opt, 42, &path).unwrap();
        let (loaded, opt2, step) = load_checkpoint(&path).unwrap();
        assert_eq!(step, 42);
        assert_eq!(opt2.step, 17);
        assert_eq!(loaded.dims, params.dims);
        for ((na, ta), (nb, tb)) in loaded.named_params().iter().zip(params.named_params().iter()) {
            assert_eq!(na, nb);
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "block {na}");
        }
        assert_eq!(opt2.moments["gru.b_update"].m, vec![0.25; 4]);
    }

    #[test]
    fn empty_checkpoint_file_is_a_version_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.ckpt");
        std::fs::write(&path, b"").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let dims = Dims {
            obs_dim: 6,
            action_dim: 2,
            embed_dim: 4,
            latent_dim: 3,
            enc_dyn_hidden: 4,
            dec_dyn_hidden: 8,
            readout_hidden: 8,
        };
        let params = ModelParams::init(dims, 5).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &OptimizerState::new(), 0, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn unknown_block_name_rejected() {
        let dims = Dims {
            obs_dim: 6,
            action_dim: 2,
            embed_dim: 4,
            latent_dim: 3,
            enc_dyn_hidden: 4,
            dec_dyn_hidden: 8,
            readout_hidden: 8,
        };
        let params = ModelParams::init(dims, 5).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &OptimizerState::new(), 0, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // corrupt the first parameter block's name ("embed..." starts
        // after magic(8) + version(4) + dims(56) + step(8) + count(8) + len(8)
        let name_pos = 8 + 4 + 56 + 8 + 8 + 8;
        bytes[name_pos] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("unknown block name"), "{err}");
    }
}
