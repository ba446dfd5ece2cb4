//! Numerical integration of dz/dt = f(z, t) at requested output times.
//!
//! Fixed-step RK4 is the training path: every stage is expressed in
//! tensor ops, so backprop through the solver gives exact gradients of
//! the discretized system. Adaptive DOPRI5 is an inference-time accuracy
//! check only and refuses tape-bound states.

use crate::error::{ClodeError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_RTOL: f64 = 1e-6;
pub const DEFAULT_ATOL: f64 = 1e-8;

/// Right-hand side of the ODE. Output shape must equal input shape.
pub trait Dynamics {
    fn eval(&self, z: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F> Dynamics for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn eval(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self(z, t)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum SolveMethod {
    Rk4 { dt: f64 },
    Dopri5 { rtol: f64, atol: f64 },
}

pub struct SolveRequest<'a> {
    pub dynamics: &'a dyn Dynamics,
    pub z0: &'a Tensor,
    /// Strictly monotone, increasing or decreasing; times[0] is z0's time.
    pub times: &'a [f64],
    pub method: SolveMethod,
}

fn validate(req: &SolveRequest<'_>) -> Result<()> {
    if req.times.is_empty() {
        return Err(ClodeError::InvalidArgument("solve: empty time grid".into()));
    }
    let increasing = req.times.windows(2).all(|w| w[1] > w[0]);
    let decreasing = req.times.windows(2).all(|w| w[1] < w[0]);
    if req.times.len() > 1 && !increasing && !decreasing {
        return Err(ClodeError::InvalidArgument(format!(
            "solve: times must be strictly monotone, got {:?}",
            req.times
        )));
    }
    match req.method {
        SolveMethod::Rk4 { dt } => {
            if dt <= 0.0 || !dt.is_finite() {
                return Err(ClodeError::InvalidArgument(format!(
                    "solve: RK4 step must be positive, got {dt}"
                )));
            }
        }
        SolveMethod::Dopri5 { rtol, atol } => {
            if rtol <= 0.0 || atol <= 0.0 {
                return Err(ClodeError::InvalidArgument(format!(
                    "solve: DOPRI5 tolerances must be positive, got rtol={rtol} atol={atol}"
                )));
            }
            if req.z0.is_on_tape() {
                return Err(ClodeError::InvalidArgument(
                    "solve: DOPRI5 does not propagate gradients; detach z0 or use RK4".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Integrate to every requested time. `out[0]` is `z0` exactly.
pub fn solve(req: &SolveRequest<'_>) -> Result<Vec<Tensor>> {
    validate(req)?;
    let mut out = Vec::with_capacity(req.times.len());
    out.push(req.z0.clone());
    let mut z = req.z0.clone();
    for w in req.times.windows(2) {
        z = match req.method {
            SolveMethod::Rk4 { dt } => rk4_interval(req.dynamics, &z, w[0], w[1], dt)?,
            SolveMethod::Dopri5 { rtol, atol } => {
                dopri5_interval(req.dynamics, &z, w[0], w[1], rtol, atol)?
            }
        };
        out.push(z.clone());
    }
    Ok(out)
}

/// `solve` with the direction pinned to decreasing times.
pub fn solve_backward_in_time(req: &SolveRequest<'_>) -> Result<Vec<Tensor>> {
    if req.times.len() > 1 && !req.times.windows(2).all(|w| w[1] < w[0]) {
        return Err(ClodeError::InvalidArgument(format!(
            "solve_backward_in_time: times must be strictly decreasing, got {:?}",
            req.times
        )));
    }
    solve(req)
}

/// One RK4 stage over signed step h.
fn rk4_step(dynamics: &dyn Dynamics, z: &Tensor, t: f64, h: f64) -> Result<Tensor> {
    let k1 = dynamics.eval(z, t)?;
    let k2 = dynamics.eval(&z.add(&k1.scale(h / 2.0)?)?, t + h / 2.0)?;
    let k3 = dynamics.eval(&z.add(&k2.scale(h / 2.0)?)?, t + h / 2.0)?;
    let k4 = dynamics.eval(&z.add(&k3.scale(h)?)?, t + h)?;
    let sum = k1
        .add(&k2.scale(2.0)?)?
        .add(&k3.scale(2.0)?)?
        .add(&k4)?;
    z.add(&sum.scale(h / 6.0)?)
}

/// Fixed steps of |dt| from t_a toward t_b; the final substep shortens
/// to land on t_b exactly.
fn rk4_interval(dynamics: &dyn Dynamics, z0: &Tensor, t_a: f64, t_b: f64, dt: f64) -> Result<Tensor> {
    let span = t_b - t_a;
    let dir = span.signum();
    let n_full = (span.abs() / dt).floor() as usize;
    let mut z = z0.clone();
    for i in 0..n_full {
        z = rk4_step(dynamics, &z, t_a + dir * dt * i as f64, dir * dt)?;
    }
    let t_reached = t_a + dir * dt * n_full as f64;
    let last = t_b - t_reached;
    if last.abs() > dt * 1e-9 {
        z = rk4_step(dynamics, &z, t_reached, last)?;
    }
    Ok(z)
}

// Dormand-Prince 5(4) Butcher tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive DOPRI5 from t_a to t_b on plain values.
fn dopri5_interval(
    dynamics: &dyn Dynamics,
    z0: &Tensor,
    t_a: f64,
    t_b: f64,
    rtol: f64,
    atol: f64,
) -> Result<Tensor> {
    let shape = z0.shape().to_vec();
    let span = t_b - t_a;
    let dir = span.signum();
    let h_min = 1e-12 * span.abs();

    let eval = |y: &[f64], t: f64| -> Result<Vec<f64>> {
        let out = dynamics.eval(&Tensor::new(shape.clone(), y.to_vec())?, t)?;
        if out.shape() != shape.as_slice() {
            return Err(ClodeError::ShapeMismatch {
                op: "dynamics".into(),
                lhs: shape.clone(),
                rhs: out.shape().to_vec(),
            });
        }
        Ok(out.data().to_vec())
    };

    let mut y = z0.data().to_vec();
    let n = y.len();
    let mut t = t_a;
    let mut h = dir * (span.abs() / 100.0).min(span.abs());
    let mut k = vec![vec![0.0; n]; 7];
    k[0] = eval(&y, t)?;

    while (t_b - t) * dir > 1e-14 * span.abs().max(1.0) {
        if h.abs() < h_min {
            return Err(ClodeError::StepSizeUnderflow { h, span: span.abs() });
        }
        if (t + h - t_b) * dir > 0.0 {
            h = t_b - t;
        }
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = DP_A[s][j];
                if a != 0.0 {
                    for (yi, ki) in ys.iter_mut().zip(kj) {
                        *yi += h * a * ki;
                    }
                }
            }
            k[s] = eval(&ys, t + DP_C[s] * h)?;
        }
        let mut y5 = y.clone();
        let mut err_sq = 0.0;
        for i in 0..n {
            let mut d5 = 0.0;
            let mut d4 = 0.0;
            for s in 0..7 {
                d5 += DP_B5[s] * k[s][i];
                d4 += DP_B4[s] * k[s][i];
            }
            y5[i] += h * d5;
            let e = h * (d5 - d4);
            let sc = atol + rtol * y[i].abs().max(y5[i].abs());
            err_sq += (e / sc) * (e / sc);
        }
        let err = (err_sq / n as f64).sqrt();
        if err <= 1.0 {
            t += h;
            y = y5;
            k[0] = eval(&y, t)?; // FSAL would reuse k[6]; recompute keeps this simple
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
    }
    Tensor::new(shape, y)
}
