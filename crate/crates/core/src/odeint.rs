//! Fixed-step (Euler, RK4) and adaptive Dormand–Prince 5(4) integration of
//! autonomous vector fields.
//!
//! The solvers are written against [`OdeSystem`], so the same stepping code runs
//! on plain `Vec<f64>` states and on recorded tape nodes. All state updates go
//! through [`OdeSystem::lincomb`], which in both modes is the same kernel, so a
//! fixed-step solve gives bit-identical values in either mode.

use serde::{Deserialize, Serialize};

use crate::diffnum::{self, Backend, DiffError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OdeError {
    #[error("non-finite derivative at t = {t}")]
    NonFinite { t: f64 },
    #[error("step size {h:e} underflowed at t = {t} (problem too stiff)")]
    Stiffness { t: f64, h: f64 },
    #[error("exceeded {0} solver steps")]
    MaxSteps(usize),
    #[error("solver configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T> = std::result::Result<T, OdeError>;

/// Uniform reporting grid `t0 + i * dt`, `i < n_points`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_points: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_points: usize) -> Result<Self> {
        let g = Self { t0, dt, n_points };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) || !self.t0.is_finite() {
            return Err(OdeError::Config(format!("grid spacing must be positive, got {}", self.dt)));
        }
        if self.n_points < 2 {
            return Err(OdeError::Config(format!("grid needs >= 2 points, got {}", self.n_points)));
        }
        Ok(())
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.time(self.n_points - 1)
    }

    pub fn span(&self) -> f64 {
        self.end() - self.t0
    }

    pub fn with_len(&self, n_points: usize) -> Self {
        Self { n_points, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Euler,
    Rk4,
    Dopri5,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub kind: SolverKind,
    /// Step for fixed-step kinds; must divide the grid spacing.
    #[serde(default = "default_step")]
    pub dt: f64,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
}

fn default_step() -> f64 {
    0.1
}
fn default_rtol() -> f64 {
    1e-5
}
fn default_atol() -> f64 {
    1e-6
}

impl SolverSpec {
    pub fn euler(dt: f64) -> Self {
        Self { kind: SolverKind::Euler, dt, rtol: default_rtol(), atol: default_atol() }
    }

    pub fn rk4(dt: f64) -> Self {
        Self { kind: SolverKind::Rk4, ..Self::euler(dt) }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self { kind: SolverKind::Dopri5, dt: default_step(), rtol, atol }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SolverKind::Dopri5 if !(self.rtol > 0.0 && self.atol > 0.0) => Err(OdeError::Config(format!(
                "dopri5 needs rtol > 0 and atol > 0, got rtol={} atol={}",
                self.rtol, self.atol
            ))),
            SolverKind::Euler | SolverKind::Rk4 if !(self.dt > 0.0 && self.dt.is_finite()) => {
                Err(OdeError::Config(format!("fixed step must be positive, got {}", self.dt)))
            }
            _ => Ok(()),
        }
    }

    /// Substeps per grid interval for fixed-step kinds.
    pub fn substeps(&self, grid: &TimeGrid) -> Result<usize> {
        let ratio = grid.dt / self.dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(OdeError::Config(format!(
                "solver step {} does not divide grid spacing {}",
                self.dt, grid.dt
            )));
        }
        Ok(n as usize)
    }
}

/// An autonomous ODE over some state representation.
pub trait OdeSystem {
    type State: Clone;

    fn derivative(&mut self, t: f64, x: &Self::State) -> Result<Self::State>;
    /// `base + sum_i c_i * term_i`
    fn lincomb(&mut self, base: &Self::State, terms: &[(f64, &Self::State)]) -> Result<Self::State>;
    fn values<'a>(&'a self, x: &'a Self::State) -> &'a [f64];
}

fn eval_field<S: OdeSystem>(sys: &mut S, t: f64, x: &S::State) -> Result<S::State> {
    let dx = sys.derivative(t, x)?;
    if sys.values(&dx).iter().any(|v| !v.is_finite()) {
        return Err(OdeError::NonFinite { t });
    }
    Ok(dx)
}

pub fn euler_step<S: OdeSystem>(sys: &mut S, t: f64, x: &S::State, h: f64) -> Result<S::State> {
    let k = eval_field(sys, t, x)?;
    sys.lincomb(x, &[(h, &k)])
}

pub fn rk4_step<S: OdeSystem>(sys: &mut S, t: f64, x: &S::State, h: f64) -> Result<S::State> {
    let k1 = eval_field(sys, t, x)?;
    let x2 = sys.lincomb(x, &[(0.5 * h, &k1)])?;
    let k2 = eval_field(sys, t + 0.5 * h, &x2)?;
    let x3 = sys.lincomb(x, &[(0.5 * h, &k2)])?;
    let k3 = eval_field(sys, t + 0.5 * h, &x3)?;
    let x4 = sys.lincomb(x, &[(h, &k3)])?;
    let k4 = eval_field(sys, t + h, &x4)?;
    sys.lincomb(x, &[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)])
}

/// States at every grid point; `states[0]` is `x0`.
pub fn integrate_system<S: OdeSystem>(
    sys: &mut S,
    x0: S::State,
    grid: &TimeGrid,
    spec: &SolverSpec,
) -> Result<Vec<S::State>> {
    grid.validate()?;
    spec.validate()?;
    if sys.values(&x0).iter().any(|v| !v.is_finite()) {
        return Err(OdeError::NonFinite { t: grid.t0 });
    }
    match spec.kind {
        SolverKind::Euler | SolverKind::Rk4 => {
            let sub = spec.substeps(grid)?;
            let h = grid.dt / sub as f64;
            let mut out = Vec::with_capacity(grid.n_points);
            out.push(x0);
            for i in 1..grid.n_points {
                let mut x = out[i - 1].clone();
                for s in 0..sub {
                    let t = grid.time(i - 1) + s as f64 * h;
                    x = match spec.kind {
                        SolverKind::Euler => euler_step(sys, t, &x, h)?,
                        _ => rk4_step(sys, t, &x, h)?,
                    };
                }
                out.push(x);
            }
            Ok(out)
        }
        SolverKind::Dopri5 => dopri5(sys, x0, grid, spec.rtol, spec.atol),
    }
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// 5th minus embedded 4th order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Continuous extension coefficients (Hairer & Wanner, DOPRI5 dense output).
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const MAX_STEPS: usize = 100_000;

fn scaled_rms(err: &[f64], y0: &[f64], y1: &[f64], rtol: f64, atol: f64) -> f64 {
    let n = err.len().max(1) as f64;
    let s: f64 = err
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

fn initial_step(y0: &[f64], f0: &[f64], rtol: f64, atol: f64, span: f64) -> f64 {
    let d0 = scaled_rms(y0, y0, y0, rtol, atol);
    let d1 = scaled_rms(f0, y0, y0, rtol, atol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0.min(span)
}

fn dopri5<S: OdeSystem>(sys: &mut S, x0: S::State, grid: &TimeGrid, rtol: f64, atol: f64) -> Result<Vec<S::State>> {
    let span = grid.span();
    let t_end = grid.end();
    let h_min = 1e-12 * span;
    let mut out = Vec::with_capacity(grid.n_points);
    out.push(x0.clone());

    let mut t = grid.t0;
    let mut y = x0;
    let mut k1 = eval_field(sys, t, &y)?;
    let mut h = initial_step(sys.values(&y), sys.values(&k1), rtol, atol, span);
    let mut next = 1;
    let mut steps = 0;

    while next < grid.n_points {
        steps += 1;
        if steps > MAX_STEPS {
            return Err(OdeError::MaxSteps(MAX_STEPS));
        }
        if h < h_min {
            return Err(OdeError::Stiffness { t, h });
        }
        let last = t + h >= t_end - h_min;
        if last {
            h = t_end - t;
        }

        let y2 = sys.lincomb(&y, &[(h * A21, &k1)])?;
        let k2 = eval_field(sys, t + C2 * h, &y2)?;
        let y3 = sys.lincomb(&y, &[(h * A31, &k1), (h * A32, &k2)])?;
        let k3 = eval_field(sys, t + C3 * h, &y3)?;
        let y4 = sys.lincomb(&y, &[(h * A41, &k1), (h * A42, &k2), (h * A43, &k3)])?;
        let k4 = eval_field(sys, t + C4 * h, &y4)?;
        let y5 = sys.lincomb(&y, &[(h * A51, &k1), (h * A52, &k2), (h * A53, &k3), (h * A54, &k4)])?;
        let k5 = eval_field(sys, t + C5 * h, &y5)?;
        let y6 = sys.lincomb(
            &y,
            &[(h * A61, &k1), (h * A62, &k2), (h * A63, &k3), (h * A64, &k4), (h * A65, &k5)],
        )?;
        let k6 = eval_field(sys, t + h, &y6)?;
        let y_new = sys.lincomb(
            &y,
            &[(h * A71, &k1), (h * A73, &k3), (h * A74, &k4), (h * A75, &k5), (h * A76, &k6)],
        )?;
        let k7 = eval_field(sys, t + h, &y_new)?;

        // Step-size control runs on values only: accept/reject is not differentiated.
        let err_vec: Vec<f64> = {
            let v = |s: &S::State| sys.values(s).to_vec();
            let (v1, v3, v4, v5, v6, v7) = (v(&k1), v(&k3), v(&k4), v(&k5), v(&k6), v(&k7));
            (0..v1.len())
                .map(|i| h * (E1 * v1[i] + E3 * v3[i] + E4 * v4[i] + E5 * v5[i] + E6 * v6[i] + E7 * v7[i]))
                .collect()
        };
        let err = scaled_rms(&err_vec, sys.values(&y), sys.values(&y_new), rtol, atol);
        if !err.is_finite() {
            return Err(OdeError::NonFinite { t });
        }

        if err <= 1.0 {
            let t_new = if last { t_end } else { t + h };
            while next < grid.n_points && grid.time(next) <= t_new + 1e-12 * span.max(1.0) {
                let theta = (grid.time(next) - t) / h;
                let state = if next == grid.n_points - 1 && last || (theta - 1.0).abs() < 1e-14 {
                    y_new.clone()
                } else {
                    dense_output(sys, theta, h, &y, &y_new, [&k1, &k3, &k4, &k5, &k6, &k7])?
                };
                out.push(state);
                next += 1;
            }
            t = t_new;
            y = y_new;
            k1 = k7;
            let fac = if err == 0.0 { 10.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 10.0) };
            h *= fac;
        } else {
            h *= (0.9 * err.powf(-0.2)).max(0.2);
        }
    }
    Ok(out)
}

fn dense_output<S: OdeSystem>(
    sys: &mut S,
    theta: f64,
    h: f64,
    y0: &S::State,
    y1: &S::State,
    k: [&S::State; 6],
) -> Result<S::State> {
    let [k1, k3, k4, k5, k6, k7] = k;
    let a = theta;
    let b = theta * (1.0 - theta);
    let c = b * theta;
    let d = c * (1.0 - theta);
    sys.lincomb(
        y0,
        &[
            (-a + b - 2.0 * c, y0),
            (a - b + 2.0 * c, y1),
            (h * (b - c + d * D1), k1),
            (h * d * D3, k3),
            (h * d * D4, k4),
            (h * d * D5, k5),
            (h * d * D6, k6),
            (h * (-c + d * D7), k7),
        ],
    )
}

/// Plain-number system backed by a closure.
pub struct FnSystem<F>(pub F);

impl<F: FnMut(&[f64]) -> Vec<f64>> OdeSystem for FnSystem<F> {
    type State = Vec<f64>;

    fn derivative(&mut self, _t: f64, x: &Vec<f64>) -> Result<Vec<f64>> {
        Ok((self.0)(x))
    }

    fn lincomb(&mut self, base: &Vec<f64>, terms: &[(f64, &Vec<f64>)]) -> Result<Vec<f64>> {
        let t: Vec<(f64, &[f64])> = terms.iter().map(|(c, v)| (*c, v.as_slice())).collect();
        Ok(diffnum::lincomb(base, &t))
    }

    fn values<'a>(&'a self, x: &'a Vec<f64>) -> &'a [f64] {
        x
    }
}

/// System whose states live on a [`Backend`] (taped or plain).
pub struct BackendSystem<'b, B: Backend, F> {
    pub backend: &'b mut B,
    pub field: F,
}

impl<'b, B, F> OdeSystem for BackendSystem<'b, B, F>
where
    B: Backend,
    F: FnMut(&mut B, &B::T) -> diffnum::Result<B::T>,
{
    type State = B::T;

    fn derivative(&mut self, _t: f64, x: &B::T) -> Result<B::T> {
        Ok((self.field)(self.backend, x)?)
    }

    fn lincomb(&mut self, base: &B::T, terms: &[(f64, &B::T)]) -> Result<B::T> {
        Ok(self.backend.lincomb(base, terms)?)
    }

    fn values<'a>(&'a self, x: &'a B::T) -> &'a [f64] {
        self.backend.value(x).data()
    }
}

pub fn step_euler(f: impl FnMut(&[f64]) -> Vec<f64>, t: f64, x: &[f64], dt: f64) -> Result<Vec<f64>> {
    euler_step(&mut FnSystem(f), t, &x.to_vec(), dt)
}

pub fn step_rk4(f: impl FnMut(&[f64]) -> Vec<f64>, t: f64, x: &[f64], dt: f64) -> Result<Vec<f64>> {
    rk4_step(&mut FnSystem(f), t, &x.to_vec(), dt)
}

/// Plain-mode solve of `dx/dt = f(x)` reported at every grid point.
pub fn integrate(
    f: impl FnMut(&[f64]) -> Vec<f64>,
    x0: &[f64],
    grid: &TimeGrid,
    spec: &SolverSpec,
) -> Result<Vec<Vec<f64>>> {
    integrate_system(&mut FnSystem(f), x0.to_vec(), grid, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::{Tape, Tensor};

    fn decay(x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| -v).collect()
    }

    #[test]
    fn euler_examples() {
        assert_eq!(step_euler(|x| x.to_vec(), 0.0, &[1.0], 0.1).unwrap(), vec![1.1]);
        assert_eq!(step_euler(|x| vec![0.0; x.len()], 0.0, &[2.5, -1.0], 0.3).unwrap(), vec![2.5, -1.0]);
        assert_eq!(step_euler(decay, 0.0, &[1.0], 0.1).unwrap(), vec![0.9]);
    }

    #[test]
    fn rk4_examples() {
        // Stages by hand for f(x) = x, h = 0.1:
        // k1 = 1, k2 = 1.05, k3 = 1.0525, k4 = 1.10525
        let (k1, k2, k3, k4) = (1.0, 1.05, 1.0525, 1.10525);
        let expected = 1.0 + 0.1 / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        let got = step_rk4(|x| x.to_vec(), 0.0, &[1.0], 0.1).unwrap()[0];
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 1.1051708333333333).abs() < 1e-12);
        assert_eq!(step_rk4(|x| vec![0.0; x.len()], 0.0, &[3.0], 0.1).unwrap(), vec![3.0]);
    }

    #[test]
    fn rk4_linear_system_matches_taylor_to_fifth_order() {
        // x' = A x with A = [[0, 1], [-2, -0.3]]; one RK4 step equals the
        // 4th-order Taylor polynomial of exp(hA) applied to x0.
        let a = [[0.0, 1.0], [-2.0, -0.3]];
        let field = move |x: &[f64]| vec![a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]];
        let x0 = [1.0, 0.5];
        for h in [0.1, 0.05, 0.025] {
            let mut term = x0.to_vec();
            let mut taylor = x0.to_vec();
            for k in 1..=4 {
                let next = field(&term);
                term = next.iter().map(|v| v * h / k as f64).collect();
                for (t, v) in taylor.iter_mut().zip(&term) {
                    *t += v;
                }
            }
            let got = step_rk4(field, 0.0, &x0, h).unwrap();
            for (g, t) in got.iter().zip(&taylor) {
                assert!((g - t).abs() < 1e-13, "h={h}: {g} vs {t}");
            }
        }
    }

    #[test]
    fn non_finite_derivative_reports_time() {
        let grid = TimeGrid::new(0.0, 0.1, 5).unwrap();
        let mut calls = 0;
        let err = integrate(
            |x| {
                calls += 1;
                if calls > 2 { vec![f64::NAN] } else { x.to_vec() }
            },
            &[1.0],
            &grid,
            &SolverSpec::euler(0.1),
        )
        .unwrap_err();
        assert!(matches!(err, OdeError::NonFinite { t } if (t - 0.2).abs() < 1e-12));
    }

    #[test]
    fn dopri5_exponential_decay() {
        let grid = TimeGrid::new(0.0, 0.1, 11).unwrap();
        let spec = SolverSpec::dopri5(1e-6, 1e-6);
        let xs = integrate(decay, &[1.0], &grid, &spec).unwrap();
        assert_eq!(xs.len(), 11);
        for (i, x) in xs.iter().enumerate() {
            let exact = (-grid.time(i)).exp();
            assert!((x[0] - exact).abs() < 10.0 * (1e-6 * exact + 1e-6), "i={i}");
        }
        assert!((xs[10][0] - (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn dopri5_dense_output_between_steps() {
        // Long steps relative to the grid force interpolation.
        let grid = TimeGrid::new(0.0, 0.01, 201).unwrap();
        let xs = integrate(decay, &[2.0], &grid, &SolverSpec::dopri5(1e-7, 1e-9)).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let exact = 2.0 * (-grid.time(i)).exp();
            assert!((x[0] - exact).abs() < 1e-5, "i={i}: {} vs {exact}", x[0]);
        }
    }

    #[test]
    fn two_point_euler_is_one_step() {
        let grid = TimeGrid::new(0.0, 0.2, 2).unwrap();
        let f = |x: &[f64]| vec![x[0] * x[1], -x[0]];
        let xs = integrate(f, &[0.4, 1.3], &grid, &SolverSpec::euler(0.2)).unwrap();
        assert_eq!(xs[1], step_euler(f, 0.0, &[0.4, 1.3], 0.2).unwrap());
    }

    #[test]
    fn lotka_volterra_fixed_point_is_constant() {
        let (alpha, gamma) = (0.25, 0.25);
        let lv = move |x: &[f64]| vec![alpha * x[0] - x[0] * x[1] / 2.0, x[0] * x[1] / 5.0 - gamma * x[1]];
        let grid = TimeGrid::new(0.0, 0.1, 50).unwrap();
        let spec = SolverSpec::dopri5(1e-5, 1e-6);
        for x in integrate(lv, &[1.25, 0.5], &grid, &spec).unwrap() {
            assert!((x[0] - 1.25).abs() < 1e-6 && (x[1] - 0.5).abs() < 1e-6);
        }
    }

    fn global_error(kind: SolverKind, h: f64) -> f64 {
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let spec = SolverSpec { kind, ..SolverSpec::euler(h) };
        let xs = integrate(decay, &[1.0], &grid, &spec).unwrap();
        (xs[1][0] - (-1.0f64).exp()).abs()
    }

    #[test]
    fn convergence_orders() {
        let e = global_error(SolverKind::Euler, 0.01) / global_error(SolverKind::Euler, 0.005);
        assert!((1.8..=2.2).contains(&e), "euler ratio {e}");
        let r = global_error(SolverKind::Rk4, 0.1) / global_error(SolverKind::Rk4, 0.05);
        assert!((12.0..=20.0).contains(&r), "rk4 ratio {r}");
    }

    #[test]
    fn step_must_divide_grid() {
        let grid = TimeGrid::new(0.0, 0.1, 3).unwrap();
        let err = integrate(decay, &[1.0], &grid, &SolverSpec::euler(0.03)).unwrap_err();
        assert!(matches!(err, OdeError::Config(_)));
        assert!(TimeGrid::new(0.0, 0.0, 3).is_err());
        assert!(TimeGrid::new(0.0, 0.1, 1).is_err());
        assert!(SolverSpec::dopri5(0.0, 1e-6).validate().is_err());
    }

    #[test]
    fn stiff_problem_underflows() {
        let grid = TimeGrid::new(0.0, 0.5, 3).unwrap();
        // Finite-time blow-up: x' = x^2 from x0 = 10 explodes at t = 0.1.
        let err = integrate(|x| vec![x[0] * x[0]], &[10.0], &grid, &SolverSpec::dopri5(1e-6, 1e-6)).unwrap_err();
        assert!(matches!(err, OdeError::Stiffness { .. } | OdeError::NonFinite { .. } | OdeError::MaxSteps(_)));
    }

    #[test]
    fn tape_and_plain_fixed_step_bit_identical() {
        let grid = TimeGrid::new(0.0, 0.1, 8).unwrap();
        let m = [[-0.5, -0.25], [1.0, 0.1]];
        // Same accumulation order as the matmul kernel.
        let plain_field = |x: &[f64]| (0..2).map(|j| 0.0 + x[0] * m[0][j] + x[1] * m[1][j]).collect();
        for spec in [SolverSpec::euler(0.05), SolverSpec::rk4(0.1)] {
            let plain = integrate(plain_field, &[1.0, 0.3], &grid, &spec).unwrap();
            let mut tape = Tape::new();
            let x0 = tape.var(Tensor::matrix(1, 2, vec![1.0, 0.3]));
            let w = tape.param("m", || Tensor::matrix(2, 2, vec![-0.5, -0.25, 1.0, 0.1]));
            let mut sys = BackendSystem { backend: &mut tape, field: |b: &mut Tape, x: &_| b.matmul(x, &w) };
            let taped = integrate_system(&mut sys, x0, &grid, &spec).unwrap();
            for (p, t) in plain.iter().zip(&taped) {
                assert_eq!(p.as_slice(), tape.value(t).data());
            }
        }
    }
}
