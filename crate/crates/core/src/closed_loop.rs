//! Semi-implicit time stepping of the closed loop, blow-up detection, cost
//! evaluation and decay-rate fitting.
//!
//! One step solves
//! `(M + k/2 L(t_{n+1})) y^{n+1} = (M - k/2 L(t_n)) y^n + k E^n`
//! with `L(t) = A_h + R_h(t)` and `E^n` an explicit extrapolation of
//! `F(y, t) = -B_h(t) y - alpha N_h(y) + B u(y)`.

use std::io::Write;

use nalgebra::DVector;
use nalgebra_sparse::CsrMatrix;

use crate::actuators::ActuatorBasis;
use crate::discretization::DiscreteSystem;
use crate::error::{Error, Result};
use crate::feedback::FeedbackLaw;
use crate::sparse::{self, SpdSolver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Extrapolation {
    /// Two-step Adams-Bashforth, explicit Euler on the first step.
    #[default]
    AdamsBashforth2,
    /// Explicit Euler on every step.
    Euler,
}

impl Extrapolation {
    /// Weights `(current, previous)` of `F` in `E^n`.
    pub fn weights(self, n: usize) -> (f64, f64) {
        match (self, n) {
            (Self::AdamsBashforth2, 0) | (Self::Euler, _) => (1.0, 0.0),
            (Self::AdamsBashforth2, _) => (1.5, -0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub horizon: f64,
    pub step: f64,
    pub blowup_threshold: f64,
    pub extrapolation: Extrapolation,
    /// Weight of the control cost.
    pub beta: f64,
    /// Scaling of the nonlinearity, in `[0, 1]`.
    pub damping: f64,
    /// Keep nodal states in the trajectory (needed for adjoints).
    pub keep_states: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: 5.0,
            step: 1e-3,
            blowup_threshold: 1e6,
            extrapolation: Extrapolation::AdamsBashforth2,
            beta: 1.0,
            damping: 1.0,
            keep_states: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: String| Err(Error::Config { field: f.into(), message: m });
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad("sim.horizon", format!("must be positive, got {}", self.horizon));
        }
        if !(self.step > 0.0 && self.step <= self.horizon) {
            return bad("sim.step", format!("must lie in (0, horizon], got {}", self.step));
        }
        if !(self.blowup_threshold > 0.0) {
            return bad("sim.blowup_threshold", "must be positive".into());
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("sim.beta", format!("must be nonnegative, got {}", self.beta));
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return bad("sim.damping", format!("must lie in [0, 1], got {}", self.damping));
        }
        Ok(())
    }

    pub fn step_count(&self) -> usize {
        (self.horizon / self.step).round().max(1.0) as usize
    }
}

/// Time series recorded along one run.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub norm_h: Vec<f64>,
    pub norm_v: Vec<f64>,
    pub norm_u: Vec<f64>,
    /// Cost accumulated up to each time.
    pub cost_partial: Vec<f64>,
    /// Projection coordinates `c^n`.
    pub coordinates: Vec<DVector<f64>>,
    /// Control coefficients `u^n`.
    pub controls: Vec<DVector<f64>>,
    /// Nodal states, when requested.
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Trapezoid integral of a per-step series over the recorded times.
    pub fn integrate(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.times
            .windows(2)
            .enumerate()
            .map(|(i, w)| 0.5 * (w[1] - w[0]) * (f(i) + f(i + 1)))
            .sum()
    }

    /// `int |y|_H^2 dt`.
    pub fn state_h_energy(&self) -> f64 {
        self.integrate(|i| self.norm_h[i].powi(2))
    }

    /// `int |y|_V^2 dt`.
    pub fn state_v_energy(&self) -> f64 {
        self.integrate(|i| self.norm_v[i].powi(2))
    }

    /// `int |u|_H^2 dt`.
    pub fn control_energy(&self) -> f64 {
        self.integrate(|i| self.norm_u[i].powi(2))
    }

    /// CSV with columns `t,normH,normV,normU,J_partial`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,normH,normV,normU,J_partial")?;
        for i in 0..self.len() {
            writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.times[i], self.norm_h[i], self.norm_v[i], self.norm_u[i], self.cost_partial[i]
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    Stable { cost: f64, decay_rate: f64 },
    BlowUp { time: f64 },
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: Outcome,
    pub trajectory: Trajectory,
}

impl RunResult {
    pub fn is_stable(&self) -> bool {
        matches!(self.outcome, Outcome::Stable { .. })
    }

    pub fn cost(&self) -> Option<f64> {
        match self.outcome {
            Outcome::Stable { cost, .. } => Some(cost),
            Outcome::BlowUp { .. } => None,
        }
    }

    pub fn blowup_time(&self) -> Option<f64> {
        match self.outcome {
            Outcome::BlowUp { time } => Some(time),
            Outcome::Stable { .. } => None,
        }
    }

    /// One CSV row: `outcome,J,mu,blowupTime` (absent values left empty).
    pub fn summary_row(&self) -> String {
        match self.outcome {
            Outcome::Stable { cost, decay_rate } => format!("stable,{cost:.16e},{decay_rate:.16e},"),
            Outcome::BlowUp { time } => format!("blowup,,,{time:.16e}"),
        }
    }

    pub const SUMMARY_HEADER: &'static str = "outcome,J,mu,blowupTime";
}

/// Linear operators of the scheme at a fixed step size.
pub struct Operators<'a> {
    sys: &'a DiscreteSystem,
    step: f64,
    /// `M + k/2 A`.
    lhs_base: CsrMatrix<f64>,
    /// `M - k/2 A`.
    rhs_base: CsrMatrix<f64>,
    solver: SpdSolver,
    autonomous: bool,
    fixed_reaction: Option<CsrMatrix<f64>>,
    fixed_convection: Option<CsrMatrix<f64>>,
    reaction_cache: Vec<(f64, CsrMatrix<f64>)>,
}

const PCG_TOLERANCE: f64 = 1e-14;
const PCG_MAX_ITERATIONS: usize = 60;

impl<'a> Operators<'a> {
    pub fn new(sys: &'a DiscreteSystem, step: f64) -> Result<Self> {
        let h = 0.5 * step;
        let lhs_base = sparse::combine(&[(1.0, sys.mass()), (h, sys.stiffness())]);
        let rhs_base = sparse::combine(&[(1.0, sys.mass()), (-h, sys.stiffness())]);
        let autonomous = sys.is_autonomous();
        let r0 = sys.reaction_matrix(0.0)?;
        let solver = SpdSolver::new(&sparse::combine(&[(1.0, &lhs_base), (h, &r0)]))?;
        let (fixed_reaction, fixed_convection) = if autonomous {
            (Some(r0), Some(sys.convection_matrix(0.0)?))
        } else {
            (None, None)
        };
        Ok(Self {
            sys,
            step,
            lhs_base,
            rhs_base,
            solver,
            autonomous,
            fixed_reaction,
            fixed_convection,
            reaction_cache: Vec::new(),
        })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn system(&self) -> &'a DiscreteSystem {
        self.sys
    }

    fn reaction(&mut self, t: f64) -> Result<CsrMatrix<f64>> {
        if let Some(r) = &self.fixed_reaction {
            return Ok(r.clone());
        }
        if let Some((_, r)) = self.reaction_cache.iter().find(|(s, _)| *s == t) {
            return Ok(r.clone());
        }
        let r = self.sys.reaction_matrix(t)?;
        if self.reaction_cache.len() >= 2 {
            self.reaction_cache.remove(0);
        }
        self.reaction_cache.push((t, r.clone()));
        Ok(r)
    }

    /// `B_h(t)`.
    pub fn convection(&self, t: f64) -> Result<CsrMatrix<f64>> {
        match &self.fixed_convection {
            Some(c) => Ok(c.clone()),
            None => self.sys.convection_matrix(t),
        }
    }

    /// `(M - k/2 L(t)) y`; the matrix is symmetric.
    pub fn explicit_apply(&mut self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        let r = self.reaction(t)?;
        let mut out = sparse::matvec(&self.rhs_base, y);
        out.axpy(-0.5 * self.step, &sparse::matvec(&r, y), 1.0);
        Ok(out)
    }

    /// Solves `(M + k/2 L(t)) x = b`; the matrix is symmetric.
    pub fn implicit_solve(&mut self, t: f64, b: &DVector<f64>) -> Result<DVector<f64>> {
        if self.autonomous {
            return Ok(self.solver.solve(b));
        }
        let r = self.reaction(t)?;
        let op = sparse::combine(&[(1.0, &self.lhs_base), (0.5 * self.step, &r)]);
        if let Some(x) = pcg(&op, &self.solver, b) {
            return Ok(x);
        }
        // The reference factor drifted too far from the current operator.
        self.solver.refactor(&op)?;
        Ok(self.solver.solve(b))
    }
}

/// Conjugate gradients preconditioned by a nearby factorization.
fn pcg(op: &CsrMatrix<f64>, pre: &SpdSolver, b: &DVector<f64>) -> Option<DVector<f64>> {
    let bnorm = b.norm();
    if bnorm == 0.0 {
        return Some(DVector::zeros(b.len()));
    }
    let mut x = pre.solve(b);
    let mut r = b - sparse::matvec(op, &x);
    let mut z = pre.solve(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for _ in 0..PCG_MAX_ITERATIONS {
        if r.norm() <= PCG_TOLERANCE * bnorm {
            return Some(x);
        }
        let ap = sparse::matvec(op, &p);
        let alpha = rz / p.dot(&ap);
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        z = pre.solve(&r);
        let rz_new = r.dot(&z);
        p = &z + &p * (rz_new / rz);
        rz = rz_new;
    }
    (r.norm() <= 1e-12 * bnorm).then_some(x)
}

/// Explicit part `F(y, t)` given the already evaluated control `u`.
pub fn explicit_force(
    ops: &Operators,
    t: f64,
    y: &DVector<f64>,
    u: &DVector<f64>,
    basis: &ActuatorBasis,
    damping: f64,
) -> Result<DVector<f64>> {
    let conv = ops.convection(t)?;
    let mut f = basis.load(u);
    f.axpy(-1.0, &sparse::matvec(&conv, y), 1.0);
    if damping != 0.0 {
        f.axpy(-damping, &ops.system().nonlinearity(y), 1.0);
    }
    Ok(f)
}

/// Trapezoid weight of time index `n` out of `0..=last`.
pub fn trapezoid_weight(n: usize, last: usize, step: f64) -> f64 {
    if n == 0 || n == last {
        0.5 * step
    } else {
        step
    }
}

/// Integrates the closed loop from `y0` over `[0, cfg.horizon]`.
pub fn simulate(
    sys: &DiscreteSystem,
    basis: &ActuatorBasis,
    law: &FeedbackLaw,
    y0: &DVector<f64>,
    cfg: &SimConfig,
) -> Result<RunResult> {
    cfg.validate()?;
    if y0.len() != sys.node_count() {
        return Err(Error::InvalidInput("initial state has the wrong length".into()));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("initial state is not finite".into()));
    }
    let mut ops = Operators::new(sys, cfg.step)?;
    simulate_with(&mut ops, basis, law, y0, cfg)
}

/// As [`simulate`], reusing prepared operators.
pub fn simulate_with(
    ops: &mut Operators,
    basis: &ActuatorBasis,
    law: &FeedbackLaw,
    y0: &DVector<f64>,
    cfg: &SimConfig,
) -> Result<RunResult> {
    let sys = ops.system();
    let k = cfg.step;
    let steps = cfg.step_count();
    let mut traj = Trajectory::default();
    let mut cost = 0.0;

    let record = |traj: &mut Trajectory, t: f64, y: &DVector<f64>, c: DVector<f64>, u: DVector<f64>, nh: f64| {
        traj.times.push(t);
        traj.norm_h.push(nh);
        traj.norm_v.push(sys.v_norm_sq(y).max(0.0).sqrt());
        traj.norm_u.push(basis.coefficient_norm_sq(&u).max(0.0).sqrt());
        traj.coordinates.push(c);
        traj.controls.push(u);
        if cfg.keep_states {
            traj.states.push(y.clone());
        }
    };
    let running = |y: &DVector<f64>, u: &DVector<f64>| {
        0.5 * (sys.v_norm_sq(y) + cfg.beta * basis.coefficient_norm_sq(u))
    };

    let mut y = y0.clone();
    let mut c = basis.coordinates(&y);
    let mut u = law.control(&c)?;
    let mut previous_force: Option<DVector<f64>> = None;
    let mut stage = running(&y, &u);
    record(&mut traj, 0.0, &y, c.clone(), u.clone(), sys.h_norm(&y));
    traj.cost_partial.push(0.0);

    for n in 0..steps {
        let t = n as f64 * k;
        let t_next = (n + 1) as f64 * k;
        let force = explicit_force(ops, t, &y, &u, basis, cfg.damping)?;
        let (w_now, w_prev) = cfg.extrapolation.weights(n);
        let mut rhs = ops.explicit_apply(t, &y)?;
        rhs.axpy(k * w_now, &force, 1.0);
        if let (Some(prev), true) = (&previous_force, w_prev != 0.0) {
            rhs.axpy(k * w_prev, prev, 1.0);
        }
        let y_next = ops.implicit_solve(t_next, &rhs)?;
        if y_next.iter().any(|v| !v.is_finite()) {
            return Ok(RunResult {
                outcome: Outcome::BlowUp { time: t },
                trajectory: traj,
            });
        }
        let nh = sys.h_norm(&y_next);
        previous_force = Some(force);
        y = y_next;
        c = basis.coordinates(&y);
        u = law.control(&c)?;
        if u.iter().any(|v| !v.is_finite()) {
            return Ok(RunResult {
                outcome: Outcome::BlowUp { time: t },
                trajectory: traj,
            });
        }
        let next_stage = running(&y, &u);
        cost += 0.5 * k * (stage + next_stage);
        stage = next_stage;
        record(&mut traj, t_next, &y, c.clone(), u.clone(), nh);
        traj.cost_partial.push(cost);
        if nh > cfg.blowup_threshold {
            return Ok(RunResult {
                outcome: Outcome::BlowUp { time: t_next },
                trajectory: traj,
            });
        }
    }
    let decay_rate = decay_rate_fit(&traj.times, &traj.norm_h, None).unwrap_or(f64::NAN);
    Ok(RunResult {
        outcome: Outcome::Stable {
            cost,
            decay_rate,
        },
        trajectory: traj,
    })
}

/// Negated least-squares slope of `log |y|_H` over `window` (all samples if `None`).
pub fn decay_rate_fit(times: &[f64], norms: &[f64], window: Option<(f64, f64)>) -> Result<f64> {
    let (lo, hi) = window.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(norms)
        .filter(|(t, _)| **t >= lo && **t <= hi)
        .map(|(t, n)| (*t, *n))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Undefined("decay rate needs at least two samples in the window".into()));
    }
    if let Some((t, _)) = pts.iter().find(|(_, n)| !(*n > 0.0 && n.is_finite())) {
        return Err(Error::Undefined(format!(
            "decay rate undefined: norm is zero or not finite at t = {t}"
        )));
    }
    let count = pts.len() as f64;
    let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / count;
    let mean_l = pts.iter().map(|p| p.1.ln()).sum::<f64>() / count;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, n) in &pts {
        sxy += (t - mean_t) * (n.ln() - mean_l);
        sxx += (t - mean_t) * (t - mean_t);
    }
    if sxx == 0.0 {
        return Err(Error::Undefined("decay rate window has zero width".into()));
    }
    Ok(-sxy / sxx)
}
