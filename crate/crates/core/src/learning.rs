//! Training of neural feedback laws: monotonicity penalty, discrete adjoints of
//! the time stepper, reduced gradients and homotopy gradient descent.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::actuators::ActuatorBasis;
use crate::closed_loop::{simulate_with, trapezoid_weight, Extrapolation, Operators, Outcome, SimConfig};
use crate::discretization::{eigenpairs, DiscreteSystem};
use crate::error::{Error, Result};
use crate::feedback::FeedbackLaw;
use crate::network::NetworkParams;
use crate::sparse;

/// Uniform sample from the closed unit ball of `R^dim`.
pub fn sample_unit_ball<R: Rng>(dim: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let z: DVector<f64> = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
        let norm = z.norm();
        if norm > 0.0 {
            let radius = rng.gen::<f64>().powf(1.0 / dim as f64);
            return z * (radius / norm);
        }
    }
}

/// Coefficient vectors distributed uniformly on the `H`-ball of radius
/// `radius` inside the actuator span.
pub fn sample_penalty_points(basis: &ActuatorBasis, count: usize, radius: f64, seed: u64) -> Result<Vec<DVector<f64>>> {
    if !(radius > 0.0) {
        return Err(Error::InvalidInput("sampling radius must be positive".into()));
    }
    let lt = basis.gram_factor().l().transpose();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let s = sample_unit_ball(basis.count(), &mut rng) * radius;
            lt.solve_upper_triangular(&s)
                .ok_or_else(|| Error::LinearSolve("singular Gram factor".into()))
        })
        .collect()
}

/// `+v_j` and `-v_j` for the first `count / 2` eigenfunctions.
pub fn default_training_set(sys: &DiscreteSystem, count: usize) -> Result<Vec<DVector<f64>>> {
    if count == 0 || count % 2 != 0 {
        return Err(Error::InvalidInput(format!("training set size must be even and positive, got {count}")));
    }
    let half = count / 2;
    let pairs = eigenpairs(sys, half)?;
    let mut set: Vec<DVector<f64>> = (0..half).map(|j| pairs.vectors.column(j).into_owned()).collect();
    for j in 0..half {
        let neg = -&set[j];
        set.push(neg);
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyParams {
    pub weight: f64,
    pub exponent_offset: f64,
    pub target: f64,
}

/// Penalty value and flat parameter gradient.
pub fn penalty(
    params: &NetworkParams,
    basis: &ActuatorBasis,
    samples: &[DVector<f64>],
    pen: &PenaltyParams,
) -> Result<(f64, DVector<f64>)> {
    penalty_impl(params, basis, samples, pen, true)
}

/// Penalty value only.
pub fn penalty_value(
    params: &NetworkParams,
    basis: &ActuatorBasis,
    samples: &[DVector<f64>],
    pen: &PenaltyParams,
) -> Result<f64> {
    Ok(penalty_impl(params, basis, samples, pen, false)?.0)
}

const PENALTY_CHUNK: usize = 512;

fn penalty_impl(
    params: &NetworkParams,
    basis: &ActuatorBasis,
    samples: &[DVector<f64>],
    pen: &PenaltyParams,
    with_gradient: bool,
) -> Result<(f64, DVector<f64>)> {
    let np = params.param_count();
    if pen.weight == 0.0 || samples.is_empty() {
        return Ok((0.0, DVector::zeros(np)));
    }
    let n1 = samples.len() as f64;
    let eps = pen.exponent_offset;
    let width = if with_gradient { np } else { 0 };
    // Fixed chunks summed in order keep the result independent of scheduling.
    let partial: Vec<(f64, DVector<f64>)> = samples
        .par_chunks(PENALTY_CHUNK)
        .map(|chunk| -> Result<(f64, DVector<f64>)> {
            let mut value = 0.0;
            let mut grad = DVector::zeros(width);
            for p in chunk {
                let gp = basis.gram() * p;
                let margin = params.forward(p)?.dot(&gp) + pen.target * p.dot(&gp);
                if margin <= 0.0 {
                    continue;
                }
                value += margin.powf(1.0 + eps);
                if with_gradient {
                    grad.axpy(margin.powf(eps), &params.param_vjp(p, &gp)?, 1.0);
                }
            }
            Ok((value, grad))
        })
        .collect::<Result<_>>()?;
    let mut value = 0.0;
    let mut grad = DVector::zeros(width);
    for (v, g) in partial {
        value += v;
        grad += g;
    }
    Ok((
        pen.weight / ((1.0 + eps) * n1) * value,
        grad * (pen.weight / n1),
    ))
}

/// Forward trajectory with stored states, required by [`adjoint_gradient`].
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub cost: f64,
    pub states: Vec<DVector<f64>>,
    pub coordinates: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

/// Runs the closed loop and keeps what the adjoint needs; blow-up is an error.
pub fn forward_record(
    ops: &mut Operators,
    basis: &ActuatorBasis,
    law: &FeedbackLaw,
    y0: &DVector<f64>,
    sim: &SimConfig,
    index: usize,
) -> Result<ForwardRecord> {
    let mut cfg = sim.clone();
    cfg.keep_states = true;
    let run = simulate_with(ops, basis, law, y0, &cfg)?;
    match run.outcome {
        Outcome::BlowUp { time } => Err(Error::TrainingBlowUp { index, time }),
        Outcome::Stable { cost, .. } => Ok(ForwardRecord {
            cost,
            states: run.trajectory.states,
            coordinates: run.trajectory.coordinates,
            controls: run.trajectory.controls,
        }),
    }
}

/// Discrete adjoint states and the parameter gradient of the trajectory cost.
#[derive(Debug, Clone)]
pub struct AdjointResult {
    /// `adjoint[n]` multiplies the step equation producing `y^n`; `adjoint[0]` is zero.
    pub adjoint: Vec<DVector<f64>>,
    pub gradient: DVector<f64>,
}

/// Marches the transposed linearized scheme backward from the final time.
pub fn adjoint_gradient(
    ops: &mut Operators,
    basis: &ActuatorBasis,
    law: &FeedbackLaw,
    record: &ForwardRecord,
    sim: &SimConfig,
) -> Result<AdjointResult> {
    let sys = ops.system();
    let k = sim.step;
    let last = record.states.len() - 1;
    if last == 0 || record.coordinates.len() != last + 1 || record.controls.len() != last + 1 {
        return Err(Error::InvalidInput("forward record is incomplete".into()));
    }
    let n = sys.node_count();
    let loads = basis.loads();
    // B G^{-1} (dK/dc)^T w
    let pull_back = |jac: &DMatrix<f64>, w: &DVector<f64>| loads * basis.solve_gram(&jac.tr_mul(w));

    let mut lam: Vec<DVector<f64>> = vec![DVector::zeros(n); last + 3];
    let mut gradient = DVector::zeros(law.param_count());
    let weights = |n: usize| sim.extrapolation.weights(n);

    for step in (0..=last).rev() {
        let t = step as f64 * k;
        let y = &record.states[step];
        let c = &record.coordinates[step];
        let u = &record.controls[step];
        let jac = law.control_jacobian(c)?;
        let w = trapezoid_weight(step, last, k);
        let gu = basis.gram() * u;

        // Combination of later multipliers seen by F^step.
        let mu = if step < last {
            let (a_now, _) = weights(step);
            let (_, a_prev) = weights(step + 1);
            let mut mu = &lam[step + 1] * a_now;
            if a_prev != 0.0 {
                mu.axpy(a_prev, &lam[step + 2], 1.0);
            }
            Some(mu)
        } else {
            None
        };

        if step >= 1 {
            let mut rhs = sparse::matvec(sys.stiffness(), y) * w;
            rhs.axpy(w * sim.beta, &pull_back(&jac, &gu), 1.0);
            if let Some(mu) = &mu {
                rhs += ops.explicit_apply(t, &lam[step + 1])?;
                let conv = ops.convection(t)?;
                let mut jt = -sparse::matvec_transpose(&conv, mu);
                if sim.damping != 0.0 {
                    jt.axpy(-sim.damping, &sys.nonlinearity_jacobian_transpose_apply(y, mu), 1.0);
                }
                jt += pull_back(&jac, &loads.tr_mul(mu));
                rhs.axpy(k, &jt, 1.0);
            }
            lam[step] = ops.implicit_solve(t, &rhs)?;
        }

        if law.param_count() > 0 {
            let mut v = gu * (w * sim.beta);
            if let Some(mu) = &mu {
                v.axpy(k, &loads.tr_mul(mu), 1.0);
            }
            gradient += law.param_vjp(c, &v)?;
        }
    }
    lam.truncate(last + 1);
    Ok(AdjointResult {
        adjoint: lam,
        gradient,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnConfig {
    pub beta: f64,
    pub epsilon1: f64,
    pub target: f64,
    pub radius: f64,
    pub training_size: usize,
    pub penalty_samples: usize,
    pub horizon: f64,
    pub step: f64,
    pub extrapolation: Extrapolation,
    pub alpha_schedule: Vec<f64>,
    pub gamma_schedule: Vec<f64>,
    pub iterations: usize,
    pub armijo_c: f64,
    pub max_backtracks: usize,
    pub initial_step: f64,
    /// Start each line search from twice the last accepted step (capped by
    /// `initial_step`) instead of from `initial_step`.
    pub step_reuse: bool,
    pub gradient_tolerance: f64,
    /// Smallest damping increment produced by inserting intermediate stages.
    pub min_damping_increment: f64,
    pub hidden: Vec<usize>,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            epsilon1: 1e-4,
            target: 100.0,
            radius: 1.1,
            training_size: 10,
            penalty_samples: 50_000,
            horizon: 5.0,
            step: 1e-3,
            extrapolation: Extrapolation::AdamsBashforth2,
            alpha_schedule: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            gamma_schedule: vec![0.0, 50.0, 150.0, 300.0, 500.0],
            iterations: 200,
            armijo_c: 1e-4,
            max_backtracks: 30,
            initial_step: 1.0,
            step_reuse: false,
            gradient_tolerance: 0.0,
            min_damping_increment: 1.0 / 64.0,
            hidden: vec![15, 15],
            init_std: 1e-2,
            seed: 0,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| {
            Err(Error::Config {
                field: format!("learn.{f}"),
                message: m.to_string(),
            })
        };
        if !(self.beta > 0.0) {
            return bad("beta", "must be positive");
        }
        if !(self.epsilon1 > 0.0) {
            return bad("epsilon1", "must be positive");
        }
        if !(self.target > 0.0) {
            return bad("target", "must be positive");
        }
        if !(self.radius > 0.0) {
            return bad("radius", "must be positive");
        }
        if self.gamma_schedule.iter().any(|g| !(*g >= 0.0)) || self.gamma_schedule.is_empty() {
            return bad("gamma_schedule", "must be nonempty and nonnegative");
        }
        if self.alpha_schedule.iter().any(|a| !(0.0..=1.0).contains(a)) || self.alpha_schedule.is_empty() {
            return bad("alpha_schedule", "must be nonempty with entries in [0, 1]");
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return bad("armijo_c", "must lie in (0, 1)");
        }
        if !(self.initial_step > 0.0) {
            return bad("initial_step", "must be positive");
        }
        if !(self.min_damping_increment > 0.0) {
            return bad("min_damping_increment", "must be positive");
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden", "layer widths must be positive");
        }
        self.sim(1.0).validate()
    }

    pub fn sim(&self, damping: f64) -> SimConfig {
        SimConfig {
            horizon: self.horizon,
            step: self.step,
            blowup_threshold: 1e6,
            extrapolation: self.extrapolation,
            beta: self.beta,
            damping,
            keep_states: false,
        }
    }

    /// `(alpha, gamma)` per stage: the damping schedule at the first penalty
    /// weight, then the remaining penalty weights at the last damping value.
    pub fn stages(&self) -> Vec<(f64, f64)> {
        let g0 = self.gamma_schedule[0];
        let a_last = *self.alpha_schedule.last().expect("validated nonempty");
        self.alpha_schedule
            .iter()
            .map(|&a| (a, g0))
            .chain(self.gamma_schedule[1..].iter().map(|&g| (a_last, g)))
            .collect()
    }

    pub fn arch(&self, actuators: usize) -> Vec<usize> {
        std::iter::once(actuators)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(actuators))
            .collect()
    }

    pub fn initial_params(&self, actuators: usize) -> Result<NetworkParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        NetworkParams::random(&self.arch(actuators), self.init_std, &mut rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub objective: f64,
    /// Mean trajectory cost over the training set.
    pub mean_cost: f64,
    pub penalty: f64,
}

/// Objective of the learning problem for one `(damping, penalty weight)` pair.
pub struct Problem<'a> {
    pub sys: &'a DiscreteSystem,
    pub basis: &'a ActuatorBasis,
    pub training: &'a [DVector<f64>],
    pub samples: &'a [DVector<f64>],
    pub cfg: &'a LearnConfig,
}

impl<'a> Problem<'a> {
    fn penalty_params(&self, gamma: f64) -> PenaltyParams {
        PenaltyParams {
            weight: gamma,
            exponent_offset: self.cfg.epsilon1,
            target: self.cfg.target,
        }
    }

    fn law(&self, params: &NetworkParams) -> Result<FeedbackLaw> {
        FeedbackLaw::neural(params.clone(), self.basis)
    }

    /// Objective value without gradient.
    pub fn evaluate(&self, params: &NetworkParams, damping: f64, gamma: f64) -> Result<Evaluation> {
        let law = self.law(params)?;
        let sim = self.cfg.sim(damping);
        let costs: Vec<f64> = self
            .training
            .par_iter()
            .enumerate()
            .map(|(i, y0)| -> Result<f64> {
                let mut ops = Operators::new(self.sys, sim.step)?;
                let run = simulate_with(&mut ops, self.basis, &law, y0, &sim)?;
                match run.outcome {
                    Outcome::Stable { cost, .. } => Ok(cost),
                    Outcome::BlowUp { time } => Err(Error::TrainingBlowUp { index: i, time }),
                }
            })
            .collect::<Result<_>>()?;
        let mean_cost = mean(&costs);
        let penalty = penalty_value(params, self.basis, self.samples, &self.penalty_params(gamma))?;
        Ok(Evaluation {
            objective: mean_cost + penalty,
            mean_cost,
            penalty,
        })
    }

    /// Objective value and its exact gradient with respect to the flat parameters.
    pub fn evaluate_with_gradient(
        &self,
        params: &NetworkParams,
        damping: f64,
        gamma: f64,
    ) -> Result<(Evaluation, DVector<f64>)> {
        let law = self.law(params)?;
        let sim = self.cfg.sim(damping);
        let np = params.param_count();
        let parts: Vec<(f64, DVector<f64>)> = self
            .training
            .par_iter()
            .enumerate()
            .map(|(i, y0)| -> Result<(f64, DVector<f64>)> {
                let mut ops = Operators::new(self.sys, sim.step)?;
                let rec = forward_record(&mut ops, self.basis, &law, y0, &sim, i)?;
                let adj = adjoint_gradient(&mut ops, self.basis, &law, &rec, &sim)?;
                Ok((rec.cost, adj.gradient))
            })
            .collect::<Result<_>>()?;
        let count = parts.len().max(1) as f64;
        let mut grad = DVector::zeros(np);
        let mut costs = Vec::with_capacity(parts.len());
        for (c, g) in parts {
            costs.push(c);
            grad += g;
        }
        grad /= count;
        let (penalty, pgrad) = penalty(params, self.basis, self.samples, &self.penalty_params(gamma))?;
        grad += pgrad;
        let mean_cost = mean(&costs);
        Ok((
            Evaluation {
                objective: mean_cost + penalty,
                mean_cost,
                penalty,
            },
            grad,
        ))
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    IterationLimit,
    Converged,
    ArmijoFailure,
}

impl StageStatus {
    pub fn name(self) -> &'static str {
        match self {
            Self::IterationLimit => "iteration_limit",
            Self::Converged => "converged",
            Self::ArmijoFailure => "armijo_failure",
        }
    }
}

/// One accepted (or final) iterate of the descent.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub stage: usize,
    pub iteration: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub objective: f64,
    pub penalty: f64,
    pub gradient_norm: f64,
    pub step: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "stage,iteration,alpha,gamma,objective,penalty,gradient_norm,step";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            self.stage,
            self.iteration,
            self.alpha,
            self.gamma,
            self.objective,
            self.penalty,
            self.gradient_norm,
            self.step
        )
    }
}

#[derive(Debug, Clone)]
pub struct StageSummary {
    pub stage: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub start: Evaluation,
    pub end: Evaluation,
    pub status: StageStatus,
    pub params: NetworkParams,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: NetworkParams,
    pub stages: Vec<StageSummary>,
    pub log: Vec<LogRow>,
}

/// Stages still to run after the stage `(alpha, gamma)` has completed.
fn remaining_stages(cfg: &LearnConfig, completed: Option<(f64, f64)>) -> Vec<(f64, f64)> {
    let all = cfg.stages();
    let Some((alpha, gamma)) = completed else {
        return all;
    };
    let g0 = cfg.gamma_schedule[0];
    all.into_iter()
        .filter(|&(a, g)| {
            if gamma == g0 {
                g > g0 || a > alpha
            } else {
                g > gamma
            }
        })
        .collect()
}

/// Gradient descent with Armijo backtracking over the homotopy stages.
///
/// `completed` names the last stage already finished (when resuming from a
/// checkpoint); `init` is its output. If the starting point of a damping stage
/// blows up, a stage at the midpoint damping value is inserted first, down to
/// an increment of `min_damping_increment`.
pub fn train(
    problem: &Problem,
    init: NetworkParams,
    completed: Option<(f64, f64)>,
    mut on_stage: impl FnMut(&StageSummary),
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainResult> {
    let cfg = problem.cfg;
    cfg.validate()?;
    let mut params = init;
    let mut stages = Vec::new();
    let mut log = Vec::new();
    let mut pending = remaining_stages(cfg, completed);
    pending.reverse();
    let mut prev_alpha = completed.map_or(cfg.alpha_schedule[0], |c| c.0);
    let mut stage = 0;
    while let Some((alpha, gamma)) = pending.pop() {
        let first = match problem.evaluate_with_gradient(&params, alpha, gamma) {
            Err(Error::TrainingBlowUp { .. }) if alpha - prev_alpha > cfg.min_damping_increment => {
                pending.push((alpha, gamma));
                pending.push((0.5 * (prev_alpha + alpha), gamma));
                continue;
            }
            other => other?,
        };
        let summary = run_stage(problem, &mut params, stage, alpha, gamma, first, |row| {
            on_row(&row);
            log.push(row);
        })?;
        on_stage(&summary);
        stages.push(summary);
        prev_alpha = alpha;
        stage += 1;
    }
    Ok(TrainResult { params, stages, log })
}

fn run_stage(
    problem: &Problem,
    params: &mut NetworkParams,
    stage: usize,
    alpha: f64,
    gamma: f64,
    first: (Evaluation, DVector<f64>),
    mut push: impl FnMut(LogRow),
) -> Result<StageSummary> {
    let cfg = problem.cfg;
    let (mut eval, mut grad) = first;
    let start = eval;
    let mut status = StageStatus::IterationLimit;
    let mut last_step = cfg.initial_step;
    let mut iterations = 0;
    let row = |iteration, eval: &Evaluation, grad: &DVector<f64>, step| LogRow {
        stage,
        iteration,
        alpha,
        gamma,
        objective: eval.objective,
        penalty: eval.penalty,
        gradient_norm: grad.norm(),
        step,
    };
    push(row(0, &eval, &grad, 0.0));
    for it in 1..=cfg.iterations {
        let gnorm_sq = grad.norm_squared();
        if gnorm_sq.sqrt() <= cfg.gradient_tolerance {
            status = StageStatus::Converged;
            break;
        }
        let mut s = if cfg.step_reuse {
            (2.0 * last_step).min(cfg.initial_step)
        } else {
            cfg.initial_step
        };
        let theta = params.to_flat();
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let trial = params.with_flat(&(&theta - &grad * s))?;
            let value = match problem.evaluate(&trial, alpha, gamma) {
                Ok(e) => Some(e),
                Err(Error::TrainingBlowUp { .. }) => None,
                Err(e) => return Err(e),
            };
            if let Some(e) = value {
                if e.objective.is_finite() && e.objective <= eval.objective - cfg.armijo_c * s * gnorm_sq {
                    accepted = Some(trial);
                    break;
                }
            }
            s *= 0.5;
        }
        let Some(next) = accepted else {
            status = StageStatus::ArmijoFailure;
            break;
        };
        *params = next;
        last_step = s;
        iterations = it;
        let (e, g) = problem.evaluate_with_gradient(params, alpha, gamma)?;
        eval = e;
        grad = g;
        push(row(it, &eval, &grad, s));
    }
    Ok(StageSummary {
        stage,
        alpha,
        gamma,
        iterations,
        start,
        end: eval,
        status,
        params: params.clone(),
    })
}
