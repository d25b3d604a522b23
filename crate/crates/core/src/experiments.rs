//! Coefficient and initial-state presets, parameter sweeps and the validation
//! protocol comparing feedback laws on random initial states.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::actuators::{ActuatorBasis, ActuatorLayout};
use crate::closed_loop::{simulate, Outcome, RunResult, SimConfig};
use crate::discretization::{eigenpairs, CoefficientField, DiscreteSystem, RectDomain, StructuredMesh};
use crate::error::{Error, Result};
use crate::feedback::FeedbackLaw;
use crate::learning::sample_unit_ball;

pub const DIFFUSION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefficientPreset {
    /// `a = -2 + x1 - |sin(t + x1)|`, `b = (x1 + x2, cos(t) x1 x2)`.
    TimeDependent,
    /// `a = -2 + x1 - |sin(x1)|`, `b = (x1 + x2, x1 x2)`.
    Autonomous,
}

impl CoefficientPreset {
    pub fn name(self) -> &'static str {
        match self {
            Self::TimeDependent => "time_dependent",
            Self::Autonomous => "autonomous",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "time_dependent" => Some(Self::TimeDependent),
            "autonomous" => Some(Self::Autonomous),
            _ => None,
        }
    }
}

impl CoefficientField for CoefficientPreset {
    fn reaction(&self, x: &[f64], t: f64) -> f64 {
        match self {
            Self::TimeDependent => -2.0 + x[0] - (t + x[0]).sin().abs(),
            Self::Autonomous => -2.0 + x[0] - x[0].sin().abs(),
        }
    }

    fn convection(&self, x: &[f64], t: f64, out: &mut [f64]) {
        out[0] = x[0] + x[1];
        out[1] = match self {
            Self::TimeDependent => t.cos() * x[0] * x[1],
            Self::Autonomous => x[0] * x[1],
        };
    }

    fn is_autonomous(&self) -> bool {
        matches!(self, Self::Autonomous)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialShape {
    /// `1 - 2 x1 x2`, normalized.
    Ybar1,
    /// `-sgn(x1 - 1/2) sgn(x2 - 1/2)`, normalized.
    Ybar2,
}

impl InitialShape {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ybar1 => "ybar1",
            Self::Ybar2 => "ybar2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ybar1" => Some(Self::Ybar1),
            "ybar2" => Some(Self::Ybar2),
            _ => None,
        }
    }
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Nodal interpolant of the shape, scaled to `H`-norm `scale`.
pub fn preset_initial(sys: &DiscreteSystem, shape: InitialShape, scale: f64) -> Result<DVector<f64>> {
    let y = match shape {
        InitialShape::Ybar1 => sys.interpolate(|x| 1.0 - 2.0 * x[0] * x[1])?,
        InitialShape::Ybar2 => sys.interpolate(|x| -sgn(x[0] - 0.5) * sgn(x[1] - 0.5))?,
    };
    let norm = sys.h_norm(&y);
    if norm == 0.0 {
        return Err(Error::InvalidInput("initial shape vanishes on this mesh".into()));
    }
    Ok(y * (scale / norm))
}

/// System and actuators on the unit square.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub sys: DiscreteSystem,
    pub basis: ActuatorBasis,
}

/// Unit square with `cells x cells` cells refined onto the `m x m` actuator layout.
pub fn build_scenario(cells: usize, m: usize, preset: CoefficientPreset, nu: f64) -> Result<Scenario> {
    build_scenario_on(&RectDomain::unit_square(), cells, m, preset, nu)
}

/// Rectangle with `cells` cells per axis refined onto the `m x m` actuator layout.
pub fn build_scenario_on(
    domain: &RectDomain,
    cells: usize,
    m: usize,
    preset: CoefficientPreset,
    nu: f64,
) -> Result<Scenario> {
    if domain.dim() != 2 {
        return Err(Error::InvalidInput("coefficient presets are defined in two dimensions".into()));
    }
    let layout = ActuatorLayout::new(domain, m)?;
    let mesh = StructuredMesh::build(domain, &[cells, cells], &[layout.clone()])?;
    let sys = DiscreteSystem::assemble(&mesh, Arc::new(preset), nu)?;
    let basis = ActuatorBasis::build(&layout, &sys)?;
    Ok(Scenario { sys, basis })
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub domain: RectDomain,
    pub cells: usize,
    pub nu: f64,
    pub preset: CoefficientPreset,
    pub ms: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub shape: InitialShape,
    pub scale: f64,
    pub sim: SimConfig,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub m: usize,
    pub lambda: f64,
    pub outcome: Outcome,
}

pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    if spec.ms.is_empty() || spec.lambdas.is_empty() {
        return Err(Error::InvalidInput("sweep grids must be nonempty".into()));
    }
    let mut rows = Vec::with_capacity(spec.ms.len() * spec.lambdas.len());
    for &m in &spec.ms {
        let sc = build_scenario_on(&spec.domain, spec.cells, m, spec.preset, spec.nu)?;
        let y0 = preset_initial(&sc.sys, spec.shape, spec.scale)?;
        let results: Vec<Result<RunResult>> = spec
            .lambdas
            .par_iter()
            .map(|&lambda| {
                let law = FeedbackLaw::scaled_projection(lambda)?;
                simulate(&sc.sys, &sc.basis, &law, &y0, &spec.sim)
            })
            .collect();
        for (&lambda, r) in spec.lambdas.iter().zip(results) {
            rows.push(SweepRow {
                m,
                lambda,
                outcome: r?.outcome,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "M,lambda,outcome,t_blowup,J,mu")?;
    for r in rows {
        match r.outcome {
            Outcome::Stable { cost, decay_rate } => writeln!(
                out,
                "{},{:.16e},stable,,{cost:.16e},{decay_rate:.16e}",
                r.m, r.lambda
            )?,
            Outcome::BlowUp { time } => {
                writeln!(out, "{},{:.16e},blowup,{time:.16e},,", r.m, r.lambda)?
            }
        }
    }
    Ok(())
}

/// `count` states drawn uniformly from the unit `H`-ball of the span of the
/// first `m` eigenfunctions.
pub fn sample_validation_set(sys: &DiscreteSystem, m: usize, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    if m == 0 || m > sys.node_count() {
        return Err(Error::InvalidInput(format!("eigenfunction count {m} out of range")));
    }
    let pairs = eigenpairs(sys, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| &pairs.vectors * sample_unit_ball(m, &mut rng))
        .collect())
}

/// Per-initial-state outcome of one law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationRun {
    /// Finite on `[0, T]` and `|y(T)|_H < |y(0)|_H`.
    pub success: bool,
    pub cost: f64,
    pub state_energy: f64,
    pub control_energy: f64,
}

impl ValidationRun {
    pub fn from_result(r: &RunResult) -> Self {
        let t = &r.trajectory;
        let decays = t.norm_h.last().zip(t.norm_h.first()).is_some_and(|(end, start)| end < start);
        match r.outcome {
            Outcome::Stable { cost, .. } if decays => Self {
                success: true,
                cost,
                state_energy: t.state_h_energy(),
                control_energy: t.control_energy(),
            },
            _ => Self {
                success: false,
                cost: f64::INFINITY,
                state_energy: f64::INFINITY,
                control_energy: f64::INFINITY,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub law: String,
    pub n_fail: usize,
    pub n_succ: usize,
    pub n_improv: usize,
    pub mean_state_energy: f64,
    pub mean_control_energy: f64,
    pub mean_cost: f64,
    /// Signed relative changes against the reference law, in percent.
    pub avg_improv: f64,
    pub best: f64,
    pub worst: f64,
    pub seed: u64,
}

impl ValidationReport {
    pub const CSV_HEADER: &'static str = "law,N_fail,N_improv,E_y2,E_u2,E_J,avg_improv,best,worst,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            self.law,
            self.n_fail,
            self.n_improv,
            self.mean_state_energy,
            self.mean_control_energy,
            self.mean_cost,
            self.avg_improv,
            self.best,
            self.worst,
            self.seed
        )
    }
}

/// Compares per-sample outcomes of a law against those of the reference law.
pub fn summarize(law: &str, runs: &[ValidationRun], reference: &[ValidationRun], seed: u64) -> Result<ValidationReport> {
    if runs.len() != reference.len() {
        return Err(Error::InvalidInput("run counts differ from the reference".into()));
    }
    let succ: Vec<usize> = (0..runs.len()).filter(|&i| runs[i].success).collect();
    let n_succ = succ.len();
    let mean = |f: &dyn Fn(&ValidationRun) -> f64| {
        if n_succ == 0 {
            f64::NAN
        } else {
            succ.iter().map(|&i| f(&runs[i])).sum::<f64>() / n_succ as f64
        }
    };
    let n_improv = succ
        .iter()
        .filter(|&&i| !reference[i].success || runs[i].cost < reference[i].cost)
        .count();
    // Relative changes are only defined where the reference also succeeded.
    let both: Vec<usize> = succ.iter().copied().filter(|&i| reference[i].success).collect();
    let (avg, best, worst) = if both.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let diff: f64 = both.iter().map(|&i| runs[i].cost - reference[i].cost).sum();
        let base: f64 = both.iter().map(|&i| reference[i].cost).sum();
        let rel: Vec<f64> = both
            .iter()
            .map(|&i| (runs[i].cost - reference[i].cost) / reference[i].cost)
            .collect();
        (
            100.0 * diff / base,
            100.0 * rel.iter().copied().fold(f64::INFINITY, f64::min),
            100.0 * rel.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    Ok(ValidationReport {
        law: law.to_string(),
        n_fail: runs.len() - n_succ,
        n_succ,
        n_improv,
        mean_state_energy: mean(&|r| r.state_energy),
        mean_control_energy: mean(&|r| r.control_energy),
        mean_cost: mean(&|r| r.cost),
        avg_improv: avg,
        best,
        worst,
        seed,
    })
}

/// Simulates every law from every sample and reports against `reference`.
pub fn validate(
    sys: &DiscreteSystem,
    basis: &ActuatorBasis,
    laws: &[(String, FeedbackLaw)],
    reference: &str,
    samples: &[DVector<f64>],
    sim: &SimConfig,
    seed: u64,
) -> Result<Vec<ValidationReport>> {
    let ref_index = laws
        .iter()
        .position(|(name, _)| name == reference)
        .ok_or_else(|| Error::InvalidInput(format!("reference law `{reference}` is missing")))?;
    let mut all = Vec::with_capacity(laws.len());
    for (_, law) in laws {
        let runs: Vec<ValidationRun> = samples
            .par_iter()
            .map(|y0| simulate(sys, basis, law, y0, sim).map(|r| ValidationRun::from_result(&r)))
            .collect::<Result<_>>()?;
        all.push(runs);
    }
    laws.iter()
        .zip(&all)
        .map(|((name, _), runs)| summarize(name, runs, &all[ref_index], seed))
        .collect()
}

pub fn write_validation_csv<W: Write>(reports: &[ValidationReport], mut out: W) -> Result<()> {
    writeln!(out, "{}", ValidationReport::CSV_HEADER)?;
    for r in reports {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_values() {
        let td = CoefficientPreset::TimeDependent;
        assert_eq!(td.reaction(&[0.0, 0.3], 0.0), -2.0);
        let mut b = [0.0; 2];
        CoefficientPreset::Autonomous.convection(&[1.0, 1.0], 0.0, &mut b);
        assert_eq!(b, [2.0, 1.0]);
        td.convection(&[0.4, 0.7], std::f64::consts::FRAC_PI_2, &mut b);
        assert!(b[1].abs() < 1e-16);
    }

    fn run(success: bool, cost: f64) -> ValidationRun {
        ValidationRun {
            success,
            cost: if success { cost } else { f64::INFINITY },
            state_energy: 1.0,
            control_energy: 2.0,
        }
    }

    #[test]
    fn self_comparison_is_neutral() {
        let runs = vec![run(true, 3.0), run(true, 5.0), run(false, 0.0)];
        let r = summarize("ref", &runs, &runs, 7).unwrap();
        assert_eq!((r.n_fail, r.n_succ, r.n_improv), (1, 2, 0));
        assert_eq!((r.avg_improv, r.best, r.worst), (0.0, 0.0, 0.0));
    }

    #[test]
    fn signed_improvements() {
        let reference = vec![run(true, 10.0), run(true, 10.0), run(true, 20.0)];
        let candidate = vec![run(true, 5.0), run(true, 12.0), run(false, 0.0)];
        let r = summarize("cand", &candidate, &reference, 0).unwrap();
        assert_eq!(r.n_improv, 1);
        assert!((r.avg_improv - 100.0 * (-5.0 + 2.0) / 20.0).abs() < 1e-12);
        assert!((r.best + 50.0).abs() < 1e-12);
        assert!((r.worst - 20.0).abs() < 1e-12);
        assert!(r.best <= r.avg_improv && r.avg_improv <= r.worst);
    }

    #[test]
    fn preset_names_round_trip() {
        for p in [CoefficientPreset::TimeDependent, CoefficientPreset::Autonomous] {
            assert_eq!(CoefficientPreset::parse(p.name()), Some(p));
        }
        for s in [InitialShape::Ybar1, InitialShape::Ybar2] {
            assert_eq!(InitialShape::parse(s.name()), Some(s));
        }
    }
}
