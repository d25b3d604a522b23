//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero if any fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use parafeed::actuators::{AuxiliaryBasis, HElement, ProjectionTarget};
use parafeed::closed_loop::{simulate, Extrapolation, Outcome, SimConfig};
use parafeed::config::RunConfig;
use parafeed::discretization::{eigenpairs, DiscreteSystem, RectDomain, StructuredMesh};
use parafeed::experiments::{
    build_scenario, preset_initial, run_sweep, sample_validation_set, validate, CoefficientPreset, InitialShape,
    Scenario, SweepSpec,
};
use parafeed::feedback::{monotonicity_margin, FeedbackLaw};
use parafeed::learning::{default_training_set, sample_penalty_points, train, LearnConfig, Problem};
use parafeed::network::NetworkParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mesh cells per axis for the closed-loop experiments.
const CELLS: usize = 32;
const GAINS: [f64; 6] = [50.0, 75.0, 100.0, 125.0, 150.0, 175.0];

type Verdict = parafeed::Result<(bool, String)>;

struct Outcomes {
    ab2: Vec<Outcome>,
    euler: Vec<Outcome>,
}

fn sweep(m: usize, scale: f64, lambdas: &[f64], extrapolation: Extrapolation) -> parafeed::Result<Vec<Outcome>> {
    let spec = SweepSpec {
        domain: RectDomain::unit_square(),
        cells: CELLS,
        nu: 0.1,
        preset: CoefficientPreset::TimeDependent,
        ms: vec![m],
        lambdas: lambdas.to_vec(),
        shape: InitialShape::Ybar1,
        scale,
        sim: SimConfig {
            extrapolation,
            ..SimConfig::default()
        },
    };
    Ok(run_sweep(&spec)?.into_iter().map(|r| r.outcome).collect())
}

fn both_schemes(m: usize, scale: f64) -> parafeed::Result<Outcomes> {
    Ok(Outcomes {
        ab2: sweep(m, scale, &GAINS, Extrapolation::AdamsBashforth2)?,
        euler: sweep(m, scale, &GAINS, Extrapolation::Euler)?,
    })
}

fn blowup(o: &Outcome) -> Option<f64> {
    match *o {
        Outcome::BlowUp { time } => Some(time),
        Outcome::Stable { .. } => None,
    }
}

fn rate(o: &Outcome) -> Option<f64> {
    match *o {
        Outcome::Stable { decay_rate, .. } => Some(decay_rate),
        Outcome::BlowUp { .. } => None,
    }
}

fn describe(outcomes: &[Outcome]) -> String {
    GAINS
        .iter()
        .zip(outcomes)
        .map(|(l, o)| match *o {
            Outcome::BlowUp { time } => format!("{l}:blowup@{time:.3}"),
            Outcome::Stable { decay_rate, .. } => format!("{l}:mu={decay_rate:.3}"),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn within_budget(elapsed: Duration, budget_secs: u64) -> (bool, String) {
    let ok = elapsed <= Duration::from_secs(budget_secs);
    (ok, format!("runtime {:.1}s (budget {budget_secs}s)", elapsed.as_secs_f64()))
}

fn free_blowup() -> Verdict {
    let start = Instant::now();
    let mut times = Vec::new();
    for cells in [32, 64] {
        let sc = build_scenario(cells, 3, CoefficientPreset::TimeDependent, 0.1)?;
        let y0 = preset_initial(&sc.sys, InitialShape::Ybar1, 1.0)?;
        let free = FeedbackLaw::scaled_projection(0.0)?;
        let run = simulate(&sc.sys, &sc.basis, &free, &y0, &SimConfig::default())?;
        times.push(run.blowup_time());
    }
    let (budget_ok, budget) = within_budget(start.elapsed(), 30);
    let (Some(coarse), Some(fine)) = (times[0], times[1]) else {
        return Ok((false, format!("no blow-up: {times:?}")));
    };
    let gap = (coarse - fine).abs() / fine;
    let ok = coarse < 1.5 && fine < 1.5 && gap <= 0.05 && budget_ok;
    Ok((ok, format!("t_blowup 32x32 = {coarse:.4}, 64x64 = {fine:.4}, gap {:.2}% (max 5%); {budget}", 100.0 * gap)))
}

fn lambda_sweep_verdict(outcomes: &[Outcome]) -> (bool, String) {
    let times: Vec<Option<f64>> = outcomes[..3].iter().map(blowup).collect();
    let increasing = times.iter().all(Option::is_some) && times.windows(2).all(|w| w[0] < w[1]);
    let stable = outcomes[3..].iter().all(|o| rate(o).is_some());
    let (gap_ok, gap) = match (rate(&outcomes[4]), rate(&outcomes[5])) {
        (Some(a), Some(b)) => {
            let rel = (a - b).abs() / a.max(b);
            (rel <= 0.10, format!("mu(150) vs mu(175) differ by {:.1}% (max 10%)", 100.0 * rel))
        }
        _ => (false, "mu(150) or mu(175) undefined".into()),
    };
    (increasing && stable && gap_ok, gap)
}

fn lambda_sweep(nine: &Outcomes, elapsed: Duration) -> Verdict {
    let (ok, gap) = lambda_sweep_verdict(&nine.ab2);
    let (budget_ok, budget) = within_budget(elapsed, 300);
    let (euler_ok, _) = lambda_sweep_verdict(&nine.euler);
    let mut detail = format!("{}; {gap}; {budget}", describe(&nine.ab2));
    if euler_ok != ok {
        detail.push_str(&format!("; explicit Euler extrapolation would {}", if euler_ok { "PASS" } else { "FAIL" }));
    }
    Ok((ok && budget_ok, detail))
}

fn too_few_verdict(four: &[Outcome], sixteen: &[Outcome]) -> (bool, String) {
    let all_blow = four.iter().all(|o| blowup(o).is_some());
    let late: Vec<f64> = four[4..].iter().filter_map(blowup).collect();
    let near_limit = late.len() == 2 && late.iter().all(|t| (t - 0.7).abs() <= 0.15);
    let many_stable = sixteen.iter().all(|o| rate(o).is_some());
    (
        all_blow && near_limit && many_stable,
        format!("4 actuators: {}; 16 actuators: {}", describe(four), describe(sixteen)),
    )
}

fn too_few_actuators(four: &Outcomes, sixteen: &Outcomes) -> Verdict {
    let (ok, mut detail) = too_few_verdict(&four.ab2, &sixteen.ab2);
    let (euler_ok, euler_detail) = too_few_verdict(&four.euler, &sixteen.euler);
    if euler_ok != ok {
        detail.push_str(&format!(
            "; explicit Euler extrapolation would {} ({euler_detail})",
            if euler_ok { "PASS" } else { "FAIL" }
        ));
    }
    Ok((ok, detail))
}

fn larger_initial_verdict(doubled: &[Outcome], base: &[Outcome]) -> (bool, String) {
    let weak_blow = doubled[..2].iter().all(|o| blowup(o).is_some());
    let mut slower = true;
    let mut pairs = Vec::new();
    for i in 3..6 {
        match (rate(&doubled[i]), rate(&base[i])) {
            (Some(d), Some(b)) => {
                slower &= d < b;
                pairs.push(format!("{}: {d:.3} < {b:.3}", GAINS[i]));
            }
            _ => {
                slower = false;
                pairs.push(format!("{}: not stable in both", GAINS[i]));
            }
        }
    }
    (
        weak_blow && slower,
        format!("2*ybar: {}; mu(2*ybar) vs mu(ybar) {}", describe(doubled), pairs.join(", ")),
    )
}

fn larger_initial(doubled: &Outcomes, base: &Outcomes) -> Verdict {
    let (ok, mut detail) = larger_initial_verdict(&doubled.ab2, &base.ab2);
    let (euler_ok, _) = larger_initial_verdict(&doubled.euler, &base.euler);
    if euler_ok != ok {
        detail.push_str(&format!("; explicit Euler extrapolation would {}", if euler_ok { "PASS" } else { "FAIL" }));
    }
    Ok((ok, detail))
}

fn cost_table() -> Verdict {
    let sc = build_scenario(CELLS, 3, CoefficientPreset::Autonomous, 0.1)?;
    let law = FeedbackLaw::scaled_projection(100.0)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (shape, expected) in [(InitialShape::Ybar1, 35.12), (InitialShape::Ybar2, 8.57)] {
        let y0 = preset_initial(&sc.sys, shape, 1.0)?;
        let run = simulate(&sc.sys, &sc.basis, &law, &y0, &SimConfig::default())?;
        let Some(cost) = run.cost() else {
            return Ok((false, format!("{} blew up", shape.name())));
        };
        let (y2, u2) = (run.trajectory.state_h_energy(), run.trajectory.control_energy());
        let rel = (cost - expected) / expected;
        ok &= rel.abs() <= 0.20 && u2 > y2;
        parts.push(format!(
            "{}: J = {cost:.3} vs {expected} ({:+.1}%), |y|^2 = {y2:.4}, |u|^2 = {u2:.3}",
            shape.name(),
            100.0 * rel
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn gradient_exactness() -> Verdict {
    let start = Instant::now();
    let sc = build_scenario(4, 1, CoefficientPreset::TimeDependent, 0.1)?;
    let cfg = LearnConfig {
        horizon: 0.05,
        step: 0.005,
        ..LearnConfig::default()
    };
    let training = vec![preset_initial(&sc.sys, InitialShape::Ybar1, 1.0)?];
    let problem = Problem {
        sys: &sc.sys,
        basis: &sc.basis,
        training: &training,
        samples: &[],
        cfg: &cfg,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let params = NetworkParams::random(&cfg.arch(1), 0.5, &mut rng)?;
        let (_, grad) = problem.evaluate_with_gradient(&params, 1.0, 0.0)?;
        let theta = params.to_flat();
        let d = DVector::from_fn(theta.len(), |_, _| rng.gen_range(-1.0..1.0)).normalize();
        let h = 1e-5;
        let at = |x: &DVector<f64>| -> parafeed::Result<f64> {
            Ok(problem.evaluate(&params.with_flat(x)?, 1.0, 0.0)?.objective)
        };
        let fd = (at(&(&theta + &d * h))? - at(&(&theta - &d * h))?) / (2.0 * h);
        let exact = grad.dot(&d);
        worst = worst.max((fd - exact).abs() / exact.abs().max(1e-12));
    }
    let (budget_ok, budget) = within_budget(start.elapsed(), 60);
    Ok((worst <= 1e-5 && budget_ok, format!("worst relative error {worst:.2e} over 10 trials (max 1e-5); {budget}")))
}

fn spectrum() -> Verdict {
    let mesh = StructuredMesh::build(&RectDomain::unit_square(), &[64, 64], &[])?;
    let sys = DiscreteSystem::assemble(&mesh, Arc::new(CoefficientPreset::Autonomous), 0.1)?;
    let pairs = eigenpairs(&sys, 5)?;
    let mut exact: Vec<f64> = (0..4)
        .flat_map(|i| (0..4).map(move |j| 1.0 + 0.1 * std::f64::consts::PI.powi(2) * (i * i + j * j) as f64))
        .collect();
    exact.sort_by(f64::total_cmp);
    let worst = pairs
        .values
        .iter()
        .zip(&exact)
        .map(|(c, e)| (c - e).abs() / e)
        .fold(0.0, f64::max);
    let values: Vec<String> = pairs.values.iter().map(|v| format!("{v:.5}")).collect();
    Ok((worst <= 0.01, format!("eigenvalues [{}], worst relative error {:.3}% (max 1%)", values.join(", "), 100.0 * worst)))
}

fn poincare() -> Verdict {
    let table = RunConfig::default().poincare_table()?;
    let xi: Vec<f64> = table.iter().map(|&(_, x)| x).collect();
    let ok = (xi[0] - 1.0).abs() <= 1e-3 && xi[1..].windows(2).all(|w| w[0] <= w[1]);
    let rows: Vec<String> = table.iter().map(|(m, x)| format!("xi({m}) = {x:.6}")).collect();
    Ok((ok, rows.join(", ")))
}

fn projection_suite() -> Verdict {
    const TOL: f64 = 1e-10;
    let sc = build_scenario(16, 3, CoefficientPreset::TimeDependent, 0.1)?;
    let (sys, basis) = (&sc.sys, &sc.basis);
    let aux = AuxiliaryBasis::eigenfunctions(basis, sys)?;
    let norm = aux.projector_norm(basis);
    let gain = 100.0;
    let law = FeedbackLaw::scaled_projection(gain)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let random = |rng: &mut ChaCha8Rng| HElement {
        nodal: DVector::from_fn(basis.node_count(), |_, _| rng.gen_range(-1.0..1.0)),
        act: DVector::from_fn(basis.count(), |_, _| rng.gen_range(-1.0..1.0)),
    };
    let lift = |c: DVector<f64>| HElement::from_actuators(c, basis.node_count());
    let mut worst = [0.0f64; 5];
    for _ in 0..100 {
        let y = random(&mut rng);
        let z = random(&mut rng);
        let scale = 1.0 + basis.h_norm(sys, &y);
        let py = lift(basis.project_orthogonal(&y));
        let ppy = lift(basis.project_orthogonal(&py));
        worst[0] = worst[0].max(basis.h_norm(sys, &ppy.sub(&py)) / scale);
        worst[1] = worst[1].max((basis.h_norm(sys, &py) - basis.h_norm(sys, &y)).max(0.0) / scale);
        for target in [ProjectionTarget::Actuators, ProjectionTarget::Auxiliary] {
            let once = aux.project(basis, sys, &y, target);
            let twice = aux.project(basis, sys, &once, target);
            worst[0] = worst[0].max(basis.h_norm(sys, &twice.sub(&once)) / scale);
        }
        let lhs = basis.h_inner(sys, &aux.project(basis, sys, &y, ProjectionTarget::Actuators), &z);
        let rhs = basis.h_inner(sys, &y, &aux.project(basis, sys, &z, ProjectionTarget::Auxiliary));
        worst[2] = worst[2].max((lhs - rhs).abs() / (1.0 + lhs.abs()));
        let c = DVector::from_fn(basis.count(), |_, _| rng.gen_range(-1.0..1.0));
        let p = lift(c.clone());
        let kp = lift(law.control(&c)?);
        let projected = aux.project(basis, sys, &p, ProjectionTarget::Auxiliary);
        let bound = -gain / (norm * norm) * basis.h_norm(sys, &projected).powi(2);
        worst[3] = worst[3].max(basis.h_inner(sys, &kp, &p) - bound);
    }
    let ok = worst[..4].iter().all(|&w| w <= TOL);
    Ok((
        ok,
        format!(
            "idempotence {:.1e}, contraction {:.1e}, adjointness {:.1e}, monotonicity bound {:.1e} (all <= 1e-10)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    ))
}

/// Desk-scale training problem; see the README for the reduced settings.
struct Training {
    scenario: Scenario,
    cfg: LearnConfig,
}

impl Training {
    fn new() -> parafeed::Result<Self> {
        Ok(Self {
            scenario: build_scenario(8, 3, CoefficientPreset::Autonomous, 0.1)?,
            cfg: LearnConfig {
                step: 0.01,
                penalty_samples: 5000,
                step_reuse: true,
                ..LearnConfig::default()
            },
        })
    }

    fn mean_cost(&self, law: &FeedbackLaw, set: &[DVector<f64>]) -> parafeed::Result<(usize, f64)> {
        let sim = self.cfg.sim(1.0);
        let mut stable = 0;
        let mut total = 0.0;
        for y0 in set {
            let run = simulate(&self.scenario.sys, &self.scenario.basis, law, y0, &sim)?;
            if let Some(c) = run.cost() {
                stable += 1;
                total += c;
            }
        }
        Ok((stable, total / set.len() as f64))
    }
}

fn training_outcome(setup: &Training, trained: &mut Option<NetworkParams>) -> Verdict {
    let start = Instant::now();
    let (sys, basis, cfg) = (&setup.scenario.sys, &setup.scenario.basis, &setup.cfg);
    let training = default_training_set(sys, cfg.training_size)?;
    let samples = sample_penalty_points(basis, cfg.penalty_samples, cfg.radius, 1)?;
    let problem = Problem {
        sys,
        basis,
        training: &training,
        samples: &samples,
        cfg,
    };
    let result = train(&problem, cfg.initial_params(basis.count())?, None, |_| {}, |_| {})?;
    let elapsed = start.elapsed();
    let g0 = cfg.gamma_schedule[0];
    let unpenalized = result
        .stages
        .iter()
        .filter(|s| s.gamma == g0)
        .last()
        .expect("schedule starts with the first penalty weight");
    let reference = FeedbackLaw::scaled_projection(100.0)?;
    let (_, ref_cost) = setup.mean_cost(&reference, &training)?;
    let (_, free_cost) = setup.mean_cost(&FeedbackLaw::neural(unpenalized.params.clone(), basis)?, &training)?;
    let law = FeedbackLaw::neural(result.params.clone(), basis)?;
    let (stable, cost) = setup.mean_cost(&law, &training)?;
    let fresh = sample_penalty_points(basis, 10_000, cfg.radius, 2)?;
    let margin = monotonicity_margin(&law, basis, &fresh, cfg.target)?;
    *trained = Some(result.params);

    let all_stable = stable == training.len();
    let improves = free_cost < ref_cost;
    let monotone = margin <= 1e-3;
    let close = all_stable && cost <= 1.05 * ref_cost;
    let (budget_ok, budget) = within_budget(elapsed, 7200);
    Ok((
        all_stable && monotone && close && improves && budget_ok,
        format!(
            "(a) {stable}/{} stable; (b) margin {margin:.3e} (max 1e-3); (c) mean J {cost:.4} vs reference {ref_cost:.4} ({:+.1}%, max +5%); \
             gamma=0 mean J {free_cost:.4} ({:+.1}%, must be < 0); {} stages; {budget}",
            training.len(),
            100.0 * (cost / ref_cost - 1.0),
            100.0 * (free_cost / ref_cost - 1.0),
            result.stages.len()
        ),
    ))
}

fn validation_protocol(setup: &Training, trained: Option<&NetworkParams>) -> Verdict {
    let (sys, basis) = (&setup.scenario.sys, &setup.scenario.basis);
    let mut laws = vec![
        ("reference".to_string(), FeedbackLaw::scaled_projection(100.0)?),
        ("half_gain".to_string(), FeedbackLaw::scaled_projection(50.0)?),
    ];
    if let Some(params) = trained {
        laws.push(("trained".to_string(), FeedbackLaw::neural(params.clone(), basis)?));
    }
    let count = 20;
    let samples = sample_validation_set(sys, 5, count, 2)?;
    let reports = validate(sys, basis, &laws, "reference", &samples, &setup.cfg.sim(1.0), 2)?;
    let reference = &reports[0];
    let neutral = reference.n_improv == 0 && (reference.avg_improv, reference.best, reference.worst) == (0.0, 0.0, 0.0);
    let mut accounting = true;
    for r in &reports {
        accounting &= r.n_fail + r.n_succ == count && r.n_improv <= r.n_succ;
        if r.best.is_finite() {
            accounting &= r.best <= r.avg_improv + 1e-9 && r.avg_improv <= r.worst + 1e-9;
        }
    }
    let rows: Vec<String> = reports
        .iter()
        .map(|r| format!("{}: fail {} improv {} avg {:+.1}%", r.law, r.n_fail, r.n_improv, r.avg_improv))
        .collect();
    Ok((neutral && accounting, rows.join("; ")))
}

struct Report {
    failures: usize,
}

impl Report {
    fn record(&mut self, id: usize, name: &str, verdict: Verdict) {
        let (ok, detail) = verdict.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !ok {
            self.failures += 1;
        }
        println!("criterion {id:>2} {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

fn main() -> ExitCode {
    let mut report = Report { failures: 0 };
    report.record(1, "free dynamics blow up", free_blowup());

    let start = Instant::now();
    let nine = both_schemes(3, 1.0);
    let nine_elapsed = start.elapsed();
    let four = both_schemes(2, 1.0);
    let sixteen = both_schemes(4, 1.0);
    let sixteen_doubled = both_schemes(4, 2.0);
    report.record(2, "gain sweep with 9 actuators", nine.and_then(|n| lambda_sweep(&n, nine_elapsed)));
    report.record(
        3,
        "too few actuators",
        match (&four, &sixteen) {
            (Ok(f), Ok(s)) => too_few_actuators(f, s),
            (Err(e), _) | (_, Err(e)) => Ok((false, format!("error: {e}"))),
        },
    );
    report.record(
        4,
        "larger initial state",
        match (&sixteen_doubled, &sixteen) {
            (Ok(d), Ok(s)) => larger_initial(d, s),
            (Err(e), _) | (_, Err(e)) => Ok((false, format!("error: {e}"))),
        },
    );
    report.record(5, "cost table of the reference law", cost_table());
    report.record(6, "adjoint gradient vs finite differences", gradient_exactness());
    report.record(7, "discrete spectrum", spectrum());
    report.record(8, "Poincare constants", poincare());
    report.record(9, "projection identities", projection_suite());

    let mut trained = None;
    match Training::new() {
        Ok(setup) => {
            report.record(10, "training outcome", training_outcome(&setup, &mut trained));
            report.record(11, "validation protocol", validation_protocol(&setup, trained.as_ref()));
        }
        Err(e) => {
            report.record(10, "training outcome", Ok((false, format!("error: {e}"))));
            report.record(11, "validation protocol", Err(e));
        }
    }

    println!("{} of 11 criteria failed", report.failures);
    if report.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
