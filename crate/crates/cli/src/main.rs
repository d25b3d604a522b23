use std::cell::RefCell;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use parafeed::closed_loop::{simulate, RunResult};
use parafeed::config::{load_neural, LawKind, RunConfig};
use parafeed::experiments::{run_sweep, sample_validation_set, validate, write_sweep_csv, write_validation_csv, SweepSpec};
use parafeed::feedback::FeedbackLaw;
use parafeed::learning::{default_training_set, sample_penalty_points, train, LogRow, Problem, StageSummary};
use parafeed::network::NetworkParams;
use parafeed::Error;

#[derive(Parser)]
#[command(name = "parafeed", version, about = "Closed-loop simulation and feedback training for semilinear parabolic equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file; keys not present keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (overrides `threads`).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Random seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed loop and write its trajectory and summary.
    Simulate,
    /// Train a neural feedback through the damping and penalty homotopy.
    Train {
        /// Checkpoint weight file to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare the reference law and trained networks on random initial states.
    Validate,
    /// Simulate the scaled projection feedback over grids of M and lambda.
    Sweep,
    /// Tabulate the Poincare-like constant over a grid of actuator counts.
    Poincare,
    /// Print the effective configuration.
    Config,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Parse { .. } | Error::InvalidInput(_) | Error::Io(_) | Error::Shape { .. } => 1,
        _ => 2,
    }
}

/// Writes `contents` to `path` through a temporary file in the same directory.
fn write_atomic(path: &Path, contents: &[u8]) -> parafeed::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> parafeed::Result<()>) -> parafeed::Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}

fn load_config(cli: &Cli) -> parafeed::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config {
                field: "--config".into(),
                message: format!("cannot read {}: {e}", path.display()),
            })?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_simulate(cfg: &RunConfig) -> parafeed::Result<()> {
    cfg.validate_law()?;
    if cfg.law.kind == LawKind::ScaledProjection && cfg.law.lambda == Some(0.0) {
        eprintln!("warning: law.lambda = 0 gives the free dynamics; stabilization needs a positive gain");
    }
    let sc = cfg.scenario()?;
    let law = cfg.build_law(&sc.sys, &sc.basis)?;
    let y0 = cfg.initial_state(&sc.sys)?;
    let run = simulate(&sc.sys, &sc.basis, &law, &y0, &cfg.sim)?;
    write_with(&cfg.output.join("trajectory.csv"), |b| run.trajectory.write_csv(b))?;
    let summary = format!("law,{}\n{},{}\n", RunResult::SUMMARY_HEADER, law.name(), run.summary_row());
    write_atomic(&cfg.output.join("summary.csv"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn stage_file(params: &Path) -> PathBuf {
    params.with_extension("stage")
}

fn read_checkpoint(path: &Path) -> parafeed::Result<(NetworkParams, (f64, f64))> {
    let bad = |m: String| Error::Config {
        field: "--resume".into(),
        message: m,
    };
    let params = NetworkParams::from_text(
        &fs::read_to_string(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?,
    )?;
    let meta_path = stage_file(path);
    let meta = fs::read_to_string(&meta_path).map_err(|e| bad(format!("cannot read {}: {e}", meta_path.display())))?;
    let mut alpha = None;
    let mut gamma = None;
    for line in meta.lines() {
        if let Some((k, v)) = line.split_once('=') {
            let v: f64 = v.trim().parse().map_err(|_| bad(format!("bad value in {}", meta_path.display())))?;
            match k.trim() {
                "alpha" => alpha = Some(v),
                "gamma" => gamma = Some(v),
                _ => {}
            }
        }
    }
    match (alpha, gamma) {
        (Some(a), Some(g)) => Ok((params, (a, g))),
        _ => Err(bad(format!("{} lacks alpha or gamma", meta_path.display()))),
    }
}

fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{}\n", LogRow::CSV_HEADER);
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> parafeed::Result<()> {
    let learn = &cfg.learn;
    let sc = cfg.scenario()?;
    let m = sc.basis.count();
    let (init, completed) = match resume {
        Some(path) => {
            let (params, stage) = read_checkpoint(path)?;
            if params.arch() != cfg.network_arch().as_slice() {
                return Err(Error::Config {
                    field: "--resume".into(),
                    message: format!("checkpoint architecture {:?} differs from {:?}", params.arch(), cfg.network_arch()),
                });
            }
            (params, Some(stage))
        }
        None => (learn.initial_params(m)?, None),
    };
    let training = default_training_set(&sc.sys, learn.training_size)?;
    let samples = sample_penalty_points(&sc.basis, learn.penalty_samples, learn.radius, cfg.penalty_seed())?;
    let problem = Problem {
        sys: &sc.sys,
        basis: &sc.basis,
        training: &training,
        samples: &samples,
        cfg: learn,
    };
    let checkpoints = cfg.output.join("checkpoints");
    let rows = RefCell::new(Vec::new());
    let failure = RefCell::new(None);
    let on_stage = |s: &StageSummary| {
        let path = checkpoints.join(format!("stage_{:02}.txt", s.stage));
        let meta = format!("alpha = {:.16e}\ngamma = {:.16e}\n", s.alpha, s.gamma);
        let result = write_atomic(&path, s.params.to_text().as_bytes())
            .and_then(|_| write_atomic(&stage_file(&path), meta.as_bytes()))
            .and_then(|_| write_atomic(&cfg.output.join("training_log.csv"), log_csv(&rows.borrow()).as_bytes()));
        if let Err(e) = result {
            failure.borrow_mut().get_or_insert(e);
        }
        eprintln!(
            "stage {} alpha {} gamma {}: {} after {} iterations, objective {:.6e}",
            s.stage,
            s.alpha,
            s.gamma,
            s.status.name(),
            s.iterations,
            s.end.objective
        );
    };
    let result = train(&problem, init, completed, on_stage, |r| rows.borrow_mut().push(r.clone()))?;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    write_atomic(&cfg.output.join("weights.txt"), result.params.to_text().as_bytes())?;
    write_atomic(&cfg.output.join("training_log.csv"), log_csv(&result.log).as_bytes())?;
    let mut stages = String::from("stage,alpha,gamma,iterations,status,objective_start,objective_end,mean_cost,penalty\n");
    for s in &result.stages {
        stages.push_str(&format!(
            "{},{:.16e},{:.16e},{},{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            s.stage,
            s.alpha,
            s.gamma,
            s.iterations,
            s.status.name(),
            s.start.objective,
            s.end.objective,
            s.end.mean_cost,
            s.end.penalty
        ));
    }
    write_atomic(&cfg.output.join("stages.csv"), stages.as_bytes())?;
    Ok(())
}

fn cmd_validate(cfg: &RunConfig) -> parafeed::Result<()> {
    cfg.validate_validation()?;
    let sc = cfg.scenario()?;
    let reference = "reference";
    let mut laws = vec![(
        reference.to_string(),
        FeedbackLaw::scaled_projection(cfg.validation.reference_lambda)?,
    )];
    for path in &cfg.validation.weights {
        let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        laws.push((name, load_neural(path, &sc.basis, "validation.weights")?));
    }
    let seed = cfg.validation_seed();
    let samples = sample_validation_set(&sc.sys, cfg.validation.modes, cfg.validation.count, seed)?;
    let reports = validate(&sc.sys, &sc.basis, &laws, reference, &samples, &cfg.sim, seed)?;
    write_with(&cfg.output.join("validation.csv"), |b| write_validation_csv(&reports, b))?;
    for r in &reports {
        println!("{}", r.csv_row());
    }
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> parafeed::Result<()> {
    cfg.validate_sweep()?;
    if cfg.sweep.lambdas.contains(&0.0) {
        eprintln!("warning: lambda = 0 in sweep.lambdas gives the free dynamics");
    }
    let spec = SweepSpec {
        domain: cfg.domain()?,
        cells: cfg.cells,
        nu: cfg.nu,
        preset: cfg.preset,
        ms: cfg.sweep.ms.clone(),
        lambdas: cfg.sweep.lambdas.clone(),
        shape: cfg.initial_shape,
        scale: cfg.initial_scale,
        sim: cfg.sim.clone(),
    };
    let rows = run_sweep(&spec)?;
    write_with(&cfg.output.join("sweep.csv"), |b| write_sweep_csv(&rows, b))
}

fn cmd_poincare(cfg: &RunConfig) -> parafeed::Result<()> {
    let table = cfg.poincare_table()?;
    let mut s = String::from("M,xi\n");
    for (m, xi) in table {
        s.push_str(&format!("{m},{xi:.16e}\n"));
    }
    write_atomic(&cfg.output.join("poincare.csv"), s.as_bytes())?;
    print!("{s}");
    Ok(())
}

fn run(cli: &Cli) -> parafeed::Result<()> {
    let cfg = load_config(cli)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    }
    if !matches!(cli.command, Command::Config) {
        write_atomic(&cfg.output.join("config.txt"), cfg.to_text().as_bytes())?;
    }
    match &cli.command {
        Command::Simulate => cmd_simulate(&cfg),
        Command::Train { resume } => cmd_train(&cfg, resume.as_deref()),
        Command::Validate => cmd_validate(&cfg),
        Command::Sweep => cmd_sweep(&cfg),
        Command::Poincare => cmd_poincare(&cfg),
        Command::Config => {
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
