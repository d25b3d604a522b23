//! Run configuration as flat `key = value` text with dotted section prefixes.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Floats are written with 17 significant digits so that
//! parse, serialize and parse again is the identity.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::actuators::{constrained_minimum, poincare_constant, ActuatorBasis, AuxiliaryBasis};
use crate::closed_loop::{Extrapolation, SimConfig};
use crate::discretization::{DiscreteSystem, RectDomain, StructuredMesh};
use crate::error::{Error, Result};
use crate::experiments::{build_scenario_on, preset_initial, CoefficientPreset, InitialShape, Scenario, DIFFUSION};
use crate::feedback::FeedbackLaw;
use crate::learning::LearnConfig;
use crate::network::NetworkParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LawKind {
    ScaledProjection,
    ObliqueFractional,
    Neural,
}

impl LawKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::ScaledProjection => "scaled_projection",
            Self::ObliqueFractional => "oblique_fractional",
            Self::Neural => "neural",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scaled_projection" => Some(Self::ScaledProjection),
            "oblique_fractional" => Some(Self::ObliqueFractional),
            "neural" => Some(Self::Neural),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxiliaryChoice {
    Eigenfunctions,
    Actuators,
}

impl AuxiliaryChoice {
    pub fn name(self) -> &'static str {
        match self {
            Self::Eigenfunctions => "eigenfunctions",
            Self::Actuators => "actuators",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "eigenfunctions" => Some(Self::Eigenfunctions),
            "actuators" => Some(Self::Actuators),
            _ => None,
        }
    }
}

fn extrapolation_name(e: Extrapolation) -> &'static str {
    match e {
        Extrapolation::AdamsBashforth2 => "ab2",
        Extrapolation::Euler => "euler",
    }
}

fn parse_extrapolation(s: &str) -> Option<Extrapolation> {
    match s {
        "ab2" => Some(Extrapolation::AdamsBashforth2),
        "euler" => Some(Extrapolation::Euler),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LawConfig {
    pub kind: LawKind,
    pub lambda: Option<f64>,
    pub rho: f64,
    pub auxiliary: AuxiliaryChoice,
    /// Weight file of a neural law.
    pub weights: Option<PathBuf>,
}

impl Default for LawConfig {
    fn default() -> Self {
        Self {
            kind: LawKind::ScaledProjection,
            lambda: Some(100.0),
            rho: 0.0,
            auxiliary: AuxiliaryChoice::Eigenfunctions,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub ms: Vec<usize>,
    pub lambdas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ms: vec![3],
            lambdas: vec![50.0, 75.0, 100.0, 125.0, 150.0, 175.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationConfig {
    /// Number of leading eigenfunctions spanning the sample space.
    pub modes: usize,
    pub count: usize,
    pub reference_lambda: f64,
    /// Neural laws compared against the reference.
    pub weights: Vec<PathBuf>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            modes: 5,
            count: 100,
            reference_lambda: 100.0,
            weights: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
    pub output: PathBuf,
    pub domain: Vec<f64>,
    pub cells: usize,
    pub nu: f64,
    pub preset: CoefficientPreset,
    pub actuators: usize,
    pub law: LawConfig,
    pub initial_shape: InitialShape,
    pub initial_scale: f64,
    pub sim: SimConfig,
    pub learn: LearnConfig,
    pub sweep: SweepConfig,
    pub validation: ValidationConfig,
    pub poincare_ms: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            output: PathBuf::from("out"),
            domain: vec![1.0, 1.0],
            cells: 32,
            nu: DIFFUSION,
            preset: CoefficientPreset::TimeDependent,
            actuators: 3,
            law: LawConfig::default(),
            initial_shape: InitialShape::Ybar1,
            initial_scale: 1.0,
            sim: SimConfig::default(),
            learn: LearnConfig::default(),
            sweep: SweepConfig::default(),
            validation: ValidationConfig::default(),
            poincare_ms: vec![0, 1, 2, 3],
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_list<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(", ")
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Key/value pairs of a config text, consumed field by field.
struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim().to_string();
            if map.insert(key.clone(), (i + 1, value.trim().to_string())).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Self { map })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|(_, v)| v)
    }

    fn scalar<T>(&mut self, key: &str, target: &mut T, parse: impl Fn(&str) -> Option<T>, what: &str) -> Result<()> {
        if let Some(v) = self.take(key) {
            *target = parse(&v).ok_or_else(|| config_err(key, format!("expected {what}, got `{v}`")))?;
        }
        Ok(())
    }

    fn f64(&mut self, key: &str, target: &mut f64) -> Result<()> {
        self.scalar(key, target, |s| s.parse().ok(), "a number")
    }

    fn usize(&mut self, key: &str, target: &mut usize) -> Result<()> {
        self.scalar(key, target, |s| s.parse().ok(), "a nonnegative integer")
    }

    fn opt_f64(&mut self, key: &str, target: &mut Option<f64>) -> Result<()> {
        self.scalar(key, target, |s| s.parse().ok().map(Some), "a number")
    }

    fn list<T>(&mut self, key: &str, target: &mut Vec<T>, parse: impl Fn(&str) -> Option<T>, what: &str) -> Result<()> {
        if let Some(v) = self.take(key) {
            *target = if v.is_empty() {
                Vec::new()
            } else {
                v.split(',')
                    .map(|item| {
                        let item = item.trim();
                        parse(item).ok_or_else(|| config_err(key, format!("expected a list of {what}, got `{item}`")))
                    })
                    .collect::<Result<_>>()?
            };
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.map.into_iter().next() {
            Some((key, (line, _))) => Err(Error::Parse {
                line,
                message: format!("unknown key `{key}`"),
            }),
            None => Ok(()),
        }
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    s.parse().ok()
}

impl RunConfig {
    /// Parses a config text; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut e = Entries::parse(text)?;
        e.scalar("seed", &mut c.seed, |s| s.parse().ok(), "an unsigned integer")?;
        e.usize("threads", &mut c.threads)?;
        e.scalar("output", &mut c.output, |s| Some(PathBuf::from(s)), "a path")?;
        e.list("domain.lengths", &mut c.domain, |s| s.parse().ok(), "numbers")?;
        e.usize("mesh.cells", &mut c.cells)?;
        e.f64("model.nu", &mut c.nu)?;
        e.scalar("model.preset", &mut c.preset, CoefficientPreset::parse, "time_dependent or autonomous")?;
        e.usize("actuators.m", &mut c.actuators)?;

        e.scalar("law.kind", &mut c.law.kind, LawKind::parse, "scaled_projection, oblique_fractional or neural")?;
        // A missing gain is reported when the law is built, not defaulted.
        c.law.lambda = None;
        e.opt_f64("law.lambda", &mut c.law.lambda)?;
        e.f64("law.rho", &mut c.law.rho)?;
        e.scalar("law.auxiliary", &mut c.law.auxiliary, AuxiliaryChoice::parse, "eigenfunctions or actuators")?;
        c.law.weights = e.take("law.weights").map(PathBuf::from);

        e.scalar("initial.shape", &mut c.initial_shape, InitialShape::parse, "ybar1 or ybar2")?;
        e.f64("initial.scale", &mut c.initial_scale)?;

        e.f64("sim.horizon", &mut c.sim.horizon)?;
        e.f64("sim.step", &mut c.sim.step)?;
        e.f64("sim.blowup_threshold", &mut c.sim.blowup_threshold)?;
        e.scalar("sim.extrapolation", &mut c.sim.extrapolation, parse_extrapolation, "ab2 or euler")?;
        e.f64("sim.beta", &mut c.sim.beta)?;
        e.f64("sim.damping", &mut c.sim.damping)?;

        let l = &mut c.learn;
        e.f64("learn.beta", &mut l.beta)?;
        e.f64("learn.epsilon1", &mut l.epsilon1)?;
        e.f64("learn.target", &mut l.target)?;
        e.f64("learn.radius", &mut l.radius)?;
        e.usize("learn.training_size", &mut l.training_size)?;
        e.usize("learn.penalty_samples", &mut l.penalty_samples)?;
        e.f64("learn.horizon", &mut l.horizon)?;
        e.f64("learn.step", &mut l.step)?;
        e.scalar("learn.extrapolation", &mut l.extrapolation, parse_extrapolation, "ab2 or euler")?;
        e.list("learn.alpha_schedule", &mut l.alpha_schedule, |s| s.parse().ok(), "numbers")?;
        e.list("learn.gamma_schedule", &mut l.gamma_schedule, |s| s.parse().ok(), "numbers")?;
        e.usize("learn.iterations", &mut l.iterations)?;
        e.f64("learn.armijo_c", &mut l.armijo_c)?;
        e.usize("learn.max_backtracks", &mut l.max_backtracks)?;
        e.f64("learn.initial_step", &mut l.initial_step)?;
        e.scalar("learn.step_reuse", &mut l.step_reuse, parse_bool, "true or false")?;
        e.f64("learn.gradient_tolerance", &mut l.gradient_tolerance)?;
        e.f64("learn.min_damping_increment", &mut l.min_damping_increment)?;
        e.list("learn.hidden", &mut l.hidden, |s| s.parse().ok(), "positive integers")?;
        e.f64("learn.init_std", &mut l.init_std)?;

        e.list("sweep.ms", &mut c.sweep.ms, |s| s.parse().ok(), "integers")?;
        e.list("sweep.lambdas", &mut c.sweep.lambdas, |s| s.parse().ok(), "numbers")?;

        e.usize("validation.modes", &mut c.validation.modes)?;
        e.usize("validation.count", &mut c.validation.count)?;
        e.f64("validation.reference_lambda", &mut c.validation.reference_lambda)?;
        e.list("validation.weights", &mut c.validation.weights, |s| Some(PathBuf::from(s)), "paths")?;

        e.list("poincare.ms", &mut c.poincare_ms, |s| s.parse().ok(), "integers")?;
        e.finish()?;
        let seed = c.seed;
        c.set_seed(seed);
        Ok(c)
    }

    /// Text form accepted by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("threads", self.threads.to_string());
        kv("output", self.output.display().to_string());
        kv("domain.lengths", fmt_list(&self.domain, |v| fmt_f64(*v)));
        kv("mesh.cells", self.cells.to_string());
        kv("model.nu", fmt_f64(self.nu));
        kv("model.preset", self.preset.name().into());
        kv("actuators.m", self.actuators.to_string());
        kv("law.kind", self.law.kind.name().into());
        if let Some(l) = self.law.lambda {
            kv("law.lambda", fmt_f64(l));
        }
        kv("law.rho", fmt_f64(self.law.rho));
        kv("law.auxiliary", self.law.auxiliary.name().into());
        if let Some(w) = &self.law.weights {
            kv("law.weights", w.display().to_string());
        }
        kv("initial.shape", self.initial_shape.name().into());
        kv("initial.scale", fmt_f64(self.initial_scale));
        let sim = &self.sim;
        kv("sim.horizon", fmt_f64(sim.horizon));
        kv("sim.step", fmt_f64(sim.step));
        kv("sim.blowup_threshold", fmt_f64(sim.blowup_threshold));
        kv("sim.extrapolation", extrapolation_name(sim.extrapolation).into());
        kv("sim.beta", fmt_f64(sim.beta));
        kv("sim.damping", fmt_f64(sim.damping));
        let l = &self.learn;
        kv("learn.beta", fmt_f64(l.beta));
        kv("learn.epsilon1", fmt_f64(l.epsilon1));
        kv("learn.target", fmt_f64(l.target));
        kv("learn.radius", fmt_f64(l.radius));
        kv("learn.training_size", l.training_size.to_string());
        kv("learn.penalty_samples", l.penalty_samples.to_string());
        kv("learn.horizon", fmt_f64(l.horizon));
        kv("learn.step", fmt_f64(l.step));
        kv("learn.extrapolation", extrapolation_name(l.extrapolation).into());
        kv("learn.alpha_schedule", fmt_list(&l.alpha_schedule, |v| fmt_f64(*v)));
        kv("learn.gamma_schedule", fmt_list(&l.gamma_schedule, |v| fmt_f64(*v)));
        kv("learn.iterations", l.iterations.to_string());
        kv("learn.armijo_c", fmt_f64(l.armijo_c));
        kv("learn.max_backtracks", l.max_backtracks.to_string());
        kv("learn.initial_step", fmt_f64(l.initial_step));
        kv("learn.step_reuse", l.step_reuse.to_string());
        kv("learn.gradient_tolerance", fmt_f64(l.gradient_tolerance));
        kv("learn.min_damping_increment", fmt_f64(l.min_damping_increment));
        kv("learn.hidden", fmt_list(&l.hidden, |v| v.to_string()));
        kv("learn.init_std", fmt_f64(l.init_std));
        kv("sweep.ms", fmt_list(&self.sweep.ms, |v| v.to_string()));
        kv("sweep.lambdas", fmt_list(&self.sweep.lambdas, |v| fmt_f64(*v)));
        kv("validation.modes", self.validation.modes.to_string());
        kv("validation.count", self.validation.count.to_string());
        kv("validation.reference_lambda", fmt_f64(self.validation.reference_lambda));
        kv(
            "validation.weights",
            fmt_list(&self.validation.weights, |p| p.display().to_string()),
        );
        kv("poincare.ms", fmt_list(&self.poincare_ms, |v| v.to_string()));
        s
    }

    pub fn domain(&self) -> Result<RectDomain> {
        RectDomain::new(&self.domain).map_err(|e| config_err("domain.lengths", e.to_string()))
    }

    /// Checks that hold for every command.
    pub fn validate(&self) -> Result<()> {
        if self.domain.len() != 2 {
            return Err(config_err("domain.lengths", "the coefficient presets need two lengths"));
        }
        self.domain()?;
        if self.cells == 0 {
            return Err(config_err("mesh.cells", "must be positive"));
        }
        if !(self.nu.is_finite() && self.nu > 0.0) {
            return Err(config_err("model.nu", "must be positive"));
        }
        if self.actuators == 0 {
            return Err(config_err("actuators.m", "must be positive"));
        }
        if !(self.initial_scale.is_finite() && self.initial_scale > 0.0) {
            return Err(config_err("initial.scale", "must be positive"));
        }
        self.sim.validate()?;
        self.learn.validate()
    }

    /// Checks for commands that evaluate the configured law.
    pub fn validate_law(&self) -> Result<()> {
        match self.law.kind {
            LawKind::ScaledProjection | LawKind::ObliqueFractional => match self.law.lambda {
                None => Err(config_err("law.lambda", format!("required for law.kind = {}", self.law.kind.name()))),
                Some(l) if !(l.is_finite() && l >= 0.0) => Err(config_err("law.lambda", "must be nonnegative")),
                Some(l) if l == 0.0 && self.law.kind == LawKind::ObliqueFractional => {
                    Err(config_err("law.lambda", "must be positive for oblique_fractional"))
                }
                Some(_) if self.law.kind == LawKind::ObliqueFractional
                    && self.law.auxiliary == AuxiliaryChoice::Actuators
                    && self.law.rho != 0.0 =>
                {
                    Err(config_err("law.rho", "must be 0 with law.auxiliary = actuators"))
                }
                Some(_) => Ok(()),
            },
            LawKind::Neural => match self.law.weights {
                None => Err(config_err("law.weights", "required for law.kind = neural")),
                Some(_) => Ok(()),
            },
        }
    }

    pub fn validate_sweep(&self) -> Result<()> {
        if self.sweep.ms.is_empty() || self.sweep.ms.contains(&0) {
            return Err(config_err("sweep.ms", "must be a nonempty list of positive integers"));
        }
        if self.sweep.lambdas.is_empty() || self.sweep.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(config_err("sweep.lambdas", "must be a nonempty list of nonnegative numbers"));
        }
        Ok(())
    }

    pub fn validate_validation(&self) -> Result<()> {
        if self.validation.modes == 0 {
            return Err(config_err("validation.modes", "must be positive"));
        }
        if self.validation.count == 0 {
            return Err(config_err("validation.count", "must be positive"));
        }
        if !(self.validation.reference_lambda > 0.0) {
            return Err(config_err("validation.reference_lambda", "must be positive"));
        }
        Ok(())
    }

    pub fn validate_poincare(&self) -> Result<()> {
        if self.poincare_ms.is_empty() {
            return Err(config_err("poincare.ms", "must be nonempty"));
        }
        Ok(())
    }

    /// Seed of the penalty sample set, derived from the run seed.
    pub fn penalty_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    /// Seed of the validation sample set, derived from the run seed.
    pub fn validation_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    /// Overrides the run seed everywhere it is used.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.learn.seed = seed;
    }

    /// Network architecture implied by the actuator count.
    pub fn network_arch(&self) -> Vec<usize> {
        self.learn.arch(self.actuators.pow(2))
    }

    /// Mesh, system and actuators with `m` actuators per axis.
    pub fn scenario_with(&self, m: usize) -> Result<Scenario> {
        build_scenario_on(&self.domain()?, self.cells, m, self.preset, self.nu)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        self.scenario_with(self.actuators)
    }

    pub fn initial_state(&self, sys: &DiscreteSystem) -> Result<DVector<f64>> {
        preset_initial(sys, self.initial_shape, self.initial_scale)
    }

    /// `(M, xi)` for every entry of `poincare.ms`; `M = 0` means no constraints.
    pub fn poincare_table(&self) -> Result<Vec<(usize, f64)>> {
        self.validate_poincare()?;
        self.poincare_ms
            .iter()
            .map(|&m| {
                let xi = if m == 0 {
                    let domain = self.domain()?;
                    let mesh = StructuredMesh::build(&domain, &[self.cells, self.cells], &[])?;
                    let sys = DiscreteSystem::assemble(&mesh, Arc::new(self.preset), self.nu)?;
                    constrained_minimum(&sys, &DMatrix::zeros(sys.node_count(), 0))?
                } else {
                    let sc = self.scenario_with(m)?;
                    poincare_constant(&sc.basis, &sc.sys)?
                };
                Ok((m, xi))
            })
            .collect()
    }

    /// The feedback law described by the `law.*` keys.
    pub fn build_law(&self, sys: &DiscreteSystem, basis: &ActuatorBasis) -> Result<FeedbackLaw> {
        self.validate_law()?;
        match self.law.kind {
            LawKind::ScaledProjection => FeedbackLaw::scaled_projection(self.law.lambda.unwrap_or_default()),
            LawKind::ObliqueFractional => {
                let aux = match self.law.auxiliary {
                    AuxiliaryChoice::Eigenfunctions => AuxiliaryBasis::eigenfunctions(basis, sys)?,
                    AuxiliaryChoice::Actuators => AuxiliaryBasis::actuators(basis)?,
                };
                FeedbackLaw::oblique_fractional(basis, aux, self.law.lambda.unwrap_or_default(), self.law.rho)
            }
            LawKind::Neural => {
                let path = self.law.weights.as_deref().unwrap_or(Path::new(""));
                load_neural(path, basis, "law.weights")
            }
        }
    }
}

/// Reads a weight file and checks it against the actuator count; errors name `field`.
pub fn load_neural(path: &Path, basis: &ActuatorBasis, field: &str) -> Result<FeedbackLaw> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(field, format!("cannot read {}: {e}", path.display())))?;
    let params = NetworkParams::from_text(&text)?;
    let arch = params.arch();
    let m = basis.count();
    if arch.first() != Some(&m) || arch.last() != Some(&m) {
        return Err(config_err(
            field,
            format!("network {} has input/output widths {:?}/{:?}, expected {m}", path.display(), arch.first(), arch.last()),
        ));
    }
    FeedbackLaw::neural(params, basis)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trip() {
        let c = RunConfig::default();
        let text = c.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn overrides_and_comments() {
        let c = RunConfig::parse("# note\nmesh.cells = 16\n\nsweep.lambdas = 1, 2.5\nlaw.kind = neural\n").unwrap();
        assert_eq!(c.cells, 16);
        assert_eq!(c.sweep.lambdas, vec![1.0, 2.5]);
        assert_eq!(c.law.kind, LawKind::Neural);
        assert_eq!(c.law.lambda, None);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::parse("sim.step = fast\n").unwrap_err();
        assert!(err.to_string().contains("sim.step"), "{err}");
        let err = RunConfig::parse("bogus.key = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus.key"), "{err}");
        let c = RunConfig::parse("law.kind = scaled_projection\n").unwrap();
        let err = c.validate_law().unwrap_err();
        assert!(err.to_string().contains("law.lambda"), "{err}");
    }
}
