//! Scenario configuration: flat `key = value` lines, optional `[section]`
//! headers that prefix the keys below them, `#` comments.
//!
//! ```text
//! scenario = path_independence
//! d = 1
//!
//! [numerics]
//! N = 4000
//! dt_ladder = 0.01, 0.005, 0.0025
//!
//! [V]
//! outer = x_squared
//! ```
//!
//! Validation reports every problem it finds, each with its line and key.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::calculus::catalog::from_ids;
use crate::calculus::CylindricalFunction;
use crate::dynamics::{Affine, CoefficientField, Constant, InitialLaw, Modulated, TimeGrid};
use crate::error::{ConfigIssues, Error, Result};
use crate::functionals::{ConstantScalar, ConstantVector, FnScalar, ScalarField, VectorField};

/// The experiments the runner knows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scenario {
    ItoResidual,
    PathIndependence,
    FlowProperty,
    Girsanov,
    FeynmanKacLinear,
    FeynmanKacSource,
    FeynmanKacLog,
    PdeResidual,
    LDerivativeCheck,
    W2Selftest,
}

impl Scenario {
    pub const ALL: [Scenario; 10] = [
        Scenario::ItoResidual,
        Scenario::PathIndependence,
        Scenario::FlowProperty,
        Scenario::Girsanov,
        Scenario::FeynmanKacLinear,
        Scenario::FeynmanKacSource,
        Scenario::FeynmanKacLog,
        Scenario::PdeResidual,
        Scenario::LDerivativeCheck,
        Scenario::W2Selftest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::ItoResidual => "ito_residual",
            Scenario::PathIndependence => "path_independence",
            Scenario::FlowProperty => "flow_property",
            Scenario::Girsanov => "girsanov",
            Scenario::FeynmanKacLinear => "feynman_kac_linear",
            Scenario::FeynmanKacSource => "feynman_kac_source",
            Scenario::FeynmanKacLog => "feynman_kac_log",
            Scenario::PdeResidual => "pde_residual",
            Scenario::LDerivativeCheck => "lderivative_check",
            Scenario::W2Selftest => "w2_selftest",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Scenario::ALL.iter().map(|s| s.name()).collect();
                format!("unknown scenario `{s}`; expected one of {}", names.join(", "))
            })
    }
}

/// A catalog cylindrical function by identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionSpec {
    pub inner: Vec<String>,
    pub outer: String,
    pub param: Option<f64>,
}

impl FunctionSpec {
    pub fn build(&self, d: usize) -> Result<CylindricalFunction> {
        let inner: Vec<&str> = self.inner.iter().map(String::as_str).collect();
        from_ids(&inner, &self.outer, d, self.param)
    }
}

/// A catalog coefficient field.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSpec {
    /// `brownian`, `mean_reverting`, `ornstein_uhlenbeck` or `modulated`.
    pub id: String,
    pub theta: f64,
    pub sigma: f64,
    pub drift: f64,
    pub amp: f64,
}

impl CoefficientSpec {
    pub fn build(&self, d: usize, m: usize) -> Result<Arc<dyn CoefficientField>> {
        let square = |what: &str| {
            if d == m {
                Ok(())
            } else {
                Err(Error::Data(format!("coefficient `{what}` needs m = d, got d = {d}, m = {m}")))
            }
        };
        Ok(match self.id.as_str() {
            "brownian" => {
                square("brownian")?;
                Arc::new(Constant::brownian(d, self.sigma, self.drift))
            }
            "mean_reverting" => Arc::new(Affine {
                m,
                ..Affine::mean_reverting(d, self.theta, self.sigma)
            }),
            "ornstein_uhlenbeck" | "ou" => Arc::new(Affine {
                m,
                ..Affine::ornstein_uhlenbeck(d, self.theta, self.sigma)
            }),
            "modulated" => Arc::new(Modulated {
                d,
                m,
                theta: self.theta,
                amp: self.amp,
                sigma: self.sigma,
            }),
            other => return Err(Error::Data(format!("unknown coefficient `{other}`"))),
        })
    }
}

/// Source term `f` by identifier: `zero`, `one`, `constant:c`, `state`
/// (first coordinate) or `squared_norm`.
pub fn scalar_field(id: &str) -> Result<Arc<dyn ScalarField>> {
    Ok(match id {
        "zero" => Arc::new(ConstantScalar(0.0)),
        "one" => Arc::new(ConstantScalar(1.0)),
        "state" => Arc::new(FnScalar(|_t, x: &[f64]| x[0])),
        "squared_norm" => Arc::new(FnScalar(|_t, x: &[f64]| x.iter().map(|v| v * v).sum())),
        _ => match id.strip_prefix("constant:").map(str::parse::<f64>) {
            Some(Ok(c)) => Arc::new(ConstantScalar(c)),
            _ => return Err(Error::Data(format!("unknown source `{id}`"))),
        },
    })
}

/// Integrand `g` by identifier: `zero` or `constant:c` (every component).
pub fn vector_field(id: &str, m: usize) -> Result<Arc<dyn VectorField>> {
    Ok(match id {
        "zero" => Arc::new(ConstantVector(vec![0.0; m])),
        _ => match id.strip_prefix("constant:").map(str::parse::<f64>) {
            Some(Ok(c)) => Arc::new(ConstantVector(vec![c; m])),
            _ => return Err(Error::Data(format!("unknown integrand `{id}`"))),
        },
    })
}

/// A validated scenario description.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub d: usize,
    pub m: usize,
    /// Start `s` of the horizon.
    pub start: f64,
    /// Intermediate time for the flow property.
    pub middle: f64,
    /// End `T` of the horizon.
    pub end: f64,
    /// Particles `N`.
    pub particles: usize,
    /// Paths `M`.
    pub paths: usize,
    pub dt: f64,
    pub dt_ladder: Vec<f64>,
    pub seed: u64,
    pub coeff: CoefficientSpec,
    pub init_mean: f64,
    /// Zero selects a Dirac initial law.
    pub init_std: f64,
    pub v: Option<FunctionSpec>,
    pub phi: Option<FunctionSpec>,
    pub phi_lower_bound: f64,
    pub f: String,
    pub g: String,
    pub g_shift: f64,
    pub beta: f64,
    pub probes_t: Vec<f64>,
    pub probes_x: Vec<f64>,
    /// Atoms of the probe measure.
    pub probe_atoms: usize,
    pub pde: String,
    pub subject: String,
    pub reference: String,
    pub instances: usize,
    pub tolerance: Option<f64>,
    pub output: String,
}

impl ScenarioConfig {
    pub fn coefficients(&self) -> Result<Arc<dyn CoefficientField>> {
        self.coeff.build(self.d, self.m)
    }

    pub fn initial_law(&self) -> InitialLaw {
        let mean = vec![self.init_mean; self.d];
        if self.init_std == 0.0 {
            InitialLaw::Dirac(mean)
        } else {
            InitialLaw::Gaussian {
                mean,
                std: self.init_std,
            }
        }
    }

    pub fn v_function(&self) -> Result<CylindricalFunction> {
        self.v
            .as_ref()
            .ok_or_else(|| Error::Data("no V configured".into()))?
            .build(self.d)
    }

    pub fn phi_function(&self) -> Result<CylindricalFunction> {
        self.phi
            .as_ref()
            .ok_or_else(|| Error::Data("no Phi configured".into()))?
            .build(self.d)
    }

    /// Step sizes of the planned runs: the ladder when given, else `dt`.
    pub fn planned_runs(&self) -> Vec<f64> {
        if self.dt_ladder.is_empty() {
            vec![self.dt]
        } else {
            self.dt_ladder.clone()
        }
    }
}

/// Raw `key -> (line, value)` map.
#[derive(Debug, Default)]
struct RawConfig {
    entries: BTreeMap<String, (usize, String)>,
}

const KNOWN_KEYS: &[&str] = &[
    "scenario",
    "d",
    "m",
    "horizon.s",
    "horizon.t",
    "horizon.T",
    "numerics.N",
    "numerics.M",
    "numerics.dt",
    "numerics.dt_ladder",
    "numerics.seed",
    "coeff.id",
    "coeff.theta",
    "coeff.sigma",
    "coeff.drift",
    "coeff.amp",
    "init.mean",
    "init.std",
    "V.inner",
    "V.outer",
    "V.param",
    "Phi.inner",
    "Phi.outer",
    "Phi.param",
    "Phi.lower_bound",
    "f.id",
    "g.id",
    "g.shift",
    "beta",
    "probes.t",
    "probes.x",
    "probes.atoms",
    "pde.kind",
    "pde.subject",
    "reference",
    "check.instances",
    "check.tolerance",
    "output",
];

fn split_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

struct Reader<'a> {
    raw: &'a RawConfig,
    issues: ConfigIssues,
}

impl Reader<'_> {
    fn line(&self, key: &str) -> Option<usize> {
        self.raw.entries.get(key).map(|(l, _)| *l)
    }

    fn text(&self, key: &str) -> Option<&str> {
        self.raw.entries.get(key).map(|(_, v)| v.as_str())
    }

    fn parsed<T: FromStr>(&mut self, key: &str, default: T, what: &str) -> T {
        match self.raw.entries.get(key) {
            None => default,
            Some((line, v)) => match v.parse::<T>() {
                Ok(x) => x,
                Err(_) => {
                    self.issues.push(Some(*line), key, format!("expected {what}, got `{v}`"));
                    default
                }
            },
        }
    }

    fn real(&mut self, key: &str, default: f64) -> f64 {
        let v = self.parsed(key, default, "a number");
        if !v.is_finite() {
            self.issues.push(self.line(key), key, "must be finite");
        }
        v
    }

    fn count(&mut self, key: &str, default: usize) -> usize {
        self.parsed(key, default, "a non-negative integer")
    }

    fn reals(&mut self, key: &str) -> Vec<f64> {
        let Some((line, v)) = self.raw.entries.get(key) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for item in split_list(v) {
            match item.parse::<f64>() {
                Ok(x) if x.is_finite() => out.push(x),
                _ => self
                    .issues
                    .push(Some(*line), key, format!("expected a list of numbers, got `{item}`")),
            }
        }
        out
    }

    fn function(&mut self, prefix: &str, d: usize) -> Option<FunctionSpec> {
        let outer_key = format!("{prefix}.outer");
        let outer = self.text(&outer_key)?.to_string();
        let spec = FunctionSpec {
            inner: self.text(&format!("{prefix}.inner")).map(split_list).unwrap_or_default(),
            outer,
            param: self
                .raw
                .entries
                .contains_key(&format!("{prefix}.param"))
                .then(|| self.real(&format!("{prefix}.param"), 0.0)),
        };
        if let Err(e) = spec.build(d) {
            self.issues.push(self.line(&outer_key), outer_key, e.to_string());
        }
        Some(spec)
    }

    fn require(&mut self, present: bool, key: &str, scenario: Scenario) {
        if !present {
            self.issues
                .push(None, key, format!("required by scenario `{scenario}`"));
        }
    }
}

fn lex(text: &str) -> (RawConfig, ConfigIssues) {
    let mut raw = RawConfig::default();
    let mut issues = ConfigIssues::default();
    let mut section = String::new();
    for (idx, line) in text.lines().enumerate() {
        let n = idx + 1;
        let line = line.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            if section.is_empty() {
                issues.push(Some(n), "[]", "empty section name");
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            issues.push(Some(n), line, "expected `key = value`");
            continue;
        };
        let key = key.trim();
        let full = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        if !KNOWN_KEYS.contains(&full.as_str()) {
            issues.push(Some(n), full.clone(), "unknown key");
        }
        if let Some((first, _)) = raw.entries.get(&full) {
            issues.push(Some(n), full.clone(), format!("duplicate key, first set on line {first}"));
            continue;
        }
        raw.entries.insert(full, (n, value.trim().to_string()));
    }
    (raw, issues)
}

/// Parses and validates a configuration, collecting every violation.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let (raw, issues) = lex(text);
    let mut r = Reader { raw: &raw, issues };

    let scenario = match raw.entries.get("scenario") {
        None => {
            r.issues.push(None, "scenario", "missing");
            None
        }
        Some((line, v)) => match v.parse::<Scenario>() {
            Ok(s) => Some(s),
            Err(e) => {
                r.issues.push(Some(*line), "scenario", e);
                None
            }
        },
    };
    let d = r.count("d", 1);
    let m = r.count("m", d);
    if d == 0 {
        r.issues.push(r.line("d"), "d", "must be at least 1");
    }
    if m == 0 {
        r.issues.push(r.line("m"), "m", "must be at least 1");
    }
    let start = r.real("horizon.s", 0.0);
    let end = r.real("horizon.T", 1.0);
    let middle = r.real("horizon.t", 0.5 * (start + end));
    if end < start {
        r.issues.push(r.line("horizon.T"), "horizon.T", format!("precedes horizon.s = {start}"));
    }
    if !(start..=end).contains(&middle) {
        r.issues.push(r.line("horizon.t"), "horizon.t", "must lie in [s, T]");
    }
    let particles = r.count("numerics.N", 1000);
    let paths = r.count("numerics.M", 1);
    let dt = r.real("numerics.dt", 0.01);
    let dt_ladder = r.reals("numerics.dt_ladder");
    let seed = r.parsed("numerics.seed", 0_u64, "a non-negative integer");
    if particles < 2 {
        r.issues.push(r.line("numerics.N"), "numerics.N", "need at least 2 particles");
    }
    if paths == 0 {
        r.issues.push(r.line("numerics.M"), "numerics.M", "need at least 1 path");
    }
    let steps_key = if dt_ladder.is_empty() {
        "numerics.dt"
    } else {
        "numerics.dt_ladder"
    };
    let steps = if dt_ladder.is_empty() { vec![dt] } else { dt_ladder.clone() };
    for h in &steps {
        if TimeGrid::new(start, end, *h).is_err() {
            r.issues.push(
                r.line(steps_key),
                steps_key,
                format!("step {h} does not divide T - s = {}", end - start),
            );
        }
    }
    if scenario == Some(Scenario::FlowProperty) {
        for h in &steps {
            if TimeGrid::new(start, middle, *h).is_err() {
                r.issues
                    .push(r.line(steps_key), steps_key, format!("step {h} does not divide t - s"));
            }
        }
    }

    let coeff = CoefficientSpec {
        id: r.text("coeff.id").unwrap_or("brownian").to_string(),
        theta: r.real("coeff.theta", 1.0),
        sigma: r.real("coeff.sigma", 1.0),
        drift: r.real("coeff.drift", 0.0),
        amp: r.real("coeff.amp", 0.5),
    };
    if d > 0 && m > 0 {
        if let Err(e) = coeff.build(d, m) {
            r.issues.push(r.line("coeff.id"), "coeff.id", e.to_string());
        }
    }
    let init_mean = r.real("init.mean", 0.0);
    let init_std = r.real("init.std", 1.0);
    if init_std < 0.0 {
        r.issues.push(r.line("init.std"), "init.std", "must be non-negative");
    }
    let v = if d > 0 { r.function("V", d) } else { None };
    let phi = if d > 0 { r.function("Phi", d) } else { None };
    let phi_lower_bound = r.real("Phi.lower_bound", 0.0);
    let f = r.text("f.id").unwrap_or("zero").to_string();
    if let Err(e) = scalar_field(&f) {
        r.issues.push(r.line("f.id"), "f.id", e.to_string());
    }
    let g = r.text("g.id").unwrap_or("zero").to_string();
    if let Err(e) = vector_field(&g, m.max(1)) {
        r.issues.push(r.line("g.id"), "g.id", e.to_string());
    }
    let g_shift = r.real("g.shift", 0.0);
    let beta = r.real("beta", 1.0);
    if beta == 0.0 {
        r.issues.push(r.line("beta"), "beta", "must be non-zero");
    }
    let probes_t = r.reals("probes.t");
    let probes_x = r.reals("probes.x");
    for t in &probes_t {
        if !(start..=end).contains(t) {
            r.issues.push(r.line("probes.t"), "probes.t", format!("time {t} outside [s, T]"));
        }
    }
    let probe_atoms = r.count("probes.atoms", 200);
    let pde = r.text("pde.kind").unwrap_or("linear").to_string();
    if !["linear", "source", "nonlinear", "drift_coupled", "drift_identity"].contains(&pde.as_str()) {
        r.issues.push(r.line("pde.kind"), "pde.kind", format!("unknown equation `{pde}`"));
    }
    let subject = r.text("pde.subject").unwrap_or("exact").to_string();
    if !["exact", "monte_carlo"].contains(&subject.as_str()) {
        r.issues.push(r.line("pde.subject"), "pde.subject", format!("unknown subject `{subject}`"));
    }
    let reference = r.text("reference").unwrap_or("none").to_string();
    if !["none", "heat_quadratic", "gaussian", "linear_source"].contains(&reference.as_str()) {
        r.issues.push(r.line("reference"), "reference", format!("unknown reference `{reference}`"));
    } else if reference != "none" && coeff.id != "brownian" {
        r.issues.push(
            r.line("reference"),
            "reference",
            "closed-form references need coeff.id = brownian",
        );
    }
    let instances = r.count("check.instances", 20);
    let tolerance = raw
        .entries
        .contains_key("check.tolerance")
        .then(|| r.real("check.tolerance", 0.0));

    if let Some(sc) = scenario {
        let identity = sc == Scenario::PdeResidual && pde == "drift_identity";
        let needs_probes = !identity
            && matches!(
                sc,
                Scenario::FeynmanKacLinear | Scenario::FeynmanKacSource | Scenario::FeynmanKacLog | Scenario::PdeResidual
            );
        if matches!(sc, Scenario::ItoResidual | Scenario::PathIndependence) {
            r.require(v.is_some(), "V.outer", sc);
        }
        if matches!(sc, Scenario::FeynmanKacLinear | Scenario::FeynmanKacLog) {
            r.require(phi.is_some(), "Phi.outer", sc);
        }
        if sc == Scenario::PdeResidual && !identity {
            if subject == "exact" {
                r.require(v.is_some(), "V.outer", sc);
            } else if pde != "source" {
                r.require(phi.is_some(), "Phi.outer", sc);
            }
        }
        if needs_probes {
            r.require(!probes_t.is_empty(), "probes.t", sc);
            r.require(!probes_x.is_empty(), "probes.x", sc);
        }
        if sc == Scenario::PathIndependence && dt_ladder.len() < 2 {
            r.issues.push(
                r.line("numerics.dt_ladder"),
                "numerics.dt_ladder",
                "path independence needs at least two step sizes",
            );
        }
    }

    let output = r
        .text("output")
        .map(str::to_string)
        .unwrap_or_else(|| format!("{}.csv", scenario.map_or("scenario", Scenario::name)));
    if output.contains('/') || output.contains('\\') {
        r.issues.push(r.line("output"), "output", "must be a file name, not a path");
    }

    let issues = r.issues;
    match scenario {
        Some(scenario) if issues.is_empty() => Ok(ScenarioConfig {
            scenario,
            d,
            m,
            start,
            middle,
            end,
            particles,
            paths,
            dt,
            dt_ladder,
            seed,
            coeff,
            init_mean,
            init_std,
            v,
            phi,
            phi_lower_bound,
            f,
            g,
            g_shift,
            beta,
            probes_t,
            probes_x,
            probe_atoms,
            pde,
            subject,
            reference,
            instances,
            tolerance,
            output,
        }),
        _ => Err(Error::Config(issues)),
    }
}
