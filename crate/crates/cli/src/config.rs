//! JSON experiment configuration and its translation into library objects.

use std::sync::Arc;

use levy_bsde::generator::{families, GeneratorSpec, TerminalSpec};
use levy_bsde::levy::{discretize_density, Atom, LevyTriplet, TimeGrid};
use levy_bsde::solver::{DpSettings, ForwardSpec, PicardSettings, RegressionBasis};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub generator: GeneratorConfig,
    pub terminal: TerminalConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
    pub solver: SolverConfig,
    #[serde(default)]
    pub hlimit: Option<HLimitConfig>,
    #[serde(default)]
    pub malliavin: Option<MalliavinConfig>,
    #[serde(default)]
    pub pdie: Option<PdieConfig>,
    #[serde(default)]
    pub verify: Option<VerifyConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub atoms: Vec<AtomConfig>,
    #[serde(default)]
    pub density: Option<DensityConfig>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomConfig {
    pub mark: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityConfig {
    /// `c e^{-lambda |x|} / |x|^{1 + alpha}`.
    TemperedStable {
        c: f64,
        lambda: f64,
        alpha: f64,
        support: (f64, f64),
        n_atoms: usize,
        cutoff: f64,
    },
    /// `rate` times the normal density with mean `mean` and deviation `std`.
    Gaussian {
        rate: f64,
        mean: f64,
        std: f64,
        support: (f64, f64),
        n_atoms: usize,
        cutoff: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    Linear { alpha: f64, beta: f64, gamma: f64, delta: f64 },
    Envelope { a: f64, k: f64 },
    Subquadratic { c: f64, k: f64, eta: f64 },
    Constant { c: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalConfig {
    #[serde(flatten)]
    pub kind: TerminalKind,
    #[serde(default, rename = "A_xi")]
    pub a_xi: Option<f64>,
    #[serde(default, rename = "A_Dxi")]
    pub a_dxi: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum TerminalKind {
    Constant { c: f64 },
    /// `amplitude tanh(scale X_T)`.
    Tanh { amplitude: f64, scale: f64 },
    /// `X_T`.
    TerminalValue,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundsConfig {
    #[default]
    Auto,
    Explicit {
        #[serde(rename = "R")]
        r: f64,
        #[serde(rename = "Q")]
        q: f64,
        #[serde(rename = "P")]
        p: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Picard,
    Dp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceConfig {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl SpaceConfig {
    pub fn nodes(&self) -> Vec<f64> {
        (0..self.nodes)
            .map(|k| self.lo + (self.hi - self.lo) * k as f64 / (self.nodes - 1) as f64)
            .collect()
    }
}

fn default_paths() -> usize {
    10_000
}
fn default_basis() -> usize {
    3
}
fn default_tol() -> f64 {
    1e-6
}
fn default_max_iter() -> usize {
    50
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    pub grid: GridConfig,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_basis")]
    pub basis: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub lattice: Option<SpaceConfig>,
    /// Largest number of paths written to CSV artifacts.
    #[serde(default)]
    pub max_paths: Option<usize>,
    /// Solve with the generator truncated at the bound certificate.
    #[serde(default)]
    pub truncate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HLimitConfig {
    #[serde(default)]
    pub schedule: Option<Vec<u32>>,
    #[serde(default = "default_cauchy")]
    pub cauchy_tol: f64,
    /// Risk aversion of the exponential-utility jump term.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_cauchy() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MalliavinConfig {
    pub directions: Vec<DirectionConfig>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionConfig {
    pub r: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdieConfig {
    pub space: SpaceConfig,
    pub steps: usize,
    /// Only `"imex"` is available.
    #[serde(default)]
    pub scheme: Option<String>,
}

fn default_slack_c() -> f64 {
    10.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Solution CSV to check instead of solving.
    #[serde(default)]
    pub solution: Option<String>,
    #[serde(default = "default_slack_c")]
    pub slack_c: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            solution: None,
            slack_c: default_slack_c(),
        }
    }
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Invalid(format!("{field}: {msg}"))
}

fn positive(field: &str, x: f64) -> Result<(), CliError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive and finite, got {x}")))
    }
}

fn finite(field: &str, x: f64) -> Result<(), CliError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be finite, got {x}")))
    }
}

fn check_space(field: &str, s: &SpaceConfig) -> Result<(), CliError> {
    finite(&format!("{field}.lo"), s.lo)?;
    finite(&format!("{field}.hi"), s.hi)?;
    if s.hi <= s.lo {
        return Err(invalid(field, "hi must exceed lo"));
    }
    if s.nodes < 3 {
        return Err(invalid(&format!("{field}.nodes"), "needs at least 3 nodes"));
    }
    Ok(())
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| CliError::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Field-level checks with messages naming the offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        let m = &self.model;
        finite("model.gamma", m.gamma)?;
        if !(m.sigma >= 0.0 && m.sigma.is_finite()) {
            return Err(invalid("model.sigma", format!("must be nonnegative, got {}", m.sigma)));
        }
        for (k, a) in m.atoms.iter().enumerate() {
            if !(a.mark != 0.0 && a.mark.is_finite()) {
                return Err(invalid(&format!("model.atoms[{k}].mark"), format!("must be finite and nonzero, got {}", a.mark)));
            }
            positive(&format!("model.atoms[{k}].intensity"), a.intensity)?;
        }
        if m.density.is_some() && !m.atoms.is_empty() {
            return Err(invalid("model", "give either atoms or density, not both"));
        }
        let s = &self.solver;
        positive("solver.grid.horizon", s.grid.horizon)?;
        if s.grid.steps == 0 {
            return Err(invalid("solver.grid.steps", "must be at least 1"));
        }
        if s.paths < 2 {
            return Err(invalid("solver.paths", "must be at least 2"));
        }
        positive("solver.tol", s.tol)?;
        if s.max_iter == 0 {
            return Err(invalid("solver.max_iter", "must be at least 1"));
        }
        if s.basis > 8 {
            return Err(invalid("solver.basis", "degree above 8 is not supported"));
        }
        match (&s.lattice, s.method) {
            (Some(l), _) => check_space("solver.lattice", l)?,
            (None, Method::Dp) => return Err(invalid("solver.lattice", "required for method \"dp\"")),
            (None, Method::Picard) => {}
        }
        if let BoundsConfig::Explicit { r, q, p } = self.bounds {
            for (name, v) in [("bounds.explicit.R", r), ("bounds.explicit.Q", q), ("bounds.explicit.P", p)] {
                if !(v >= 1.0 && v.is_finite()) {
                    return Err(invalid(name, format!("must be at least 1, got {v}")));
                }
            }
        }
        if let Some(h) = &self.hlimit {
            positive("hlimit.alpha", h.alpha)?;
            positive("hlimit.cauchy_tol", h.cauchy_tol)?;
            if let Some(s) = &h.schedule {
                if s.is_empty() || s[0] == 0 || s.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(invalid("hlimit.schedule", "must be a nonempty increasing list of positive integers"));
                }
            }
        }
        if let Some(m) = &self.malliavin {
            if m.directions.is_empty() {
                return Err(invalid("malliavin.directions", "must not be empty"));
            }
            for (k, d) in m.directions.iter().enumerate() {
                if !(d.r >= 0.0 && d.r < s.grid.horizon) {
                    return Err(invalid(&format!("malliavin.directions[{k}].r"), format!("must lie in [0, horizon), got {}", d.r)));
                }
                finite(&format!("malliavin.directions[{k}].v"), d.v)?;
            }
        }
        if let Some(p) = &self.pdie {
            check_space("pdie.space", &p.space)?;
            if p.steps == 0 {
                return Err(invalid("pdie.steps", "must be at least 1"));
            }
            if let Some(s) = p.scheme.as_deref().filter(|s| *s != "imex") {
                return Err(invalid("pdie.scheme", format!("unknown scheme {s:?}, expected \"imex\"")));
            }
        }
        if let Some(v) = &self.verify {
            if !(v.slack_c >= 0.0) {
                return Err(invalid("verify.slack_c", "must be nonnegative"));
            }
        }
        Ok(())
    }

    pub fn atoms(&self) -> Result<Vec<Atom>, CliError> {
        let Some(d) = &self.model.density else {
            return Ok(self.model.atoms.iter().map(|a| Atom::new(a.mark, a.intensity)).collect());
        };
        let out = match *d {
            DensityConfig::TemperedStable {
                c,
                lambda,
                alpha,
                support,
                n_atoms,
                cutoff,
            } => discretize_density(move |x: f64| c * (-lambda * x.abs()).exp() / x.abs().powf(1.0 + alpha), support, n_atoms, cutoff),
            DensityConfig::Gaussian {
                rate,
                mean,
                std,
                support,
                n_atoms,
                cutoff,
            } => discretize_density(
                move |x: f64| rate * (-0.5 * ((x - mean) / std).powi(2)).exp() / (std * (2.0 * std::f64::consts::PI).sqrt()),
                support,
                n_atoms,
                cutoff,
            ),
        };
        out.map(|d| d.atoms).map_err(|e| invalid("model.density", e))
    }

    pub fn model(&self) -> Result<LevyTriplet, CliError> {
        LevyTriplet::new(self.model.gamma, self.model.sigma, self.atoms()?).map_err(|e| invalid("model", e))
    }

    pub fn grid(&self) -> Result<TimeGrid, CliError> {
        TimeGrid::uniform(self.solver.grid.horizon, self.solver.grid.steps).map_err(|e| invalid("solver.grid", e))
    }

    pub fn generator(&self) -> GeneratorSpec {
        match self.generator {
            GeneratorConfig::Linear { alpha, beta, gamma, delta } => families::linear(alpha, beta, gamma, delta),
            GeneratorConfig::Envelope { a, k } => families::envelope(a, k),
            GeneratorConfig::Subquadratic { c, k, eta } => families::subquadratic(c, k, eta),
            GeneratorConfig::Constant { c } => families::constant(c),
        }
    }

    /// Terminal value as a function of the terminal state.
    pub fn terminal_fn(&self) -> Arc<dyn Fn(f64) -> f64 + Send + Sync> {
        match self.terminal.kind {
            TerminalKind::Constant { c } => Arc::new(move |_| c),
            TerminalKind::Tanh { amplitude, scale } => Arc::new(move |x: f64| amplitude * (scale * x).tanh()),
            TerminalKind::TerminalValue => Arc::new(|x| x),
        }
    }

    pub fn terminal(&self) -> Result<TerminalSpec, CliError> {
        let sigma = self.model.sigma;
        let spec = match self.terminal.kind {
            TerminalKind::Constant { c } => TerminalSpec::constant(c),
            TerminalKind::Tanh { amplitude, scale } => TerminalSpec::of_terminal_state(
                "tanh",
                Arc::new(move |x: f64| amplitude * (scale * x).tanh()),
                Arc::new(move |x: f64| amplitude * scale * (1.0 - (scale * x).tanh().powi(2))),
                amplitude.abs(),
                (amplitude * scale).abs(),
                sigma,
            ),
            TerminalKind::TerminalValue => TerminalSpec::terminal_value(sigma),
        };
        let mut spec = spec;
        if let Some(a) = self.terminal.a_xi {
            if !(a >= spec.a_xi) {
                return Err(invalid("terminal.A_xi", format!("{a} is below sup |xi| = {}", spec.a_xi)));
            }
            spec.a_xi = a;
        }
        if let Some(a) = self.terminal.a_dxi {
            positive("terminal.A_Dxi", a)?;
            spec.a_dxi = Arc::new(move |_| a);
        }
        Ok(spec)
    }

    pub fn forward(&self) -> Result<ForwardSpec, CliError> {
        Ok(ForwardSpec::levy(&self.model()?))
    }

    pub fn picard_settings(&self) -> PicardSettings {
        PicardSettings {
            basis: RegressionBasis { degree: self.solver.basis },
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
            ..PicardSettings::default()
        }
    }

    pub fn dp_settings(&self) -> DpSettings {
        DpSettings::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "model": {"gamma": 0.0, "sigma": 1.0, "atoms": [{"mark": 0.5, "intensity": 1.0}]},
        "generator": {"family": "linear", "params": {"alpha": 0.5, "beta": 0.0, "gamma": 0.0, "delta": 0.0}},
        "terminal": {"family": "constant", "params": {"c": 1.0}},
        "solver": {"method": "picard", "grid": {"horizon": 1.0, "steps": 10}, "paths": 100}
    }"#;

    #[test]
    fn parses_minimal_config() {
        let c = Config::parse(BASE).unwrap();
        assert_eq!(c.solver.basis, 3);
        assert!(matches!(c.bounds, BoundsConfig::Auto));
        assert_eq!(c.model().unwrap().atoms().len(), 1);
        assert_eq!(c.terminal().unwrap().a_xi, 1.0);
    }

    #[test]
    fn negative_intensity_names_field() {
        let text = BASE.replace("\"intensity\": 1.0", "\"intensity\": -1.0");
        let e = Config::parse(&text).unwrap_err().to_string();
        assert!(e.contains("model.atoms[0].intensity"), "{e}");
    }

    #[test]
    fn dp_needs_lattice_and_unknown_keys_fail() {
        let text = BASE.replace("\"picard\"", "\"dp\"");
        assert!(Config::parse(&text).unwrap_err().to_string().contains("solver.lattice"));
        let text = BASE.replace("\"paths\": 100", "\"paths\": 100, \"bogus\": 1");
        assert!(Config::parse(&text).is_err());
    }

    #[test]
    fn explicit_bounds_and_density() {
        let text = BASE.replace(
            "\"solver\"",
            "\"bounds\": {\"explicit\": {\"R\": 3.0, \"Q\": 2.0, \"P\": 2.0}}, \"solver\"",
        );
        let c = Config::parse(&text).unwrap();
        assert!(matches!(c.bounds, BoundsConfig::Explicit { r, .. } if r == 3.0));
        let text = BASE.replace(
            "\"atoms\": [{\"mark\": 0.5, \"intensity\": 1.0}]",
            "\"density\": {\"kind\": \"gaussian\", \"rate\": 2.0, \"mean\": 0.0, \"std\": 0.5, \"support\": [-3.0, 3.0], \"n_atoms\": 4, \"cutoff\": 0.05}",
        );
        let c = Config::parse(&text).unwrap();
        let atoms = c.atoms().unwrap();
        assert_eq!(atoms.len(), 8);
        let total: f64 = atoms.iter().map(|a| a.intensity).sum();
        assert!(total < 2.0 && total > 1.8, "{total}");
    }
}
