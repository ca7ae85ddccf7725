//! TOML run configuration.
//!
//! ```toml
//! [model]
//! dims = 2
//! points = [64, 64]
//! kappa = 1
//! a0 = ["1+0.2*cos(y1)", "0", "0", "1"]
//! achi = ["1"]
//! f_mu = "1+0.3*sin(y1)"
//! reaction = "identity"            # or { slope = 1.0, offset = "0.1*cos(y1)" }
//!
//! [flow]
//! t_end = 12.0
//! initial = "0.1*cos(y1)*cos(y2)"
//! snapshots = [1.0, 2.0, 4.0]
//! ```
//!
//! Every other key has a default. Unknown keys are rejected. Environment
//! variables `KRF_<SECTION>_<KEY>` override single keys, with TOML value syntax.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::barrier::ApproxOptions;
use crate::error::{KrfError, Result};
use crate::expr::Expr;
use crate::flow::{FlowOptions, TimeScheme};
use crate::grid::TorusGrid;
use crate::ma::HessianStencil;
use crate::model::{ModelSpec, ReactionSpec};
use crate::static_solver::StaticMethod;
use crate::verify::StressOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReactionConfig {
    Named(String),
    Affine { slope: f64, offset: String },
}

impl Default for ReactionConfig {
    fn default() -> Self {
        ReactionConfig::Named("identity".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: usize,
    pub points: Vec<usize>,
    pub kappa: usize,
    /// Row-major `n x n` entries.
    pub a0: Vec<String>,
    /// Row-major `κ x κ` entries of the base block.
    pub achi: Vec<String>,
    pub f_mu: String,
    #[serde(default)]
    pub reaction: ReactionConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Rosenbrock,
    SemiImplicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StencilName {
    Central,
    Wide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub t_end: f64,
    pub initial: String,
    pub snapshots: Vec<f64>,
    pub scheme: SchemeName,
    pub stencil: StencilName,
    pub stencil_radius: usize,
    pub dt0: f64,
    pub dt_max: f64,
    pub dt_min: f64,
    pub adaptive: bool,
    pub target_change: f64,
    pub max_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let d = FlowOptions::default();
        Self {
            t_end: 12.0,
            initial: "0".into(),
            snapshots: vec![],
            scheme: SchemeName::Rosenbrock,
            stencil: StencilName::Central,
            stencil_radius: 2,
            dt0: d.dt0,
            dt_max: d.dt_max,
            dt_min: d.dt_min,
            adaptive: d.adaptive,
            target_change: d.target_change,
            max_steps: d.max_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Newton,
    PseudoTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: MethodName,
    pub tol: f64,
    pub max_iter: usize,
    pub semiflat_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: MethodName::Newton,
            tol: 1e-10,
            max_iter: 200,
            semiflat_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BarrierConfig {
    pub epsilons: Vec<f64>,
    /// `|s|_h` as an expression of the base coordinates, values in `(0, 1]`.
    pub divisor_profile: String,
    pub r_max: f64,
    pub forcing_fraction: f64,
    /// Times at which barrier fields are written.
    pub sample_times: Vec<f64>,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        let a = ApproxOptions::default();
        Self {
            epsilons: vec![0.2, 0.1, 0.05],
            divisor_profile: "exp(-0.3*(1-cos(y1)))".into(),
            r_max: a.r_max,
            forcing_fraction: a.forcing_fraction,
            sample_times: vec![0.0, 1.0, 4.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckName {
    Sandwich,
    Viscosity,
    Rate,
    Integral,
    Stress,
    Approx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub checks: Vec<CheckName>,
    /// `None` calibrates the sandwich tolerance on the constant model.
    pub sandwich_tol: Option<f64>,
    pub viscosity_tol: f64,
    pub rate_window: [f64; 2],
    pub rate_range: [f64; 2],
    pub integral_tol: f64,
    pub stress_pairs: usize,
    pub stress_t_end: f64,
    pub stress_radius: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            checks: vec![CheckName::Sandwich, CheckName::Viscosity, CheckName::Rate, CheckName::Integral],
            sandwich_tol: None,
            viscosity_tol: 1e-6,
            rate_window: [4.0, 10.0],
            rate_range: [-1.15, -0.85],
            integral_tol: 1e-3,
            stress_pairs: 50,
            stress_t_end: 0.5,
            stress_radius: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatName {
    Csv,
    Json,
    Bin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    pub formats: Vec<FormatName>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            formats: vec![FormatName::Csv, FormatName::Json, FormatName::Bin],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub barrier: BarrierConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

const SECTIONS: [&str; 6] = ["model", "flow", "solver", "barrier", "verify", "output"];

/// Environment variables consumed by the command line rather than the config.
const CLI_VARS: [&str; 5] = ["KRF_CONFIG", "KRF_OUT", "KRF_SEED", "KRF_THREADS", "KRF_VERBOSE"];

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

fn toml_error(text: &str, e: toml::de::Error) -> KrfError {
    let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
    KrfError::Parse {
        line,
        column,
        message: e.message().to_string(),
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `KRF_<SECTION>_<KEY>=value` overrides to a parsed table.
pub fn apply_env(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    for (name, raw) in vars {
        if !name.starts_with("KRF_") || CLI_VARS.contains(&name.as_str()) {
            continue;
        }
        let rest = name["KRF_".len()..].to_ascii_lowercase();
        let (section, key) = SECTIONS
            .iter()
            .find_map(|s| rest.strip_prefix(s).and_then(|k| k.strip_prefix('_')).map(|k| (*s, k.to_string())))
            .ok_or_else(|| KrfError::config(name.clone(), "environment override names no config section"))?;
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let toml::Value::Table(t) = entry else {
            return Err(KrfError::config(section, "is not a table"));
        };
        t.insert(key, parse_value(&raw));
    }
    Ok(())
}

/// Parses and validates a config text with the given environment overrides.
pub fn parse_config_str(text: &str, vars: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig> {
    let mut table: toml::Table = text.parse().map_err(|e| toml_error(text, e))?;
    apply_env(&mut table, vars)?;
    let rendered = toml::to_string(&table).map_err(|e| KrfError::Format(e.to_string()))?;
    let config: RunConfig = toml::from_str(&rendered).map_err(|e| {
        let plain: std::result::Result<RunConfig, _> = toml::from_str(text);
        match plain {
            Err(orig) => toml_error(text, orig),
            Ok(_) => toml_error(&rendered, e),
        }
    })?;
    config.validate()?;
    Ok(config)
}

/// Reads `path`, applies the process environment and validates.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    parse_config_str(&text, std::env::vars())
}

fn expr(field: &str, source: &str) -> Result<Expr> {
    Expr::parse(source).map_err(|e| match e {
        KrfError::Parse { line, column, message } => KrfError::Parse {
            line,
            column,
            message: format!("in `{field}`: {message}"),
        },
        other => other,
    })
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        TorusGrid::new(m.dims, &m.points, m.kappa)?;
        if m.a0.len() != m.dims * m.dims {
            return Err(KrfError::config("model.a0", format!("needs {} entries", m.dims * m.dims)));
        }
        if m.achi.len() != m.kappa * m.kappa {
            return Err(KrfError::config("model.achi", format!("needs {} entries", m.kappa * m.kappa)));
        }
        self.model_spec()?;
        let f = &self.flow;
        if !(f.t_end >= 0.0) || !f.t_end.is_finite() {
            return Err(KrfError::config("flow.t_end", "must be finite and nonnegative"));
        }
        if f.snapshots.iter().any(|s| !(*s >= 0.0)) {
            return Err(KrfError::config("flow.snapshots", "times must be nonnegative"));
        }
        expr("flow.initial", &f.initial)?;
        self.flow_options()?;
        if !(self.solver.tol > 0.0) || !(self.solver.semiflat_tol > 0.0) {
            return Err(KrfError::config("solver.tol", "tolerances must be positive"));
        }
        let b = &self.barrier;
        if let Some(e) = b.epsilons.iter().find(|e| !(**e > 0.0 && **e < 0.5)) {
            return Err(KrfError::config("barrier.epsilons", format!("{e} is outside (0, 1/2)")));
        }
        if !(b.r_max > 0.0 && b.r_max <= 1.0) {
            return Err(KrfError::config("barrier.r_max", "must lie in (0, 1]"));
        }
        if !(b.forcing_fraction > 0.0 && b.forcing_fraction < 1.0) {
            return Err(KrfError::config("barrier.forcing_fraction", "must lie in (0, 1)"));
        }
        expr("barrier.divisor_profile", &b.divisor_profile)?;
        let v = &self.verify;
        if !(v.rate_window[1] > v.rate_window[0]) {
            return Err(KrfError::config("verify.rate_window", "must be an increasing pair"));
        }
        if v.sandwich_tol.is_some_and(|t| !(t >= 0.0)) || !(v.viscosity_tol >= 0.0) {
            return Err(KrfError::config("verify", "tolerances must be nonnegative"));
        }
        if v.stress_pairs == 0 {
            return Err(KrfError::config("verify.stress_pairs", "must be at least 1"));
        }
        if self.output.dir.is_empty() {
            return Err(KrfError::config("output.dir", "must not be empty"));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let list = |name: &str, v: &[String]| {
            v.iter()
                .enumerate()
                .map(|(i, s)| expr(&format!("{name}[{i}]"), s))
                .collect::<Result<Vec<_>>>()
        };
        let reaction = match &m.reaction {
            ReactionConfig::Named(s) if s == "identity" => ReactionSpec::Identity,
            ReactionConfig::Named(s) => {
                return Err(KrfError::config("model.reaction", format!("unknown reaction `{s}`")))
            }
            ReactionConfig::Affine { slope, offset } => {
                ReactionSpec::affine(*slope, expr("model.reaction.offset", offset)?)?
            }
        };
        Ok(ModelSpec {
            dims: m.dims,
            points: m.points.clone(),
            kappa: m.kappa,
            a0: list("model.a0", &m.a0)?,
            achi: list("model.achi", &m.achi)?,
            f_mu: expr("model.f_mu", &m.f_mu)?,
            reaction,
        })
    }

    pub fn flow_options(&self) -> Result<FlowOptions> {
        let f = &self.flow;
        let grid = TorusGrid::new(self.model.dims, &self.model.points, self.model.kappa)?;
        let stencil = match f.stencil {
            StencilName::Central => None,
            StencilName::Wide => Some(HessianStencil::wide(&grid, f.stencil_radius)?),
        };
        let scheme = match f.scheme {
            SchemeName::Rosenbrock => TimeScheme::Rosenbrock,
            SchemeName::SemiImplicit => TimeScheme::SemiImplicit,
        };
        if scheme == TimeScheme::Rosenbrock && stencil.is_some() {
            return Err(KrfError::config("flow.scheme", "the Rosenbrock scheme needs the central stencil"));
        }
        if !(f.dt0 > 0.0) || !(f.dt_min > 0.0) || !(f.dt_max >= f.dt_min) {
            return Err(KrfError::config("flow.dt0", "need positive steps with dt_min <= dt_max"));
        }
        Ok(FlowOptions {
            scheme,
            stencil,
            dt0: f.dt0,
            dt_max: f.dt_max,
            dt_min: f.dt_min,
            adaptive: f.adaptive,
            target_change: f.target_change,
            max_steps: f.max_steps,
        })
    }

    pub fn static_method(&self) -> StaticMethod {
        match self.solver.method {
            MethodName::Newton => StaticMethod::DampedNewton,
            MethodName::PseudoTime => StaticMethod::PseudoTime,
        }
    }

    pub fn approx_options(&self) -> ApproxOptions {
        ApproxOptions {
            r_max: self.barrier.r_max,
            forcing_fraction: self.barrier.forcing_fraction,
        }
    }

    pub fn stress_options(&self) -> StressOptions {
        StressOptions {
            t_end: self.verify.stress_t_end,
            radius: self.verify.stress_radius,
            ..StressOptions::default()
        }
    }

    /// Canonical JSON of the resolved config; its hash names the experiment directory.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        crate::io::content_hash(self.canonical_json().as_bytes())
    }
}
