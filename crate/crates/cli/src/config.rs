//! Experiment configuration, read from TOML and validated before anything
//! is simulated.

use std::path::PathBuf;

use serde::Deserialize;

use rtci_core::domain::{HalfSpace, PolyhedralDomain};
use rtci_core::particles::{Coordinates, InitialRule, RankCoefficients, Truncation};
use rtci_core::reflect::{DiffusionMatrix, DriftField, DriftPerturbation, ReflectedDiffusion};
use rtci_core::tci::{System, VerifyOptions};
use rtci_core::transport::{EPSILON_LADDER, EXACT_CAP};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Named,
    Ranked,
    Reflected,
    TruncatedInfinite,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DomainSpec {
    HalfLine {},
    Box { lower: Vec<f64>, upper: Vec<f64> },
    UnitBox { dim: usize },
    Wedge { n: usize },
    /// Faces `normal·x ≥ offset` with a strictly feasible witness point.
    Halfspaces { normals: Vec<Vec<f64>>, offsets: Vec<f64>, witness: Vec<f64> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriftSpec {
    Constant { values: Vec<f64> },
    /// `g(x) = matrix·x + offset`
    Linear { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DiffusionSpec {
    Identity {},
    Diagonal { values: Vec<f64> },
    Matrix { rows: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    pub drifts: Vec<f64>,
    pub sigmas: Vec<f64>,
    #[serde(default)]
    pub tail: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationSpec {
    pub particles: usize,
    pub observed: usize,
    pub rule: InitialRule,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GammaSpec {
    /// `γ(t) = values`
    Constant { values: Vec<f64> },
    /// `γ(t) = values·t`
    Ramp { values: Vec<f64> },
}

impl GammaSpec {
    fn values(&self) -> &[f64] {
        match self {
            Self::Constant { values } | Self::Ramp { values } => values,
        }
    }

    pub fn build(&self) -> DriftPerturbation {
        match self {
            Self::Constant { values } => DriftPerturbation::constant(values.clone()),
            Self::Ramp { values } => {
                let v = values.clone();
                DriftPerturbation::deterministic(v.len(), move |t, out| {
                    out.iter_mut().zip(&v).for_each(|(o, c)| *o = c * t);
                })
            }
        }
    }
}

fn default_bundle_paths() -> usize {
    64
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleSpec {
    #[serde(default = "default_true")]
    pub write: bool,
    #[serde(default = "default_bundle_paths")]
    pub paths: usize,
}

impl Default for BundleSpec {
    fn default() -> Self {
        Self { write: true, paths: default_bundle_paths() }
    }
}

fn default_cap() -> usize {
    EXACT_CAP
}
fn default_ladder() -> Vec<f64> {
    EPSILON_LADDER.to_vec()
}
fn default_max_iter() -> usize {
    20_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSpec {
    #[serde(default)]
    pub w2_paths: Option<usize>,
    #[serde(default = "default_cap")]
    pub exact_cap: usize,
    #[serde(default = "default_ladder")]
    pub epsilon_ladder: Vec<f64>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

impl Default for TransportSpec {
    fn default() -> Self {
        Self { w2_paths: None, exact_cap: default_cap(), epsilon_ladder: default_ladder(), max_iter: default_max_iter() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: ScenarioKind,
    pub horizon: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub domain: Option<DomainSpec>,
    #[serde(default)]
    pub drift: Option<DriftSpec>,
    #[serde(default)]
    pub diffusion: Option<DiffusionSpec>,
    #[serde(default)]
    pub start: Option<Vec<f64>>,
    #[serde(default)]
    pub coefficients: Option<CoefficientSpec>,
    #[serde(default)]
    pub truncation: Option<TruncationSpec>,
    #[serde(default, rename = "gamma")]
    pub gammas: Vec<GammaSpec>,
    #[serde(default)]
    pub bundle: BundleSpec,
    #[serde(default)]
    pub transport: TransportSpec,
}

/// A validated experiment.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub system: System,
    pub gammas: Vec<DriftPerturbation>,
    pub options: VerifyOptions,
    pub bundle: BundleSpec,
}

fn field(name: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config { field: name.to_string(), message: e.to_string() }
}

fn require<'a, T>(value: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    value.as_ref().ok_or_else(|| field(name, "missing"))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        // toml's report names the offending key and shows the line
        toml::from_str(text)
            .map_err(|e| CliError::Config { field: "config".to_string(), message: e.to_string().trim().to_string() })
    }

    /// Validate every referenced specification and assemble the scenario.
    pub fn build(&self) -> Result<Scenario, CliError> {
        if self.name.is_empty() || self.name.contains([',', '\n', '"']) {
            return Err(field("name", "must be nonempty without commas, quotes or newlines"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(field("horizon", "must be positive"));
        }
        if !(self.dt > 0.0 && self.dt <= self.horizon) {
            return Err(field("dt", "must be positive and at most the horizon"));
        }
        rtci_core::bundle::TimeGrid::new(self.horizon, self.dt).map_err(|e| field("dt", e))?;
        if self.paths == 0 {
            return Err(field("paths", "must be positive"));
        }
        if self.transport.epsilon_ladder.is_empty() || self.transport.epsilon_ladder.iter().any(|e| !(*e > 0.0)) {
            return Err(field("transport.epsilon_ladder", "needs positive entries"));
        }
        if self.transport.w2_paths == Some(0) {
            return Err(field("transport.w2_paths", "must be positive"));
        }
        let system = self.system()?;
        let dim = match &system {
            System::Reflected(r) => r.domain().dim(),
            System::Named { start, .. } | System::Ranked { start, .. } => start.len(),
            System::Truncated(t) => t.particles,
        };
        if self.gammas.is_empty() {
            return Err(field("gamma", "at least one perturbation is required"));
        }
        for (i, g) in self.gammas.iter().enumerate() {
            if g.values().len() != dim {
                return Err(field(&format!("gamma[{i}].values"), format!("expected {dim} entries, found {}", g.values().len())));
            }
            if g.values().iter().any(|v| !v.is_finite()) {
                return Err(field(&format!("gamma[{i}].values"), "entries must be finite"));
            }
        }
        let mut options = VerifyOptions::new(self.horizon, self.dt, self.paths, self.seed);
        options.w2_paths = self.transport.w2_paths;
        options.exact_cap = self.transport.exact_cap;
        options.epsilon_ladder = self.transport.epsilon_ladder.clone();
        options.sinkhorn_max_iter = self.transport.max_iter;
        Ok(Scenario {
            name: self.name.clone(),
            system,
            gammas: self.gammas.iter().map(GammaSpec::build).collect(),
            options,
            bundle: self.bundle.clone(),
        })
    }

    fn coefficients(&self) -> Result<RankCoefficients, CliError> {
        let c = require(&self.coefficients, "coefficients")?;
        RankCoefficients::new(c.drifts.clone(), c.sigmas.clone(), c.tail).map_err(|e| field("coefficients", e))
    }

    fn system(&self) -> Result<System, CliError> {
        match self.kind {
            ScenarioKind::Reflected => {
                let domain = self.domain()?;
                let d = domain.dim();
                let drift = match require(&self.drift, "drift")? {
                    DriftSpec::Constant { values } => DriftField::constant(values.clone()),
                    DriftSpec::Linear { matrix, offset } => {
                        DriftField::linear(matrix.clone(), offset.clone()).map_err(|e| field("drift", e))?
                    }
                };
                if drift.dim() != d {
                    return Err(field("drift", format!("expected dimension {d}, found {}", drift.dim())));
                }
                let diffusion = match require(&self.diffusion, "diffusion")? {
                    DiffusionSpec::Identity {} => DiffusionMatrix::identity(d),
                    DiffusionSpec::Diagonal { values } => DiffusionMatrix::diagonal(values).map_err(|e| field("diffusion.values", e))?,
                    DiffusionSpec::Matrix { rows } => DiffusionMatrix::new(rows).map_err(|e| field("diffusion.rows", e))?,
                };
                let start = self.start.clone().unwrap_or_else(|| domain.witness().to_vec());
                let r = ReflectedDiffusion::new(domain, drift, diffusion, start).map_err(|e| field("start", e))?;
                Ok(System::Reflected(r))
            }
            ScenarioKind::Named | ScenarioKind::Ranked => {
                let coeffs = self.coefficients()?;
                let start = require(&self.start, "start")?.clone();
                if start.is_empty() || start.iter().any(|v| !v.is_finite()) {
                    return Err(field("start", "needs finite positions"));
                }
                if !coeffs.covers(start.len()) {
                    return Err(field("coefficients", format!("too few ranks for {} particles", start.len())));
                }
                Ok(if self.kind == ScenarioKind::Named {
                    System::Named { coeffs, start }
                } else {
                    System::Ranked { coeffs, start }
                })
            }
            ScenarioKind::TruncatedInfinite => {
                let coeffs = self.coefficients()?;
                let t = require(&self.truncation, "truncation")?;
                let trunc = Truncation {
                    coeffs,
                    observed: t.observed,
                    particles: t.particles,
                    rule: t.rule,
                    coordinates: Coordinates::Named,
                };
                trunc.validate().map_err(|e| field("truncation", e))?;
                Ok(System::Truncated(trunc))
            }
        }
    }

    fn domain(&self) -> Result<PolyhedralDomain, CliError> {
        let d = match require(&self.domain, "domain")? {
            DomainSpec::HalfLine {} => PolyhedralDomain::half_line(),
            DomainSpec::Box { lower, upper } => PolyhedralDomain::boxed(lower.clone(), upper.clone()).map_err(|e| field("domain", e))?,
            DomainSpec::UnitBox { dim } => PolyhedralDomain::unit_box(*dim).map_err(|e| field("domain.dim", e))?,
            DomainSpec::Wedge { n } => PolyhedralDomain::wedge(*n).map_err(|e| field("domain.n", e))?,
            DomainSpec::Halfspaces { normals, offsets, witness } => {
                if normals.len() != offsets.len() {
                    return Err(field("domain.offsets", "one offset per normal"));
                }
                let faces = normals
                    .iter()
                    .zip(offsets)
                    .map(|(n, &b)| HalfSpace::new(n.clone(), b))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| field("domain.normals", e))?;
                PolyhedralDomain::new(witness.len(), faces, "halfspaces", witness.clone(), true)
                    .map_err(|e| field("domain", e))?
            }
        };
        Ok(d)
    }
}
