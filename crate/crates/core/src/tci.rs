//! Transportation-cost-information constants and the Monte Carlo harness
//! that checks the inequality through synchronously coupled pairs.

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use crate::bundle::{PathBundle, TimeGrid};
use crate::domain::norm;
use crate::dynamics::{self, Dynamics, Trace};
use crate::error::{Error, Result};
use crate::particles::{validate_coefficients, Coordinates, NamedSystem, RankCoefficients, Truncation};
use crate::quadrature::integrate;
use crate::reflect::{
    one_sided_lipschitz_check, reflection_sign_trace, DriftPerturbation, GronwallBound, OneSidedBound,
    ReflectedDiffusion, ReflectionSignReport,
};
use crate::rng::derive_seed;
use crate::stats::{mean_and_stderr, wilson_interval};
use crate::transport::{self, EmpiricalMeasure, EntropyMode, EXACT_CAP, EPSILON_LADDER};

pub const SCHEMA_VERSION: u32 = 1;
/// Relative stability required of the supremum over the refined t-grid.
const SUP_STABILITY: f64 = 1e-6;
/// Confidence multiplier for tail intervals.
const TAIL_Z: f64 = 3.0;

/// Inputs of `C = ‖A‖ sup_t ∫_0^t exp(2∫_s^t F) ds`.
#[derive(Debug, Clone)]
pub struct TciConstantSpec {
    pub norm_a: f64,
    pub bound: OneSidedBound,
    pub horizon: f64,
}

impl TciConstantSpec {
    pub fn new(norm_a: f64, bound: OneSidedBound, horizon: f64) -> Result<Self> {
        if !(norm_a > 0.0 && norm_a.is_finite()) {
            return Err(Error::InvalidArgument(format!("‖A‖ must be positive, got {norm_a}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        let spec = Self { norm_a, bound, horizon };
        let total = spec.bound.abs_integral(0.0, horizon)?;
        if !total.is_finite() {
            return Err(Error::Quadrature("one-sided bound is not integrable".into()));
        }
        Ok(spec)
    }
}

/// `(e^{2γT} − 1)/(2γ)`, continued by `T` at `γ = 0`.
pub fn constant_closed_form(norm_a: f64, gamma: f64, horizon: f64) -> f64 {
    let x = 2.0 * gamma * horizon;
    if x == 0.0 {
        norm_a * horizon
    } else {
        norm_a * horizon * x.exp_m1() / x
    }
}

pub fn tci_constant(spec: &TciConstantSpec) -> Result<f64> {
    match spec.bound {
        OneSidedBound::Constant(f) => Ok(constant_closed_form(spec.norm_a, f, spec.horizon)),
        _ => tci_constant_numeric(spec),
    }
}

/// Quadrature of the constant on a t-grid doubled until the supremum is
/// stable, for any bound.
pub fn tci_constant_numeric(spec: &TciConstantSpec) -> Result<f64> {
    let mut pieces = 32;
    let mut last = sup_on_grid(spec, pieces)?;
    loop {
        pieces *= 2;
        let next = sup_on_grid(spec, pieces)?;
        if (next - last).abs() <= SUP_STABILITY * next.abs().max(f64::MIN_POSITIVE) || pieces >= 1 << 16 {
            return Ok(spec.norm_a * next);
        }
        last = next;
    }
}

/// `max_k G(t_k)` with `G(t) = ∫_0^t exp(2∫_s^t F) ds`, advanced piece by
/// piece via `G(t') = e^{2Φ(t,t')} G(t) + ∫_t^{t'} e^{2Φ(s,t')} ds`.
fn sup_on_grid(spec: &TciConstantSpec, pieces: usize) -> Result<f64> {
    let h = spec.horizon / pieces as f64;
    let mut times: Vec<f64> = (1..pieces).map(|k| k as f64 * h).collect();
    times.push(spec.horizon);
    // the supremum can sit on a jump of a piecewise bound
    if let OneSidedBound::Piecewise { knots, .. } = &spec.bound {
        times.extend(knots.iter().copied().filter(|&k| k > 0.0 && k < spec.horizon));
        times.sort_by(f64::total_cmp);
        times.dedup();
    }
    let mut g: f64 = 0.0;
    let mut best: f64 = 0.0;
    let mut t0 = 0.0;
    for t1 in times {
        let failed = std::cell::Cell::new(false);
        let piece = integrate(
            |s| match spec.bound.integral(s, t1) {
                Ok(phi) => (2.0 * phi).exp(),
                Err(_) => {
                    failed.set(true);
                    0.0
                }
            },
            t0,
            t1,
            1e-15 * h,
        )?;
        if failed.get() {
            return Err(Error::Quadrature("inner integral of the bound failed".into()));
        }
        g = (2.0 * spec.bound.integral(t0, t1)?).exp() * g + piece;
        best = best.max(g);
        t0 = t1;
    }
    Ok(best)
}

/// Constants for competing particle systems: `T` for named particles with
/// nonincreasing drifts and unit volatilities, `T sup σ²` for ranked ones.
pub fn tci_constant_cbp(kind: Coordinates, coeffs: &RankCoefficients, horizon: f64) -> Result<f64> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    match kind {
        Coordinates::Named => {
            if !validate_coefficients(coeffs).nonincreasing_drifts {
                return Err(Error::Hypothesis("named particles need nonincreasing drifts g_1 ≥ g_2 ≥ …".into()));
            }
            if coeffs.sigmas().iter().any(|&s| s != 1.0) {
                return Err(Error::Hypothesis("named particles need unit volatilities σ ≡ 1".into()));
            }
            Ok(horizon)
        }
        Coordinates::Ranked => Ok(horizon * coeffs.sup_sigma_sq()),
    }
}

/// A system the harness can verify.
#[derive(Debug, Clone)]
pub enum System {
    Reflected(ReflectedDiffusion),
    /// Named competing particles.
    Named { coeffs: RankCoefficients, start: Vec<f64> },
    /// Ranked competing particles, simulated as the reflected diffusion in
    /// the wedge.
    Ranked { coeffs: RankCoefficients, start: Vec<f64> },
    /// Finite truncation of an infinite named system.
    Truncated(Truncation),
}

enum Engine {
    Reflected(ReflectedDiffusion),
    Named(NamedSystem),
}

impl Engine {
    fn dynamics(&self) -> &dyn Dynamics {
        match self {
            Self::Reflected(r) => r,
            Self::Named(n) => n,
        }
    }
}

/// Everything the harness needs about a validated system.
pub struct Prepared {
    engine: Engine,
    pub constant: f64,
    pub norm_a: f64,
    pub bound: OneSidedBound,
    /// Leading coordinates entering transport costs.
    pub observed: usize,
}

impl Prepared {
    pub fn dynamics(&self) -> &dyn Dynamics {
        self.engine.dynamics()
    }
    pub fn dim(&self) -> usize {
        self.dynamics().dim()
    }
}

impl System {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Reflected(_) => "reflected",
            Self::Named { .. } => "named",
            Self::Ranked { .. } => "ranked",
            Self::Truncated(_) => "truncated-infinite",
        }
    }

    /// Check hypotheses and compute the constant on `[0, horizon]`.
    pub fn prepare(&self, horizon: f64) -> Result<Prepared> {
        match self {
            Self::Reflected(r) => {
                let bound = r.drift().bound().clone();
                let lip = one_sided_lipschitz_check(r.drift(), r.domain(), horizon, 1000, 10.0, 0x4c495053)?;
                if lip.max_violation > 1e-9 {
                    return Err(Error::Lipschitz { constant: f64::NAN, violations: 1, pairs: lip.pairs });
                }
                let norm_a = r.diffusion().opnorm();
                let constant = tci_constant(&TciConstantSpec::new(norm_a, bound.clone(), horizon)?)?;
                Ok(Prepared { engine: Engine::Reflected(r.clone()), constant, norm_a, bound, observed: r.domain().dim() })
            }
            Self::Named { coeffs, start } => {
                let constant = tci_constant_cbp(Coordinates::Named, coeffs, horizon)?;
                let sys = NamedSystem::new(coeffs.clone(), start.clone())?;
                let n = start.len();
                Ok(Prepared { engine: Engine::Named(sys), constant, norm_a: 1.0, bound: OneSidedBound::Constant(0.0), observed: n })
            }
            Self::Ranked { coeffs, start } => {
                if !validate_coefficients(coeffs).strong_uniqueness {
                    return Err(Error::Hypothesis(
                        "ranked volatilities violate the concavity condition σ_n² ≥ ½(σ_{n−1}² + σ_{n+1}²)".into(),
                    ));
                }
                let sys = crate::particles::ranked_reflected_system(coeffs, start)?;
                let constant = tci_constant_cbp(Coordinates::Ranked, coeffs, horizon)?;
                let norm_a = sys.diffusion().opnorm();
                Ok(Prepared {
                    engine: Engine::Reflected(sys),
                    constant,
                    norm_a,
                    bound: OneSidedBound::Constant(0.0),
                    observed: start.len(),
                })
            }
            Self::Truncated(t) => {
                t.validate()?;
                if t.coordinates != Coordinates::Named {
                    return Err(Error::InvalidArgument("truncated systems are verified in named coordinates".into()));
                }
                let constant = tci_constant_cbp(Coordinates::Named, &t.coeffs, horizon)?;
                Ok(Prepared {
                    engine: Engine::Named(t.system()?),
                    constant,
                    norm_a: 1.0,
                    bound: OneSidedBound::Constant(0.0),
                    observed: t.observed,
                })
            }
        }
    }
}

/// Run parameters of the harness.
#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub horizon: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    /// Sample size `M` of the optional empirical `W_2` diagnostic (run at
    /// `M` and `2M`).
    pub w2_paths: Option<usize>,
    pub exact_cap: usize,
    pub epsilon_ladder: Vec<f64>,
    pub sinkhorn_max_iter: usize,
}

impl VerifyOptions {
    pub fn new(horizon: f64, dt: f64, paths: usize, seed: u64) -> Self {
        Self {
            horizon,
            dt,
            paths,
            seed,
            w2_paths: None,
            exact_cap: EXACT_CAP,
            epsilon_ladder: EPSILON_LADDER.to_vec(),
            sinkhorn_max_iter: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GronwallSummary {
    pub points: usize,
    pub violations: usize,
    pub fraction_violating: f64,
    pub max_excess: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct W2Trend {
    pub paths: Vec<usize>,
    pub values: Vec<f64>,
    pub solver: &'static str,
    /// `√(2CH)`
    pub bound: f64,
    /// The larger sample is below the bound or no larger than the smaller one.
    pub consistent: bool,
}

/// Results for one perturbation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaCheck {
    pub gamma_id: usize,
    pub entropy: f64,
    /// Monte Carlo `E‖X − X′‖²_sup`.
    pub coupling_cost: f64,
    pub coupling_stderr: f64,
    /// `2CH`
    pub rhs: f64,
    pub margin: f64,
    pub statistical_slack: f64,
    pub discretization_slack: f64,
    pub pass: bool,
    pub gronwall: GronwallSummary,
    pub reflection: ReflectionSignSummary,
    pub w2: Option<W2Trend>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReflectionSignSummary {
    pub push_steps: usize,
    pub violations: usize,
    pub max_value: Option<f64>,
}

impl From<ReflectionSignReport> for ReflectionSignSummary {
    fn from(r: ReflectionSignReport) -> Self {
        Self {
            push_steps: r.push_steps,
            violations: r.violations,
            max_value: (r.push_steps > 0).then_some(r.max_value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TciReport {
    pub schema_version: u32,
    pub scenario: String,
    pub system: String,
    pub horizon: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    pub constant: f64,
    pub norm_a: f64,
    pub checks: Vec<GammaCheck>,
    pub pass: bool,
}

pub const CSV_HEADER: &str = "scenario,gamma_id,C,H,lhs,rhs,margin,verdict";

impl TciReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// CSV rows without the header.
    pub fn write_csv_rows<W: Write>(&self, mut w: W) -> Result<()> {
        for c in &self.checks {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                self.scenario,
                c.gamma_id,
                self.constant,
                c.entropy,
                c.coupling_cost,
                c.rhs,
                c.margin,
                if c.pass { "pass" } else { "fail" }
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = Vec::new();
        writeln!(out, "{CSV_HEADER}")?;
        self.write_csv_rows(&mut out)?;
        Ok(String::from_utf8(out).expect("ascii"))
    }
}

struct PairSummary {
    sup_sq: f64,
    violations: usize,
    max_excess: f64,
    sign: ReflectionSignReport,
}

fn sup_sq_leading(x: &Trace, xr: &Trace, dim: usize, observed: usize) -> f64 {
    x.states
        .chunks_exact(dim)
        .zip(xr.states.chunks_exact(dim))
        .map(|(a, b)| a[..observed].iter().zip(&b[..observed]).map(|(u, v)| (u - v) * (u - v)).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Check `E‖X − X′‖²_sup ≤ 2CH` for every perturbation, together with the
/// pathwise bound and the sign of the boundary pushes.
pub fn verify_tci(
    scenario: &str,
    system: &System,
    gammas: &[DriftPerturbation],
    opts: &VerifyOptions,
) -> Result<TciReport> {
    let prepared = system.prepare(opts.horizon)?;
    let grid = TimeGrid::new(opts.horizon, opts.dt)?;
    let dim = prepared.dim();
    let mut checks = Vec::with_capacity(gammas.len());
    for (id, gamma) in gammas.iter().enumerate() {
        if !gamma.is_deterministic() {
            return Err(Error::InvalidArgument(format!(
                "perturbation {id} depends on the state; exact entropy needs a deterministic one"
            )));
        }
        if gamma.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: gamma.dim() });
        }
        checks.push(check_gamma(id, &prepared, gamma, grid, opts)?);
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(TciReport {
        schema_version: SCHEMA_VERSION,
        scenario: scenario.to_string(),
        system: system.kind().to_string(),
        horizon: opts.horizon,
        dt: opts.dt,
        paths: opts.paths,
        seed: opts.seed,
        constant: prepared.constant,
        norm_a: prepared.norm_a,
        checks,
        pass,
    })
}

fn check_gamma(
    id: usize,
    prepared: &Prepared,
    gamma: &DriftPerturbation,
    grid: TimeGrid,
    opts: &VerifyOptions,
) -> Result<GammaCheck> {
    let dynamics = prepared.dynamics();
    let dim = prepared.dim();
    let observed = prepared.observed;
    let seed = derive_seed(opts.seed, id as u64);
    let entropy = transport::relative_entropy_drift(gamma, opts.horizon, EntropyMode::Deterministic)?.value;
    let gronwall = GronwallBound::new(gamma, &prepared.bound, grid, |g| dynamics.shift_norm(g))?;
    let summaries = dynamics::map_coupled(dynamics, grid, seed, 0..opts.paths, gamma, |x, xr| {
        let (violations, max_excess) = gronwall.evaluate(x, xr, dim);
        PairSummary {
            sup_sq: sup_sq_leading(x, xr, dim, observed),
            violations,
            max_excess,
            sign: reflection_sign_trace(x, xr, dim),
        }
    })?;
    let costs: Vec<f64> = summaries.iter().map(|s| s.sup_sq).collect();
    let (coupling_cost, coupling_stderr) = if costs.len() > 1 { mean_and_stderr(&costs) } else { (costs.first().copied().unwrap_or(0.0), 0.0) };
    let rhs = 2.0 * prepared.constant * entropy;
    let statistical_slack = 3.0 * coupling_stderr;
    let discretization_slack = gronwall.slack;
    let margin = rhs - coupling_cost;
    let points = opts.paths * (grid.steps + 1);
    let violations: usize = summaries.iter().map(|s| s.violations).sum();
    let sign = summaries.iter().fold(ReflectionSignReport::empty(), |acc, s| acc.merge(s.sign));
    let w2 = match opts.w2_paths {
        Some(m) => Some(w2_trend(prepared, gamma, grid, seed, m, (2.0 * rhs).sqrt() / 2f64.sqrt(), opts)?),
        None => None,
    };
    Ok(GammaCheck {
        gamma_id: id,
        entropy,
        coupling_cost,
        coupling_stderr,
        rhs,
        margin,
        statistical_slack,
        discretization_slack,
        pass: margin >= -(statistical_slack + discretization_slack),
        gronwall: GronwallSummary {
            points,
            violations,
            fraction_violating: violations as f64 / points.max(1) as f64,
            max_excess: summaries.iter().map(|s| s.max_excess).fold(f64::NEG_INFINITY, f64::max),
            slack: gronwall.slack,
        },
        reflection: sign.into(),
        w2,
    })
}

/// Empirical `W_2` between independent samples of the unperturbed and the
/// perturbed law at `m` and `2m` paths.
fn w2_trend(
    prepared: &Prepared,
    gamma: &DriftPerturbation,
    grid: TimeGrid,
    seed: u64,
    m: usize,
    bound: f64,
    opts: &VerifyOptions,
) -> Result<W2Trend> {
    let dynamics = prepared.dynamics();
    let mut values = Vec::new();
    let mut solver = "exact";
    for (k, size) in [m, 2 * m].into_iter().enumerate() {
        let base = 16 + 2 * k as u64;
        let p = dynamics::simulate_bundle(dynamics, grid, size, derive_seed(seed, base), None)?.0;
        let q = dynamics::simulate_bundle(dynamics, grid, size, derive_seed(seed, base + 1), Some(gamma))?.0;
        let p = EmpiricalMeasure::from_bundle(&p.leading_coordinates(prepared.observed)?)?;
        let q = EmpiricalMeasure::from_bundle(&q.leading_coordinates(prepared.observed)?)?;
        let w = if size <= opts.exact_cap {
            transport::wasserstein_exact_capped(&p, &q, 2.0, opts.exact_cap)?.0
        } else {
            solver = "entropic";
            transport::wasserstein_entropic_ladder(&p, &q, 2.0, &opts.epsilon_ladder, opts.sinkhorn_max_iter)?.value
        };
        values.push(w);
    }
    let consistent = values[1] <= bound || values[1] <= values[0];
    Ok(W2Trend { paths: vec![m, 2 * m], values, solver, bound, consistent })
}

type PathFn = Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>;

/// Scalar functional of a path with its Lipschitz constant under the
/// sup-norm.
#[derive(Clone)]
pub enum PathFunctional {
    /// Coordinate `coord` at the final time, `L = 1`.
    Terminal { coord: usize },
    /// `max_t` of coordinate `coord`, `L = 1`.
    RunningMax { coord: usize },
    /// A constant, `L = 0`.
    Constant(f64),
    Custom { f: PathFn, lipschitz: f64 },
}

impl std::fmt::Debug for PathFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Terminal { coord } => write!(f, "Terminal({coord})"),
            Self::RunningMax { coord } => write!(f, "RunningMax({coord})"),
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::Custom { lipschitz, .. } => write!(f, "Custom(L = {lipschitz})"),
        }
    }
}

impl PathFunctional {
    pub fn custom(lipschitz: f64, f: impl Fn(&[f64], usize) -> f64 + Send + Sync + 'static) -> Self {
        Self::Custom { f: Arc::new(f), lipschitz }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            Self::Terminal { .. } | Self::RunningMax { .. } => 1.0,
            Self::Constant(_) => 0.0,
            Self::Custom { lipschitz, .. } => *lipschitz,
        }
    }

    /// Evaluate on a flat time-major path of dimension `dim`.
    pub fn eval(&self, path: &[f64], dim: usize) -> f64 {
        match self {
            Self::Terminal { coord } => path[path.len() - dim + coord],
            Self::RunningMax { coord } => path.chunks_exact(dim).map(|x| x[*coord]).fold(f64::NEG_INFINITY, f64::max),
            Self::Constant(c) => *c,
            Self::Custom { f, .. } => f(path, dim),
        }
    }

    fn coord(&self) -> Option<usize> {
        match self {
            Self::Terminal { coord } | Self::RunningMax { coord } => Some(*coord),
            _ => None,
        }
    }
}

/// `|f(x) − f(y)| ≤ L‖x − y‖_sup` on consecutive pairs of the given paths.
pub fn verify_lipschitz(functional: &PathFunctional, paths: &[Vec<f64>], dim: usize) -> Result<usize> {
    let l = functional.lipschitz();
    let mut violations = 0;
    let mut pairs = 0;
    for w in paths.windows(2) {
        let d = transport::path_sup_distance(&w[0], &w[1], dim)?;
        let gap = (functional.eval(&w[0], dim) - functional.eval(&w[1], dim)).abs();
        pairs += 1;
        if gap > l * d + 1e-12 * (1.0 + gap) {
            violations += 1;
        }
    }
    if violations > 0 {
        return Err(Error::Lipschitz { constant: l, violations, pairs });
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailRow {
    pub r: f64,
    pub exceed: usize,
    pub empirical: f64,
    pub lower: f64,
    pub upper: f64,
    /// `exp(−r²/(2CL²))`
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationTable {
    pub constant: f64,
    pub lipschitz: f64,
    pub mean: f64,
    pub paths: usize,
    pub lipschitz_pairs: usize,
    pub rows: Vec<TailRow>,
    pub pass: bool,
}

impl ConcentrationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("r,exceed,empirical,lower,upper,bound,verdict\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.r,
                r.exceed,
                r.empirical,
                r.lower,
                r.upper,
                r.bound,
                if r.pass { "pass" } else { "fail" }
            ));
        }
        s
    }
}

/// Gaussian tail bound `exp(−r²/(2CL²))`; for `L = 0` the limit, which
/// vanishes for every `r > 0`.
pub fn gaussian_tail_bound(r: f64, constant: f64, lipschitz: f64) -> f64 {
    if lipschitz == 0.0 {
        return if r > 0.0 { 0.0 } else { 1.0 };
    }
    (-r * r / (2.0 * constant * lipschitz * lipschitz)).exp()
}

/// Empirical `P(f ≥ E f + r)` on the grid `r_grid` against the Gaussian
/// bound implied by the system's constant.
pub fn concentration_tail(
    system: &System,
    functional: &PathFunctional,
    r_grid: &[f64],
    horizon: f64,
    dt: f64,
    paths: usize,
    seed: u64,
) -> Result<ConcentrationTable> {
    let prepared = system.prepare(horizon)?;
    let dim = prepared.dim();
    if let Some(c) = functional.coord() {
        if c >= prepared.observed {
            return Err(Error::InvalidArgument(format!("coordinate {c} is not observed")));
        }
    }
    if paths < 2 {
        return Err(Error::InvalidArgument("need at least two paths".into()));
    }
    let grid = TimeGrid::new(horizon, dt)?;
    // keep a few hundred full paths for the Lipschitz check
    let kept = paths.min(512);
    let head = dynamics::map_paths(prepared.dynamics(), grid, seed, 0..kept, None, |t| {
        (functional.eval(&t.states, dim), t.states.clone())
    })?;
    let tail = dynamics::map_paths(prepared.dynamics(), grid, seed, kept..paths, None, |t| {
        functional.eval(&t.states, dim)
    })?;
    let (mut values, sample): (Vec<f64>, Vec<Vec<f64>>) = head.into_iter().unzip();
    values.extend(tail);
    let lipschitz_pairs = verify_lipschitz(functional, &sample, dim)?;
    let (mean, _) = mean_and_stderr(&values);
    let l = functional.lipschitz();
    let rows: Vec<TailRow> = r_grid
        .iter()
        .map(|&r| {
            let exceed = values.iter().filter(|&&v| v >= mean + r).count();
            let (lower, upper) = wilson_interval(exceed, paths, TAIL_Z);
            let bound = gaussian_tail_bound(r, prepared.constant, l);
            let pass = if bound == 0.0 { exceed == 0 } else { upper <= bound };
            TailRow { r, exceed, empirical: exceed as f64 / paths as f64, lower, upper, bound, pass }
        })
        .collect();
    let pass = rows.iter().all(|r| r.pass);
    Ok(ConcentrationTable { constant: prepared.constant, lipschitz: l, mean, paths, lipschitz_pairs, rows, pass })
}

/// Coupling cost of a bundle pair, for callers holding full paths.
pub fn coupling_cost(x: &PathBundle, xr: &PathBundle) -> Result<(f64, f64)> {
    if x.dim() != xr.dim() || x.grid() != xr.grid() || x.num_paths() != xr.num_paths() {
        return Err(Error::InvalidArgument("coupled bundles must share shape and grid".into()));
    }
    let costs: Vec<f64> = x
        .paths()
        .zip(xr.paths())
        .map(|(a, b)| transport::path_sup_distance(a, b, x.dim()).map(|d| d * d))
        .collect::<Result<_>>()?;
    Ok(mean_and_stderr(&costs))
}

/// Euclidean norm of `A^{1/2}γ` as applied by the prepared system.
pub fn shift_norm(prepared: &Prepared, gamma: &[f64]) -> f64 {
    let n = prepared.dynamics().shift_norm(gamma);
    debug_assert!(n <= prepared.norm_a.sqrt() * norm(gamma) * (1.0 + 1e-12) + 1e-300);
    n
}
