//! Normally reflected diffusions in convex polyhedra, simulated by projected
//! Euler steps, and the synchronous coupling of an unperturbed and a
//! drift-perturbed copy.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::bundle::{BundleFile, PathBundle, TimeGrid};
use crate::domain::{dot, norm, PolyhedralDomain};
use crate::dynamics::{self, Dynamics, Trace, Workspace};
use crate::error::{Error, Result};
use crate::quadrature::integrate;
use crate::rng::path_rng;

/// Tolerance for the sign of boundary pushes against the coupled partner.
pub const REFLECTION_SIGN_TOL: f64 = 1e-9;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type FieldFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
type CurveFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

/// An integrable `F(t)` with `(g(t,x) − g(t,y))·(x − y) ≤ F(t)‖x − y‖²`.
#[derive(Clone)]
pub enum OneSidedBound {
    Constant(f64),
    /// `values[i]` on `[knots[i], knots[i+1])`; the last value continues.
    Piecewise { knots: Vec<f64>, values: Vec<f64> },
    Function(ScalarFn),
}

impl fmt::Debug for OneSidedBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::Piecewise { knots, values } => {
                f.debug_struct("Piecewise").field("knots", knots).field("values", values).finish()
            }
            Self::Function(_) => f.write_str("Function(..)"),
        }
    }
}

impl OneSidedBound {
    pub fn piecewise(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.is_empty() || knots.len() != values.len() {
            return Err(Error::InvalidArgument("piecewise bound needs one value per knot".into()));
        }
        if knots[0] > 0.0 || knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("knots must start at or before 0 and increase".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("piecewise values must be finite".into()));
        }
        Ok(Self::Piecewise { knots, values })
    }

    pub fn function(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::Function(Arc::new(f))
    }

    pub fn at(&self, t: f64) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::Piecewise { knots, values } => {
                let i = knots.partition_point(|&k| k <= t).saturating_sub(1);
                values[i]
            }
            Self::Function(f) => f(t),
        }
    }

    /// `∫_a^b F(u) du`
    pub fn integral(&self, a: f64, b: f64) -> Result<f64> {
        match self {
            Self::Constant(c) => Ok(c * (b - a)),
            Self::Piecewise { .. } => Ok(self.piecewise_integral(a, b, |v| v)),
            Self::Function(f) => integrate(|u| f(u), a, b, 1e-13),
        }
    }

    /// `∫_a^b |F(u)| du`
    pub fn abs_integral(&self, a: f64, b: f64) -> Result<f64> {
        match self {
            Self::Constant(c) => Ok(c.abs() * (b - a)),
            Self::Piecewise { .. } => Ok(self.piecewise_integral(a, b, f64::abs)),
            Self::Function(f) => integrate(|u| f(u).abs(), a, b, 1e-13),
        }
    }

    fn piecewise_integral(&self, a: f64, b: f64, map: impl Fn(f64) -> f64) -> f64 {
        let Self::Piecewise { knots, values } = self else { unreachable!() };
        if b < a {
            return -self.piecewise_integral(b, a, map);
        }
        let mut total = 0.0;
        for i in 0..knots.len() {
            let lo = knots[i].max(a);
            let hi = knots.get(i + 1).copied().unwrap_or(f64::INFINITY).min(b);
            if hi > lo {
                total += map(values[i]) * (hi - lo);
            }
        }
        // before the first knot the first value applies
        if a < knots[0] {
            total += map(values[0]) * (knots[0].min(b) - a);
        }
        total
    }
}

#[derive(Clone)]
enum DriftKind {
    Constant(Vec<f64>),
    /// `g(x) = B x + c`, `B` row-major.
    Linear { matrix: Vec<f64>, offset: Vec<f64> },
    Custom(FieldFn),
}

/// Drift vector field `g(t, x)` with its claimed one-sided Lipschitz bound.
#[derive(Clone)]
pub struct DriftField {
    dim: usize,
    kind: DriftKind,
    bound: OneSidedBound,
}

impl fmt::Debug for DriftField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            DriftKind::Constant(g) => format!("Constant({g:?})"),
            DriftKind::Linear { .. } => "Linear".to_string(),
            DriftKind::Custom(_) => "Custom".to_string(),
        };
        f.debug_struct("DriftField")
            .field("dim", &self.dim)
            .field("kind", &kind)
            .field("bound", &self.bound)
            .finish()
    }
}

impl DriftField {
    /// Constant drift, `F ≡ 0`.
    pub fn constant(g: Vec<f64>) -> Self {
        Self { dim: g.len(), kind: DriftKind::Constant(g), bound: OneSidedBound::Constant(0.0) }
    }

    /// `g(x) = B x + c` with `F` the largest eigenvalue of `(B + Bᵀ)/2`.
    pub fn linear(matrix: Vec<Vec<f64>>, offset: Vec<f64>) -> Result<Self> {
        let d = offset.len();
        if matrix.len() != d || matrix.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, found: matrix.len() });
        }
        let b = DMatrix::from_fn(d, d, |i, j| matrix[i][j]);
        let sym = (&b + b.transpose()) * 0.5;
        let top = sym.symmetric_eigenvalues().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            dim: d,
            kind: DriftKind::Linear { matrix: matrix.concat(), offset },
            bound: OneSidedBound::Constant(top),
        })
    }

    pub fn custom(
        dim: usize,
        bound: OneSidedBound,
        f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self { dim, kind: DriftKind::Custom(Arc::new(f)), bound }
    }

    /// Replace the claimed bound.
    pub fn with_bound(mut self, bound: OneSidedBound) -> Self {
        self.bound = bound;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bound(&self) -> &OneSidedBound {
        &self.bound
    }

    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            DriftKind::Constant(g) => out.copy_from_slice(g),
            DriftKind::Linear { matrix, offset } => {
                let d = self.dim;
                for i in 0..d {
                    out[i] = offset[i] + dot(&matrix[i * d..(i + 1) * d], x);
                }
            }
            DriftKind::Custom(f) => f(t, x, out),
        }
    }
}

/// Constant symmetric positive-definite covariance `A` with its square root.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionMatrix {
    dim: usize,
    matrix: Vec<f64>,
    sqrt: Vec<f64>,
    opnorm: f64,
}

impl DiffusionMatrix {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("covariance must be a nonempty square matrix".into()));
        }
        let a = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
        let scale = a.amax().max(1.0);
        if (&a - a.transpose()).amax() > 1e-12 * scale || a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("covariance must be finite and symmetric".into()));
        }
        let eig = a.clone().symmetric_eigen();
        let min = eig.eigenvalues.min();
        if !(min > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "covariance must be positive definite (smallest eigenvalue {min})"
            )));
        }
        let roots = eig.eigenvalues.map(f64::sqrt);
        let sqrt = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
        let row_major = |m: &DMatrix<f64>| (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
        Ok(Self { dim: d, matrix: row_major(&a), sqrt: row_major(&sqrt), opnorm: eig.eigenvalues.max() })
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = vec![0.0; dim * dim];
        (0..dim).for_each(|i| m[i * dim + i] = 1.0);
        Self { dim, matrix: m.clone(), sqrt: m, opnorm: 1.0 }
    }

    pub fn diagonal(entries: &[f64]) -> Result<Self> {
        let d = entries.len();
        if d == 0 || entries.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("diagonal covariance needs positive entries".into()));
        }
        let mut m = vec![0.0; d * d];
        let mut s = vec![0.0; d * d];
        for (i, &v) in entries.iter().enumerate() {
            m[i * d + i] = v;
            s[i * d + i] = v.sqrt();
        }
        Ok(Self { dim: d, matrix: m, sqrt: s, opnorm: entries.iter().copied().fold(0.0, f64::max) })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `‖A‖`, the largest eigenvalue.
    pub fn opnorm(&self) -> f64 {
        self.opnorm
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.dim + j]
    }

    pub fn sqrt_entry(&self, i: usize, j: usize) -> f64 {
        self.sqrt[i * self.dim + j]
    }

    /// `out = A^{1/2} v`
    pub fn apply_sqrt(&self, v: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (o, row) in out.iter_mut().zip(self.sqrt.chunks_exact(d)) {
            *o = dot(row, v);
        }
    }
}

#[derive(Clone)]
enum GammaKind {
    Constant(Vec<f64>),
    Deterministic(CurveFn),
    Adapted(FieldFn),
}

/// Extra drift `γ` added to the driving Brownian motion. Deterministic
/// perturbations (depending on time only) have exactly computable entropy.
#[derive(Clone)]
pub struct DriftPerturbation {
    dim: usize,
    kind: GammaKind,
}

impl fmt::Debug for DriftPerturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            GammaKind::Constant(c) => write!(f, "DriftPerturbation::Constant({c:?})"),
            GammaKind::Deterministic(_) => write!(f, "DriftPerturbation::Deterministic(dim {})", self.dim),
            GammaKind::Adapted(_) => write!(f, "DriftPerturbation::Adapted(dim {})", self.dim),
        }
    }
}

impl DriftPerturbation {
    pub fn constant(gamma: Vec<f64>) -> Self {
        Self { dim: gamma.len(), kind: GammaKind::Constant(gamma) }
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(vec![0.0; dim])
    }

    pub fn deterministic(dim: usize, f: impl Fn(f64, &mut [f64]) + Send + Sync + 'static) -> Self {
        Self { dim, kind: GammaKind::Deterministic(Arc::new(f)) }
    }

    pub fn adapted(dim: usize, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self { dim, kind: GammaKind::Adapted(Arc::new(f)) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self.kind, GammaKind::Adapted(_))
    }

    pub fn is_zero(&self) -> bool {
        matches!(&self.kind, GammaKind::Constant(c) if c.iter().all(|v| *v == 0.0))
    }

    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            GammaKind::Constant(c) => out.copy_from_slice(c),
            GammaKind::Deterministic(f) => f(t, out),
            GammaKind::Adapted(f) => f(t, x, out),
        }
    }

    /// `γ(t)` for a deterministic perturbation.
    pub fn at(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        match &self.kind {
            GammaKind::Constant(c) => out.copy_from_slice(c),
            GammaKind::Deterministic(f) => f(t, &mut out),
            GammaKind::Adapted(_) => {
                return Err(Error::InvalidArgument("perturbation depends on the state".into()))
            }
        }
        Ok(out)
    }

    /// `∫_a^b ‖γ(t)‖² dt` for a deterministic perturbation.
    pub fn square_integral(&self, a: f64, b: f64) -> Result<f64> {
        match &self.kind {
            GammaKind::Constant(c) => Ok(dot(c, c) * (b - a)),
            GammaKind::Deterministic(f) => {
                let dim = self.dim;
                let sq = |t: f64| {
                    let mut out = vec![0.0; dim];
                    f(t, &mut out);
                    dot(&out, &out)
                };
                integrate(sq, a, b, 1e-15)
            }
            GammaKind::Adapted(_) => {
                Err(Error::InvalidArgument("perturbation depends on the state".into()))
            }
        }
    }

    /// `max ‖γ(t)‖` over grid times and midpoints.
    pub fn sup_norm(&self, grid: TimeGrid) -> Result<f64> {
        if let GammaKind::Constant(c) = &self.kind {
            return Ok(norm(c));
        }
        let mut best: f64 = 0.0;
        for j in 0..=2 * grid.steps {
            best = best.max(norm(&self.at(0.5 * j as f64 * grid.dt)?));
        }
        Ok(best)
    }
}

/// Reflected diffusion `dZ = g(t,Z)dt + A^{1/2}dB + n dℓ` in a polyhedron.
#[derive(Debug, Clone)]
pub struct ReflectedDiffusion {
    domain: PolyhedralDomain,
    drift: DriftField,
    diffusion: DiffusionMatrix,
    start: Vec<f64>,
}

impl ReflectedDiffusion {
    pub fn new(
        domain: PolyhedralDomain,
        drift: DriftField,
        diffusion: DiffusionMatrix,
        start: Vec<f64>,
    ) -> Result<Self> {
        let d = domain.dim();
        for found in [drift.dim(), diffusion.dim(), start.len()] {
            if found != d {
                return Err(Error::DimensionMismatch { expected: d, found });
            }
        }
        let violation = domain.violation(&start);
        if violation > crate::domain::FEASIBILITY_TOL {
            return Err(Error::OutsideDomain { violation });
        }
        Ok(Self { domain, drift, diffusion, start })
    }

    pub fn domain(&self) -> &PolyhedralDomain {
        &self.domain
    }
    pub fn drift(&self) -> &DriftField {
        &self.drift
    }
    pub fn diffusion(&self) -> &DiffusionMatrix {
        &self.diffusion
    }
}

impl Dynamics for ReflectedDiffusion {
    fn dim(&self) -> usize {
        self.start.len()
    }

    fn start(&self) -> &[f64] {
        &self.start
    }

    fn step(
        &self,
        t: f64,
        dt: f64,
        state: &mut [f64],
        noise: &[f64],
        shift: Option<&[f64]>,
        ws: &mut Workspace,
    ) -> Result<f64> {
        let d = state.len();
        ws.drift.resize(d, 0.0);
        ws.tmp.resize(2 * d, 0.0);
        self.drift.eval(t, state, &mut ws.drift);
        let sq = dt.sqrt();
        let (incr, scaled) = ws.tmp.split_at_mut(d);
        for k in 0..d {
            incr[k] = sq * noise[k];
        }
        if let Some(sh) = shift {
            for k in 0..d {
                incr[k] += sh[k];
            }
        }
        self.diffusion.apply_sqrt(incr, scaled);
        for k in 0..d {
            state[k] += ws.drift[k] * dt + scaled[k];
        }
        // keep the unprojected point for the push direction
        incr.copy_from_slice(state);
        let push = self.domain.project_in_place(state, &mut ws.projection)?;
        if push > 0.0 {
            ws.normal.resize(d, 0.0);
            self.domain.push_direction(state, incr, &mut ws.normal);
        }
        Ok(push)
    }

    fn shift_norm(&self, gamma: &[f64]) -> f64 {
        let mut out = vec![0.0; gamma.len()];
        self.diffusion.apply_sqrt(gamma, &mut out);
        norm(&out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalRecord {
    pub path: usize,
    /// Grid index of the projected point.
    pub step: usize,
    pub normal: Vec<f64>,
}

/// Reflected sample paths with local time and the push directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectedPath {
    pub path: PathBundle,
    /// `M·(n + 1)` values, path-major.
    pub localtime: Vec<f64>,
    pub normals: Vec<NormalRecord>,
}

impl ReflectedPath {
    fn from_traces(dim: usize, grid: TimeGrid, seed: u64, traces: &[Trace]) -> Result<Self> {
        let path = dynamics::assemble(dim, grid, seed, traces)?;
        let localtime = traces.iter().flat_map(|t| t.localtime.iter().copied()).collect();
        let mut normals = Vec::new();
        for (p, t) in traces.iter().enumerate() {
            for (i, &step) in t.push_steps.iter().enumerate() {
                normals.push(NormalRecord { path: p, step, normal: t.normal(i, dim).to_vec() });
            }
        }
        Ok(Self { path, localtime, normals })
    }

    pub fn localtime_of(&self, path: usize) -> &[f64] {
        let n = self.path.steps() + 1;
        &self.localtime[path * n..(path + 1) * n]
    }

    pub fn to_file(&self) -> BundleFile {
        BundleFile { bundle: self.path.clone(), localtime: Some(self.localtime.clone()) }
    }
}

pub fn simulate_reflected(
    system: &ReflectedDiffusion,
    horizon: f64,
    dt: f64,
    paths: usize,
    seed: u64,
) -> Result<ReflectedPath> {
    let grid = TimeGrid::new(horizon, dt)?;
    let (_, traces) = dynamics::simulate_bundle(system, grid, paths, seed, None)?;
    ReflectedPath::from_traces(system.dim(), grid, seed, &traces)
}

/// Paths `X` (perturbed by `A^{1/2}γ`) and `X′` (unperturbed) driven by the
/// same Gaussian increments.
pub fn simulate_coupled_pair(
    system: &ReflectedDiffusion,
    gamma: &DriftPerturbation,
    horizon: f64,
    dt: f64,
    paths: usize,
    seed: u64,
) -> Result<(ReflectedPath, ReflectedPath)> {
    let grid = TimeGrid::new(horizon, dt)?;
    let pairs = dynamics::map_coupled(system, grid, seed, 0..paths, gamma, |x, xr| (x.clone(), xr.clone()))?;
    let (xs, xrs): (Vec<Trace>, Vec<Trace>) = pairs.into_iter().unzip();
    Ok((
        ReflectedPath::from_traces(system.dim(), grid, seed, &xs)?,
        ReflectedPath::from_traces(system.dim(), grid, seed, &xrs)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LipschitzReport {
    pub pairs: usize,
    /// `max (g(t,x) − g(t,y))·(x − y) − F(t)‖x − y‖²` over the sample.
    pub max_violation: f64,
}

/// Spot-check the claimed one-sided bound on random `(t, x, y)` with `x, y`
/// drawn from the domain near its witness.
pub fn one_sided_lipschitz_check(
    drift: &DriftField,
    domain: &PolyhedralDomain,
    horizon: f64,
    num_pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<LipschitzReport> {
    if drift.dim() != domain.dim() {
        return Err(Error::DimensionMismatch { expected: domain.dim(), found: drift.dim() });
    }
    let xs = domain.sample_points(num_pairs, radius, seed)?;
    let ys = domain.sample_points(num_pairs, radius, seed ^ 0x5555_5555)?;
    let mut rng = path_rng(seed, u64::MAX - 1);
    let d = drift.dim();
    let (mut gx, mut gy) = (vec![0.0; d], vec![0.0; d]);
    let mut worst = f64::NEG_INFINITY;
    for (x, y) in xs.iter().zip(&ys) {
        let t = horizon * rng.random::<f64>();
        drift.eval(t, x, &mut gx);
        drift.eval(t, y, &mut gy);
        let lhs: f64 = (0..d).map(|k| (gx[k] - gy[k]) * (x[k] - y[k])).sum();
        let sq: f64 = (0..d).map(|k| (x[k] - y[k]).powi(2)).sum();
        worst = worst.max(lhs - drift.bound().at(t) * sq);
    }
    Ok(LipschitzReport { pairs: num_pairs, max_violation: if num_pairs == 0 { 0.0 } else { worst } })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ReflectionSignReport {
    pub push_steps: usize,
    pub violations: usize,
    /// Largest of `n·(X − X′)` over pushes of `X` and `−n′·(X − X′)` over
    /// pushes of `X′`; nonpositive when the sign condition holds.
    pub max_value: f64,
}

impl ReflectionSignReport {
    pub fn merge(self, other: Self) -> Self {
        Self {
            push_steps: self.push_steps + other.push_steps,
            violations: self.violations + other.violations,
            max_value: self.max_value.max(other.max_value),
        }
    }

    pub fn empty() -> Self {
        Self { push_steps: 0, violations: 0, max_value: f64::NEG_INFINITY }
    }
}

/// Sign of the boundary pushes of a coupled pair against their difference.
pub fn reflection_sign_trace(x: &Trace, xr: &Trace, dim: usize) -> ReflectionSignReport {
    let mut rep = ReflectionSignReport::empty();
    let diff = |j: usize| -> Vec<f64> {
        x.point(j, dim).iter().zip(xr.point(j, dim)).map(|(a, b)| a - b).collect()
    };
    for (i, &j) in x.push_steps.iter().enumerate() {
        let v = dot(x.normal(i, dim), &diff(j));
        rep.push_steps += 1;
        rep.violations += usize::from(v > REFLECTION_SIGN_TOL);
        rep.max_value = rep.max_value.max(v);
    }
    for (i, &j) in xr.push_steps.iter().enumerate() {
        let v = -dot(xr.normal(i, dim), &diff(j));
        rep.push_steps += 1;
        rep.violations += usize::from(v > REFLECTION_SIGN_TOL);
        rep.max_value = rep.max_value.max(v);
    }
    rep
}

pub fn reflection_sign_check(x: &ReflectedPath, xr: &ReflectedPath) -> Result<ReflectionSignReport> {
    let dim = x.path.dim();
    if xr.path.dim() != dim || xr.path.grid() != x.path.grid() || xr.path.num_paths() != x.path.num_paths() {
        return Err(Error::InvalidArgument("coupled paths must share shape and grid".into()));
    }
    let mut rep = ReflectionSignReport::empty();
    for (records, sign) in [(&x.normals, 1.0), (&xr.normals, -1.0)] {
        for r in records {
            let a = x.path.point(r.path, r.step);
            let b = xr.path.point(r.path, r.step);
            let v = sign * r.normal.iter().zip(a.iter().zip(b)).map(|(n, (p, q))| n * (p - q)).sum::<f64>();
            rep.push_steps += 1;
            rep.violations += usize::from(v > REFLECTION_SIGN_TOL);
            rep.max_value = rep.max_value.max(v);
        }
    }
    Ok(rep)
}

/// The pathwise bound `Y(t) ≤ ∫_0^t ‖A^{1/2}γ_s‖ exp(∫_s^t F) ds` on a grid,
/// with the numerical slack `5(1 + ‖γ‖_∞) e^{∫|F|} √dt`.
#[derive(Debug, Clone)]
pub struct GronwallBound {
    pub bound: Vec<f64>,
    pub slack: f64,
}

impl GronwallBound {
    pub fn new(
        gamma: &DriftPerturbation,
        f: &OneSidedBound,
        grid: TimeGrid,
        shift_norm: impl Fn(&[f64]) -> f64,
    ) -> Result<Self> {
        if !gamma.is_deterministic() {
            return Err(Error::InvalidArgument(
                "the pathwise bound needs a deterministic perturbation".into(),
            ));
        }
        let mut bound = Vec::with_capacity(grid.steps + 1);
        bound.push(0.0);
        let mut b = 0.0;
        for j in 0..grid.steps {
            let (t0, t1) = (grid.time(j), grid.time(j + 1));
            let grow = f.integral(t0, t1)?.exp();
            let err = std::cell::RefCell::new(None);
            let piece = integrate(
                |s| match (gamma.at(s), f.integral(s, t1)) {
                    (Ok(g), Ok(phi)) => shift_norm(&g) * phi.exp(),
                    (Err(e), _) | (_, Err(e)) => {
                        *err.borrow_mut() = Some(e);
                        0.0
                    }
                },
                t0,
                t1,
                1e-14,
            )?;
            if let Some(e) = err.into_inner() {
                return Err(e);
            }
            b = grow * b + piece;
            bound.push(b);
        }
        let c = 5.0 * (1.0 + gamma.sup_norm(grid)?) * f.abs_integral(0.0, grid.horizon())?.exp();
        Ok(Self { bound, slack: c * grid.dt.sqrt() })
    }

    /// Violations beyond slack and the largest `Y − bound` along one pair.
    pub fn evaluate(&self, x: &Trace, xr: &Trace, dim: usize) -> (usize, f64) {
        let mut violations = 0;
        let mut excess = f64::NEG_INFINITY;
        for (j, &b) in self.bound.iter().enumerate() {
            let y = crate::domain::dist(x.point(j, dim), xr.point(j, dim));
            if y > b + self.slack {
                violations += 1;
            }
            excess = excess.max(y - b);
        }
        (violations, excess)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct GronwallReport {
    pub points: usize,
    pub violations: usize,
    pub fraction_violating: f64,
    pub max_excess: f64,
    pub slack: f64,
}

/// Compare `Y(t) = ‖X(t) − X′(t)‖` with the pathwise bound on every grid point.
pub fn pathwise_gronwall_check(
    x: &ReflectedPath,
    xr: &ReflectedPath,
    gamma: &DriftPerturbation,
    f: &OneSidedBound,
    diffusion: &DiffusionMatrix,
) -> Result<GronwallReport> {
    let grid = x.path.grid();
    let gb = GronwallBound::new(gamma, f, grid, |g| {
        let mut out = vec![0.0; g.len()];
        diffusion.apply_sqrt(g, &mut out);
        norm(&out)
    })?;
    let mut violations = 0;
    let mut excess = f64::NEG_INFINITY;
    for p in 0..x.path.num_paths() {
        for (j, &b) in gb.bound.iter().enumerate() {
            let y = crate::domain::dist(x.path.point(p, j), xr.path.point(p, j));
            violations += usize::from(y > b + gb.slack);
            excess = excess.max(y - b);
        }
    }
    let points = x.path.num_paths() * (grid.steps + 1);
    Ok(GronwallReport {
        points,
        violations,
        fraction_violating: violations as f64 / points.max(1) as f64,
        max_excess: excess,
        slack: gb.slack,
    })
}
