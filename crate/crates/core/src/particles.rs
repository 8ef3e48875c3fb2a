//! Competing Brownian particles: ranking, Euler simulation of the named
//! system, the ranked/gap/local-time view, and truncations of infinite systems.
//!
//! Ranks and names are 0-based throughout: rank 0 is the lowest particle.

use std::f64::consts::FRAC_1_SQRT_2;

use serde::{Deserialize, Serialize};

use crate::bundle::{PathBundle, TimeGrid};
use crate::domain::PolyhedralDomain;
use crate::dynamics::{self, Dynamics, Workspace};
use crate::error::{Error, Result};
use crate::reflect::{DiffusionMatrix, DriftField, ReflectedDiffusion};
use crate::rng::derive_seed;
use crate::stats::wasserstein1_line;

/// Per-rank drifts and volatilities. With `tail` set, the last listed value
/// repeats for every higher rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCoefficients {
    drifts: Vec<f64>,
    sigmas: Vec<f64>,
    tail: bool,
}

impl RankCoefficients {
    pub fn new(drifts: Vec<f64>, sigmas: Vec<f64>, tail: bool) -> Result<Self> {
        if drifts.is_empty() || drifts.len() != sigmas.len() {
            return Err(Error::InvalidArgument(format!(
                "need equally many drifts and volatilities, got {} and {}",
                drifts.len(),
                sigmas.len()
            )));
        }
        if let Some(k) = sigmas.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("sigma[{k}] = {} is not positive", sigmas[k])));
        }
        if drifts.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidArgument("drifts must be finite".into()));
        }
        Ok(Self { drifts, sigmas, tail })
    }

    /// Atlas model: drift `lead` on the lowest rank, zero elsewhere, unit volatility.
    pub fn atlas(lead: f64, ranks: usize, tail: bool) -> Result<Self> {
        let mut drifts = vec![0.0; ranks.max(2)];
        drifts[0] = lead;
        let sigmas = vec![1.0; drifts.len()];
        Self::new(drifts, sigmas, tail)
    }

    pub fn drifts(&self) -> &[f64] {
        &self.drifts
    }
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
    pub fn has_tail(&self) -> bool {
        self.tail
    }

    /// Tail-onset rank count: listed coefficients before the tail repeats.
    pub fn listed(&self) -> usize {
        self.drifts.len()
    }

    pub fn covers(&self, n: usize) -> bool {
        self.tail || n <= self.drifts.len()
    }

    pub fn drift(&self, rank: usize) -> f64 {
        self.drifts[rank.min(self.drifts.len() - 1)]
    }

    pub fn sigma(&self, rank: usize) -> f64 {
        self.sigmas[rank.min(self.sigmas.len() - 1)]
    }

    /// `sup_m σ_m²` over all ranks (listed values; the tail repeats the last).
    pub fn sup_sigma_sq(&self) -> f64 {
        self.sigmas.iter().map(|s| s * s).fold(0.0, f64::max)
    }

    fn require(&self, n: usize) -> Result<()> {
        if !self.covers(n) {
            return Err(Error::InvalidArgument(format!(
                "{n} particles but only {} coefficients and no tail",
                self.drifts.len()
            )));
        }
        Ok(())
    }
}

/// `forward[rank] = name`, `inverse[name] = rank`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    pub forward: Vec<usize>,
    pub inverse: Vec<usize>,
}

impl Permutation {
    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }
}

fn rank_before(x: &[f64], a: usize, b: usize) -> bool {
    match x[a].total_cmp(&x[b]) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => a < b,
    }
}

/// Sort `order` (names) by position, ties by name. Insertion sort: the order
/// from the previous time step is almost always nearly sorted.
fn sort_order(x: &[f64], order: &mut Vec<usize>) {
    if order.len() != x.len() {
        order.clear();
        order.extend(0..x.len());
    }
    for i in 1..order.len() {
        let cur = order[i];
        let mut j = i;
        while j > 0 && rank_before(x, cur, order[j - 1]) {
            order[j] = order[j - 1];
            j -= 1;
        }
        order[j] = cur;
    }
}

pub fn ranking_permutation(x: &[f64]) -> Permutation {
    let mut forward = Vec::new();
    sort_order(x, &mut forward);
    let mut inverse = vec![0; x.len()];
    for (rank, &name) in forward.iter().enumerate() {
        inverse[name] = rank;
    }
    Permutation { forward, inverse }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CoefficientReport {
    /// Concavity `σ_n² ≥ ½(σ_{n−1}² + σ_{n+1}²)` at every interior rank.
    pub strong_uniqueness: bool,
    /// `g_1 ≥ g_2 ≥ …`
    pub nonincreasing_drifts: bool,
}

pub fn validate_coefficients(c: &RankCoefficients) -> CoefficientReport {
    // With a tail, one repeated value suffices: beyond it everything is constant.
    let mut sq: Vec<f64> = c.sigmas.iter().map(|s| s * s).collect();
    let mut g = c.drifts.clone();
    if c.tail {
        sq.push(*sq.last().unwrap());
        g.push(*g.last().unwrap());
    }
    let strong_uniqueness = sq.windows(3).all(|w| w[1] >= 0.5 * (w[0] + w[2]));
    let nonincreasing_drifts = g.windows(2).all(|w| w[0] >= w[1]);
    CoefficientReport { strong_uniqueness, nonincreasing_drifts }
}

/// `(g(x) − g(y))·(x − y)` for the rank-based drift `g(x)_i = g_{rank_x(i)}`.
pub fn rearrangement_gap(g: &[f64], x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != g.len() || y.len() != g.len() {
        return Err(Error::DimensionMismatch { expected: g.len(), found: x.len().max(y.len()) });
    }
    let px = ranking_permutation(x);
    let py = ranking_permutation(y);
    Ok((0..g.len())
        .map(|i| (g[px.inverse[i]] - g[py.inverse[i]]) * (x[i] - y[i]))
        .sum())
}

/// The named system: particle `i` moves with the coefficients of its current rank.
#[derive(Debug, Clone)]
pub struct NamedSystem {
    coeffs: RankCoefficients,
    start: Vec<f64>,
}

impl NamedSystem {
    pub fn new(coeffs: RankCoefficients, start: Vec<f64>) -> Result<Self> {
        if start.is_empty() {
            return Err(Error::InvalidArgument("no particles".into()));
        }
        if start.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("initial positions must be finite".into()));
        }
        coeffs.require(start.len())?;
        Ok(Self { coeffs, start })
    }

    pub fn coefficients(&self) -> &RankCoefficients {
        &self.coeffs
    }
}

impl Dynamics for NamedSystem {
    fn dim(&self) -> usize {
        self.start.len()
    }

    fn start(&self) -> &[f64] {
        &self.start
    }

    fn step(
        &self,
        _t: f64,
        dt: f64,
        state: &mut [f64],
        noise: &[f64],
        shift: Option<&[f64]>,
        ws: &mut Workspace,
    ) -> Result<f64> {
        sort_order(state, &mut ws.order);
        let sq = dt.sqrt();
        for (rank, &name) in ws.order.iter().enumerate() {
            let s = self.coeffs.sigma(rank);
            let mut dw = sq * noise[name];
            if let Some(sh) = shift {
                dw += sh[name];
            }
            state[name] += self.coeffs.drift(rank) * dt + s * dw;
        }
        Ok(0.0)
    }

    fn shift_norm(&self, gamma: &[f64]) -> f64 {
        let n = gamma.len();
        let smax = (0..n).map(|r| self.coeffs.sigma(r)).fold(0.0, f64::max);
        smax * gamma.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Euler simulation of the named system started at `x0`.
pub fn simulate_named(
    coeffs: &RankCoefficients,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    let system = NamedSystem::new(coeffs.clone(), x0.to_vec())?;
    let grid = TimeGrid::new(horizon, dt)?;
    Ok(dynamics::simulate_bundle(&system, grid, paths, seed, None)?.0)
}

/// The ranked system as a normally reflected Brownian motion in the wedge,
/// with drift `(g_1..g_N)` and diffusion `diag(σ_1², …, σ_N²)`, started
/// from the sorted initial positions.
pub fn ranked_reflected_system(coeffs: &RankCoefficients, x0: &[f64]) -> Result<ReflectedDiffusion> {
    let n = x0.len();
    coeffs.require(n)?;
    let mut start = x0.to_vec();
    start.sort_by(f64::total_cmp);
    let drift = DriftField::constant((0..n).map(|k| coeffs.drift(k)).collect());
    let diffusion = DiffusionMatrix::diagonal(&(0..n).map(|k| coeffs.sigma(k).powi(2)).collect::<Vec<_>>())?;
    ReflectedDiffusion::new(PolyhedralDomain::wedge(n)?, drift, diffusion, start)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedBundle {
    pub ranked: PathBundle,
    /// `Z_k = Y_{k+1} − Y_k`
    pub gaps: PathBundle,
    /// Collision local time estimate per adjacent rank pair.
    pub localtime: PathBundle,
}

/// Sort each time slice, form gaps, and estimate collision local times.
///
/// The local time of pair `(k, k+1)` grows by `max(0, −Ẑ_k)/√2` per step,
/// where `Ẑ_k` is the gap after the step computed with the ranking from
/// before the step. This equals the per-face push of the projected Euler
/// scheme for a single overshoot.
pub fn ranked_from_named(paths: &PathBundle) -> Result<RankedBundle> {
    let n = paths.dim();
    if n < 2 {
        return Err(Error::InvalidArgument("ranking needs at least two particles".into()));
    }
    let steps = paths.steps();
    let mut ranked = Vec::with_capacity(paths.values().len());
    let mut gaps = Vec::with_capacity(paths.num_paths() * (steps + 1) * (n - 1));
    let mut local = Vec::with_capacity(gaps.capacity());
    let mut order = Vec::new();
    let mut acc = vec![0.0; n - 1];
    for p in paths.paths() {
        acc.iter_mut().for_each(|v| *v = 0.0);
        order.clear();
        for j in 0..=steps {
            let x = &p[j * n..(j + 1) * n];
            if j > 0 {
                // `order` still holds the ranking at t_{j-1}
                for k in 0..n - 1 {
                    let z: f64 = x[order[k + 1]] - x[order[k]];
                    if z < 0.0 {
                        acc[k] += -z * FRAC_1_SQRT_2;
                    }
                }
            }
            sort_order(x, &mut order);
            let start = ranked.len();
            ranked.extend(order.iter().map(|&i| x[i]));
            let y = &ranked[start..];
            gaps.extend(y.windows(2).map(|w| w[1] - w[0]));
            local.extend_from_slice(&acc);
        }
    }
    Ok(RankedBundle {
        ranked: PathBundle::new(n, paths.grid(), paths.seed(), ranked)?,
        gaps: PathBundle::new(n - 1, paths.grid(), paths.seed(), gaps)?,
        localtime: PathBundle::new(n - 1, paths.grid(), paths.seed(), local)?,
    })
}

/// Initial configurations for truncated infinite systems, `x_n` for `n ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InitialRule {
    /// `x_n = spacing·(n − 1)`
    Linear { spacing: f64 },
    /// `x_n = scale·√(n − 1)`
    Sqrt { scale: f64 },
    /// `x_n = value`
    Constant { value: f64 },
}

impl InitialRule {
    pub fn position(&self, n: usize) -> f64 {
        let m = (n - 1) as f64;
        match *self {
            InitialRule::Linear { spacing } => spacing * m,
            InitialRule::Sqrt { scale } => scale * m.sqrt(),
            InitialRule::Constant { value } => value,
        }
    }

    pub fn positions(&self, count: usize) -> Vec<f64> {
        (1..=count).map(|n| self.position(n)).collect()
    }

    /// Numerical probe of `x_n → ∞` and `Σ exp(−α x_n²) < ∞` for
    /// `α ∈ {0.01, 1}`, over the first 10⁶ terms.
    pub fn check(&self) -> Result<()> {
        const LEN: usize = 1_000_000;
        let early = (1..=1000).map(|n| self.position(n)).fold(f64::NEG_INFINITY, f64::max);
        let late = (LEN / 2..=LEN).map(|n| self.position(n)).fold(f64::INFINITY, f64::min);
        if !(late > early) {
            return Err(Error::InitialCondition(format!(
                "{self:?}: positions do not grow without bound (max over first 10^3 = {early}, min over last half = {late})"
            )));
        }
        for alpha in [0.01, 1.0] {
            let mut half = 0.0;
            let mut full = 0.0;
            for n in 1..=LEN {
                let x = self.position(n);
                full += (-alpha * x * x).exp();
                if n == LEN / 2 {
                    half = full;
                }
            }
            if full - half > 1e-10 * full.max(1.0) {
                return Err(Error::InitialCondition(format!(
                    "{self:?}: sum of exp(-{alpha} x_n^2) is still growing at n = 10^6"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coordinates {
    Named,
    Ranked,
}

/// Parameters of a truncated infinite system.
#[derive(Debug, Clone)]
pub struct Truncation {
    pub coeffs: RankCoefficients,
    /// Coordinates reported.
    pub observed: usize,
    /// Particles simulated.
    pub particles: usize,
    pub rule: InitialRule,
    pub coordinates: Coordinates,
}

impl Truncation {
    pub fn validate(&self) -> Result<()> {
        if !self.coeffs.has_tail() {
            return Err(Error::InvalidArgument("infinite systems need tail-constant coefficients".into()));
        }
        if self.observed == 0 || self.observed > self.particles {
            return Err(Error::InvalidArgument(format!(
                "cannot observe {} of {} particles",
                self.observed, self.particles
            )));
        }
        self.rule.check()
    }

    pub fn system(&self) -> Result<NamedSystem> {
        NamedSystem::new(self.coeffs.clone(), self.rule.positions(self.particles))
    }

    pub fn with_particles(&self, particles: usize) -> Self {
        Self { particles, ..self.clone() }
    }
}

/// Simulate the `N`-particle truncation and keep the first `k` named or
/// ranked coordinates.
pub fn simulate_truncated_infinite(
    spec: &Truncation,
    horizon: f64,
    dt: f64,
    paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    spec.validate()?;
    let full = simulate_named(&spec.coeffs, &spec.rule.positions(spec.particles), horizon, dt, paths, seed)?;
    match spec.coordinates {
        Coordinates::Named => full.leading_coordinates(spec.observed),
        Coordinates::Ranked => ranked_from_named(&full)?.ranked.leading_coordinates(spec.observed),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TruncationDiagnostic {
    pub particles: usize,
    /// `W_1` between terminal marginals at `N` and `2N`, per observed coordinate.
    pub doubled: Vec<f64>,
    /// `W_1` between two independent runs at `N`, per observed coordinate.
    pub noise_floor: Vec<f64>,
    /// Every `doubled` value is within three noise floors.
    pub stable: bool,
}

/// Compare terminal marginals of the first `k` coordinates at `N` and `2N`
/// against the sampling noise between two independent runs at `N`.
pub fn truncation_diagnostic(
    spec: &Truncation,
    horizon: f64,
    dt: f64,
    paths: usize,
    seed: u64,
) -> Result<TruncationDiagnostic> {
    let base = simulate_truncated_infinite(spec, horizon, dt, paths, derive_seed(seed, 0))?;
    let doubled = simulate_truncated_infinite(
        &spec.with_particles(2 * spec.particles),
        horizon,
        dt,
        paths,
        derive_seed(seed, 1),
    )?;
    let replica = simulate_truncated_infinite(spec, horizon, dt, paths, derive_seed(seed, 2))?;
    let last = base.steps();
    let mut out = TruncationDiagnostic {
        particles: spec.particles,
        doubled: Vec::new(),
        noise_floor: Vec::new(),
        stable: true,
    };
    for k in 0..spec.observed {
        let a = base.marginal(last, k);
        let w = wasserstein1_line(&a, &doubled.marginal(last, k));
        let floor = wasserstein1_line(&a, &replica.marginal(last, k));
        out.stable &= w <= 3.0 * floor;
        out.doubled.push(w);
        out.noise_floor.push(floor);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::path_rng;
    use crate::stats::{mean_and_stderr, variance};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn ranking_examples() {
        // 1-based (3,1,2) -> p: 1↦2, 2↦3, 3↦1
        assert_eq!(ranking_permutation(&[3.0, 1.0, 2.0]).forward, vec![1, 2, 0]);
        assert_eq!(ranking_permutation(&[1.0, 1.0]).forward, vec![0, 1]);
        // (5,5,0) -> p: 1↦3, 2↦1, 3↦2
        assert_eq!(ranking_permutation(&[5.0, 5.0, 0.0]).forward, vec![2, 0, 1]);
    }

    #[test]
    fn coefficient_validation_examples() {
        let c = RankCoefficients::new(vec![0.0, -1.0, -2.0], vec![1.0; 3], false).unwrap();
        assert_eq!(
            validate_coefficients(&c),
            CoefficientReport { strong_uniqueness: true, nonincreasing_drifts: true }
        );
        let s = |v: [f64; 3]| v.map(f64::sqrt).to_vec();
        let c = RankCoefficients::new(vec![0.0; 3], s([1.0, 3.0, 1.0]), false).unwrap();
        assert!(validate_coefficients(&c).strong_uniqueness);
        let c = RankCoefficients::new(vec![0.0; 3], s([3.0, 1.0, 3.0]), false).unwrap();
        assert!(!validate_coefficients(&c).strong_uniqueness);
        let atlas = RankCoefficients::atlas(1.0, 4, true).unwrap();
        assert_eq!(
            validate_coefficients(&atlas),
            CoefficientReport { strong_uniqueness: true, nonincreasing_drifts: true }
        );
        let up = RankCoefficients::new(vec![0.0, 1.0], vec![1.0; 2], false).unwrap();
        assert!(!validate_coefficients(&up).nonincreasing_drifts);
        // tail value participates in the concavity check: 1 ≥ ½(4 + 1) fails
        let t = RankCoefficients::new(vec![0.0; 2], vec![2.0, 1.0], true).unwrap();
        assert!(!validate_coefficients(&t).strong_uniqueness);
        assert!(RankCoefficients::new(vec![0.0], vec![0.0], false).is_err());
    }

    #[test]
    fn single_particle_is_drifted_brownian_motion() {
        let c = RankCoefficients::new(vec![0.7], vec![1.0], false).unwrap();
        let b = simulate_named(&c, &[0.5], 1.0, 1e-2, 10_000, 3).unwrap();
        let (m, se) = mean_and_stderr(&b.marginal(b.steps(), 0));
        assert!((m - 1.2).abs() < 3.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn equal_coefficients_give_independent_brownian_motions() {
        let c = RankCoefficients::new(vec![0.0, 0.0], vec![1.0, 1.0], false).unwrap();
        let b = simulate_named(&c, &[0.0, 0.0], 1.0, 1e-2, 10_000, 4).unwrap();
        let v = variance(&b.marginal(b.steps(), 0));
        assert!((v - 1.0).abs() < 0.05, "variance {v}");
    }

    /// Gap of two Atlas particles: a Brownian motion with variance 2 and
    /// drift −1, reflected at 0, simulated directly on a 100x finer grid.
    #[test]
    fn two_particle_atlas_gap_matches_reflected_oracle() {
        let c = RankCoefficients::atlas(1.0, 2, false).unwrap();
        let b = simulate_named(&c, &[0.0, 0.0], 1.0, 1e-2, 10_000, 5).unwrap();
        let r = ranked_from_named(&b).unwrap();
        let gaps = r.gaps.marginal(r.gaps.steps(), 0);
        let (m, se) = mean_and_stderr(&gaps);

        let fine = 1e-4;
        let oracle: Vec<f64> = (0..10_000u64)
            .map(|i| {
                let mut rng = path_rng(99, i);
                let mut z: f64 = 0.0;
                for _ in 0..10_000 {
                    let xi: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                    z = (z - fine + 2f64.sqrt() * fine.sqrt() * xi).abs();
                }
                z
            })
            .collect();
        let (mo, seo) = mean_and_stderr(&oracle);
        // Euler at dt = 1e-2 overshoots the boundary; allow O(√dt) bias.
        let tol = 3.0 * (se * se + seo * seo).sqrt() + 0.6 * 2f64.sqrt() * 0.1;
        assert!((m - mo).abs() < tol, "euler {m} oracle {mo} tol {tol}");
    }

    #[test]
    fn ranked_view_examples() {
        let grid = TimeGrid::new(1.0, 0.5).unwrap();
        let b = PathBundle::new(2, grid, 0, vec![2.0, 1.0, 2.0, 1.0, 2.0, 1.0]).unwrap();
        let r = ranked_from_named(&b).unwrap();
        assert_eq!(r.ranked.path(0), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(r.gaps.path(0), &[1.0, 1.0, 1.0]);
        assert_eq!(r.localtime.path(0), &[0.0, 0.0, 0.0]);

        // crossing paths x1 = t, x2 = 1 - t on a fine grid
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let vals: Vec<f64> = (0..=100).flat_map(|j| [j as f64 / 100.0, 1.0 - j as f64 / 100.0]).collect();
        let b = PathBundle::new(2, grid, 0, vals).unwrap();
        let r = ranked_from_named(&b).unwrap();
        for j in 0..100 {
            for k in 0..2 {
                let jump = (r.ranked.point(0, j + 1)[k] - r.ranked.point(0, j)[k]).abs();
                assert!(jump <= 0.01 + 1e-12);
            }
        }
    }

    #[test]
    fn ranked_invariants_on_atlas_sample() {
        let c = RankCoefficients::atlas(1.0, 3, false).unwrap();
        let b = simulate_named(&c, &[0.0, 0.0, 0.0], 1.0, 1e-2, 200, 8).unwrap();
        let r = ranked_from_named(&b).unwrap();
        assert!(r.gaps.values().iter().all(|&z| z >= 0.0));
        for p in r.ranked.paths() {
            assert!(p.chunks(3).all(|y| y[0] <= y[1] && y[1] <= y[2]));
        }
        let mut grew = false;
        for p in r.localtime.paths() {
            assert!(p[..2].iter().all(|&v| v == 0.0));
            for k in 0..2 {
                let series: Vec<f64> = p.chunks(2).map(|c| c[k]).collect();
                assert!(series.windows(2).all(|w| w[1] >= w[0]));
                grew |= *series.last().unwrap() > 0.0;
            }
        }
        assert!(grew);
    }

    #[test]
    fn missing_coefficients_rejected() {
        let c = RankCoefficients::new(vec![0.0, 0.0], vec![1.0, 1.0], false).unwrap();
        assert!(simulate_named(&c, &[0.0; 3], 1.0, 0.1, 1, 0).is_err());
        assert!(simulate_named(&c, &[0.0; 2], 1.0, 0.3, 1, 0).is_err());
    }

    #[test]
    fn initial_rule_probe() {
        assert!(InitialRule::Linear { spacing: 1.0 }.check().is_ok());
        assert!(InitialRule::Sqrt { scale: 1.0 }.check().is_ok());
        assert!(matches!(
            InitialRule::Constant { value: 0.0 }.check(),
            Err(Error::InitialCondition(_))
        ));
        assert_eq!(InitialRule::Linear { spacing: 1.0 }.positions(3), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn truncation_rejects_bad_specs() {
        let spec = Truncation {
            coeffs: RankCoefficients::atlas(1.0, 2, true).unwrap(),
            observed: 3,
            particles: 2,
            rule: InitialRule::Linear { spacing: 1.0 },
            coordinates: Coordinates::Named,
        };
        assert!(simulate_truncated_infinite(&spec, 1.0, 0.1, 1, 0).is_err());
        let spec = Truncation { observed: 1, rule: InitialRule::Constant { value: 0.0 }, ..spec };
        assert!(matches!(
            simulate_truncated_infinite(&spec, 1.0, 0.1, 1, 0),
            Err(Error::InitialCondition(_))
        ));
    }

    #[test]
    fn truncated_atlas_is_stable_under_doubling() {
        let spec = Truncation {
            coeffs: RankCoefficients::atlas(1.0, 2, true).unwrap(),
            observed: 1,
            particles: 16,
            rule: InitialRule::Linear { spacing: 1.0 },
            coordinates: Coordinates::Named,
        };
        let d = truncation_diagnostic(&spec, 1.0, 1e-2, 10_000, 12).unwrap();
        assert!(d.stable, "{d:?}");
        let b = simulate_truncated_infinite(&spec, 1.0, 1e-2, 4, 1).unwrap();
        assert_eq!(b.dim(), 1);
    }

    #[test]
    fn rearrangement_examples() {
        assert_eq!(rearrangement_gap(&[1.0, 0.0], &[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(rearrangement_gap(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]).unwrap(), -2.0);
    }

    /// Same quantity computed from the rank definition by brute force over
    /// all permutations: g(x)_i is g at the position of i in the sorted order.
    fn rearrangement_oracle(g: &[f64], x: &[f64], y: &[f64]) -> f64 {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, n - 1);
                    out.push(q);
                }
            }
            out
        }
        let sorting = |v: &[f64]| {
            perms(v.len())
                .into_iter()
                .find(|p| p.windows(2).all(|w| v[w[0]] < v[w[1]] || (v[w[0]] == v[w[1]] && w[0] < w[1])))
                .unwrap()
        };
        let (px, py) = (sorting(x), sorting(y));
        let mut gx = vec![0.0; g.len()];
        let mut gy = vec![0.0; g.len()];
        for k in 0..g.len() {
            gx[px[k]] = g[k];
            gy[py[k]] = g[k];
        }
        (0..g.len()).map(|i| (gx[i] - gy[i]) * (x[i] - y[i])).sum()
    }

    #[test]
    fn rearrangement_matches_permutation_oracle() {
        let mut rng = path_rng(31, 0);
        for _ in 0..2_000 {
            let n = rng.random_range(1..=6);
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = rearrangement_gap(&g, &x, &y).unwrap();
            assert!((a - rearrangement_oracle(&g, &x, &y)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn ranking_is_a_sorting_permutation(x in proptest::collection::vec(-3i32..3, 1..10)) {
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            let p = ranking_permutation(&x);
            for w in p.forward.windows(2) {
                prop_assert!(x[w[0]] < x[w[1]] || (x[w[0]] == x[w[1]] && w[0] < w[1]));
            }
            for (name, &rank) in p.inverse.iter().enumerate() {
                prop_assert_eq!(p.forward[rank], name);
            }
        }

        #[test]
        fn contraction_for_nonincreasing_drifts(
            mut g in proptest::collection::vec(-5i32..5, 1..7),
            x in proptest::collection::vec(-4i32..4, 7),
            y in proptest::collection::vec(-4i32..4, 7),
        ) {
            // small integers keep the arithmetic exact
            g.sort_unstable_by(|a, b| b.cmp(a));
            let n = g.len();
            let g: Vec<f64> = g.into_iter().map(f64::from).collect();
            let x: Vec<f64> = x[..n].iter().map(|&v| f64::from(v)).collect();
            let y: Vec<f64> = y[..n].iter().map(|&v| f64::from(v)).collect();
            prop_assert!(rearrangement_gap(&g, &x, &y).unwrap() <= 0.0);
        }
    }
}
