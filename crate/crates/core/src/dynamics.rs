//! Euler stepping shared by the particle and reflected-diffusion simulators.
//!
//! A [`Dynamics`] knows how to advance one state by one step given standard
//! normal noise. The drivers here run single paths and synchronously coupled
//! pairs with per-path random streams, so any parallel schedule yields the
//! same numbers.

use crate::bundle::{PathBundle, TimeGrid};
use crate::domain::ProjectionScratch;
use crate::error::{Error, Result};
use crate::reflect::DriftPerturbation;
use crate::rng::{fill_normal, par_paths, path_rng};

/// Scratch space reused across steps of one path.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    pub projection: ProjectionScratch,
    /// Rank order from the previous step (particle systems).
    pub order: Vec<usize>,
    pub drift: Vec<f64>,
    pub tmp: Vec<f64>,
    /// Boundary normal of the last step, valid when the step reported a push.
    pub normal: Vec<f64>,
}

pub trait Dynamics: Sync {
    fn dim(&self) -> usize;

    fn start(&self) -> &[f64];

    /// Advance `state` from time `t` by `dt`. `noise` holds `dim` standard
    /// normals. `shift`, when present, is an extra increment of the driving
    /// Brownian motion (`γ(t)·dt`), scaled by the diffusion coefficient like
    /// the noise. Returns the length of the boundary push; when positive the
    /// unit push direction is left in `ws.normal`.
    fn step(
        &self,
        t: f64,
        dt: f64,
        state: &mut [f64],
        noise: &[f64],
        shift: Option<&[f64]>,
        ws: &mut Workspace,
    ) -> Result<f64>;

    /// Euclidean length of the displacement a Brownian-scale shift `gamma`
    /// produces (an upper bound when it depends on the state).
    fn shift_norm(&self, gamma: &[f64]) -> f64;
}

/// One simulated path with its boundary record.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// `(n + 1)·d` positions, time-major.
    pub states: Vec<f64>,
    /// Accumulated push length at each grid time.
    pub localtime: Vec<f64>,
    /// Grid indices (of the post-step point) where a push happened.
    pub push_steps: Vec<usize>,
    /// Unit push directions, `d` per entry of `push_steps`.
    pub normals: Vec<f64>,
}

impl Trace {
    fn with_capacity(dim: usize, steps: usize) -> Self {
        Self {
            states: Vec::with_capacity((steps + 1) * dim),
            localtime: Vec::with_capacity(steps + 1),
            push_steps: Vec::new(),
            normals: Vec::new(),
        }
    }

    pub fn point(&self, step: usize, dim: usize) -> &[f64] {
        &self.states[step * dim..(step + 1) * dim]
    }

    pub fn normal(&self, i: usize, dim: usize) -> &[f64] {
        &self.normals[i * dim..(i + 1) * dim]
    }
}

fn check_shift<D: Dynamics + ?Sized>(dynamics: &D, gamma: Option<&DriftPerturbation>) -> Result<()> {
    if let Some(g) = gamma {
        if g.dim() != dynamics.dim() {
            return Err(Error::DimensionMismatch { expected: dynamics.dim(), found: g.dim() });
        }
    }
    Ok(())
}

/// Simulate path `path` of the stream `seed`, optionally under the drift
/// perturbation `gamma`.
pub fn run_path<D: Dynamics + ?Sized>(
    dynamics: &D,
    grid: TimeGrid,
    seed: u64,
    path: usize,
    gamma: Option<&DriftPerturbation>,
) -> Result<Trace> {
    let d = dynamics.dim();
    let mut rng = path_rng(seed, path as u64);
    let mut ws = Workspace::default();
    let mut noise = vec![0.0; d];
    let mut shift = vec![0.0; d];
    let mut state = dynamics.start().to_vec();
    let mut trace = Trace::with_capacity(d, grid.steps);
    trace.states.extend_from_slice(&state);
    trace.localtime.push(0.0);
    let mut ell = 0.0;
    for j in 0..grid.steps {
        let t = grid.time(j);
        fill_normal(&mut rng, &mut noise);
        let shift_ref = match gamma {
            Some(g) => {
                g.eval(t, &state, &mut shift);
                shift.iter_mut().for_each(|v| *v *= grid.dt);
                Some(shift.as_slice())
            }
            None => None,
        };
        let push = dynamics.step(t, grid.dt, &mut state, &noise, shift_ref, &mut ws)?;
        if push > 0.0 {
            ell += push;
            trace.push_steps.push(j + 1);
            trace.normals.extend_from_slice(&ws.normal);
        }
        trace.states.extend_from_slice(&state);
        trace.localtime.push(ell);
    }
    Ok(trace)
}

/// Simulate the synchronously coupled pair for path `path`: the first trace
/// carries the perturbation `gamma`, the second does not, and both see the
/// same Gaussian increments.
pub fn run_coupled<D: Dynamics + ?Sized>(
    dynamics: &D,
    grid: TimeGrid,
    seed: u64,
    path: usize,
    gamma: &DriftPerturbation,
) -> Result<(Trace, Trace)> {
    let d = dynamics.dim();
    let mut rng = path_rng(seed, path as u64);
    let mut ws = Workspace::default();
    let mut ws_ref = Workspace::default();
    let mut noise = vec![0.0; d];
    let mut shift = vec![0.0; d];
    let mut x = dynamics.start().to_vec();
    let mut xr = x.clone();
    let mut tx = Trace::with_capacity(d, grid.steps);
    let mut tr = Trace::with_capacity(d, grid.steps);
    tx.states.extend_from_slice(&x);
    tr.states.extend_from_slice(&xr);
    tx.localtime.push(0.0);
    tr.localtime.push(0.0);
    let (mut lx, mut lr) = (0.0, 0.0);
    for j in 0..grid.steps {
        let t = grid.time(j);
        fill_normal(&mut rng, &mut noise);
        gamma.eval(t, &x, &mut shift);
        shift.iter_mut().for_each(|v| *v *= grid.dt);
        let px = dynamics.step(t, grid.dt, &mut x, &noise, Some(&shift), &mut ws)?;
        if px > 0.0 {
            lx += px;
            tx.push_steps.push(j + 1);
            tx.normals.extend_from_slice(&ws.normal);
        }
        let pr = dynamics.step(t, grid.dt, &mut xr, &noise, None, &mut ws_ref)?;
        if pr > 0.0 {
            lr += pr;
            tr.push_steps.push(j + 1);
            tr.normals.extend_from_slice(&ws_ref.normal);
        }
        tx.states.extend_from_slice(&x);
        tr.states.extend_from_slice(&xr);
        tx.localtime.push(lx);
        tr.localtime.push(lr);
    }
    Ok((tx, tr))
}

/// Simulate `paths` independent paths into a bundle plus their traces'
/// local times and push records.
pub fn simulate_bundle<D: Dynamics + ?Sized>(
    dynamics: &D,
    grid: TimeGrid,
    paths: usize,
    seed: u64,
    gamma: Option<&DriftPerturbation>,
) -> Result<(PathBundle, Vec<Trace>)> {
    check_shift(dynamics, gamma)?;
    let traces: Vec<Trace> = par_paths(0..paths, |i| run_path(dynamics, grid, seed, i, gamma))
        .into_iter()
        .collect::<Result<_>>()?;
    let bundle = assemble(dynamics.dim(), grid, seed, &traces)?;
    Ok((bundle, traces))
}

pub(crate) fn assemble(dim: usize, grid: TimeGrid, seed: u64, traces: &[Trace]) -> Result<PathBundle> {
    let values = traces.iter().flat_map(|t| t.states.iter().copied()).collect();
    PathBundle::new(dim, grid, seed, values)
}

/// Map a per-path summary over coupled pairs without keeping the paths.
pub fn map_coupled<D, R, F>(
    dynamics: &D,
    grid: TimeGrid,
    seed: u64,
    paths: std::ops::Range<usize>,
    gamma: &DriftPerturbation,
    summarize: F,
) -> Result<Vec<R>>
where
    D: Dynamics + ?Sized,
    R: Send,
    F: Fn(&Trace, &Trace) -> R + Sync + Send,
{
    check_shift(dynamics, Some(gamma))?;
    par_paths(paths, |i| run_coupled(dynamics, grid, seed, i, gamma).map(|(x, xr)| summarize(&x, &xr)))
        .into_iter()
        .collect()
}

/// Map a per-path summary over single paths without keeping them.
pub fn map_paths<D, R, F>(
    dynamics: &D,
    grid: TimeGrid,
    seed: u64,
    paths: std::ops::Range<usize>,
    gamma: Option<&DriftPerturbation>,
    summarize: F,
) -> Result<Vec<R>>
where
    D: Dynamics + ?Sized,
    R: Send,
    F: Fn(&Trace) -> R + Sync + Send,
{
    check_shift(dynamics, gamma)?;
    par_paths(paths, |i| run_path(dynamics, grid, seed, i, gamma).map(|t| summarize(&t)))
        .into_iter()
        .collect()
}
