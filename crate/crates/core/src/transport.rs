//! Wasserstein distances between empirical path measures under the sup-norm
//! path metric, and the relative entropy of a drift perturbation.

use std::collections::VecDeque;
use std::io::Write;

use rayon::prelude::*;

use crate::bundle::PathBundle;
use crate::error::{Error, Result};
use crate::reflect::DriftPerturbation;
use crate::stats::mean_and_stderr;

/// Largest support the exact solver accepts by default.
pub const EXACT_CAP: usize = 512;
/// Required complementary-slackness certificate of the exact solver.
pub const CERTIFICATE_TOL: f64 = 1e-9;
/// Default entropic ladder, in units of the median cost.
pub const EPSILON_LADDER: [f64; 3] = [1.0, 0.3, 0.1];

/// `max_j ‖x(t_j) − y(t_j)‖` for flat time-major paths of dimension `dim`.
pub fn path_sup_distance(x: &[f64], y: &[f64], dim: usize) -> Result<f64> {
    if x.len() != y.len() || dim == 0 || !x.len().is_multiple_of(dim) {
        return Err(Error::InvalidArgument(format!(
            "paths on different grids ({} vs {} values, dimension {dim})",
            x.len(),
            y.len()
        )));
    }
    Ok(sup_distance(x, y, dim))
}

fn sup_distance(x: &[f64], y: &[f64], dim: usize) -> f64 {
    let mut best: f64 = 0.0;
    for (a, b) in x.chunks_exact(dim).zip(y.chunks_exact(dim)) {
        let sq: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
        best = best.max(sq);
    }
    best.sqrt()
}

/// Weighted finite set of paths.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    /// Values per path, `(steps + 1)·dim`.
    stride: usize,
    support: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn uniform(dim: usize, stride: usize, support: Vec<f64>) -> Result<Self> {
        if dim == 0 || stride == 0 || !stride.is_multiple_of(dim) || !support.len().is_multiple_of(stride) || support.is_empty() {
            return Err(Error::InvalidArgument("support does not split into whole paths".into()));
        }
        let m = support.len() / stride;
        Ok(Self { dim, stride, support, weights: vec![1.0 / m as f64; m] })
    }

    pub fn from_bundle(bundle: &PathBundle) -> Result<Self> {
        Self::uniform(bundle.dim(), bundle.dim() * (bundle.steps() + 1), bundle.values().to_vec())
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.size() {
            return Err(Error::DimensionMismatch { expected: self.size(), found: weights.len() });
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("weights must be nonnegative and sum to 1 (sum {total})")));
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn size(&self) -> usize {
        self.weights.len()
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn path(&self, i: usize) -> &[f64] {
        &self.support[i * self.stride..(i + 1) * self.stride]
    }
}

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::DimensionMismatch { expected: rows * cols, found: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("costs must be finite".into()));
        }
        Ok(Self { rows, cols, values })
    }

    /// `c_ij = ‖x_i − y_j‖_sup^p`
    pub fn from_measures(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64) -> Result<Self> {
        if !(p >= 1.0) {
            return Err(Error::InvalidArgument(format!("order p must be at least 1, got {p}")));
        }
        if mu.dim != nu.dim || mu.stride != nu.stride {
            return Err(Error::InvalidArgument("measures live on different grids".into()));
        }
        let cols = nu.size();
        let mut values = vec![0.0; mu.size() * cols];
        values.par_chunks_mut(cols).enumerate().for_each(|(i, row)| {
            for (j, c) in row.iter_mut().enumerate() {
                *c = sup_distance(mu.path(i), nu.path(j), mu.dim).powf(p);
            }
        });
        Ok(Self { rows: mu.size(), cols, values })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn median(&self) -> f64 {
        let mut v = self.values.clone();
        let mid = v.len() / 2;
        let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
        *m
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for row in self.values.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Feasible transport plan with its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPlan {
    pub rows: usize,
    pub cols: usize,
    pub plan: Vec<f64>,
    pub cost: f64,
}

impl CouplingPlan {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.plan[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for row in self.plan.chunks(self.cols) {
            s.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        s
    }

    /// Largest deviation of the marginals from `a` and `b`.
    pub fn marginal_residual(&self, a: &[f64], b: &[f64]) -> f64 {
        let r = self.row_sums().iter().zip(a).map(|(s, w)| (s - w).abs()).fold(0.0, f64::max);
        let c = self.col_sums().iter().zip(b).map(|(s, w)| (s - w).abs()).fold(0.0, f64::max);
        r.max(c)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "source,target,mass")?;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let m = self.at(i, j);
                if m > 0.0 {
                    writeln!(w, "{i},{j},{m:e}")?;
                }
            }
        }
        Ok(())
    }
}

/// Optimal plan of the discrete transport problem with dual potentials.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportSolution {
    pub plan: CouplingPlan,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// `max(dual infeasibility, Σ plan·reduced cost)`, relative to `max(1, max c)`.
    pub certificate: f64,
    pub pivots: usize,
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    i: usize,
    j: usize,
    flow: f64,
}

/// Transportation simplex on the bipartite network. Entering arcs come from
/// block pricing; after a long run of degenerate pivots it switches to
/// Bland's rule, which cannot cycle.
struct Simplex<'a> {
    cost: &'a CostMatrix,
    edges: Vec<Edge>,
    /// Basis tree adjacency: rows are nodes `0..m`, columns `m..m+n`.
    adj: Vec<Vec<usize>>,
    u: Vec<f64>,
    v: Vec<f64>,
    parent: Vec<Option<usize>>,
}

impl<'a> Simplex<'a> {
    fn northwest(cost: &'a CostMatrix, a: &[f64], b: &[f64]) -> Self {
        let (m, n) = (cost.rows, cost.cols);
        let mut s = Self {
            cost,
            edges: Vec::with_capacity(m + n - 1),
            adj: vec![Vec::new(); m + n],
            u: vec![0.0; m],
            v: vec![0.0; n],
            parent: vec![None; m + n],
        };
        let (mut ra, mut rb) = (a[0], b[0]);
        let (mut i, mut j) = (0, 0);
        loop {
            let x = ra.min(rb).max(0.0);
            s.add_edge(Edge { i, j, flow: x });
            ra -= x;
            rb -= x;
            if i + 1 == m && j + 1 == n {
                break;
            }
            if j + 1 == n || (i + 1 < m && ra <= rb) {
                i += 1;
                ra = a[i];
            } else {
                j += 1;
                rb = b[j];
            }
        }
        s
    }

    fn add_edge(&mut self, e: Edge) {
        let k = self.edges.len();
        let m = self.cost.rows;
        self.adj[e.i].push(k);
        self.adj[m + e.j].push(k);
        self.edges.push(e);
    }

    fn other(&self, k: usize, node: usize) -> usize {
        let m = self.cost.rows;
        let e = self.edges[k];
        if node == e.i {
            m + e.j
        } else {
            e.i
        }
    }

    /// Potentials with `u_0 = 0` and `u_i + v_j = c_ij` on the basis, plus
    /// parent arcs of the tree rooted at row 0.
    fn potentials(&mut self) {
        let m = self.cost.rows;
        self.parent.iter_mut().for_each(|p| *p = None);
        let mut seen = vec![false; self.adj.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        self.u[0] = 0.0;
        while let Some(node) = queue.pop_front() {
            for idx in 0..self.adj[node].len() {
                let k = self.adj[node][idx];
                let next = self.other(k, node);
                if seen[next] {
                    continue;
                }
                seen[next] = true;
                self.parent[next] = Some(k);
                let e = self.edges[k];
                let c = self.cost.at(e.i, e.j);
                if next >= m {
                    self.v[next - m] = c - self.u[e.i];
                } else {
                    self.u[next] = c - self.v[e.j];
                }
                queue.push_back(next);
            }
        }
    }

    fn reduced(&self, i: usize, j: usize) -> f64 {
        self.cost.at(i, j) - self.u[i] - self.v[j]
    }

    /// Arcs on the tree path from column `j` up to row `i`, starting at `j`.
    fn cycle(&self, i: usize, j: usize) -> Vec<usize> {
        let m = self.cost.rows;
        let ancestors = |mut node: usize| {
            let mut chain = vec![node];
            while let Some(k) = self.parent[node] {
                node = self.other(k, node);
                chain.push(node);
            }
            chain
        };
        let from_j = ancestors(m + j);
        let from_i = ancestors(i);
        // lowest common ancestor
        let mut a = from_j.len();
        let mut b = from_i.len();
        while a > 0 && b > 0 && from_j[a - 1] == from_i[b - 1] {
            a -= 1;
            b -= 1;
        }
        let mut arcs: Vec<usize> = from_j[..a].iter().map(|&n| self.parent[n].unwrap()).collect();
        let down: Vec<usize> = from_i[..b].iter().map(|&n| self.parent[n].unwrap()).collect();
        arcs.extend(down.into_iter().rev());
        arcs
    }

    fn solve(mut self, max_pivots: usize) -> Result<(Vec<Edge>, Vec<f64>, Vec<f64>, usize)> {
        let (m, n) = (self.cost.rows, self.cost.cols);
        let scale = self.cost.values.iter().fold(1.0f64, |s, c| s.max(c.abs()));
        let enter_tol = 1e-13 * scale;
        let total = m * n;
        let block = ((total as f64).sqrt() as usize).max(10).min(total);
        let mut cursor = 0;
        let mut degenerate_run = 0;
        let mut pivots = 0;
        loop {
            self.potentials();
            let bland = degenerate_run > 2 * (m + n);
            let mut entering: Option<(usize, f64)> = None;
            if bland {
                entering = (0..total).map(|k| (k, self.reduced(k / n, k % n))).find(|&(_, r)| r < -enter_tol);
            } else {
                let mut scanned = 0;
                while scanned < total {
                    let stop = (scanned + block).min(total);
                    for _ in scanned..stop {
                        let r = self.reduced(cursor / n, cursor % n);
                        if r < -enter_tol && entering.is_none_or(|(_, best)| r < best) {
                            entering = Some((cursor, r));
                        }
                        cursor = (cursor + 1) % total;
                    }
                    scanned = stop;
                    if entering.is_some() {
                        break;
                    }
                }
            }
            let Some((k, _)) = entering else { break };
            if pivots >= max_pivots {
                return Err(Error::NoConvergence { solver: "network simplex", iterations: pivots });
            }
            pivots += 1;
            let (i, j) = (k / n, k % n);
            let arcs = self.cycle(i, j);
            // arcs alternate −, +, −, … starting next to column j
            let mut leave = arcs[0];
            for &a in arcs.iter().step_by(2) {
                let (fa, fl) = (self.edges[a].flow, self.edges[leave].flow);
                let better = if bland {
                    fa < fl || (fa == fl && (self.edges[a].i, self.edges[a].j) < (self.edges[leave].i, self.edges[leave].j))
                } else {
                    fa < fl
                };
                if better {
                    leave = a;
                }
            }
            let theta = self.edges[leave].flow;
            for (pos, &a) in arcs.iter().enumerate() {
                if pos % 2 == 0 {
                    self.edges[a].flow -= theta;
                } else {
                    self.edges[a].flow += theta;
                }
            }
            degenerate_run = if theta > 0.0 { 0 } else { degenerate_run + 1 };
            // the entering arc takes the leaving arc's slot
            let old = self.edges[leave];
            self.adj[old.i].retain(|&x| x != leave);
            self.adj[m + old.j].retain(|&x| x != leave);
            self.edges[leave] = Edge { i, j, flow: theta };
            self.adj[i].push(leave);
            self.adj[m + j].push(leave);
        }
        Ok((self.edges, self.u, self.v, pivots))
    }
}

fn check_marginals(a: &[f64], b: &[f64]) -> Result<()> {
    for w in [a, b] {
        let s: f64 = w.iter().sum();
        if w.iter().any(|x| !(*x >= 0.0)) || (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("marginal must be a probability vector (sum {s})")));
        }
    }
    Ok(())
}

/// Exact optimal transport between marginals `a` and `b` for `cost`.
pub fn solve_transport(cost: &CostMatrix, a: &[f64], b: &[f64]) -> Result<TransportSolution> {
    if a.len() != cost.rows || b.len() != cost.cols {
        return Err(Error::DimensionMismatch { expected: cost.rows, found: a.len() });
    }
    check_marginals(a, b)?;
    let (m, n) = (cost.rows, cost.cols);
    let max_pivots = 50 * m * n + 1000;
    let (edges, u, v, pivots) = Simplex::northwest(cost, a, b).solve(max_pivots)?;
    let mut plan = vec![0.0; m * n];
    for e in &edges {
        plan[e.i * n + e.j] += e.flow.max(0.0);
    }
    let value: f64 = plan.iter().zip(&cost.values).map(|(p, c)| p * c).sum();
    let scale = cost.values.iter().fold(1.0f64, |s, c| s.max(c.abs()));
    let mut infeasible: f64 = 0.0;
    let mut slack = 0.0;
    for i in 0..m {
        for j in 0..n {
            let r = cost.at(i, j) - u[i] - v[j];
            infeasible = infeasible.max(-r);
            slack += plan[i * n + j] * r.abs();
        }
    }
    let certificate = infeasible.max(slack) / scale;
    let plan = CouplingPlan { rows: m, cols: n, plan, cost: value };
    let residual = plan.marginal_residual(a, b);
    if certificate > CERTIFICATE_TOL || residual > 1e-9 {
        return Err(Error::NoConvergence { solver: "network simplex certificate", iterations: pivots });
    }
    Ok(TransportSolution { plan, u, v, certificate, pivots })
}

/// Exact `W_p(mu, nu)` with the optimal plan.
pub fn wasserstein_exact(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64) -> Result<(f64, CouplingPlan)> {
    wasserstein_exact_capped(mu, nu, p, EXACT_CAP)
}

pub fn wasserstein_exact_capped(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    p: f64,
    cap: usize,
) -> Result<(f64, CouplingPlan)> {
    let size = mu.size().max(nu.size());
    if size > cap {
        return Err(Error::SolverCap { size, cap });
    }
    let cost = CostMatrix::from_measures(mu, nu, p)?;
    let sol = solve_transport(&cost, mu.weights(), nu.weights())?;
    Ok((sol.plan.cost.max(0.0).powf(1.0 / p), sol.plan))
}

/// Result of the entropic solver.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropicSolution {
    /// `(cost of the rounded plan)^{1/p}`, an upper bound on the exact value.
    pub value: f64,
    pub plan: CouplingPlan,
    /// Unregularized dual objective after a c-transform: a lower bound on
    /// the exact cost.
    pub dual_bound: f64,
    /// `plan.cost − dual_bound`.
    pub gap: f64,
    pub epsilon: f64,
    pub iterations: usize,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let top = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + values.map(|v| (v - top).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn at one `epsilon`, warm-started from `(f, g)`.
fn sinkhorn(
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    epsilon: f64,
    max_iter: usize,
    f: &mut [f64],
    g: &mut [f64],
) -> Result<usize> {
    let (m, n) = (cost.rows, cost.cols);
    let la: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    for it in 1..=max_iter {
        f.par_iter_mut().enumerate().for_each(|(i, fi)| {
            let row = &cost.values[i * n..(i + 1) * n];
            *fi = epsilon * la[i] - epsilon * log_sum_exp((0..n).map(|j| (g[j] - row[j]) / epsilon));
        });
        g.par_iter_mut().enumerate().for_each(|(j, gj)| {
            *gj = epsilon * lb[j] - epsilon * log_sum_exp((0..m).map(|i| (f[i] - cost.values[i * n + j]) / epsilon));
        });
        // columns are exact after the g update; measure the row error
        let err: f64 = (0..m)
            .into_par_iter()
            .map(|i| {
                let row = &cost.values[i * n..(i + 1) * n];
                let s: f64 = (0..n).map(|j| ((f[i] + g[j] - row[j]) / epsilon).exp()).sum();
                (s - a[i]).abs()
            })
            .sum();
        if err < 1e-9 {
            return Ok(it);
        }
    }
    Err(Error::NoConvergence { solver: "sinkhorn", iterations: max_iter })
}

/// Round an approximate plan onto the transport polytope.
fn round_plan(mut plan: Vec<f64>, m: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    for i in 0..m {
        let s: f64 = plan[i * n..(i + 1) * n].iter().sum();
        if s > a[i] {
            let r = a[i] / s;
            plan[i * n..(i + 1) * n].iter_mut().for_each(|x| *x *= r);
        }
    }
    let mut cs = vec![0.0; n];
    for i in 0..m {
        (0..n).for_each(|j| cs[j] += plan[i * n + j]);
    }
    for j in 0..n {
        if cs[j] > b[j] {
            let r = b[j] / cs[j];
            (0..m).for_each(|i| plan[i * n + j] *= r);
        }
    }
    let rows: Vec<f64> = (0..m).map(|i| a[i] - plan[i * n..(i + 1) * n].iter().sum::<f64>()).collect();
    let mut cols = b.to_vec();
    for i in 0..m {
        (0..n).for_each(|j| cols[j] -= plan[i * n + j]);
    }
    let deficit: f64 = cols.iter().sum();
    if deficit > 0.0 {
        for i in 0..m {
            for j in 0..n {
                plan[i * n + j] += rows[i].max(0.0) * cols[j].max(0.0) / deficit;
            }
        }
    }
    plan
}

/// Entropic approximation at a single `epsilon` (absolute cost units).
pub fn wasserstein_entropic(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    p: f64,
    epsilon: f64,
    max_iter: usize,
) -> Result<EntropicSolution> {
    let cost = CostMatrix::from_measures(mu, nu, p)?;
    entropic_ladder(&cost, mu.weights(), nu.weights(), p, &[epsilon], max_iter)
}

/// Entropic approximation along `ladder`, given in units of the median
/// cost, warm-starting each rung from the previous potentials.
pub fn wasserstein_entropic_ladder(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    p: f64,
    ladder: &[f64],
    max_iter: usize,
) -> Result<EntropicSolution> {
    let cost = CostMatrix::from_measures(mu, nu, p)?;
    let median = cost.median();
    let scale = if median > 0.0 { median } else { 1.0 };
    let eps: Vec<f64> = ladder.iter().map(|l| l * scale).collect();
    entropic_ladder(&cost, mu.weights(), nu.weights(), p, &eps, max_iter)
}

pub fn entropic_ladder(
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    p: f64,
    epsilons: &[f64],
    max_iter: usize,
) -> Result<EntropicSolution> {
    check_marginals(a, b)?;
    if epsilons.is_empty() || epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let (m, n) = (cost.rows, cost.cols);
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut iterations = 0;
    for &eps in epsilons {
        iterations += sinkhorn(cost, a, b, eps, max_iter, &mut f, &mut g)?;
    }
    let eps = *epsilons.last().unwrap();
    let raw: Vec<f64> = (0..m * n)
        .map(|k| ((f[k / n] + g[k % n] - cost.values[k]) / eps).exp())
        .collect();
    let plan = round_plan(raw, m, n, a, b);
    let value_cost: f64 = plan.iter().zip(&cost.values).map(|(x, c)| x * c).sum();
    // c-transform makes (f, g') feasible for the unregularized dual
    let gt: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| cost.at(i, j) - f[i]).fold(f64::INFINITY, f64::min))
        .collect();
    let dual_bound: f64 = a.iter().zip(&f).map(|(w, x)| w * x).sum::<f64>()
        + b.iter().zip(&gt).map(|(w, x)| w * x).sum::<f64>();
    Ok(EntropicSolution {
        value: value_cost.max(0.0).powf(1.0 / p),
        plan: CouplingPlan { rows: m, cols: n, plan, cost: value_cost },
        dual_bound,
        gap: value_cost - dual_bound,
        epsilon: eps,
        iterations,
    })
}

/// How to evaluate the relative entropy of a drift perturbation.
#[derive(Debug, Clone, Copy)]
pub enum EntropyMode<'a> {
    /// `γ` depends on time only: exact quadrature.
    Deterministic,
    /// Average over sample paths of the perturbed law.
    Adapted(Option<&'a PathBundle>),
}

/// Relative entropy estimate with its Monte Carlo standard error (zero for
/// the exact mode).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EntropyEstimate {
    pub value: f64,
    pub stderr: f64,
}

/// `H = ½ E ∫_0^T ‖γ_t‖² dt`.
pub fn relative_entropy_drift(gamma: &DriftPerturbation, horizon: f64, mode: EntropyMode) -> Result<EntropyEstimate> {
    relative_entropy_on(gamma, 0.0, horizon, mode)
}

/// `½ E ∫_a^b ‖γ_t‖² dt`.
pub fn relative_entropy_on(gamma: &DriftPerturbation, a: f64, b: f64, mode: EntropyMode) -> Result<EntropyEstimate> {
    match mode {
        EntropyMode::Deterministic => {
            Ok(EntropyEstimate { value: 0.5 * gamma.square_integral(a, b)?, stderr: 0.0 })
        }
        EntropyMode::Adapted(None) => Err(Error::MissingSamples),
        EntropyMode::Adapted(Some(bundle)) => {
            if bundle.dim() != gamma.dim() {
                return Err(Error::DimensionMismatch { expected: gamma.dim(), found: bundle.dim() });
            }
            let grid = bundle.grid();
            let mut out = vec![0.0; gamma.dim()];
            let per_path: Vec<f64> = (0..bundle.num_paths())
                .map(|p| {
                    let mut h = 0.0;
                    for j in 0..grid.steps {
                        let t = grid.time(j);
                        if t < a || t >= b {
                            continue;
                        }
                        gamma.eval(t, bundle.point(p, j), &mut out);
                        h += 0.5 * out.iter().map(|v| v * v).sum::<f64>() * grid.dt;
                    }
                    h
                })
                .collect();
            let (value, stderr) = mean_and_stderr(&per_path);
            Ok(EntropyEstimate { value, stderr })
        }
    }
}
