//! Convex polyhedral domains.
//!
//! A domain is an intersection of closed half-spaces `{x : n·x ≥ b}` with
//! unit inward normals. Projection is exact for the ordered wedge (pool
//! adjacent violators) and for axis-aligned boxes; other polyhedra use
//! Dykstra's alternating projections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::path_rng;

/// Stop Dykstra when a full sweep moves the iterate by less than this.
pub const DYKSTRA_STOP: f64 = 1e-12;
pub const DYKSTRA_MAX_SWEEPS: usize = 100_000;
/// Feasibility tolerance guaranteed for projected points.
pub const FEASIBILITY_TOL: f64 = 1e-9;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `{x : normal·x ≥ offset}` with `‖normal‖ = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    normal: Vec<f64>,
    offset: f64,
}

impl HalfSpace {
    /// Builds the half-space `normal·x ≥ offset`, rescaling both sides so the
    /// stored normal has unit length.
    pub fn new(normal: Vec<f64>, offset: f64) -> Result<Self> {
        let len = norm(&normal);
        if !(len > 0.0 && len.is_finite() && offset.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "half-space needs a finite nonzero normal, got length {len}"
            )));
        }
        Ok(Self { normal: normal.iter().map(|v| v / len).collect(), offset: offset / len })
    }

    pub fn normal(&self) -> &[f64] {
        &self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// `normal·x − offset`; negative outside.
    pub fn slack(&self, x: &[f64]) -> f64 {
        dot(&self.normal, x) - self.offset
    }

    fn project_in_place(&self, x: &mut [f64]) {
        let s = self.slack(x);
        if s < 0.0 {
            for (xi, ni) in x.iter_mut().zip(&self.normal) {
                *xi -= s * ni;
            }
        }
    }

    fn reversed(&self, shift: f64) -> Self {
        Self {
            normal: self.normal.iter().map(|v| -v).collect(),
            offset: -self.offset + shift,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    /// `y_1 ≤ … ≤ y_N`
    Wedge,
    /// Axis-aligned box; infinite bounds allowed.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    General,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolyhedralDomain {
    dim: usize,
    faces: Vec<HalfSpace>,
    label: String,
    witness: Vec<f64>,
    shape: Shape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub point: Vec<f64>,
    pub displacement: f64,
    pub active_faces: Vec<usize>,
}

/// A normal-cone element: the unit direction plus the face weights `α`
/// rescaled to `Σ α_i² = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalDirection {
    pub direction: Vec<f64>,
    pub alphas: Vec<f64>,
}

/// Reusable buffers for repeated projections.
#[derive(Debug, Default, Clone)]
pub struct ProjectionScratch {
    sums: Vec<f64>,
    counts: Vec<usize>,
    increments: Vec<f64>,
    previous: Vec<f64>,
    trial: Vec<f64>,
}

impl PolyhedralDomain {
    /// A general polyhedron. `witness` must satisfy every constraint; when
    /// `check_essential` is set, every face must cut the set.
    pub fn new(
        dim: usize,
        faces: Vec<HalfSpace>,
        label: impl Into<String>,
        witness: Vec<f64>,
        check_essential: bool,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if faces.is_empty() {
            return Err(Error::InvalidArgument("domain needs at least one face".into()));
        }
        for f in &faces {
            if f.normal.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: f.normal.len() });
            }
        }
        if witness.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: witness.len() });
        }
        let domain = Self { dim, faces, label: label.into(), witness, shape: Shape::General };
        let violation = domain.violation(&domain.witness);
        if violation > FEASIBILITY_TOL {
            return Err(Error::EmptyDomain(format!(
                "witness violates a constraint by {violation:e}"
            )));
        }
        if check_essential {
            for i in 0..domain.faces.len() {
                if !domain.is_essential(i) {
                    return Err(Error::RedundantFace(i));
                }
            }
        }
        Ok(domain)
    }

    /// The ordered wedge `{y ∈ R^N : y_1 ≤ … ≤ y_N}`.
    pub fn wedge(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!("wedge needs N ≥ 2, got {n}")));
        }
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let faces = (0..n - 1)
            .map(|k| {
                let mut normal = vec![0.0; n];
                normal[k] = -s;
                normal[k + 1] = s;
                HalfSpace { normal, offset: 0.0 }
            })
            .collect();
        Ok(Self {
            dim: n,
            faces,
            label: format!("wedge({n})"),
            witness: (1..=n).map(|v| v as f64).collect(),
            shape: Shape::Wedge,
        })
    }

    /// `[0, ∞)` in one dimension.
    pub fn half_line() -> Self {
        Self {
            dim: 1,
            faces: vec![HalfSpace { normal: vec![1.0], offset: 0.0 }],
            label: "half-line".into(),
            witness: vec![1.0],
            shape: Shape::Box { lower: vec![0.0], upper: vec![f64::INFINITY] },
        }
    }

    /// Axis-aligned box. Faces are ordered as all lower bounds `x_i ≥ l_i`
    /// followed by all upper bounds `−x_i ≥ −u_i`; infinite bounds add no face.
    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let dim = lower.len();
        if dim == 0 || upper.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: upper.len() });
        }
        let mut faces = Vec::new();
        for (i, &l) in lower.iter().enumerate() {
            if l.is_finite() {
                let mut normal = vec![0.0; dim];
                normal[i] = 1.0;
                faces.push(HalfSpace { normal, offset: l });
            }
        }
        for (i, &u) in upper.iter().enumerate() {
            if u.is_finite() {
                let mut normal = vec![0.0; dim];
                normal[i] = -1.0;
                faces.push(HalfSpace { normal, offset: -u });
            }
        }
        if faces.is_empty() {
            return Err(Error::InvalidArgument("box has no finite bound".into()));
        }
        let mut witness = Vec::with_capacity(dim);
        for (&l, &u) in lower.iter().zip(&upper) {
            if l.is_nan() || u.is_nan() || l >= u {
                return Err(Error::EmptyDomain(format!("interval [{l}, {u}]")));
            }
            witness.push(match (l.is_finite(), u.is_finite()) {
                (true, true) => 0.5 * (l + u),
                (true, false) => l + 1.0,
                (false, true) => u - 1.0,
                (false, false) => 0.0,
            });
        }
        Ok(Self {
            dim,
            faces,
            label: "box".into(),
            witness,
            shape: Shape::Box { lower, upper },
        })
    }

    pub fn unit_box(dim: usize) -> Result<Self> {
        let mut d = Self::boxed(vec![0.0; dim], vec![1.0; dim])?;
        d.label = format!("unit-box({dim})");
        Ok(d)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn faces(&self) -> &[HalfSpace] {
        &self.faces
    }
    pub fn label(&self) -> &str {
        &self.label
    }
    pub fn witness(&self) -> &[f64] {
        &self.witness
    }
    pub fn is_wedge(&self) -> bool {
        self.shape == Shape::Wedge
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: x.len() });
        }
        Ok(())
    }

    /// Largest constraint violation `max_i (b_i − n_i·x)`, clamped at zero.
    pub fn violation(&self, x: &[f64]) -> f64 {
        self.faces.iter().map(|f| -f.slack(x)).fold(0.0, f64::max)
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> Result<bool> {
        self.check_dim(x)?;
        if !(tol >= 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance must be ≥ 0, got {tol}")));
        }
        Ok(self.faces.iter().all(|f| f.slack(x) >= -tol))
    }

    /// Faces with `|n·x − b| ≤ 1e-8·(1 + ‖x‖)`.
    pub fn active_faces(&self, x: &[f64]) -> Vec<usize> {
        let tol = 1e-8 * (1.0 + norm(x));
        self.faces
            .iter()
            .enumerate()
            .filter(|(_, f)| f.slack(x).abs() <= tol)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn project(&self, x: &[f64]) -> Result<ProjectionResult> {
        self.check_dim(x)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("cannot project a non-finite point".into()));
        }
        let mut point = x.to_vec();
        let displacement = self.project_in_place(&mut point, &mut ProjectionScratch::default())?;
        let active_faces = self.active_faces(&point);
        Ok(ProjectionResult { point, displacement, active_faces })
    }

    /// Overwrite `x` with its projection and return the distance moved.
    /// Points already inside are left bitwise unchanged.
    pub fn project_in_place(&self, x: &mut [f64], scratch: &mut ProjectionScratch) -> Result<f64> {
        if self.faces.iter().all(|f| f.slack(x) >= 0.0) {
            return Ok(0.0);
        }
        scratch.previous.clear();
        scratch.previous.extend_from_slice(x);
        match &self.shape {
            Shape::Wedge => pava(x, &mut scratch.sums, &mut scratch.counts),
            Shape::Box { lower, upper } => {
                for ((xi, &l), &u) in x.iter_mut().zip(lower).zip(upper) {
                    *xi = xi.max(l).min(u);
                }
            }
            Shape::General => self.project_general(x, scratch)?,
        }
        Ok(dist(x, &scratch.previous))
    }

    /// Unit direction of the push `projected − unprojected` written to `out`;
    /// returns the push length (0 leaves `out` untouched).
    ///
    /// On the wedge each pooled block is recentered so its components sum
    /// to zero. The raw difference carries a rounding residue that a short
    /// push would blow up into a direction leaving the normal cone.
    pub fn push_direction(&self, projected: &[f64], unprojected: &[f64], out: &mut [f64]) -> f64 {
        for ((o, p), u) in out.iter_mut().zip(projected).zip(unprojected) {
            *o = p - u;
        }
        if self.shape == Shape::Wedge {
            let mut start = 0;
            while start < out.len() {
                let mut end = start + 1;
                while end < out.len() && projected[end] == projected[start] {
                    end += 1;
                }
                let mean = out[start..end].iter().sum::<f64>() / (end - start) as f64;
                out[start..end].iter_mut().for_each(|v| *v -= mean);
                start = end;
            }
        }
        let len = norm(out);
        if len > 0.0 {
            out.iter_mut().for_each(|v| *v /= len);
        }
        len
    }

    fn project_general(&self, x: &mut [f64], scratch: &mut ProjectionScratch) -> Result<()> {
        // A single violated face whose projection lands inside is the answer,
        // since the domain lies in that half-space.
        scratch.trial.clear();
        scratch.trial.extend_from_slice(x);
        for f in &self.faces {
            if f.slack(x) < 0.0 {
                scratch.trial.copy_from_slice(x);
                f.project_in_place(&mut scratch.trial);
                if self.violation(&scratch.trial) <= 0.0 {
                    x.copy_from_slice(&scratch.trial);
                    return Ok(());
                }
            }
        }
        dykstra(&self.faces, x, scratch)
    }

    /// Combine the normals of the active faces at boundary point `x` with the
    /// given nonnegative weights (one per face, zero on inactive faces).
    pub fn normal_cone_direction(&self, x: &[f64], weights: &[f64]) -> Result<NormalDirection> {
        self.check_dim(x)?;
        if weights.len() != self.faces.len() {
            return Err(Error::DimensionMismatch { expected: self.faces.len(), found: weights.len() });
        }
        let violation = self.violation(x);
        if violation > 1e-8 * (1.0 + norm(x)) {
            return Err(Error::OutsideDomain { violation });
        }
        let active = self.active_faces(x);
        if active.is_empty() {
            return Err(Error::NotOnBoundary);
        }
        let mut sq = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("weight {i} is {w}")));
            }
            if w > 0.0 && !active.contains(&i) {
                return Err(Error::InvalidArgument(format!("weight on inactive face {i}")));
            }
            sq += w * w;
        }
        if sq == 0.0 {
            return Err(Error::EmptyActiveSet);
        }
        let scale = sq.sqrt();
        let alphas: Vec<f64> = weights.iter().map(|w| w / scale).collect();
        let mut v = vec![0.0; self.dim];
        for (a, f) in alphas.iter().zip(&self.faces) {
            for (vi, ni) in v.iter_mut().zip(&f.normal) {
                *vi += a * ni;
            }
        }
        let len = norm(&v);
        if len <= 1e-14 {
            return Err(Error::InvalidArgument("weighted normals cancel".into()));
        }
        v.iter_mut().for_each(|vi| *vi /= len);
        Ok(NormalDirection { direction: v, alphas })
    }

    /// Points of the domain: uniform in the cube of half-width `radius` around
    /// the witness, then projected.
    pub fn sample_points(&self, count: usize, radius: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = path_rng(seed, u64::MAX);
        let mut scratch = ProjectionScratch::default();
        (0..count)
            .map(|_| {
                let mut z: Vec<f64> = self
                    .witness
                    .iter()
                    .map(|w| w + radius * (2.0 * rng.random::<f64>() - 1.0))
                    .collect();
                self.project_in_place(&mut z, &mut scratch)?;
                Ok(z)
            })
            .collect()
    }

    /// Whether removing face `i` enlarges the set: probe feasibility of the
    /// other constraints together with `n_i·x ≤ b_i − δ`.
    pub fn is_essential(&self, i: usize) -> bool {
        let delta = 1e-6 * (1.0 + norm(&self.witness));
        let mut probe: Vec<HalfSpace> = self
            .faces
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, f)| f.clone())
            .collect();
        probe.push(self.faces[i].reversed(delta));
        let mut x = self.witness.clone();
        for _ in 0..10_000 {
            let before = x.clone();
            for f in &probe {
                f.project_in_place(&mut x);
            }
            if probe.iter().all(|f| f.slack(&x) >= -1e-12) {
                return true;
            }
            if dist(&x, &before) < 1e-15 {
                return false;
            }
        }
        false
    }
}

/// Nondecreasing isotonic regression with unit weights, in place.
fn pava(y: &mut [f64], sums: &mut Vec<f64>, counts: &mut Vec<usize>) {
    sums.clear();
    counts.clear();
    for &v in y.iter() {
        sums.push(v);
        counts.push(1);
        while sums.len() >= 2 {
            let l = sums.len();
            let (sa, ca) = (sums[l - 2], counts[l - 2] as f64);
            let (sb, cb) = (sums[l - 1], counts[l - 1] as f64);
            // sa/ca > sb/cb without dividing
            if sa * cb > sb * ca {
                sums[l - 2] += sb;
                counts[l - 2] += counts[l - 1];
                sums.pop();
                counts.pop();
            } else {
                break;
            }
        }
    }
    let mut pos = 0;
    for (s, &c) in sums.iter().zip(counts.iter()) {
        let mean = s / c as f64;
        y[pos..pos + c].iter_mut().for_each(|v| *v = mean);
        pos += c;
    }
}

fn dykstra(faces: &[HalfSpace], x: &mut [f64], scratch: &mut ProjectionScratch) -> Result<()> {
    let d = x.len();
    scratch.increments.clear();
    scratch.increments.resize(faces.len() * d, 0.0);
    scratch.trial.clear();
    scratch.trial.resize(d, 0.0);
    let mut before = x.to_vec();
    for _ in 0..DYKSTRA_MAX_SWEEPS {
        before.copy_from_slice(x);
        for (i, f) in faces.iter().enumerate() {
            let incr = &mut scratch.increments[i * d..(i + 1) * d];
            for k in 0..d {
                scratch.trial[k] = x[k] + incr[k];
            }
            x.copy_from_slice(&scratch.trial);
            f.project_in_place(x);
            for k in 0..d {
                incr[k] = scratch.trial[k] - x[k];
            }
        }
        let change = dist(x, &before);
        if change <= DYKSTRA_STOP {
            let violation = faces.iter().map(|f| -f.slack(x)).fold(0.0, f64::max);
            if violation <= FEASIBILITY_TOL {
                return Ok(());
            }
        }
    }
    Err(Error::ProjectionDiverged { iterations: DYKSTRA_MAX_SWEEPS })
}
