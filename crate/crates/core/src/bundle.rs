//! Sampled paths on a uniform time grid, and their binary file format.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "RTCI" | version u32 | d u64 | n u64 | M u64 | dt f64 | seed u64 |
//! M·(n+1)·d f64 values, path-major, then time, then coordinate
//! [ "LOCT" | M·(n+1) f64 local-time values ]      (reflected paths only)
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RTCI";
pub const LOCALTIME_TAG: &[u8; 4] = b"LOCT";
pub const FORMAT_VERSION: u32 = 1;

/// Uniform grid `t_j = j·dt`, `j = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite() && horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidGrid { horizon, dt });
        }
        let ratio = horizon / dt;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-9 || steps < 1.0 {
            return Err(Error::InvalidGrid { horizon, dt });
        }
        Ok(Self { steps: steps as usize, dt })
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn time(&self, j: usize) -> f64 {
        j as f64 * self.dt
    }

    /// The same horizon with `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Self {
        Self { steps: self.steps * factor, dt: self.dt / factor as f64 }
    }
}

/// `M` paths of a `d`-dimensional process sampled at `n + 1` grid times.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    dim: usize,
    grid: TimeGrid,
    seed: u64,
    values: Vec<f64>,
}

impl PathBundle {
    pub fn new(dim: usize, grid: TimeGrid, seed: u64, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("bundle dimension must be positive".into()));
        }
        let per_path = (grid.steps + 1) * dim;
        if !values.len().is_multiple_of(per_path) {
            return Err(Error::InvalidArgument(format!(
                "{} values do not split into paths of length {per_path}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite value at offset {bad}")));
        }
        Ok(Self { dim, grid, seed, values })
    }

    /// Assemble from per-path buffers of equal length.
    pub fn from_paths(dim: usize, grid: TimeGrid, seed: u64, paths: Vec<Vec<f64>>) -> Result<Self> {
        let values = paths.into_iter().flatten().collect();
        Self::new(dim, grid, seed, values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }
    pub fn steps(&self) -> usize {
        self.grid.steps
    }
    pub fn dt(&self) -> f64 {
        self.grid.dt
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn num_paths(&self) -> usize {
        self.values.len() / self.path_len()
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn path_len(&self) -> usize {
        (self.grid.steps + 1) * self.dim
    }

    /// Path `i`, time-major.
    pub fn path(&self, i: usize) -> &[f64] {
        let len = self.path_len();
        &self.values[i * len..(i + 1) * len]
    }

    pub fn point(&self, path: usize, step: usize) -> &[f64] {
        let p = self.path(path);
        &p[step * self.dim..(step + 1) * self.dim]
    }

    pub fn paths(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.path_len())
    }

    /// Coordinate `k` of every path at grid index `step`.
    pub fn marginal(&self, step: usize, k: usize) -> Vec<f64> {
        self.paths().map(|p| p[step * self.dim + k]).collect()
    }

    /// Keep the first `k` coordinates.
    pub fn leading_coordinates(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.dim {
            return Err(Error::InvalidArgument(format!(
                "cannot keep {k} of {} coordinates",
                self.dim
            )));
        }
        let values = self
            .values
            .chunks_exact(self.dim)
            .flat_map(|pt| pt[..k].iter().copied())
            .collect();
        Self::new(k, self.grid, self.seed, values)
    }

    /// Smallest gap `y_{k+1} − y_k` per adjacent pair when every stored
    /// point is sorted (a ranked bundle); `None` otherwise.
    pub fn ranked_gap_minima(&self) -> Option<Vec<f64>> {
        if self.dim < 2 {
            return None;
        }
        let mut minima = vec![f64::INFINITY; self.dim - 1];
        for pt in self.values.chunks_exact(self.dim) {
            for (k, w) in pt.windows(2).enumerate() {
                let gap = w[1] - w[0];
                if gap < 0.0 {
                    return None;
                }
                minima[k] = minima[k].min(gap);
            }
        }
        Some(minima)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&(self.grid.steps as u64).to_le_bytes())?;
        w.write_all(&(self.num_paths() as u64).to_le_bytes())?;
        w.write_all(&self.grid.dt.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        write_f64s(w, &self.values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + 8 * self.values.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Read a bundle, rejecting anything after the value block.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file = BundleFile::from_bytes(bytes)?;
        if file.localtime.is_some() {
            return Err(Error::Format("unexpected local-time section".into()));
        }
        Ok(file.bundle)
    }
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * xs.len().min(1 << 16));
    for chunk in xs.chunks(1 << 16) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// A bundle plus the optional per-path local-time section.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleFile {
    pub bundle: PathBundle,
    pub localtime: Option<Vec<f64>>,
}

impl BundleFile {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.bundle.write_to(w)?;
        if let Some(lt) = &self.localtime {
            let expected = self.bundle.num_paths() * (self.bundle.steps() + 1);
            if lt.len() != expected {
                return Err(Error::DimensionMismatch { expected, found: lt.len() });
            }
            w.write_all(LOCALTIME_TAG)?;
            write_f64s(w, lt)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dim = cur.u64()? as usize;
        let steps = cur.u64()? as usize;
        let paths = cur.u64()? as usize;
        let dt = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let seed = cur.u64()?;
        if dim == 0 || steps == 0 || !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Format(format!("bad header: d={dim} n={steps} dt={dt}")));
        }
        let count = paths
            .checked_mul(steps + 1)
            .and_then(|c| c.checked_mul(dim))
            .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
        let values = cur.f64s(count)?;
        let grid = TimeGrid { steps, dt };
        let bundle = PathBundle::new(dim, grid, seed, values).map_err(|e| Error::Format(e.to_string()))?;
        let localtime = if cur.remaining() == 0 {
            None
        } else {
            if cur.take(4)? != LOCALTIME_TAG {
                return Err(Error::Format("unknown trailing section".into()));
            }
            Some(cur.f64s(paths * (steps + 1))?)
        };
        if cur.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", cur.remaining())));
        }
        Ok(Self { bundle, localtime })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> PathBundle {
        let grid = TimeGrid::new(1.0, 0.5).unwrap();
        // 2 paths, 3 times, d = 2
        let values = (0..12).map(|v| v as f64 * 0.25).collect();
        PathBundle::new(2, grid, 99, values).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert_eq!(TimeGrid::new(1.0, 1e-3).unwrap().steps, 1000);
        assert!(TimeGrid::new(1.0, 0.3).is_err());
        assert!(TimeGrid::new(1.0, 0.0).is_err());
        let g = TimeGrid::new(2.0, 0.1).unwrap();
        assert!((g.horizon() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn header_layout_is_exact() {
        let b = sample();
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..4], b"RTCI");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), 0.5);
        assert_eq!(u64::from_le_bytes(bytes[40..48].try_into().unwrap()), 99);
        assert_eq!(bytes.len(), 48 + 12 * 8);
        // path-major, then time, then coordinate
        assert_eq!(b.point(1, 2), &[2.5, 2.75]);
        assert_eq!(f64::from_le_bytes(bytes[48 + 8 * 11..].try_into().unwrap()), 2.75);
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 20, 47, bytes.len() - 1] {
            assert!(matches!(PathBundle::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(PathBundle::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(PathBundle::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(PathBundle::from_bytes(&extra).is_err());
    }

    #[test]
    fn localtime_section_round_trips() {
        let file = BundleFile { bundle: sample(), localtime: Some(vec![0.0, 0.1, 0.2, 0.0, 0.0, 0.3]) };
        let bytes = file.to_bytes().unwrap();
        assert_eq!(&bytes[48 + 96..48 + 100], b"LOCT");
        assert_eq!(BundleFile::from_bytes(&bytes).unwrap(), file);
        assert!(BundleFile::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(PathBundle::from_bytes(&bytes).is_err());
    }

    #[test]
    fn non_finite_values_rejected() {
        let grid = TimeGrid::new(1.0, 1.0).unwrap();
        assert!(PathBundle::new(1, grid, 0, vec![0.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(dim in 1usize..4, steps in 1usize..5, paths in 0usize..4, seed: u64,
                            raw in proptest::collection::vec(-1e6f64..1e6, 80)) {
            let grid = TimeGrid { steps, dt: 0.125 };
            let n = paths * (steps + 1) * dim;
            let values: Vec<f64> = raw.iter().cycle().take(n).copied().collect();
            let b = PathBundle::new(dim, grid, seed, values).unwrap();
            prop_assert_eq!(PathBundle::from_bytes(&b.to_bytes()).unwrap(), b);
        }
    }
}
