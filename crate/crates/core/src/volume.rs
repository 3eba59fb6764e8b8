//! Scalar volumes, binary masks and landmark sets on a node-centred lattice.
//!
//! Voxel `(i, j, k)` sits at physical position `(i*sx, j*sy, k*sz)` mm and data
//! is stored x-fastest. `z` is the superior-inferior axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp;
use crate::Scalar;

/// Lattice geometry shared by volumes, masks and displacement fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("zero-sized dims {dims:?}")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        Ok(Self { dims, spacing })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Physical position (mm) of a voxel.
    #[inline]
    pub fn position(&self, ijk: [usize; 3]) -> [f64; 3] {
        [
            ijk[0] as f64 * self.spacing[0],
            ijk[1] as f64 * self.spacing[1],
            ijk[2] as f64 * self.spacing[2],
        ]
    }

    /// Physical extent `(n-1)*s` per axis.
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.dims[a] - 1) as f64 * self.spacing[a])
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let e = self.extent();
        (0..3).all(|a| p[a].is_finite() && p[a] >= 0.0 && p[a] <= e[a])
    }

    /// Physical mm to fractional voxel coordinates.
    #[inline]
    pub fn to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| p[a] / self.spacing[a])
    }

    pub(crate) fn check_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimsMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// A scalar 3D image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D<T> {
    grid: Grid,
    data: Vec<T>,
}

impl<T: Scalar> Volume3D<T> {
    pub fn new(grid: Grid, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::DimsMismatch(format!(
                "volume {:?} needs {} values, got {}",
                grid.dims,
                grid.len(),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume value at index {pos}")));
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid, value: T) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    /// Evaluate `f(position_mm)` at every voxel.
    pub fn from_fn(grid: Grid, mut f: impl FnMut([f64; 3]) -> T) -> Result<Self> {
        let data = (0..grid.len())
            .map(|idx| f(grid.position(grid.coords(idx))))
            .collect();
        Self::new(grid, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    /// Trilinear sample at a physical position (mm), clamped to the edge.
    pub fn sample_mm(&self, p: [f64; 3]) -> T {
        let v = self.grid.to_voxel(p);
        interp::sample(&self.data, self.grid.dims, v.map(T::of))
    }

    /// Apply `f` to every voxel. The result is validated like any new volume.
    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.grid, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Convert to a different scalar width.
    pub fn cast<U: Scalar>(&self) -> Volume3D<U> {
        Volume3D {
            grid: self.grid,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Resample onto `new_dims` preserving the physical extent. Corner voxel
    /// centres map onto corner voxel centres.
    pub fn resample_trilinear(&self, new_dims: [usize; 3]) -> Result<Self> {
        let (grid, ratio) = resampled_grid(&self.grid, new_dims)?;
        let old = self.grid.dims;
        let data = (0..grid.len())
            .map(|idx| {
                let c = grid.coords(idx);
                let pos = [0, 1, 2].map(|a| T::of(c[a] as f64 * ratio[a]));
                interp::sample(&self.data, old, pos)
            })
            .collect();
        Self::new(grid, data)
    }
}

/// Grid with the same physical extent on `new_dims`, and the old-voxels per
/// new-voxel ratio (exactly 1 on unchanged axes).
fn resampled_grid(old: &Grid, new_dims: [usize; 3]) -> Result<(Grid, [f64; 3])> {
    if new_dims.iter().any(|&n| n < 2) {
        return Err(Error::InvalidArgument(format!(
            "resample dims must be >= 2 per axis, got {new_dims:?}"
        )));
    }
    let d = old.dims;
    let spacing = [0, 1, 2].map(|a| {
        if d[a] == new_dims[a] {
            old.spacing[a]
        } else {
            (d[a] - 1) as f64 * old.spacing[a] / (new_dims[a] - 1) as f64
        }
    });
    let ratio = [0, 1, 2].map(|a| (d[a] - 1) as f64 / (new_dims[a] - 1) as f64);
    Ok((Grid::new(new_dims, spacing)?, ratio))
}

/// Binary label volume with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask3D {
    grid: Grid,
    data: Vec<u8>,
}

impl Mask3D {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::DimsMismatch(format!(
                "mask {:?} needs {} values, got {}",
                grid.dims,
                grid.len(),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "mask value {} at index {pos} is not 0/1",
                data[pos]
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut([f64; 3]) -> bool) -> Self {
        let data = (0..grid.len())
            .map(|idx| f(grid.position(grid.coords(idx))) as u8)
            .collect();
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.grid.index(i, j, k)] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Nearest-neighbour resample onto `new_dims`, preserving the extent.
    pub fn resample_nearest(&self, new_dims: [usize; 3]) -> Result<Self> {
        let (grid, ratio) = resampled_grid(&self.grid, new_dims)?;
        let data = (0..grid.len())
            .map(|idx| {
                let c = grid.coords(idx);
                self.data[interp::nearest(self.grid.dims, [0, 1, 2].map(|a| c[a] as f64 * ratio[a]))]
            })
            .collect();
        Self::new(grid, data)
    }

    /// Foreground voxels with at least one face-adjacent background neighbour.
    /// Neighbours beyond the volume border count as background.
    pub fn is_surface(&self, idx: usize) -> bool {
        if self.data[idx] == 0 {
            return false;
        }
        let [i, j, k] = self.grid.coords(idx);
        let d = self.grid.dims;
        let ijk = [i, j, k];
        for a in 0..3 {
            if ijk[a] == 0 || ijk[a] + 1 == d[a] {
                return true;
            }
            let mut lo = ijk;
            lo[a] -= 1;
            let mut hi = ijk;
            hi[a] += 1;
            if !self.get(lo[0], lo[1], lo[2]) || !self.get(hi[0], hi[1], hi[2]) {
                return true;
            }
        }
        false
    }
}

/// Labelled points in physical coordinates (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    ids: Vec<u32>,
    points: Vec<[f64; 3]>,
}

impl LandmarkSet {
    pub fn new(ids: Vec<u32>, points: Vec<[f64; 3]>) -> Result<Self> {
        if ids.len() != points.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ids for {} points",
                ids.len(),
                points.len()
            )));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::IdMismatch(format!("duplicate landmark id {}", w[0])));
        }
        if let Some(p) = points.iter().find(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("landmark {p:?}")));
        }
        Ok(Self { ids, points })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, [f64; 3])> + '_ {
        self.ids.iter().copied().zip(self.points.iter().copied())
    }

    pub fn get(&self, id: u32) -> Option<[f64; 3]> {
        self.ids.iter().position(|&x| x == id).map(|p| self.points[p])
    }

    pub fn check_within(&self, grid: &Grid) -> Result<()> {
        match self.points.iter().find(|p| !grid.contains(**p)) {
            Some(p) => Err(Error::OutOfExtent(*p)),
            None => Ok(()),
        }
    }
}
