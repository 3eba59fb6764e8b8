//! Displacement vector fields and the operations built on them.
//!
//! Fields use the pull-back convention: warping `v` by `phi` gives
//! `out(x) = v(x + phi(x))`. Displacements are stored in millimetres and
//! converted to voxel units only when sampling.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::interp;
use crate::mhd;
use crate::volume::{Grid, LandmarkSet, Mask3D, Volume3D};
use crate::Scalar;

/// Per-voxel displacement `(dx, dy, dz)` in mm, stored as three planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dvf<T> {
    grid: Grid,
    comps: [Vec<T>; 3],
}

impl<T: Scalar> Dvf<T> {
    pub fn new(grid: Grid, comps: [Vec<T>; 3]) -> Result<Self> {
        for (a, c) in comps.iter().enumerate() {
            if c.len() != grid.len() {
                return Err(Error::DimsMismatch(format!(
                    "dvf component {a} has {} values, grid needs {}",
                    c.len(),
                    grid.len()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("dvf component {a}")));
            }
        }
        Ok(Self { grid, comps })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            comps: [0; 3].map(|_| vec![T::zero(); grid.len()]),
        }
    }

    /// Evaluate a displacement function (mm in, mm out) at every voxel.
    pub fn from_fn(grid: Grid, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Result<Self> {
        let mut comps = [0; 3].map(|_| Vec::with_capacity(grid.len()));
        for idx in 0..grid.len() {
            let d = f(grid.position(grid.coords(idx)));
            for a in 0..3 {
                comps[a].push(T::of(d[a]));
            }
        }
        Self::new(grid, comps)
    }

    /// Build from voxel-unit displacements laid out as `[3, nz, ny, nx]`.
    pub fn from_voxel_units(grid: Grid, flat: &[T]) -> Result<Self> {
        let n = grid.len();
        if flat.len() != 3 * n {
            return Err(Error::DimsMismatch(format!(
                "expected {} voxel displacements, got {}",
                3 * n,
                flat.len()
            )));
        }
        let comps = [0, 1, 2].map(|a| {
            let s = T::of(grid.spacing[a]);
            flat[a * n..(a + 1) * n].iter().map(|&u| u * s).collect()
        });
        Self::new(grid, comps)
    }

    /// Voxel-unit displacements laid out as `[3, nz, ny, nx]`.
    pub fn to_voxel_units(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(3 * self.grid.len());
        for a in 0..3 {
            let s = T::of(self.grid.spacing[a]);
            out.extend(self.comps[a].iter().map(|&d| d / s));
        }
        out
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn component(&self, axis: usize) -> &[T] {
        &self.comps[axis]
    }

    #[inline]
    pub fn at(&self, idx: usize) -> [T; 3] {
        [self.comps[0][idx], self.comps[1][idx], self.comps[2][idx]]
    }

    pub fn scale(&self, c: T) -> Self {
        Self {
            grid: self.grid,
            comps: self.comps.clone().map(|v| v.into_iter().map(|x| x * c).collect()),
        }
    }

    pub fn neg(&self) -> Self {
        self.scale(-T::one())
    }

    /// Largest displacement magnitude (mm).
    pub fn max_norm(&self) -> T {
        (0..self.grid.len())
            .map(|i| {
                let d = self.at(i);
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
            })
            .fold(T::zero(), T::max)
    }

    /// Trilinear sample of the displacement (mm) at a voxel-unit position.
    #[inline]
    pub fn sample_voxel(&self, pos: [T; 3]) -> [T; 3] {
        [0, 1, 2].map(|a| interp::sample(&self.comps[a], self.grid.dims, pos))
    }

    /// Voxel-unit sampling position `x + phi(x)` for voxel `idx`.
    #[inline]
    fn target_voxel(&self, idx: usize) -> [T; 3] {
        let c = self.grid.coords(idx);
        [0, 1, 2].map(|a| T::from_usize(c[a]).unwrap() + self.comps[a][idx] / T::of(self.grid.spacing[a]))
    }
}

/// `out(x) = v(x + phi(x))`, trilinear with edge clamping.
pub fn warp<T: Scalar>(v: &Volume3D<T>, phi: &Dvf<T>) -> Result<Volume3D<T>> {
    v.grid().check_same(phi.grid(), "warp")?;
    let dims = v.dims();
    let data = (0..v.grid().len())
        .map(|idx| interp::sample(v.data(), dims, phi.target_voxel(idx)))
        .collect();
    Volume3D::new(*v.grid(), data)
}

/// Nearest-neighbour pull-back of a label mask; labels stay binary.
pub fn warp_mask_nearest<T: Scalar>(m: &Mask3D, phi: &Dvf<T>) -> Result<Mask3D> {
    m.grid().check_same(phi.grid(), "warp_mask_nearest")?;
    let dims = m.dims();
    let data = (0..m.grid().len())
        .map(|idx| {
            let p = phi.target_voxel(idx).map(|c| c.f64());
            m.data()[interp::nearest(dims, p)]
        })
        .collect();
    Mask3D::new(*m.grid(), data)
}

/// `(a ∘ b)(x) = b(x) + a(x + b(x))`.
pub fn compose<T: Scalar>(a: &Dvf<T>, b: &Dvf<T>) -> Result<Dvf<T>> {
    a.grid().check_same(b.grid(), "compose")?;
    let n = a.grid().len();
    let mut comps = [0; 3].map(|_| Vec::with_capacity(n));
    for idx in 0..n {
        let sa = a.sample_voxel(b.target_voxel(idx));
        let db = b.at(idx);
        for ax in 0..3 {
            comps[ax].push(db[ax] + sa[ax]);
        }
    }
    Dvf::new(*a.grid(), comps)
}

/// Central difference along `axis` in index space, one-sided at the borders.
#[inline]
fn central_diff<T: Scalar>(data: &[T], grid: &Grid, ijk: [usize; 3], axis: usize) -> T {
    let n = grid.dims[axis];
    if n < 2 {
        return T::zero();
    }
    let mut lo = ijk;
    let mut hi = ijk;
    let mut span = T::of(2.0);
    if ijk[axis] == 0 {
        hi[axis] += 1;
        span = T::one();
    } else if ijk[axis] == n - 1 {
        lo[axis] -= 1;
        span = T::one();
    } else {
        lo[axis] -= 1;
        hi[axis] += 1;
    }
    (data[grid.index(hi[0], hi[1], hi[2])] - data[grid.index(lo[0], lo[1], lo[2])]) / span
}

/// `det(I + grad phi)` per voxel, with displacements in voxel units.
pub fn jacobian_determinant<T: Scalar>(phi: &Dvf<T>) -> Result<Volume3D<T>> {
    let grid = *phi.grid();
    if grid.dims.iter().any(|&n| n < 2) {
        return Err(Error::InvalidArgument(format!(
            "jacobian needs >= 2 voxels per axis, got {:?}",
            grid.dims
        )));
    }
    let vox: Vec<Vec<T>> = (0..3)
        .map(|a| {
            let s = T::of(grid.spacing[a]);
            phi.comps[a].iter().map(|&d| d / s).collect()
        })
        .collect();
    let data = (0..grid.len())
        .map(|idx| {
            let ijk = grid.coords(idx);
            let mut m = [[T::zero(); 3]; 3];
            for (r, row) in m.iter_mut().enumerate() {
                for (c, cell) in row.iter_mut().enumerate() {
                    *cell = central_diff(&vox[r], &grid, ijk, c);
                    if r == c {
                        *cell += T::one();
                    }
                }
            }
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        })
        .collect();
    Volume3D::new(grid, data)
}

/// Mean over voxels of the squared Frobenius norm of the forward-difference
/// gradient. `comps` are voxel-unit displacement planes; the difference past
/// the last slice of an axis is zero.
pub(crate) fn smoothness_of<T: Scalar>(comps: [&[T]; 3], dims: [usize; 3]) -> T {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let strides = [1, nx, nx * ny];
    let mut acc = T::zero();
    for c in comps {
        for (axis, &stride) in strides.iter().enumerate() {
            let len = dims[axis];
            for idx in 0..n {
                let pos = (idx / stride) % len;
                if pos + 1 < len {
                    let d = c[idx + stride] - c[idx];
                    acc += d * d;
                }
            }
        }
    }
    acc / T::from_usize(n).unwrap()
}

/// Adjoint of [`smoothness_of`]: adds `scale * d penalty / d comp` into `out`.
pub(crate) fn smoothness_grad<T: Scalar>(comp: &[T], dims: [usize; 3], scale: T, out: &mut [T]) {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let strides = [1, nx, nx * ny];
    let k = T::of(2.0) * scale / T::from_usize(n).unwrap();
    for (axis, &stride) in strides.iter().enumerate() {
        let len = dims[axis];
        for idx in 0..n {
            let pos = (idx / stride) % len;
            if pos + 1 < len {
                let g = k * (comp[idx + stride] - comp[idx]);
                out[idx + stride] += g;
                out[idx] -= g;
            }
        }
    }
}

/// Smoothness regulariser on a field, computed in voxel units.
pub fn smoothness_penalty<T: Scalar>(phi: &Dvf<T>) -> T {
    let vox = phi.to_voxel_units();
    let n = phi.grid.len();
    smoothness_of(
        [&vox[..n], &vox[n..2 * n], &vox[2 * n..]],
        phi.grid.dims,
    )
}

/// Map every landmark `p` to `p + phi(p)`.
pub fn propagate_landmarks<T: Scalar>(lm: &LandmarkSet, phi: &Dvf<T>) -> Result<LandmarkSet> {
    lm.check_within(phi.grid())?;
    let points = lm
        .points()
        .iter()
        .map(|&p| {
            let d = phi.sample_voxel(phi.grid.to_voxel(p).map(T::of));
            [0, 1, 2].map(|a| p[a] + d[a].f64())
        })
        .collect();
    LandmarkSet::new(lm.ids().to_vec(), points)
}

fn component_path(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(format!(".{suffix}.mhd"));
    PathBuf::from(s)
}

/// Paths of the three scalar files for a field stem such as `out/dvf_3`.
pub fn dvf_component_paths(base: impl AsRef<Path>) -> [PathBuf; 3] {
    let base = base.as_ref();
    ["dx", "dy", "dz"].map(|s| component_path(base, s))
}

/// Write as three scalar volumes `<base>.dx.mhd`, `<base>.dy.mhd`, `<base>.dz.mhd`.
pub fn write_dvf<T: Scalar>(phi: &Dvf<T>, base: impl AsRef<Path>) -> Result<()> {
    for (a, p) in dvf_component_paths(base).iter().enumerate() {
        mhd::write_float_image(p, &phi.grid, 1, &phi.comps[a])?;
    }
    Ok(())
}

/// Write as one 3-channel image with interleaved components.
pub fn write_dvf_interleaved<T: Scalar>(phi: &Dvf<T>, path: impl AsRef<Path>) -> Result<()> {
    let n = phi.grid.len();
    let mut data = Vec::with_capacity(3 * n);
    for idx in 0..n {
        data.extend_from_slice(&phi.at(idx));
    }
    mhd::write_float_image(path.as_ref(), &phi.grid, 3, &data)
}

/// Read a field written by [`write_dvf`] (given its stem) or by
/// [`write_dvf_interleaved`] (given the file path).
pub fn read_dvf<T: Scalar>(base: impl AsRef<Path>) -> Result<Dvf<T>> {
    let base = base.as_ref();
    let split = dvf_component_paths(base);
    if split[0].exists() {
        let mut grid = None;
        let mut comps: [Vec<T>; 3] = Default::default();
        for (a, p) in split.iter().enumerate() {
            let v: Volume3D<T> = mhd::read_volume(p)?;
            if let Some(g) = grid {
                v.grid().check_same(&g, "dvf components")?;
            }
            grid = Some(*v.grid());
            comps[a] = v.into_data();
        }
        return Dvf::new(grid.unwrap(), comps);
    }
    let raw = mhd::read_raw(base)?;
    if raw.channels != 3 {
        return Err(Error::Header {
            path: base.to_path_buf(),
            msg: format!("dvf needs 3 channels, found {}", raw.channels),
        });
    }
    let mut comps: [Vec<T>; 3] = Default::default();
    for chunk in raw.data.chunks_exact(3) {
        for a in 0..3 {
            comps[a].push(T::of(chunk[a]));
        }
    }
    Dvf::new(raw.grid, comps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn grid(n: usize, s: f64) -> Grid {
        Grid::new([n, n, n], [s, s, s]).unwrap()
    }

    fn smooth_field(g: Grid, amp: f64) -> Dvf<f64> {
        let e = g.extent();
        Dvf::from_fn(g, |p| {
            let u = [0, 1, 2].map(|a| p[a] / e[a]);
            [
                amp * (PI * u[1]).sin() * (PI * u[2]).sin(),
                0.5 * amp * (PI * u[0]).sin() * (PI * u[2]).cos(),
                amp * (PI * u[0]).sin() * (PI * u[1]).sin(),
            ]
        })
        .unwrap()
    }

    fn noise_volume(g: Grid, seed: u64) -> Volume3D<f64> {
        let mut s = seed;
        Volume3D::from_fn(g, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .unwrap()
    }

    #[test]
    fn zero_field_warp_is_exact() {
        let g = grid(6, 1.5);
        let v = noise_volume(g, 1);
        assert_eq!(warp(&v, &Dvf::zeros(g)).unwrap(), v);
    }

    #[test]
    fn lattice_shift_moves_indices() {
        let g = Grid::new([6, 5, 4], [2.0, 1.0, 3.0]).unwrap();
        let v = noise_volume(g, 2);
        let phi = Dvf::from_fn(g, |_| [2.0, 0.0, 0.0]).unwrap();
        let w = warp(&v, &phi).unwrap();
        for k in 0..4 {
            for j in 0..5 {
                for i in 0..5 {
                    assert_eq!(w.get(i, j, k), v.get(i + 1, j, k));
                }
            }
        }
    }

    #[test]
    fn analytic_warp_matches_direct_evaluation() {
        let g = grid(24, 1.0);
        let e = g.extent()[0];
        let f = |p: [f64; 3]| (2.0 * PI * p[0] / e).sin() * (PI * p[1] / e).cos() + 0.5 * (PI * p[2] / e).sin();
        let v = Volume3D::from_fn(g, f).unwrap();
        let phi = smooth_field(g, 1.5);
        let w = warp(&v, &phi).unwrap();
        let mut se = 0.0;
        for idx in 0..g.len() {
            let p = g.position(g.coords(idx));
            let d = phi.at(idx);
            let q = [0, 1, 2].map(|a| (p[a] + d[a]).clamp(0.0, e));
            se += (w.data()[idx] - f(q)).powi(2);
        }
        let rms = (se / g.len() as f64).sqrt();
        assert!(rms < 5e-3, "rms {rms}");
    }

    #[test]
    fn warp_dims_mismatch() {
        let v = Volume3D::<f64>::filled(grid(3, 1.0), 0.0);
        assert!(warp(&v, &Dvf::zeros(grid(4, 1.0))).is_err());
        assert!(compose(&Dvf::<f64>::zeros(grid(3, 1.0)), &Dvf::zeros(grid(4, 1.0))).is_err());
    }

    #[test]
    fn compose_identity_and_translations() {
        let g = grid(8, 2.0);
        let phi = smooth_field(g, 2.0);
        let z = Dvf::zeros(g);
        for c in [compose(&z, &phi).unwrap(), compose(&phi, &z).unwrap()] {
            for a in 0..3 {
                for (x, y) in c.component(a).iter().zip(phi.component(a)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
        let a = Dvf::<f64>::from_fn(g, |_| [2.0, 0.0, -2.0]).unwrap();
        let b = Dvf::<f64>::from_fn(g, |_| [0.0, 4.0, 2.0]).unwrap();
        let ab = compose(&a, &b).unwrap();
        for k in 1..6 {
            for j in 0..5 {
                for i in 0..7 {
                    let d = ab.at(g.index(i, j, k));
                    assert_eq!(d, [2.0, 4.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn compose_with_fixed_point_inverse_vanishes() {
        let g = grid(16, 2.0);
        let phi = smooth_field(g, 2.0);
        // psi(x) = -phi(x + psi(x)), iterated to a fixed point
        let mut psi = phi.neg();
        for _ in 0..60 {
            let n = g.len();
            let mut comps = [0; 3].map(|_| Vec::with_capacity(n));
            for idx in 0..n {
                let s = phi.sample_voxel(psi.target_voxel(idx));
                for a in 0..3 {
                    comps[a].push(-s[a]);
                }
            }
            psi = Dvf::new(g, comps).unwrap();
        }
        let r = compose(&phi, &psi).unwrap();
        assert!(r.max_norm() < 0.1 * 2.0, "residual {}", r.max_norm());
    }

    #[test]
    fn jacobian_identities() {
        let g = Grid::new([6, 7, 5], [1.0, 2.0, 3.0]).unwrap();
        let j = jacobian_determinant(&Dvf::<f64>::zeros(g)).unwrap();
        assert!(j.data().iter().all(|&d| d == 1.0));
        let s = jacobian_determinant(&Dvf::<f64>::from_fn(g, |p| [0.1 * p[0], 0.0, 0.0]).unwrap()).unwrap();
        for k in 1..4 {
            for jj in 1..6 {
                for i in 1..5 {
                    assert!((s.get(i, jj, k) - 1.1).abs() < 1e-6);
                }
            }
        }
        let small = Dvf::<f64>::zeros(Grid::new([1, 3, 3], [1.0; 3]).unwrap());
        assert!(jacobian_determinant(&small).is_err());
    }

    #[test]
    fn smoothness_of_unit_slope() {
        for n in [4usize, 9, 20] {
            let g = Grid::new([n, 3, 5], [2.5, 1.0, 1.0]).unwrap();
            let phi = Dvf::<f64>::from_fn(g, |p| [p[0], 0.0, 0.0]).unwrap();
            // oracle: every voxel but the last x-slice contributes exactly 1
            let expect = ((n - 1) * 3 * 5) as f64 / (n * 3 * 5) as f64;
            assert!((smoothness_penalty(&phi) - expect).abs() < 1e-12);
        }
        let c = Dvf::<f64>::from_fn(grid(5, 1.0), |_| [1.0, -2.0, 3.0]).unwrap();
        assert_eq!(smoothness_penalty(&c), 0.0);
    }

    #[test]
    fn landmarks_follow_fields() {
        let g = grid(8, 2.0);
        let lm = LandmarkSet::new(vec![7, 2], vec![[1.0, 3.0, 5.5], [14.0, 0.0, 2.0]]).unwrap();
        assert_eq!(propagate_landmarks(&lm, &Dvf::<f64>::zeros(g)).unwrap(), lm);
        let shift = Dvf::<f64>::from_fn(g, |_| [0.5, -1.0, 2.0]).unwrap();
        let moved = propagate_landmarks(&lm, &shift).unwrap();
        assert_eq!(moved.ids(), lm.ids());
        for (p, q) in lm.points().iter().zip(moved.points()) {
            assert_eq!(*q, [p[0] + 0.5, p[1] - 1.0, p[2] + 2.0]);
        }
        let out = LandmarkSet::new(vec![1], vec![[15.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(propagate_landmarks(&out, &shift), Err(Error::OutOfExtent(_))));
    }

    #[test]
    fn dvf_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new([4, 3, 2], [1.0, 1.5, 2.0]).unwrap();
        let phi = smooth_field(g, 1.0);
        write_dvf(&phi, dir.path().join("d")).unwrap();
        assert_eq!(read_dvf::<f64>(dir.path().join("d")).unwrap(), phi);
        let p = dir.path().join("v.mhd");
        write_dvf_interleaved(&phi, &p).unwrap();
        assert_eq!(read_dvf::<f64>(&p).unwrap(), phi);

        let narrow = Dvf::<f32>::new(g, phi.comps.clone().map(|c| c.into_iter().map(|v| v as f32).collect())).unwrap();
        write_dvf(&narrow, dir.path().join("n")).unwrap();
        assert_eq!(read_dvf::<f32>(dir.path().join("n")).unwrap(), narrow);
    }

    proptest! {
        #[test]
        fn warp_is_linear_in_the_image(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let g = grid(6, 1.5);
            let v1 = noise_volume(g, seed);
            let v2 = noise_volume(g, seed + 7);
            let phi = smooth_field(g, 2.0);
            let mix = Volume3D::new(g, v1.data().iter().zip(v2.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let lhs = warp(&mix, &phi).unwrap();
            let w1 = warp(&v1, &phi).unwrap();
            let w2 = warp(&v2, &phi).unwrap();
            for i in 0..g.len() {
                prop_assert!((lhs.data()[i] - (a * w1.data()[i] + b * w2.data()[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn smoothness_is_quadratic(c in -10.0f64..10.0, amp in 0.1f64..3.0) {
            let phi = smooth_field(grid(7, 1.3), amp);
            let base = smoothness_penalty(&phi);
            let scaled = smoothness_penalty(&phi.scale(c));
            prop_assert!((scaled - c * c * base).abs() <= 1e-12 * (c * c * base).max(1e-300));
        }

        #[test]
        fn compose_with_zero_is_identity(amp in -3.0f64..3.0) {
            let g = grid(6, 2.0);
            let phi = smooth_field(g, amp);
            let z = Dvf::zeros(g);
            let r = compose(&phi, &z).unwrap();
            for a in 0..3 {
                for (x, y) in r.component(a).iter().zip(phi.component(a)) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
