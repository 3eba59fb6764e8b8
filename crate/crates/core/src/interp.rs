//! Trilinear sampling on node-centred lattices with edge clamping.
//!
//! Positions are in voxel units. Both the volume code path and the autodiff
//! warp use these routines so their results agree to the last bit.

use crate::Scalar;

/// Bracketing indices and fractional offset of a position along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisWeight<T> {
    pub i0: usize,
    pub i1: usize,
    pub frac: T,
    /// The position was outside `[0, n-1]` and got clamped; the sample has
    /// no derivative with respect to it.
    pub clamped: bool,
}

#[inline]
pub(crate) fn axis_weight<T: Scalar>(pos: T, n: usize) -> AxisWeight<T> {
    if n == 1 {
        return AxisWeight {
            i0: 0,
            i1: 0,
            frac: T::zero(),
            clamped: true,
        };
    }
    let last = T::from_usize(n - 1).unwrap();
    if pos <= T::zero() {
        AxisWeight {
            i0: 0,
            i1: 1,
            frac: T::zero(),
            clamped: pos < T::zero(),
        }
    } else if pos >= last {
        AxisWeight {
            i0: n - 2,
            i1: n - 1,
            frac: T::one(),
            clamped: pos > last,
        }
    } else {
        let fl = pos.floor();
        let mut i0 = fl.to_usize().unwrap();
        if i0 > n - 2 {
            i0 = n - 2;
        }
        AxisWeight {
            i0,
            i1: i0 + 1,
            frac: pos - T::from_usize(i0).unwrap(),
            clamped: false,
        }
    }
}

/// Exact at both ends and for `a == b`.
#[inline]
fn lerp<T: Scalar>(a: T, b: T, f: T) -> T {
    if f == T::one() {
        b
    } else {
        a + f * (b - a)
    }
}

/// The eight corner values around a sample point, as `c[z][y][x]`.
#[inline]
fn corners<T: Scalar>(
    data: &[T],
    dims: [usize; 3],
    wx: &AxisWeight<T>,
    wy: &AxisWeight<T>,
    wz: &AxisWeight<T>,
) -> [[[T; 2]; 2]; 2] {
    let nx = dims[0];
    let plane = dims[0] * dims[1];
    let mut c = [[[T::zero(); 2]; 2]; 2];
    for (zi, k) in [wz.i0, wz.i1].into_iter().enumerate() {
        for (yi, j) in [wy.i0, wy.i1].into_iter().enumerate() {
            let row = k * plane + j * nx;
            c[zi][yi][0] = data[row + wx.i0];
            c[zi][yi][1] = data[row + wx.i1];
        }
    }
    c
}

/// Sample `data` (x-fastest, dims `[nx, ny, nz]`) at voxel position `pos`.
#[inline]
pub(crate) fn sample<T: Scalar>(data: &[T], dims: [usize; 3], pos: [T; 3]) -> T {
    let wx = axis_weight(pos[0], dims[0]);
    let wy = axis_weight(pos[1], dims[1]);
    let wz = axis_weight(pos[2], dims[2]);
    let c = corners(data, dims, &wx, &wy, &wz);
    let y0 = lerp(lerp(c[0][0][0], c[0][0][1], wx.frac), lerp(c[0][1][0], c[0][1][1], wx.frac), wy.frac);
    let y1 = lerp(lerp(c[1][0][0], c[1][0][1], wx.frac), lerp(c[1][1][0], c[1][1][1], wx.frac), wy.frac);
    lerp(y0, y1, wz.frac)
}

/// Sample together with the partial derivatives with respect to each
/// position component. Clamped axes report a zero derivative.
#[inline]
pub(crate) fn sample_with_grad<T: Scalar>(data: &[T], dims: [usize; 3], pos: [T; 3]) -> (T, [T; 3]) {
    let wx = axis_weight(pos[0], dims[0]);
    let wy = axis_weight(pos[1], dims[1]);
    let wz = axis_weight(pos[2], dims[2]);
    let c = corners(data, dims, &wx, &wy, &wz);
    let (fx, fy, fz) = (wx.frac, wy.frac, wz.frac);

    let x00 = lerp(c[0][0][0], c[0][0][1], fx);
    let x01 = lerp(c[0][1][0], c[0][1][1], fx);
    let x10 = lerp(c[1][0][0], c[1][0][1], fx);
    let x11 = lerp(c[1][1][0], c[1][1][1], fx);
    let y0 = lerp(x00, x01, fy);
    let y1 = lerp(x10, x11, fy);
    let value = lerp(y0, y1, fz);

    let gz = if wz.clamped { T::zero() } else { y1 - y0 };
    let gy = if wy.clamped {
        T::zero()
    } else {
        lerp(x01 - x00, x11 - x10, fz)
    };
    let gx = if wx.clamped {
        T::zero()
    } else {
        let d00 = c[0][0][1] - c[0][0][0];
        let d01 = c[0][1][1] - c[0][1][0];
        let d10 = c[1][0][1] - c[1][0][0];
        let d11 = c[1][1][1] - c[1][1][0];
        lerp(lerp(d00, d01, fy), lerp(d10, d11, fy), fz)
    };
    (value, [gx, gy, gz])
}

/// Corner indices and trilinear weights of a sample, for scattering adjoints.
#[inline]
pub(crate) fn sample_weights<T: Scalar>(dims: [usize; 3], pos: [T; 3]) -> [(usize, T); 8] {
    let wx = axis_weight(pos[0], dims[0]);
    let wy = axis_weight(pos[1], dims[1]);
    let wz = axis_weight(pos[2], dims[2]);
    let nx = dims[0];
    let plane = dims[0] * dims[1];
    let one = T::one();
    let mut out = [(0usize, T::zero()); 8];
    let mut n = 0;
    for (k, fz) in [(wz.i0, one - wz.frac), (wz.i1, wz.frac)] {
        for (j, fy) in [(wy.i0, one - wy.frac), (wy.i1, wy.frac)] {
            for (i, fx) in [(wx.i0, one - wx.frac), (wx.i1, wx.frac)] {
                out[n] = (k * plane + j * nx + i, fz * fy * fx);
                n += 1;
            }
        }
    }
    out
}

/// Nearest lattice node to a clamped position.
#[inline]
pub(crate) fn nearest(dims: [usize; 3], pos: [f64; 3]) -> usize {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let last = (dims[a] - 1) as f64;
        idx[a] = pos[a].clamp(0.0, last).round() as usize;
    }
    idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])
}
