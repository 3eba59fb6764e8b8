//! Dense 3D cross-correlation kernels (forward and both adjoints).
//!
//! Layouts: input `[cin, z, y, x]`, weights `[cout, cin, k, k, k]`, output
//! `[cout, oz, oy, ox]`. Zero padding of `k / 2` on every side. Work is split
//! over output (or input) channels, so results do not depend on the thread
//! count.

use rayon::prelude::*;

use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, input: [usize; 3]) -> Self {
        let pad = k / 2;
        let output = input.map(|n| (n + 2 * pad - k) / stride + 1);
        Self {
            cin,
            cout,
            k,
            stride,
            pad,
            input,
            output,
        }
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    /// Output indices `o` along an axis of input length `n` for which
    /// `o * stride + tap - pad` lands inside the input.
    #[inline]
    fn valid(&self, tap: usize, n: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let last = n as isize - 1 - off;
        if last < 0 {
            return (0, 0);
        }
        let hi = (last / s + 1).min(out as isize);
        (lo as usize, hi.max(lo) as usize)
    }
}

/// Accumulate the contribution of one input channel and tap into an output plane.
#[inline]
fn accumulate_tap<T: Scalar>(
    g: &ConvGeom,
    out: &mut [T],
    src: &[T],
    wv: T,
    tap: [usize; 3],
) {
    let [ix_n, iy_n, iz_n] = [g.input[2], g.input[1], g.input[0]];
    let [ox_n, oy_n, oz_n] = [g.output[2], g.output[1], g.output[0]];
    let (z0, z1) = g.valid(tap[0], iz_n, oz_n);
    let (y0, y1) = g.valid(tap[1], iy_n, oy_n);
    let (x0, x1) = g.valid(tap[2], ix_n, ox_n);
    if x0 >= x1 {
        return;
    }
    let s = g.stride;
    for oz in z0..z1 {
        let iz = oz * s + tap[0] - g.pad;
        for oy in y0..y1 {
            let iy = oy * s + tap[1] - g.pad;
            let orow = &mut out[(oz * oy_n + oy) * ox_n..][x0..x1];
            let ibase = (iz * iy_n + iy) * ix_n + x0 * s + tap[2] - g.pad;
            if s == 1 {
                let irow = &src[ibase..ibase + (x1 - x0)];
                for (o, &i) in orow.iter_mut().zip(irow) {
                    *o += wv * i;
                }
            } else {
                for (n, o) in orow.iter_mut().enumerate() {
                    *o += wv * src[ibase + n * s];
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let olen = g.out_len();
    let ilen = g.in_len();
    let k3 = g.k * g.k * g.k;
    let mut out = vec![T::zero(); g.cout * olen];
    out.par_chunks_mut(olen).enumerate().for_each(|(co, plane)| {
        if let Some(b) = b {
            plane.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.cin {
            let src = &x[ci * ilen..(ci + 1) * ilen];
            let wbase = (co * g.cin + ci) * k3;
            for kz in 0..g.k {
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = w[wbase + (kz * g.k + ky) * g.k + kx];
                        if wv != T::zero() {
                            accumulate_tap(g, plane, src, wv, [kz, ky, kx]);
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient with respect to the input.
pub(crate) fn backward_input<T: Scalar>(g: &ConvGeom, gout: &[T], w: &[T]) -> Vec<T> {
    let olen = g.out_len();
    let ilen = g.in_len();
    let k3 = g.k * g.k * g.k;
    let [ix_n, iy_n, iz_n] = [g.input[2], g.input[1], g.input[0]];
    let [ox_n, oy_n, oz_n] = [g.output[2], g.output[1], g.output[0]];
    let s = g.stride;
    let mut gx = vec![T::zero(); g.cin * ilen];
    gx.par_chunks_mut(ilen).enumerate().for_each(|(ci, plane)| {
        for co in 0..g.cout {
            let go = &gout[co * olen..(co + 1) * olen];
            let wbase = (co * g.cin + ci) * k3;
            for kz in 0..g.k {
                let (z0, z1) = g.valid(kz, iz_n, oz_n);
                for ky in 0..g.k {
                    let (y0, y1) = g.valid(ky, iy_n, oy_n);
                    for kx in 0..g.k {
                        let (x0, x1) = g.valid(kx, ix_n, ox_n);
                        let wv = w[wbase + (kz * g.k + ky) * g.k + kx];
                        if wv == T::zero() || x0 >= x1 {
                            continue;
                        }
                        for oz in z0..z1 {
                            let iz = oz * s + kz - g.pad;
                            for oy in y0..y1 {
                                let iy = oy * s + ky - g.pad;
                                let grow = &go[(oz * oy_n + oy) * ox_n..][x0..x1];
                                let ibase = (iz * iy_n + iy) * ix_n + x0 * s + kx - g.pad;
                                if s == 1 {
                                    let irow = &mut plane[ibase..ibase + (x1 - x0)];
                                    for (i, &o) in irow.iter_mut().zip(grow) {
                                        *i += wv * o;
                                    }
                                } else {
                                    for (n, &o) in grow.iter().enumerate() {
                                        plane[ibase + n * s] += wv * o;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

/// Gradient with respect to the weights.
pub(crate) fn backward_weight<T: Scalar>(g: &ConvGeom, gout: &[T], x: &[T]) -> Vec<T> {
    let olen = g.out_len();
    let ilen = g.in_len();
    let k3 = g.k * g.k * g.k;
    let [ix_n, iy_n, iz_n] = [g.input[2], g.input[1], g.input[0]];
    let [ox_n, oy_n, oz_n] = [g.output[2], g.output[1], g.output[0]];
    let s = g.stride;
    let mut gw = vec![T::zero(); g.cout * g.cin * k3];
    gw.par_chunks_mut(g.cin * k3).enumerate().for_each(|(co, wplane)| {
        let go = &gout[co * olen..(co + 1) * olen];
        for ci in 0..g.cin {
            let src = &x[ci * ilen..(ci + 1) * ilen];
            for kz in 0..g.k {
                let (z0, z1) = g.valid(kz, iz_n, oz_n);
                for ky in 0..g.k {
                    let (y0, y1) = g.valid(ky, iy_n, oy_n);
                    for kx in 0..g.k {
                        let (x0, x1) = g.valid(kx, ix_n, ox_n);
                        let mut acc = T::zero();
                        if x0 < x1 {
                            for oz in z0..z1 {
                                let iz = oz * s + kz - g.pad;
                                for oy in y0..y1 {
                                    let iy = oy * s + ky - g.pad;
                                    let grow = &go[(oz * oy_n + oy) * ox_n..][x0..x1];
                                    let ibase = (iz * iy_n + iy) * ix_n + x0 * s + kx - g.pad;
                                    if s == 1 {
                                        let irow = &src[ibase..ibase + (x1 - x0)];
                                        acc += grow.iter().zip(irow).map(|(&a, &b)| a * b).sum::<T>();
                                    } else {
                                        for (n, &o) in grow.iter().enumerate() {
                                            acc += o * src[ibase + n * s];
                                        }
                                    }
                                }
                            }
                        }
                        wplane[(ci * g.k + kz) * g.k * g.k + ky * g.k + kx] = acc;
                    }
                }
            }
        }
    });
    gw
}
