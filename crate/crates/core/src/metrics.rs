//! Image similarity, overlap and landmark error metrics, and the SSIM report
//! comparing predicted phases against the static baseline.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::error::{Error, Result};
use crate::field::Dvf;
use crate::model::Prediction;
use crate::phantom::PhantomSequence;
use crate::volume::{Grid, LandmarkSet, Mask3D, Volume3D};
use crate::Scalar;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Sums of every `w`-long run along one axis of a `[nx, ny, nz]` array
/// (valid mode), returning the reduced array and its dims.
fn box_sum(data: &[f64], dims: [usize; 3], axis: usize, w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] + 1 - w;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let [ox, oy, oz] = out_dims;
    let mut out = Vec::with_capacity(ox * oy * oz);
    for k in 0..oz {
        for j in 0..oy {
            for i in 0..ox {
                let base = i + dims[0] * (j + dims[1] * k);
                out.push((0..w).map(|s| data[base + s * stride]).sum());
            }
        }
    }
    (out, out_dims)
}

fn window_means(data: &[f64], dims: [usize; 3], w: [usize; 3]) -> Vec<f64> {
    let (a, d) = box_sum(data, dims, 0, w[0]);
    let (b, d) = box_sum(&a, d, 1, w[1]);
    let (c, _) = box_sum(&b, d, 2, w[2]);
    let n = (w[0] * w[1] * w[2]) as f64;
    c.into_iter().map(|s| s / n).collect()
}

/// Mean SSIM over all fully-contained 7³ windows (shorter along axes under 7
/// voxels). `range` defaults to the joint max minus min of the pair.
pub fn ssim<T: Scalar>(a: &Volume3D<T>, b: &Volume3D<T>, range: Option<f64>) -> Result<f64> {
    a.grid().check_same(b.grid(), "metric")?;
    let x: Vec<f64> = a.data().iter().map(|v| v.f64()).collect();
    let y: Vec<f64> = b.data().iter().map(|v| v.f64()).collect();
    let l = match range {
        Some(l) => l,
        None => joint_range(&x, &y),
    };
    if !(l.is_finite() && l >= 0.0) {
        return Err(Error::InvalidArgument(format!("dynamic range must be >= 0, got {l}")));
    }
    if l == 0.0 {
        return if x == y {
            Ok(1.0)
        } else {
            Err(Error::InvalidArgument("zero dynamic range for differing volumes".into()))
        };
    }
    let dims = a.dims();
    let w = dims.map(|n| n.min(SSIM_WINDOW));
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = window_means(&x, dims, w);
    let my = window_means(&y, dims, w);
    let mxx = window_means(&prod(&x, &x), dims, w);
    let myy = window_means(&prod(&y, &y), dims, w);
    let mxy = window_means(&prod(&x, &y), dims, w);
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

fn joint_range(x: &[f64], y: &[f64]) -> f64 {
    let (lo, hi) = x
        .iter()
        .chain(y)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// Dice overlap `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    a.grid().check_same(b.grid(), "metric")?;
    let inter = a.data().iter().zip(b.data()).filter(|(&p, &q)| p == 1 && q == 1).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreReport {
    pub ids: Vec<u32>,
    /// `target - moved` per landmark, mm.
    pub offsets: Vec<[f64; 3]>,
    pub errors_mm: Vec<f64>,
    pub mean_mm: f64,
    /// Population standard deviation.
    pub sd_mm: f64,
}

pub const TRE_HEADER: &str = "id,dx,dy,dz,tre_mm";

/// Euclidean distance between id-matched landmarks, reported in `moved`'s order.
pub fn tre(moved: &LandmarkSet, target: &LandmarkSet) -> Result<TreReport> {
    if moved.len() != target.len() {
        return Err(Error::IdMismatch(format!("{} moved vs {} target landmarks", moved.len(), target.len())));
    }
    let mut ids = Vec::with_capacity(moved.len());
    let mut offsets = Vec::with_capacity(moved.len());
    let mut errors = Vec::with_capacity(moved.len());
    for (id, p) in moved.iter() {
        let q = target
            .get(id)
            .ok_or_else(|| Error::IdMismatch(format!("landmark {id} missing from target")))?;
        let d = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
        ids.push(id);
        errors.push((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
        offsets.push(d);
    }
    let (mean_mm, sd_mm) = mean_sd(&errors);
    Ok(TreReport {
        ids,
        offsets,
        errors_mm: errors,
        mean_mm,
        sd_mm,
    })
}

impl TreReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        csvio::write_table(
            path.as_ref(),
            TRE_HEADER,
            self.ids.iter().zip(&self.offsets).zip(&self.errors_mm).map(|((id, d), e)| {
                format!("{id},{:?},{:?},{:?},{:?}", d[0], d[1], d[2], e)
            }),
        )
    }
}

/// Mean and population standard deviation; zeros for an empty slice.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimRow {
    pub phase: usize,
    /// Predicted phase against truth.
    pub ssim_sim: f64,
    /// Static input against truth.
    pub ssim_gnd: f64,
    /// Dynamic range used for both comparisons.
    pub range: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimReport {
    pub rows: Vec<SsimRow>,
    pub mean_sim: f64,
    pub sd_sim: f64,
    pub mean_gnd: f64,
    pub sd_gnd: f64,
    /// Mean of `ssim_sim - ssim_gnd`.
    pub mean_gain: f64,
    /// Phases where the prediction beats the static baseline.
    pub improved_phases: usize,
}

pub const SSIM_HEADER: &str = "phase,ssim_sim,ssim_gnd";

/// Score predicted phases and the static baseline against a truth sequence.
/// `truth[0]` is the static input; `pred[t - 1]` predicts `truth[t]`.
pub fn ssim_report<T: Scalar>(truth: &[Volume3D<T>], pred: &[Volume3D<T>]) -> Result<SsimReport> {
    if truth.len() != pred.len() + 1 || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted phases for {} truth phases",
            pred.len(),
            truth.len()
        )));
    }
    let x0 = &truth[0];
    let mut rows = Vec::with_capacity(pred.len());
    for (t, p) in pred.iter().enumerate() {
        let y = &truth[t + 1];
        // one range per phase so both columns share a scale
        let data = |v: &Volume3D<T>| v.data().iter().map(|s| s.f64()).collect::<Vec<_>>();
        let (ys, ps, xs) = (data(y), data(p), data(x0));
        let range = joint_range(&ys, &ps).max(joint_range(&ys, &xs));
        rows.push(SsimRow {
            phase: t + 1,
            ssim_sim: ssim(p, y, Some(range))?,
            ssim_gnd: ssim(x0, y, Some(range))?,
            range,
        });
    }
    let sim: Vec<f64> = rows.iter().map(|r| r.ssim_sim).collect();
    let gnd: Vec<f64> = rows.iter().map(|r| r.ssim_gnd).collect();
    let (mean_sim, sd_sim) = mean_sd(&sim);
    let (mean_gnd, sd_gnd) = mean_sd(&gnd);
    Ok(SsimReport {
        mean_gain: mean_sim - mean_gnd,
        improved_phases: rows.iter().filter(|r| r.ssim_sim > r.ssim_gnd).count(),
        rows,
        mean_sim,
        sd_sim,
        mean_gnd,
        sd_gnd,
    })
}

/// [`ssim_report`] for a phantom sequence and a model prediction.
pub fn ssim_protocol<T: Scalar>(seq: &PhantomSequence<T>, pred: &Prediction<T>) -> Result<SsimReport> {
    if pred.warped.len() + 1 > seq.phases.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted phases, sequence has {}",
            pred.warped.len(),
            seq.phases.len()
        )));
    }
    ssim_report(&seq.phases[..pred.warped.len() + 1], &pred.warped)
}

impl SsimReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        csvio::write_table(
            path.as_ref(),
            SSIM_HEADER,
            self.rows
                .iter()
                .map(|r| format!("{},{:?},{:?}", r.phase, r.ssim_sim, r.ssim_gnd)),
        )
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Mean `|dz|` (mm) over voxels within `radius` voxels of `center`.
pub fn region_mean_abs_dz<T: Scalar>(dvf: &Dvf<T>, center: [usize; 3], radius: f64) -> Result<f64> {
    let grid: Grid = *dvf.grid();
    let dz = dvf.component(2);
    let mut sum = 0.0;
    let mut n = 0usize;
    for (idx, v) in dz.iter().enumerate() {
        let c = grid.coords(idx);
        let d2: f64 = (0..3).map(|a| (c[a] as f64 - center[a] as f64).powi(2)).sum();
        if d2 <= radius * radius {
            sum += v.f64().abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument(format!("no voxels within {radius} of {center:?}")));
    }
    Ok(sum / n as f64)
}
