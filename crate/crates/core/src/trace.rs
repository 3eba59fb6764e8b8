//! One-dimensional breathing traces: per-phase diaphragm displacement (mm).

use std::path::Path;

use crate::csvio;
use crate::error::{Error, Result};
use crate::field::Dvf;
use crate::volume::Mask3D;
use crate::Scalar;

/// Per-phase breathing amplitude in mm. Sample 0 belongs to the reference phase.
#[derive(Clone, Debug, PartialEq)]
pub struct BreathingTrace {
    samples: Vec<f64>,
}

impl BreathingTrace {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty breathing trace".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("breathing trace sample".into()));
        }
        Ok(Self { samples })
    }

    pub fn zeros(phase_count: usize) -> Self {
        Self {
            samples: vec![0.0; phase_count.max(1)],
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn phase_count(&self) -> usize {
        self.samples.len()
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Phase index of the largest absolute amplitude, lowest index on ties.
    pub fn peak_phase(&self) -> usize {
        let mut best = 0;
        for (t, v) in self.samples.iter().enumerate() {
            if v.abs() > self.samples[best].abs() {
                best = t;
            }
        }
        best
    }

    /// Multiply every sample by `factor`.
    pub fn rescale(&self, factor: f64) -> Result<Self> {
        if !factor.is_finite() {
            return Err(Error::NonFinite(format!("rescale factor {factor}")));
        }
        Self::new(self.samples.iter().map(|v| v * factor).collect())
    }

    /// Divide by `ref_extent` (mm), giving dimensionless modulation coefficients.
    pub fn normalize(&self, ref_extent: f64) -> Result<Vec<f64>> {
        if !(ref_extent.is_finite() && ref_extent > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "reference extent must be positive, got {ref_extent}"
            )));
        }
        Ok(self.samples.iter().map(|v| v / ref_extent).collect())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        csvio::write_table(
            path.as_ref(),
            TRACE_HEADER,
            self.samples.iter().enumerate().map(|(t, v)| format!("{t},{v:?}")),
        )
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let rows = csvio::read_table(path, TRACE_HEADER)?;
        let mut samples = Vec::with_capacity(rows.len());
        for (t, r) in rows.iter().enumerate() {
            let phase: usize = csvio::parse_cell(path, &r[0])?;
            if phase != t {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    msg: format!("phase column out of order at row {t}"),
                });
            }
            samples.push(csvio::parse_cell(path, &r[1])?);
        }
        Self::new(samples)
    }
}

pub const TRACE_HEADER: &str = "phase,amplitude_mm";

/// Result of locating the diaphragm apex and reading its trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceExtraction {
    pub trace: BreathingTrace,
    /// Voxel index `(i, j, k)` of the apex.
    pub apex: [usize; 3],
    /// Every candidate had zero motion, so the apex choice is arbitrary.
    pub ambiguous: bool,
}

/// Locate the lung-surface voxel with the largest superior-inferior
/// displacement over all phases and return its z trajectory.
///
/// `dvfs[t - 1]` maps the reference phase to phase `t`; the returned trace has
/// `dvfs.len() + 1` samples with a zero first sample.
pub fn extract_trace<T: Scalar>(dvfs: &[Dvf<T>], lung_mask: &Mask3D) -> Result<TraceExtraction> {
    let first = dvfs
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one displacement field".into()))?;
    for d in dvfs {
        lung_mask.grid().check_same(d.grid(), "extract_trace")?;
    }
    if lung_mask.count() == 0 {
        return Err(Error::EmptyMask);
    }

    let mut best: Option<(usize, T)> = None;
    for idx in 0..first.grid().len() {
        if !lung_mask.is_surface(idx) {
            continue;
        }
        let score = dvfs
            .iter()
            .map(|d| d.component(2)[idx].abs())
            .fold(T::zero(), T::max);
        // strict comparison keeps the lowest linear index on ties
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((idx, score));
        }
    }
    // a non-empty mask always has surface voxels
    let (idx, score) = best.ok_or(Error::EmptyMask)?;

    let mut samples = Vec::with_capacity(dvfs.len() + 1);
    samples.push(0.0);
    samples.extend(dvfs.iter().map(|d| d.component(2)[idx].f64()));
    Ok(TraceExtraction {
        trace: BreathingTrace::new(samples)?,
        apex: first.grid().coords(idx),
        ambiguous: score == T::zero(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;
    use proptest::prelude::*;

    fn lung() -> (Grid, Mask3D) {
        let g = Grid::new([6, 6, 6], [2.0; 3]).unwrap();
        let m = Mask3D::from_fn(g, |p| p.iter().all(|&c| (2.0..=8.0).contains(&c)));
        (g, m)
    }

    fn bump(g: Grid, amp: f64) -> Dvf<f64> {
        Dvf::from_fn(g, |p| {
            let d2 = (p[0] - 4.0).powi(2) + (p[1] - 6.0).powi(2) + (p[2] - 2.0).powi(2);
            [0.1 * amp, 0.0, amp * (-d2 / 20.0).exp()]
        })
        .unwrap()
    }

    #[test]
    fn zero_fields_give_flagged_zero_trace() {
        let (g, m) = lung();
        let r = extract_trace(&[Dvf::<f64>::zeros(g), Dvf::zeros(g)], &m).unwrap();
        assert!(r.ambiguous);
        assert_eq!(r.trace.samples(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn finds_peak_surface_voxel() {
        let (g, m) = lung();
        let r = extract_trace(&[bump(g, 2.0), bump(g, 5.0), bump(g, -1.0)], &m).unwrap();
        assert_eq!(r.apex, [2, 3, 1]);
        assert!(!r.ambiguous);
        assert_eq!(r.trace.samples(), &[0.0, 2.0, 5.0, -1.0]);
    }

    #[test]
    fn negation_flips_trace_keeps_apex() {
        let (g, m) = lung();
        let fields = [bump(g, 2.0), bump(g, 5.0)];
        let neg: Vec<_> = fields.iter().map(|f| f.neg()).collect();
        let a = extract_trace(&fields, &m).unwrap();
        let b = extract_trace(&neg, &m).unwrap();
        assert_eq!(a.apex, b.apex);
        for (x, y) in a.trace.samples().iter().zip(b.trace.samples()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn error_paths() {
        let (g, _) = lung();
        let empty = Mask3D::from_fn(g, |_| false);
        assert!(matches!(extract_trace(&[bump(g, 1.0)], &empty), Err(Error::EmptyMask)));
        assert!(extract_trace::<f64>(&[], &empty).is_err());
        assert!(BreathingTrace::zeros(3).normalize(0.0).is_err());
        assert!(BreathingTrace::zeros(3).rescale(f64::NAN).is_err());
    }

    #[test]
    fn rescale_and_normalize_examples() {
        let t = BreathingTrace::new(vec![0.0, 4.0, 8.0, 4.0]).unwrap();
        assert_eq!(t.rescale(1.0).unwrap(), t);
        assert!(t.rescale(0.0).unwrap().samples().iter().all(|&v| v == 0.0));
        assert_eq!(t.rescale(5.0).unwrap().max_abs(), 40.0);
        assert_eq!(t.peak_phase(), 2);
        assert_eq!(t.normalize(16.0).unwrap()[2], 0.5);
        let flat = BreathingTrace::new(vec![3.0; 4]).unwrap();
        assert!(flat.normalize(3.0).unwrap().iter().all(|&v| v == 1.0));
        assert!(BreathingTrace::zeros(4).normalize(2.0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let t = BreathingTrace::new(vec![0.0, 1.0 / 3.0, -2.5]).unwrap();
        t.write_csv(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().next(), Some(TRACE_HEADER));
        assert_eq!(BreathingTrace::read_csv(&p).unwrap(), t);
    }

    proptest! {
        #[test]
        fn rescale_composes_exactly(a in -8i32..8, b in -8i32..8, xs in proptest::collection::vec(-40.0f64..40.0, 2..12)) {
            // power-of-two factors keep both routes exact
            let (a, b) = (2f64.powi(a), 2f64.powi(b));
            let t = BreathingTrace::new(xs).unwrap();
            prop_assert_eq!(t.rescale(a * b).unwrap(), t.rescale(a).unwrap().rescale(b).unwrap());
        }

        #[test]
        fn apex_is_scale_invariant(c in 0.01f64..100.0) {
            let (g, m) = lung();
            let fields = [bump(g, 2.0), bump(g, -3.0)];
            let scaled: Vec<_> = fields.iter().map(|f| f.scale(c)).collect();
            prop_assert_eq!(extract_trace(&fields, &m).unwrap().apex, extract_trace(&scaled, &m).unwrap().apex);
        }
    }
}
