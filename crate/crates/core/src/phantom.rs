//! Analytic breathing thorax phantom with exact ground-truth motion.
//!
//! The phase-`t` field is `A s(t) w(x)` along z plus a smaller lateral part,
//! with `s` a raised-cosine waveform (`s(0) = 0` at end-inhale) and
//! `w(x) = exp(-|x - apex| / decay)`. Phase images are pull-back warps of
//! the reference image by the sampled field; masks and landmarks are moved
//! with the analytic field.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::error::{Error, Result};
use crate::field::{self, Dvf};
use crate::mhd;
use crate::trace::BreathingTrace;
use crate::volume::{Grid, LandmarkSet, Mask3D, Volume3D};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    /// Normalised radius; `<= 1` inside.
    fn q(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn inside(&self, p: [f64; 3]) -> bool {
        self.q(p) <= 1.0
    }

    /// Smooth occupancy in `[0, 1]` with an edge of roughly `edge` mm.
    fn occupancy(&self, p: [f64; 3], edge: f64) -> f64 {
        let r = self.radii.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        logistic((1.0 - self.q(p)) * r / edge)
    }

    fn within(&self, grid: &Grid) -> bool {
        let e = grid.extent();
        (0..3).all(|a| self.center[a] - self.radii[a] >= 0.0 && self.center[a] + self.radii[a] <= e[a])
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    pub soft_tissue: f64,
    pub lung: f64,
    pub tumor: f64,
    pub shell: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Self {
            soft_tissue: 40.0,
            lung: -800.0,
            tumor: 60.0,
            shell: 400.0,
        }
    }
}

/// Phantom configuration. Lengths in mm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub lungs: Vec<Ellipsoid>,
    /// Diaphragm apex; receives the full superior-inferior excursion.
    pub apex: [f64; 3],
    pub tumor_center: [f64; 3],
    pub tumor_radius: f64,
    /// Peak diaphragm excursion `A`.
    pub amplitude_mm: f64,
    /// Decay length of the motion away from the apex.
    pub decay_mm: f64,
    /// Lateral displacement relative to the superior-inferior one.
    pub lateral_ratio: f64,
    pub phases: usize,
    pub seed: u64,
    pub noise_amplitude: f64,
    pub edge_mm: f64,
    /// Thickness of the high-intensity band along the x/y faces.
    pub shell_mm: f64,
    pub intensities: Intensities,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [24, 24, 24],
            spacing: [4.0; 3],
            lungs: vec![
                Ellipsoid {
                    center: [28.0, 44.0, 56.0],
                    radii: [16.0, 24.0, 32.0],
                },
                Ellipsoid {
                    center: [64.0, 44.0, 56.0],
                    radii: [16.0, 24.0, 32.0],
                },
            ],
            apex: [28.0, 44.0, 24.0],
            tumor_center: [28.0, 44.0, 40.0],
            tumor_radius: 8.0,
            amplitude_mm: 8.0,
            decay_mm: 24.0,
            lateral_ratio: 0.2,
            phases: 10,
            seed: 0,
            noise_amplitude: 15.0,
            edge_mm: 3.0,
            shell_mm: 8.0,
            intensities: Intensities::default(),
        }
    }
}

impl PhantomSpec {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.amplitude_mm.is_finite() && self.amplitude_mm >= 0.0) {
            return bad(format!("amplitude must be >= 0, got {}", self.amplitude_mm));
        }
        if !(self.decay_mm.is_finite() && self.decay_mm > 0.0) {
            return bad(format!("decay length must be > 0, got {}", self.decay_mm));
        }
        if self.phases < 2 {
            return bad(format!("need at least 2 phases, got {}", self.phases));
        }
        if !(self.edge_mm > 0.0 && self.tumor_radius > 0.0) {
            return bad("edge width and tumor radius must be positive".into());
        }
        if !(self.lateral_ratio.is_finite() && self.noise_amplitude.is_finite() && self.noise_amplitude >= 0.0) {
            return bad("lateral ratio and noise amplitude must be finite".into());
        }
        if self.lungs.is_empty() {
            return bad("phantom needs at least one lung".into());
        }
        for l in &self.lungs {
            if l.radii.iter().any(|&r| r <= 0.0) || !l.within(&grid) {
                return bad(format!("lung {l:?} does not fit the volume"));
            }
        }
        let tumor = self.tumor();
        if !tumor.within(&grid) {
            return bad("tumor does not fit the volume".into());
        }
        if !grid.contains(self.apex) {
            return Err(Error::OutOfExtent(self.apex));
        }
        for p in self.landmark_points() {
            if !grid.contains(p) {
                return Err(Error::OutOfExtent(p));
            }
        }
        Ok(())
    }

    fn tumor(&self) -> Ellipsoid {
        Ellipsoid {
            center: self.tumor_center,
            radii: [self.tumor_radius; 3],
        }
    }

    /// Breathing waveform `s(t) = (1 - cos(2 pi t / P)) / 2`.
    pub fn waveform(&self, phase: usize) -> f64 {
        (1.0 - (2.0 * PI * phase as f64 / self.phases as f64).cos()) / 2.0
    }

    /// Analytic displacement (mm) at `p` for `phase`.
    pub fn displacement(&self, phase: usize, p: [f64; 3]) -> [f64; 3] {
        let r = [0, 1, 2].map(|a| p[a] - self.apex[a]);
        let d = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
        let m = self.amplitude_mm * self.waveform(phase) * (-d / self.decay_mm).exp();
        let lat = self.lateral_ratio * m / self.decay_mm;
        [lat * r[0], lat * r[1], m]
    }

    /// Ground-truth trace: apex z displacement per phase.
    pub fn trace(&self) -> BreathingTrace {
        BreathingTrace::new((0..self.phases).map(|t| self.displacement(t, self.apex)[2]).collect())
            .expect("finite amplitudes")
    }

    /// Apex landmark first (id 0), then tumor centre, points around the apex
    /// (two of them between lattice nodes), and the lung centres and bases.
    pub fn landmark_points(&self) -> Vec<[f64; 3]> {
        let a = self.apex;
        let mut pts = vec![
            a,
            self.tumor_center,
            [a[0] - 8.0, a[1], a[2] + 4.0],
            [a[0] + 8.0, a[1], a[2] + 4.0],
            [a[0], a[1] - 8.0, a[2] + 4.0],
            [a[0], a[1] + 8.0, a[2] + 4.0],
            [a[0] - 5.3, a[1] + 2.7, a[2] + 6.1],
            [a[0] + 3.1, a[1] - 4.6, a[2] + 9.7],
        ];
        for l in &self.lungs {
            pts.push(l.center);
            pts.push([l.center[0], l.center[1], l.center[2] - 0.75 * l.radii[2]]);
        }
        pts
    }

    pub fn apex_voxel(&self) -> Result<[usize; 3]> {
        let g = self.grid()?;
        let v = g.to_voxel(self.apex);
        let idx = v.map(|c| c.round());
        if (0..3).any(|a| (v[a] - idx[a]).abs() > 1e-9) {
            return Err(Error::InvalidArgument(format!("apex {:?} is not on a lattice node", self.apex)));
        }
        Ok(idx.map(|c| c as usize))
    }

    fn reference_intensity(&self, p: [f64; 3], noise: &SmoothNoise) -> f64 {
        let it = &self.intensities;
        let e = self.grid().expect("validated").extent();
        let mut v = it.soft_tissue;
        let lung = self
            .lungs
            .iter()
            .map(|l| l.occupancy(p, self.edge_mm))
            .fold(0.0, f64::max);
        v += (it.lung - v) * lung;
        v += (it.tumor - v) * self.tumor().occupancy(p, self.edge_mm);
        let face = [p[0], e[0] - p[0], p[1], e[1] - p[1]]
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        v += (it.shell - v) * logistic((self.shell_mm - face) / self.edge_mm);
        v + noise.eval(p)
    }
}

/// Sum of seeded plane waves; smooth on the scale of the structures.
struct SmoothNoise {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl SmoothNoise {
    fn new(seed: u64, amplitude: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let waves = (0..n)
            .map(|_| {
                let k = [0; 3].map(|_| rng.gen_range(-1.0..1.0) * 2.0 * PI / 30.0);
                (k, rng.gen_range(0.0..2.0 * PI), amplitude / (n as f64).sqrt())
            })
            .collect();
        Self { waves }
    }

    fn eval(&self, p: [f64; 3]) -> f64 {
        self.waves
            .iter()
            .map(|(k, ph, a)| a * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin())
            .sum()
    }
}

/// A generated ground-truth phase sequence.
#[derive(Clone, Debug)]
pub struct PhantomSequence<T> {
    pub spec: PhantomSpec,
    /// `phases[0]` is the end-inhale reference.
    pub phases: Vec<Volume3D<T>>,
    /// `dvfs[t - 1]` maps the reference onto phase `t`.
    pub dvfs: Vec<Dvf<T>>,
    pub lung_masks: Vec<Mask3D>,
    pub tumor_masks: Vec<Mask3D>,
    pub landmarks: Vec<LandmarkSet>,
    pub trace: BreathingTrace,
}

pub fn generate_phantom<T: Scalar>(spec: &PhantomSpec) -> Result<PhantomSequence<T>> {
    spec.validate()?;
    let grid = spec.grid()?;
    let noise = SmoothNoise::new(spec.seed, spec.noise_amplitude);
    let reference = Volume3D::from_fn(grid, |p| T::of(spec.reference_intensity(p, &noise)))?;

    let lungs_at = |p: [f64; 3]| spec.lungs.iter().any(|l| l.inside(p));
    let tumor = spec.tumor();
    let ids: Vec<u32> = (0..spec.landmark_points().len() as u32).collect();
    let base_points = spec.landmark_points();

    let mut phases = vec![reference.clone()];
    let mut dvfs = Vec::with_capacity(spec.phases - 1);
    let mut lung_masks = vec![Mask3D::from_fn(grid, lungs_at)];
    let mut tumor_masks = vec![Mask3D::from_fn(grid, |p| tumor.inside(p))];
    let mut landmarks = vec![LandmarkSet::new(ids.clone(), base_points.clone())?];

    for t in 1..spec.phases {
        let moved = |p: [f64; 3]| {
            let d = spec.displacement(t, p);
            [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
        };
        let phi = Dvf::from_fn(grid, |p| spec.displacement(t, p))?;
        phases.push(field::warp(&reference, &phi)?);
        lung_masks.push(Mask3D::from_fn(grid, |p| lungs_at(moved(p))));
        tumor_masks.push(Mask3D::from_fn(grid, |p| tumor.inside(moved(p))));
        landmarks.push(LandmarkSet::new(
            ids.clone(),
            base_points.iter().map(|&p| moved(p)).collect(),
        )?);
        dvfs.push(phi);
    }

    Ok(PhantomSequence {
        trace: spec.trace(),
        spec: spec.clone(),
        phases,
        dvfs,
        lung_masks,
        tumor_masks,
        landmarks,
    })
}

/// Superior-inferior displacement of the apex landmark per phase.
pub fn phantom_trace<T: Scalar>(seq: &PhantomSequence<T>) -> BreathingTrace {
    seq.spec.trace()
}

impl<T: Scalar> PhantomSequence<T> {
    pub fn phase_count(&self) -> usize {
        self.phases.len()
    }

    pub fn grid(&self) -> &Grid {
        self.phases[0].grid()
    }

    /// Write the sequence into `dir` using the standard file layout.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let spec = serde_json::to_string_pretty(&self.spec)?;
        fs::write(dir.join("spec.json"), spec).map_err(|e| Error::io(dir.join("spec.json"), e))?;
        for t in 0..self.phase_count() {
            mhd::write_volume(&self.phases[t], dir.join(format!("phase_{t}.mhd")))?;
            mhd::write_mask(&self.lung_masks[t], dir.join(format!("mask_{t}.mhd")))?;
            mhd::write_mask(&self.tumor_masks[t], dir.join(format!("tumor_{t}.mhd")))?;
            csvio::write_landmarks(&self.landmarks[t], dir.join(format!("landmarks_{t}.csv")))?;
            if t > 0 {
                field::write_dvf(&self.dvfs[t - 1], dir.join(format!("dvf_{t}")))?;
            }
        }
        self.trace.write_csv(dir.join("trace.csv"))
    }

    /// Read a sequence written by [`PhantomSequence::write_dir`].
    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec_path = dir.join("spec.json");
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let spec: PhantomSpec = serde_json::from_str(&text)?;
        let mut seq = PhantomSequence {
            trace: BreathingTrace::read_csv(dir.join("trace.csv"))?,
            phases: Vec::new(),
            dvfs: Vec::new(),
            lung_masks: Vec::new(),
            tumor_masks: Vec::new(),
            landmarks: Vec::new(),
            spec,
        };
        for t in 0..seq.spec.phases {
            seq.phases.push(mhd::read_volume(dir.join(format!("phase_{t}.mhd")))?);
            seq.lung_masks.push(mhd::read_mask(dir.join(format!("mask_{t}.mhd")))?);
            seq.tumor_masks.push(mhd::read_mask(dir.join(format!("tumor_{t}.mhd")))?);
            seq.landmarks.push(csvio::read_landmarks(dir.join(format!("landmarks_{t}.csv")))?);
            if t > 0 {
                seq.dvfs.push(field::read_dvf(dir.join(format!("dvf_{t}")))?);
            }
        }
        if seq.trace.phase_count() != seq.spec.phases {
            return Err(Error::DimsMismatch("trace length does not match phase count".into()));
        }
        Ok(seq)
    }
}
