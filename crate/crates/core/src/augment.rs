//! Synthetic phase generation for registration training sets: one static
//! volume and a breathing trace in, a directory of phases, fields, propagated
//! labels and a checksummed manifest out.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::csvio;
use crate::error::{Error, Result};
use crate::field::{propagate_landmarks, warp_mask_nearest, write_dvf};
use crate::mhd;
use crate::model::RMSimModel;
use crate::trace::BreathingTrace;
use crate::volume::{LandmarkSet, Mask3D, Volume3D};
use crate::Scalar;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, Default)]
pub struct AugmentOptions {
    /// Resample inputs whose dims differ from the model's instead of failing.
    pub resample: bool,
    /// Refuse models that have never been trained.
    pub require_trained: bool,
    /// Hash of the checkpoint the model came from, recorded in manifests.
    pub checkpoint_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the case directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub case_id: String,
    pub trace: Vec<f64>,
    pub checkpoint_sha256: Option<String>,
    /// Image/field pairs usable for training: the original plus each synthetic phase.
    pub pairs: usize,
    pub files: Vec<FileEntry>,
}

pub const CASE_MANIFEST: &str = "manifest.json";

/// Static inputs for one case.
#[derive(Clone, Debug)]
pub struct CaseInput<T> {
    pub id: String,
    pub volume: Volume3D<T>,
    pub mask: Option<Mask3D>,
    pub landmarks: Option<LandmarkSet>,
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Predict every phase of `case` under `trace` and write the case directory.
/// Phase 0 (the input itself) is written alongside the synthetic phases.
pub fn augment_case<T: Scalar>(
    model: &RMSimModel<T>,
    case: &CaseInput<T>,
    trace: &BreathingTrace,
    out_dir: impl AsRef<Path>,
    opts: &AugmentOptions,
) -> Result<CaseManifest> {
    let dir = out_dir.as_ref();
    if opts.require_trained && model.epochs_trained == 0 {
        return Err(Error::InvalidArgument("model has not been trained".into()));
    }
    model.check_finite()?;
    let want = model.config().dims;
    let (x0, mask) = if case.volume.dims() == want {
        (case.volume.clone(), case.mask.clone())
    } else if opts.resample {
        let mask = case.mask.as_ref().map(|m| m.resample_nearest(want)).transpose()?;
        (case.volume.resample_trilinear(want)?, mask)
    } else {
        return Err(Error::DimsMismatch(format!(
            "case {} has dims {:?}, model expects {want:?}",
            case.id,
            case.volume.dims()
        )));
    };
    if let Some(m) = &mask {
        x0.grid().check_same(m.grid(), "case mask")?;
    }
    let pred = model.forward(&x0, trace)?;

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = vec!["phase_0.mhd".to_string()];
    mhd::write_volume(&x0, dir.join("phase_0.mhd"))?;
    if let Some(m) = &mask {
        mhd::write_mask(m, dir.join("mask_0.mhd"))?;
        names.push("mask_0.mhd".into());
    }
    if let Some(lm) = &case.landmarks {
        csvio::write_landmarks(lm, dir.join("landmarks_0.csv"))?;
        names.push("landmarks_0.csv".into());
    }
    for (i, (phi, img)) in pred.dvfs.iter().zip(&pred.warped).enumerate() {
        let t = i + 1;
        mhd::write_volume(img, dir.join(format!("phase_{t}.mhd")))?;
        names.push(format!("phase_{t}.mhd"));
        write_dvf(phi, dir.join(format!("dvf_{t}")))?;
        names.extend(["dx", "dy", "dz"].map(|c| format!("dvf_{t}.{c}.mhd")));
        if let Some(m) = &mask {
            mhd::write_mask(&warp_mask_nearest(m, phi)?, dir.join(format!("mask_{t}.mhd")))?;
            names.push(format!("mask_{t}.mhd"));
        }
        if let Some(lm) = &case.landmarks {
            csvio::write_landmarks(&propagate_landmarks(lm, phi)?, dir.join(format!("landmarks_{t}.csv")))?;
            names.push(format!("landmarks_{t}.csv"));
        }
    }
    let files = names
        .into_iter()
        .map(|path| {
            Ok(FileEntry {
                sha256: sha256_file(dir.join(&path))?,
                path,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = CaseManifest {
        case_id: case.id.clone(),
        trace: trace.samples()[..model.config().phases].to_vec(),
        checkpoint_sha256: opts.checkpoint_sha256.clone(),
        pairs: 1 + pred.warped.len(),
        files,
    };
    write_json(&manifest, &dir.join(CASE_MANIFEST))?;
    Ok(manifest)
}

/// Re-hash every file listed in a case manifest.
pub fn verify_case(dir: impl AsRef<Path>) -> Result<CaseManifest> {
    let dir = dir.as_ref();
    let manifest: CaseManifest = read_json(&dir.join(CASE_MANIFEST))?;
    for f in &manifest.files {
        let path = dir.join(&f.path);
        if sha256_file(&path)? != f.sha256 {
            return Err(Error::Checksum(path));
        }
    }
    Ok(manifest)
}

/// One static case in a batch manifest; paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub volume: PathBuf,
    #[serde(default)]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub landmarks: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CasesManifest {
    pub cases: Vec<CaseEntry>,
}

impl CasesManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: String,
    pub trace: String,
    pub dir: String,
    pub pairs: usize,
    pub manifest_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case_id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub seed: u64,
    pub checkpoint_sha256: Option<String>,
    pub cases: Vec<CaseSummary>,
    pub failures: Vec<CaseFailure>,
    pub total_pairs: usize,
}

pub const BATCH_MANIFEST: &str = "manifest.json";

/// Seeded trace choice per case: index into `pool_len` for each of `cases`.
pub fn assign_traces(cases: usize, pool_len: usize, seed: u64) -> Result<Vec<usize>> {
    if pool_len == 0 {
        return Err(Error::InvalidArgument("empty trace pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..cases).map(|_| rng.gen_range(0..pool_len)).collect())
}

fn load_case<T: Scalar>(base: &Path, entry: &CaseEntry) -> Result<CaseInput<T>> {
    Ok(CaseInput {
        id: entry.id.clone(),
        volume: mhd::read_volume(base.join(&entry.volume))?,
        mask: entry.mask.as_ref().map(|p| mhd::read_mask(base.join(p))).transpose()?,
        landmarks: entry
            .landmarks
            .as_ref()
            .map(|p| csvio::read_landmarks(base.join(p)))
            .transpose()?,
    })
}

/// Augment every case of a manifest with a seeded draw from `traces`
/// (named pool). Cases that fail are reported and skipped; the rest are
/// written to `out_dir/<case id>/` with a combined manifest at the top.
pub fn augment_batch<T: Scalar>(
    model: &RMSimModel<T>,
    cases_manifest: impl AsRef<Path>,
    traces: &[(String, BreathingTrace)],
    seed: u64,
    out_dir: impl AsRef<Path>,
    opts: &AugmentOptions,
) -> Result<BatchManifest> {
    let manifest_path = cases_manifest.as_ref();
    let out = out_dir.as_ref();
    let cases = CasesManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let picks = assign_traces(cases.cases.len(), traces.len(), seed)?;
    let mut ids: Vec<&str> = cases.cases.iter().map(|c| c.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("duplicate case ids".into()));
    }
    if let Some(bad) = cases.cases.iter().find(|c| c.id.is_empty() || c.id.contains(['/', '\\']) || c.id == "..") {
        return Err(Error::InvalidArgument(format!("invalid case id {:?}", bad.id)));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let results: Vec<Result<CaseSummary>> = cases
        .cases
        .par_iter()
        .zip(&picks)
        .map(|(entry, &pick)| {
            let case = load_case::<T>(base, entry)?;
            let (name, trace) = &traces[pick];
            let dir = out.join(&entry.id);
            let m = augment_case(model, &case, trace, &dir, opts)?;
            Ok(CaseSummary {
                case_id: entry.id.clone(),
                trace: name.clone(),
                dir: entry.id.clone(),
                pairs: m.pairs,
                manifest_sha256: sha256_file(dir.join(CASE_MANIFEST))?,
            })
        })
        .collect();

    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for (entry, r) in cases.cases.iter().zip(results) {
        match r {
            Ok(s) => summaries.push(s),
            Err(e) => failures.push(CaseFailure {
                case_id: entry.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    let batch = BatchManifest {
        seed,
        checkpoint_sha256: opts.checkpoint_sha256.clone(),
        total_pairs: summaries.iter().map(|s| s.pairs).sum(),
        cases: summaries,
        failures,
    };
    write_json(&batch, &out.join(BATCH_MANIFEST))?;
    Ok(batch)
}
