use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use serde_json::{json, Value};

use rmsim::augment::{augment_batch, augment_case, sha256_file, AugmentOptions, CaseInput};
use rmsim::csvio::{read_landmarks, write_table};
use rmsim::field::{propagate_landmarks, read_dvf, warp_mask_nearest};
use rmsim::metrics::{dice, mean_sd, region_mean_abs_dz, ssim_report, tre};
use rmsim::mhd::{read_mask, read_volume};
use rmsim::model::{load_model, RMSimConfig, RMSimModel};
use rmsim::phantom::{generate_phantom, PhantomSequence, PhantomSpec};
use rmsim::trace::{extract_trace, BreathingTrace};
use rmsim::trainer::{dataset_normalization, train as run_training, DatasetManifest, TrainConfig};
use rmsim::{Dvf, Volume};

use crate::{AugmentArgs, EvaluateArgs, PhantomArgs, PredictArgs, TraceCommand, TrainArgs};

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| rmsim::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let value = serde_json::from_str(&text)
        .map_err(rmsim::Error::from)
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(value)
}

fn write_json(value: &Value, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| rmsim::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| rmsim::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Number of consecutive `<prefix><t><suffix>` files for t = start, start+1, ...
fn count_files(dir: &Path, prefix: &str, suffix: &str, start: usize) -> usize {
    (start..)
        .take_while(|t| dir.join(format!("{prefix}{t}{suffix}")).exists())
        .count()
}

pub fn phantom(args: &PhantomArgs, seed: Option<u64>) -> Result<Value> {
    let mut spec: PhantomSpec = match &args.spec {
        Some(p) => read_json(p)?,
        None => PhantomSpec::default(),
    };
    if let Some(a) = args.amplitude {
        spec.amplitude_mm = a;
    }
    if let Some(p) = args.phases {
        spec.phases = p;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let seq = generate_phantom::<f64>(&spec)?;
    seq.write_dir(&args.out)?;
    let apex = spec.apex_voxel()?;
    let hashes = (0..spec.phases)
        .map(|t| sha256_file(args.out.join(format!("phase_{t}.mhd"))))
        .collect::<rmsim::Result<Vec<_>>>()?;
    eprintln!(
        "phantom: dims {:?}, amplitude {} mm, {} phases, apex voxel {:?} -> {}",
        spec.dims,
        spec.amplitude_mm,
        spec.phases,
        apex,
        args.out.display()
    );
    Ok(json!({
        "dims": spec.dims,
        "amplitude_mm": spec.amplitude_mm,
        "phases": spec.phases,
        "apex_voxel": apex,
        "trace": seq.trace.samples(),
        "phase_sha256": hashes,
    }))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    #[serde(default)]
    model: Option<RMSimConfig>,
    #[serde(default)]
    train: TrainConfig,
}

pub fn train(args: &TrainArgs, seed: Option<u64>) -> Result<Value> {
    let file: TrainFile = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    let dataset = args
        .data
        .iter()
        .map(|d| PhantomSequence::<f64>::read_dir(d).with_context(|| format!("reading {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let first = &dataset[0];
    // without a model section the network is shaped to the data
    let mut model_cfg = file.model.unwrap_or_else(|| RMSimConfig {
        dims: first.grid().dims,
        phases: first.phase_count(),
        ..RMSimConfig::default()
    });
    if let Some(c) = args.channels {
        model_cfg.channels = c;
    }
    if let Some(p) = args.phases {
        model_cfg.phases = p;
    }
    let mut cfg = file.train;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(w) = args.smoothness_weight {
        cfg.smoothness_weight = w;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(i) = args.checkpoint_interval {
        cfg.checkpoint_interval = i;
    }
    if cfg.checkpoint_interval > 0 && cfg.checkpoint_dir.is_none() {
        cfg.checkpoint_dir = Some(args.out.parent().map(Path::to_path_buf).unwrap_or_default());
    }
    model_cfg.smoothness_weight = cfg.smoothness_weight;
    let manifest_path = cfg.manifest_path.take().unwrap_or_else(|| with_suffix(&args.out, ".manifest.json"));

    let model = RMSimModel::<f64>::new(model_cfg, cfg.seed)?;
    let (model, log) = run_training(model, &dataset, &cfg)?;
    rmsim::model::save_model(&model, &args.out)?;
    let log_path = args.log.clone().unwrap_or_else(|| with_suffix(&args.out, ".log.csv"));
    log.write_csv(&log_path)?;
    let norm = dataset_normalization(&dataset)?;
    DatasetManifest {
        sequences: args.data.clone(),
        intensity_min: norm.intensity_min,
        intensity_max: norm.intensity_max,
        trace_ref_mm: norm.trace_ref_mm,
    }
    .write(&manifest_path)?;

    let initial = log.initial_loss().unwrap_or(f64::NAN);
    let last = log.final_loss().unwrap_or(f64::NAN);
    if !last.is_finite() {
        return Err(rmsim::Error::NonFiniteLoss {
            epoch: cfg.epochs,
            item: 0,
        }
        .into());
    }
    let hash = sha256_file(&args.out)?;
    eprintln!("train: {} epochs, loss {initial:.6e} -> {last:.6e}, ratio {:.4}", cfg.epochs, last / initial);
    eprintln!("checkpoint {} sha256 {hash}", args.out.display());
    Ok(json!({
        "epochs": cfg.epochs,
        "initial_loss": initial,
        "final_loss": last,
        "loss_ratio": last / initial,
        "parameters": model.param_count(),
        "checkpoint": args.out,
        "checkpoint_sha256": hash,
        "log": log_path,
    }))
}

pub fn predict(args: &PredictArgs) -> Result<Value> {
    let model = load_model::<f64>(&args.model, None)?;
    let trace = BreathingTrace::read_csv(&args.trace)?.rescale(args.trace_scale)?;
    let case = CaseInput {
        id: "predict".into(),
        volume: read_volume::<f64>(&args.input)?,
        mask: args.mask.as_ref().map(read_mask).transpose()?,
        landmarks: args.landmarks.as_ref().map(read_landmarks).transpose()?,
    };
    let opts = AugmentOptions {
        resample: args.resample,
        require_trained: false,
        checkpoint_sha256: Some(sha256_file(&args.model)?),
    };
    let manifest = augment_case(&model, &case, &trace, &args.out, &opts)?;
    trace.write_csv(args.out.join("trace.csv"))?;

    let apex = match args.apex.as_deref() {
        Some(&[i, j, k]) => Some([i, j, k]),
        Some(_) => bail!("--apex takes three voxel indices i,j,k"),
        None => None,
    };
    let mut phases = Vec::new();
    for t in 1..model.config().phases {
        let phi = read_dvf::<f64>(args.out.join(format!("dvf_{t}")))?;
        let dz = phi.component(2);
        let max_abs = dz.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mean_abs = dz.iter().map(|v| v.abs()).sum::<f64>() / dz.len() as f64;
        let apex_mean = apex.map(|a| region_mean_abs_dz(&phi, a, args.apex_radius)).transpose()?;
        phases.push(json!({
            "phase": t,
            "trace_mm": trace.samples()[t],
            "max_abs_dz_mm": max_abs,
            "mean_abs_dz_mm": mean_abs,
            "apex_mean_abs_dz_mm": apex_mean,
        }));
    }
    let peak = trace.samples()[..model.config().phases]
        .iter()
        .enumerate()
        .skip(1)
        .fold((1, f64::NEG_INFINITY), |best, (t, v)| if v.abs() > best.1 { (t, v.abs()) } else { best })
        .0;
    let summary = json!({
        "trace_scale": args.trace_scale,
        "peak_phase": peak,
        "phases": phases,
        "pairs": manifest.pairs,
    });
    write_json(&summary, &args.out.join("prediction.json"))?;
    let peak_row = &summary["phases"][peak - 1];
    eprintln!(
        "predict: {} phases -> {}; peak phase {peak} max |dz| {:.4} mm{}",
        phases.len(),
        args.out.display(),
        peak_row["max_abs_dz_mm"].as_f64().unwrap_or(0.0),
        peak_row["apex_mean_abs_dz_mm"]
            .as_f64()
            .map(|v| format!(", apex mean |dz| {v:.4} mm"))
            .unwrap_or_default()
    );
    Ok(summary)
}

fn trace_pool(dir: &Path) -> Result<Vec<(String, BreathingTrace)>> {
    let entries = fs::read_dir(dir).map_err(|e| rmsim::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((name, BreathingTrace::read_csv(&p)?))
        })
        .collect()
}

pub fn augment(args: &AugmentArgs, seed: Option<u64>) -> Result<Value> {
    let model = load_model::<f64>(&args.model, None)?;
    let pool = trace_pool(&args.traces)?;
    if pool.is_empty() {
        bail!("no trace CSVs in {}", args.traces.display());
    }
    let opts = AugmentOptions {
        resample: args.resample,
        require_trained: args.require_trained,
        checkpoint_sha256: Some(sha256_file(&args.model)?),
    };
    let seed = seed.unwrap_or(0);
    let batch = augment_batch(&model, &args.cases, &pool, seed, &args.out, &opts)?;
    for f in &batch.failures {
        eprintln!("case {} failed: {}", f.case_id, f.error);
    }
    let manifest_hash = sha256_file(args.out.join(rmsim::augment::BATCH_MANIFEST))?;
    eprintln!(
        "augment: {} cases, {} total pairs, manifest sha256 {manifest_hash}",
        batch.cases.len(),
        batch.total_pairs
    );
    if !batch.failures.is_empty() && batch.cases.is_empty() {
        bail!("every case failed");
    }
    Ok(json!({
        "cases": batch.cases.len(),
        "failures": batch.failures.len(),
        "total_pairs": batch.total_pairs,
        "manifest_sha256": manifest_hash,
    }))
}

pub fn evaluate(args: &EvaluateArgs) -> Result<Value> {
    let truth_n = count_files(&args.truth, "phase_", ".mhd", 0);
    let pred_n = count_files(&args.pred, "phase_", ".mhd", 1);
    if truth_n < 2 || pred_n == 0 {
        bail!("need truth phases 0.. and predicted phases 1.. ({truth_n} truth, {pred_n} predicted)");
    }
    if pred_n + 1 != truth_n {
        return Err(rmsim::Error::ShapeMismatch(format!(
            "{pred_n} predicted phases for {truth_n} truth phases"
        ))
        .into());
    }
    let truth: Vec<Volume> = (0..truth_n)
        .map(|t| read_volume(args.truth.join(format!("phase_{t}.mhd"))))
        .collect::<rmsim::Result<_>>()?;
    let pred: Vec<Volume> = (1..truth_n)
        .map(|t| read_volume(args.pred.join(format!("phase_{t}.mhd"))))
        .collect::<rmsim::Result<_>>()?;
    create_dir(&args.out)?;
    let ssim = ssim_report(&truth, &pred)?;
    ssim.write_csv(args.out.join("ssim.csv"))?;
    ssim.write_json(args.out.join("ssim.json"))?;
    eprintln!(
        "ssim: predicted {:.4} ± {:.4}, static {:.4} ± {:.4}",
        ssim.mean_sim, ssim.sd_sim, ssim.mean_gnd, ssim.sd_gnd
    );

    let pred_dvf = |t: usize| -> Result<Dvf<f64>> {
        read_dvf::<f64>(args.pred.join(format!("dvf_{t}")))
            .with_context(|| format!("no predicted labels or field for phase {t}"))
    };
    let mut summary = json!({ "ssim": ssim });

    if args.masks {
        let m0 = read_mask(args.truth.join("mask_0.mhd"))?;
        let mut rows = Vec::new();
        for t in 1..truth_n {
            let own = args.pred.join(format!("mask_{t}.mhd"));
            let moved = if own.exists() {
                read_mask(&own)?
            } else {
                warp_mask_nearest(&m0, &pred_dvf(t)?)?
            };
            let target = read_mask(args.truth.join(format!("mask_{t}.mhd")))?;
            rows.push((t, dice(&moved, &target)?, dice(&m0, &target)?));
        }
        write_table(
            &args.out.join("dice.csv"),
            "phase,dice_sim,dice_gnd",
            rows.iter().map(|(t, s, g)| format!("{t},{s:?},{g:?}")),
        )?;
        let sims: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let (mean, sd) = mean_sd(&sims);
        eprintln!("dice: {mean:.4} ± {sd:.4}");
        summary["dice"] = json!({
            "rows": rows.iter().map(|(t, s, g)| json!({"phase": t, "dice_sim": s, "dice_gnd": g})).collect::<Vec<_>>(),
            "mean": mean,
            "sd": sd,
        });
    }

    if args.landmarks {
        let l0 = read_landmarks(args.truth.join("landmarks_0.csv"))?;
        let mut rows = Vec::new();
        for t in 1..truth_n {
            let own = args.pred.join(format!("landmarks_{t}.csv"));
            let moved = if own.exists() {
                read_landmarks(&own)?
            } else {
                propagate_landmarks(&l0, &pred_dvf(t)?)?
            };
            let target = read_landmarks(args.truth.join(format!("landmarks_{t}.csv")))?;
            let post = tre(&moved, &target)?;
            let pre = tre(&l0, &target)?;
            post.write_csv(args.out.join(format!("tre_{t}.csv")))?;
            rows.push(json!({
                "phase": t,
                "mean_mm": post.mean_mm,
                "sd_mm": post.sd_mm,
                "pre_mean_mm": pre.mean_mm,
                "pre_sd_mm": pre.sd_mm,
            }));
        }
        let means: Vec<f64> = rows.iter().map(|r| r["mean_mm"].as_f64().unwrap()).collect();
        let pres: Vec<f64> = rows.iter().map(|r| r["pre_mean_mm"].as_f64().unwrap()).collect();
        let (mean, sd) = mean_sd(&means);
        let (pre_mean, _) = mean_sd(&pres);
        eprintln!("tre: {mean:.3} ± {sd:.3} mm (static {pre_mean:.3} mm)");
        summary["tre"] = json!({ "rows": rows, "mean_mm": mean, "pre_mean_mm": pre_mean });
    }
    write_json(&summary, &args.out.join("summary.json"))?;
    Ok(summary)
}

pub fn trace(cmd: &TraceCommand) -> Result<Value> {
    match cmd {
        TraceCommand::Extract { dvfs, mask, out } => {
            let n = count_files(dvfs, "dvf_", ".dx.mhd", 1);
            if n == 0 {
                bail!("no dvf_<t> fields in {}", dvfs.display());
            }
            let fields = (1..=n)
                .map(|t| read_dvf::<f64>(dvfs.join(format!("dvf_{t}"))))
                .collect::<rmsim::Result<Vec<_>>>()?;
            let ex = extract_trace(&fields, &read_mask(mask)?)?;
            if ex.ambiguous {
                eprintln!("warning: no superior-inferior motion on the lung surface; apex is arbitrary");
            }
            ex.trace.write_csv(out)?;
            eprintln!("trace: {} phases, apex voxel {:?} -> {}", ex.trace.phase_count(), ex.apex, out.display());
            Ok(json!({ "trace": ex.trace.samples(), "apex_voxel": ex.apex, "ambiguous": ex.ambiguous }))
        }
        TraceCommand::Rescale { input, factor, out } => {
            let t = BreathingTrace::read_csv(input)?.rescale(*factor)?;
            t.write_csv(out)?;
            Ok(json!({ "trace": t.samples(), "factor": factor }))
        }
    }
}
