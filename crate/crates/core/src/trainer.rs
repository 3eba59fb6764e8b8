//! Training loop: unrolled image loss plus field smoothness, optimised with Adam.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::csvio;
use crate::error::{Error, Result};
use crate::model::{save_model, ForwardVars, Normalization, RMSimModel};
use crate::phantom::PhantomSequence;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub smoothness_weight: f64,
    pub seed: u64,
    /// Write `epoch_<n>.ckpt` every this many epochs; 0 disables.
    pub checkpoint_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Where to record the dataset manifest; `None` skips it.
    pub manifest_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 200,
            batch_size: 1,
            smoothness_weight: 1.0,
            seed: 0,
            checkpoint_interval: 0,
            checkpoint_dir: None,
            manifest_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        // lr = 0 is accepted as a frozen run
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size != 1 {
            return bad(format!("only batch size 1 is supported, got {}", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("Adam epsilon must be positive".into());
        }
        if !(self.smoothness_weight.is_finite() && self.smoothness_weight >= 0.0) {
            return bad("smoothness weight must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub mse: f64,
    pub smooth: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,total,mse,smooth,seconds";

impl TrainLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.epochs.first().map(|r| r.total)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.total)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        csvio::write_table(
            path.as_ref(),
            TRAIN_LOG_HEADER,
            self.epochs
                .iter()
                .map(|r| format!("{},{:?},{:?},{:?},{:.3}", r.epoch, r.total, r.mse, r.smooth, r.seconds)),
        )
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let rows = csvio::read_table(path, TRAIN_LOG_HEADER)?;
        let epochs = rows
            .iter()
            .map(|r| {
                Ok(EpochRecord {
                    epoch: csvio::parse_cell(path, &r[0])?,
                    total: csvio::parse_cell(path, &r[1])?,
                    mse: csvio::parse_cell(path, &r[2])?,
                    smooth: csvio::parse_cell(path, &r[3])?,
                    seconds: csvio::parse_cell(path, &r[4])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { epochs })
    }
}

/// Dataset description written alongside a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Phantom sequence directories, empty for in-memory datasets.
    pub sequences: Vec<PathBuf>,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub trace_ref_mm: f64,
}

impl DatasetManifest {
    pub fn normalization(&self) -> Normalization {
        Normalization {
            intensity_min: self.intensity_min,
            intensity_max: self.intensity_max,
            trace_ref_mm: self.trace_ref_mm,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Intensity window over every phase of every sequence, and the largest trace
/// excursion (1 mm if all traces are flat).
pub fn dataset_normalization<T: Scalar>(dataset: &[PhantomSequence<T>]) -> Result<Normalization> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut amp = 0.0f64;
    for seq in dataset {
        for v in &seq.phases {
            let (a, b) = v.min_max();
            lo = lo.min(a.f64());
            hi = hi.max(b.f64());
        }
        amp = amp.max(seq.trace.max_abs());
    }
    if hi <= lo {
        return Err(Error::InvalidArgument("dataset has no intensity range".into()));
    }
    Ok(Normalization {
        intensity_min: lo,
        intensity_max: hi,
        trace_ref_mm: if amp > 0.0 { amp } else { 1.0 },
    })
}

/// Handles to the loss and its two terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub smooth: Var,
}

/// `Σ_t mse(warped_t, truth_t) + weight · Σ_t penalty(φ_t)`.
pub fn rmsim_loss<T: Scalar>(g: &mut Graph<T>, pred: &ForwardVars, truth: &[Var], weight: T) -> Result<LossVars> {
    if pred.warped.len() != truth.len() || pred.phis.len() != truth.len() || truth.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted phases, {} truth phases",
            pred.warped.len(),
            truth.len()
        )));
    }
    let mut mse = None;
    let mut smooth = None;
    for ((&w, &phi), &y) in pred.warped.iter().zip(&pred.phis).zip(truth) {
        let m = g.mse(w, y)?;
        let s = g.grad_norm_penalty(phi)?;
        mse = Some(match mse {
            Some(acc) => g.add(acc, m)?,
            None => m,
        });
        smooth = Some(match smooth {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let (mse, smooth) = (mse.unwrap(), smooth.unwrap());
    let weighted = g.scalar_mul(smooth, weight)?;
    let total = g.add(mse, weighted)?;
    Ok(LossVars { total, mse, smooth })
}

/// Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch("Adam state does not match parameters".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.numel() || state.v[i].len() != p.numel() {
            return Err(Error::ShapeMismatch(format!("Adam slot {i} shape mismatch")));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    state.step += 1;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bc1 = T::one() - T::of(cfg.beta1.powf(state.step as f64));
    let bc2 = T::one() - T::of(cfg.beta2.powf(state.step as f64));
    let (lr, eps) = (T::of(cfg.learning_rate), T::of(cfg.epsilon));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Normalised input, normalised truth phases and modulation coefficients.
type Item<T> = (Tensor<T>, Vec<Tensor<T>>, Vec<T>);

/// Train on `dataset`, one sequence per step in a seeded order per epoch.
/// The model's normalisation is reset from the dataset before the first step.
pub fn train<T: Scalar>(
    mut model: RMSimModel<T>,
    dataset: &[PhantomSequence<T>],
    cfg: &TrainConfig,
) -> Result<(RMSimModel<T>, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let need = model.config().phases;
    for (i, seq) in dataset.iter().enumerate() {
        if seq.grid().dims != model.config().dims {
            return Err(Error::DimsMismatch(format!(
                "sequence {i} has dims {:?}, model expects {:?}",
                seq.grid().dims,
                model.config().dims
            )));
        }
        if seq.phase_count() < need {
            return Err(Error::TraceTooShort {
                got: seq.phase_count(),
                need,
            });
        }
    }
    let norm = dataset_normalization(dataset)?;
    model.normalization = norm;
    if let Some(path) = &cfg.manifest_path {
        DatasetManifest {
            sequences: Vec::new(),
            intensity_min: norm.intensity_min,
            intensity_max: norm.intensity_max,
            trace_ref_mm: norm.trace_ref_mm,
        }
        .write(path)?;
    }

    // inputs are fixed for the whole run
    let items: Vec<Item<T>> = dataset
        .iter()
        .map(|seq| {
            let x0 = model.input_tensor(&seq.phases[0])?;
            let truth = seq.phases[1..need]
                .iter()
                .map(|v| model.input_tensor(v))
                .collect::<Result<Vec<_>>>()?;
            Ok((x0, truth, model.coefficients(&seq.trace)?))
        })
        .collect::<Result<_>>()?;

    let weight = T::of(cfg.smoothness_weight);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params());
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut sum_mse, mut sum_smooth) = (0.0, 0.0);
        for &item in &order {
            let (x0, truth, coeffs) = &items[item];
            let mut g = Graph::new();
            let params = model.register(&mut g);
            let x = g.constant(x0.clone());
            let ys: Vec<Var> = truth.iter().map(|t| g.constant(t.clone())).collect();
            let out = model.build(&mut g, &params, x, coeffs)?;
            let loss = rmsim_loss(&mut g, &out, &ys, weight)?;
            let total = g.value(loss.total).item();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, item });
            }
            sum_mse += g.value(loss.mse).item().f64();
            sum_smooth += g.value(loss.smooth).item().f64();
            g.backward(loss.total)?;
            let grads: Vec<Tensor<T>> = params
                .iter()
                .zip(model.params())
                .map(|(&p, t)| g.grad(p).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            adam_step(model.params_mut(), &grads, &mut adam, cfg).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { epoch, item },
                other => other,
            })?;
            model.check_finite().map_err(|_| Error::NonFiniteLoss { epoch, item })?;
        }
        model.epochs_trained += 1;
        let n = items.len() as f64;
        let (mse, smooth) = (sum_mse / n, sum_smooth / n);
        log.epochs.push(EpochRecord {
            epoch,
            total: mse + cfg.smoothness_weight * smooth,
            mse,
            smooth,
            seconds: started.elapsed().as_secs_f64(),
        });
        if let (Some(dir), true) = (&cfg.checkpoint_dir, cfg.checkpoint_interval > 0) {
            if epoch % cfg.checkpoint_interval == 0 {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                save_model(&model, dir.join(format!("epoch_{epoch}.ckpt")))?;
            }
        }
    }
    Ok((model, log))
}
