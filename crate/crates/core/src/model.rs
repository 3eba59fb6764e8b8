//! The sequence-to-sequence motion network.
//!
//! A strided convolution encodes the static volume, a stack of ConvLSTM
//! layers unrolls one step per future phase with every layer's output hidden
//! state multiplied by that phase's normalised trace amplitude, and a decoder
//! (trilinear upsample + convolution) emits a voxel-unit displacement field
//! that a spatial transformer applies to the input.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{convlstm3d_cell_pre, Graph, LstmWeights, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{self, Dvf};
use crate::trace::BreathingTrace;
use crate::volume::{Grid, Volume3D};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RMSimConfig {
    /// Input volume size `[nx, ny, nz]`.
    pub dims: [usize; 3],
    pub channels: usize,
    pub stride: usize,
    pub kernel: usize,
    pub recurrent_kernel: usize,
    pub depth: usize,
    pub phases: usize,
    pub dvf_channels: usize,
    pub smoothness_weight: f64,
    /// Modulate the hidden state of every stacked layer, not only the top one.
    pub modulate_all_levels: bool,
}

impl Default for RMSimConfig {
    fn default() -> Self {
        Self {
            dims: [24, 24, 24],
            channels: 8,
            stride: 2,
            kernel: 3,
            recurrent_kernel: 3,
            depth: 2,
            phases: 10,
            dvf_channels: 3,
            smoothness_weight: 1.0,
            modulate_all_levels: true,
        }
    }
}

impl RMSimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.stride < 2 {
            return bad(format!("encoder stride must be >= 2, got {}", self.stride));
        }
        if self.dims.iter().any(|&n| n == 0 || n % self.stride != 0) {
            return bad(format!("dims {:?} must be divisible by stride {}", self.dims, self.stride));
        }
        if self.phases < 2 {
            return bad(format!("need at least 2 phases, got {}", self.phases));
        }
        if self.channels < 1 || self.depth < 1 {
            return bad("channels and depth must be >= 1".into());
        }
        if self.kernel.is_multiple_of(2) || self.recurrent_kernel.is_multiple_of(2) {
            return bad("kernel sizes must be odd".into());
        }
        if self.dvf_channels != 3 {
            return bad(format!("displacement head must have 3 channels, got {}", self.dvf_channels));
        }
        if !(self.smoothness_weight.is_finite() && self.smoothness_weight >= 0.0) {
            return bad("smoothness weight must be finite and >= 0".into());
        }
        Ok(())
    }

    /// Named parameter shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, k, rk) = (self.channels, self.kernel, self.recurrent_kernel);
        let mut v = vec![
            ("encoder.weight".to_string(), vec![c, 1, k, k, k]),
            ("encoder.bias".to_string(), vec![c]),
        ];
        for l in 0..self.depth {
            v.push((format!("lstm{l}.wx"), vec![4 * c, c, rk, rk, rk]));
            v.push((format!("lstm{l}.wh"), vec![4 * c, c, rk, rk, rk]));
            v.push((format!("lstm{l}.bias"), vec![4 * c]));
        }
        v.push(("head.weight".to_string(), vec![self.dvf_channels, c, k, k, k]));
        v.push(("head.bias".to_string(), vec![self.dvf_channels]));
        v
    }

    fn spatial(&self) -> [usize; 4] {
        [1, self.dims[2], self.dims[1], self.dims[0]]
    }
}

/// Intensity window and trace scale learned from the training data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub intensity_min: f64,
    pub intensity_max: f64,
    /// Trace amplitude (mm) that maps to a modulation coefficient of 1.
    pub trace_ref_mm: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            intensity_min: 0.0,
            intensity_max: 1.0,
            trace_ref_mm: 1.0,
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if !(self.intensity_max > self.intensity_min && self.trace_ref_mm > 0.0)
            || !(self.intensity_min.is_finite() && self.intensity_max.is_finite() && self.trace_ref_mm.is_finite())
        {
            return Err(Error::InvalidArgument(format!("invalid normalization {self:?}")));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, v: T) -> T {
        (v - T::of(self.intensity_min)) / T::of(self.intensity_max - self.intensity_min)
    }

    pub fn inverse<T: Scalar>(&self, v: T) -> T {
        v * T::of(self.intensity_max - self.intensity_min) + T::of(self.intensity_min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RMSimModel<T> {
    config: RMSimConfig,
    params: Vec<Tensor<T>>,
    pub normalization: Normalization,
    pub epochs_trained: u64,
}

/// Graph handles produced by one unrolled forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Voxel-unit fields `[3, z, y, x]`, one per predicted phase.
    pub phis: Vec<Var>,
    /// Warped normalised input, one per predicted phase.
    pub warped: Vec<Var>,
}

/// Predicted fields (mm) and the input warped by each of them.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    /// `dvfs[t - 1]` drives phase `t`.
    pub dvfs: Vec<Dvf<T>>,
    pub warped: Vec<Volume3D<T>>,
}

/// `m(h, b) = b h`: scale a hidden state by the trace amplitude of its phase.
pub fn modulate_hidden<T: Scalar>(g: &mut Graph<T>, h: Var, b_t: T) -> Result<Var> {
    g.scalar_mul(h, b_t)
}

impl<T: Scalar> RMSimModel<T> {
    /// Freshly initialised network: weights uniform in `±1/sqrt(fan_in)`,
    /// forget-gate bias 1, other biases 0, displacement head all zero.
    pub fn new(config: RMSimConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = if name.starts_with("head") {
                    vec![T::zero(); n]
                } else if name.ends_with("bias") {
                    let mut b = vec![T::zero(); n];
                    if name.starts_with("lstm") {
                        b[c..2 * c].iter_mut().for_each(|v| *v = T::one());
                    }
                    b
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            params,
            normalization: Normalization::default(),
            epochs_trained: 0,
        })
    }

    pub fn config(&self) -> &RMSimConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Parameters keyed by name, in storage order.
    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        self.config.param_shapes().into_iter().map(|(n, _)| n).zip(self.params.iter())
    }

    /// Install the parameters into `g` as trainable nodes.
    pub fn register(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Install the parameters into `g` as constants.
    pub fn register_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    /// Unroll the network on a normalised input `[1, z, y, x]` with one
    /// modulation coefficient per phase (`coeffs[0]` is the reference phase).
    pub fn build(&self, g: &mut Graph<T>, params: &[Var], x0: Var, coeffs: &[T]) -> Result<ForwardVars> {
        let cfg = &self.config;
        if g.value(x0).shape() != cfg.spatial() {
            return Err(Error::ShapeMismatch(format!(
                "input {:?}, model expects {:?}",
                g.value(x0).shape(),
                cfg.spatial()
            )));
        }
        if coeffs.len() < cfg.phases {
            return Err(Error::TraceTooShort {
                got: coeffs.len(),
                need: cfg.phases,
            });
        }
        if let Some(c) = coeffs.iter().find(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("modulation coefficient {c}")));
        }
        let layers: Vec<LstmWeights> = (0..cfg.depth)
            .map(|l| LstmWeights {
                wx: params[2 + 3 * l],
                wh: params[3 + 3 * l],
                b: params[4 + 3 * l],
            })
            .collect();
        let head_w = params[2 + 3 * cfg.depth];
        let head_b = params[3 + 3 * cfg.depth];

        let enc = g.conv3d(x0, params[0], Some(params[1]), cfg.stride)?;
        let features = g.tanh(enc);
        // the bottom layer sees the same features at every step
        let bottom_gates = g.conv3d(features, layers[0].wx, Some(layers[0].b), 1)?;

        let mut state: Vec<Option<(Var, Var)>> = vec![None; cfg.depth];
        let mut phis = Vec::with_capacity(cfg.phases - 1);
        let mut warped = Vec::with_capacity(cfg.phases - 1);
        for (step, &b_t) in coeffs[..cfg.phases].iter().enumerate() {
            let mut input = features;
            for (l, w) in layers.iter().enumerate() {
                let gates = if l == 0 {
                    bottom_gates
                } else {
                    g.conv3d(input, w.wx, Some(w.b), 1)?
                };
                let (mut h, c) = convlstm3d_cell_pre(g, gates, state[l], w)?;
                if step > 0 && (cfg.modulate_all_levels || l + 1 == cfg.depth) {
                    h = modulate_hidden(g, h, b_t)?;
                }
                state[l] = Some((h, c));
                input = h;
            }
            if step == 0 {
                // the reference phase only primes the recurrent state
                continue;
            }
            let up = g.upsample_trilinear(input, cfg.stride)?;
            let phi = g.conv3d(up, head_w, Some(head_b), 1)?;
            warped.push(g.warp_st(x0, phi)?);
            phis.push(phi);
        }
        Ok(ForwardVars { phis, warped })
    }

    /// Normalised `[1, z, y, x]` tensor of a volume.
    pub fn input_tensor(&self, v: &Volume3D<T>) -> Result<Tensor<T>> {
        if v.dims() != self.config.dims {
            return Err(Error::DimsMismatch(format!(
                "input {:?}, model expects {:?}",
                v.dims(),
                self.config.dims
            )));
        }
        let data = v.data().iter().map(|&x| self.normalization.forward(x)).collect();
        Tensor::new(self.config.spatial().to_vec(), data)
    }

    /// Modulation coefficients for the first `phases` samples of a trace.
    pub fn coefficients(&self, trace: &BreathingTrace) -> Result<Vec<T>> {
        if trace.phase_count() < self.config.phases {
            return Err(Error::TraceTooShort {
                got: trace.phase_count(),
                need: self.config.phases,
            });
        }
        Ok(trace
            .normalize(self.normalization.trace_ref_mm)?
            .into_iter()
            .take(self.config.phases)
            .map(T::of)
            .collect())
    }

    /// Predict every future phase of `x0` under `trace`.
    pub fn forward(&self, x0: &Volume3D<T>, trace: &BreathingTrace) -> Result<Prediction<T>> {
        let (g, vars) = self.forward_graph(x0, trace)?;
        let grid: Grid = *x0.grid();
        let mut dvfs = Vec::with_capacity(vars.phis.len());
        let mut warped = Vec::with_capacity(vars.phis.len());
        for &phi in &vars.phis {
            let d = Dvf::from_voxel_units(grid, g.value(phi).data())?;
            warped.push(field::warp(x0, &d)?);
            dvfs.push(d);
        }
        Ok(Prediction { dvfs, warped })
    }

    /// The inference graph, for callers that want the tensor-path outputs.
    pub fn forward_graph(&self, x0: &Volume3D<T>, trace: &BreathingTrace) -> Result<(Graph<T>, ForwardVars)> {
        let input = self.input_tensor(x0)?;
        let coeffs = self.coefficients(trace)?;
        let mut g = Graph::new();
        let params = self.register_frozen(&mut g);
        let x = g.constant(input);
        let vars = self.build(&mut g, &params, x, &coeffs)?;
        Ok((g, vars))
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, p) in self.named_params() {
            if p.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"RMSIMCKP";
const VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: RMSimConfig,
    normalization: Normalization,
    epochs_trained: u64,
    scalar: String,
    params: Vec<(String, Vec<usize>)>,
}

impl<T: Scalar> RMSimModel<T> {
    /// Serialise to checkpoint bytes: magic, version, JSON header, raw
    /// little-endian parameters, trailing CRC-64.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            normalization: self.normalization,
            epochs_trained: self.epochs_trained,
            scalar: T::NAME.to_string(),
            params: self.config.param_shapes(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + self.param_count() * T::BYTES + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            for &v in p.data() {
                v.write_le(&mut out);
            }
        }
        let crc = CRC64.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], expected: Option<&RMSimConfig>) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 24 {
            return Err(corrupt("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if CRC64.checksum(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        if &body[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let json_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
        let json = body.get(16..16 + json_len).ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(json).map_err(|e| corrupt(&format!("header: {e}")))?;
        if header.scalar != T::NAME {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint stores {} parameters, loading as {}",
                header.scalar,
                T::NAME
            )));
        }
        header.config.validate()?;
        header.normalization.validate()?;
        if header.params != header.config.param_shapes() {
            return Err(Error::ConfigMismatch("parameter shapes disagree with config".into()));
        }
        if let Some(want) = expected {
            if *want != header.config {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint config {:?} differs from requested {:?}",
                    header.config, want
                )));
            }
        }
        let mut cursor = 16 + json_len;
        let mut params = Vec::with_capacity(header.params.len());
        for (_, shape) in &header.params {
            let n: usize = shape.iter().product();
            let blob = body
                .get(cursor..cursor + n * T::BYTES)
                .ok_or_else(|| corrupt("truncated parameters"))?;
            cursor += n * T::BYTES;
            let data = blob.chunks_exact(T::BYTES).map(T::read_le).collect();
            params.push(Tensor::new(shape.clone(), data)?);
        }
        if cursor != body.len() {
            return Err(corrupt("trailing bytes after parameters"));
        }
        let model = Self {
            config: header.config,
            params,
            normalization: header.normalization,
            epochs_trained: header.epochs_trained,
        };
        model.check_finite()?;
        Ok(model)
    }
}

pub fn save_model<T: Scalar>(model: &RMSimModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_bytes()?).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint; with `expected`, its embedded config must match exactly.
pub fn load_model<T: Scalar>(path: impl AsRef<Path>, expected: Option<&RMSimConfig>) -> Result<RMSimModel<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    RMSimModel::from_bytes(&bytes, expected)
}
