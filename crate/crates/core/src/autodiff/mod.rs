//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive as it executes. [`Graph::backward`]
//! walks the record in exact reverse order and adds (never assigns)
//! gradients into the nodes created with [`Graph::param`].
//!
//! Spatial tensors are laid out `[channels, z, y, x]` with x fastest, the
//! same order as [`crate::Volume3D`] data.

mod conv;

use crate::error::{Error, Result};
use crate::field::{smoothness_grad, smoothness_of};
use crate::interp;
use crate::Scalar;

use conv::ConvGeom;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.len() > 5 {
            return Err(Error::ShapeMismatch(format!("at most 5 axes, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Warp {
        x: Var,
        phi: Var,
    },
    Mse(Var, Var),
    Smooth(Var),
    Sum(Var),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } => [Some(x), Some(w), b].into_iter().flatten().collect(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![a, b],
            Op::Warp { x, phi } => vec![x, phi],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Smooth(a)
            | Op::Sum(a)
            | Op::Slice { x: a, .. }
            | Op::Upsample { x: a, .. } => vec![a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Some ancestor (or the node itself) requires a gradient.
    needs_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Execution record for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    last_order: Vec<usize>,
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Align-corners sampling positions for one axis.
fn upsample_axis<T: Scalar>(n: usize, factor: usize) -> Vec<interp::AxisWeight<T>> {
    let m = n * factor;
    (0..m)
        .map(|o| {
            let pos = if m > 1 {
                T::from_usize(o * (n - 1)).unwrap() / T::from_usize(m - 1).unwrap()
            } else {
                T::zero()
            };
            interp::axis_weight(pos, n)
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            last_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Trainable input; receives accumulated gradients on [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a [`Graph::param`] node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Node indices visited by the most recent backward pass, in visiting order.
    pub fn backward_order(&self) -> &[usize] {
        &self.last_order
    }

    /// 3D convolution. `x: [cin, z, y, x]`, `w: [cout, cin, k, k, k]` with odd
    /// `k`, `b: [cout]`. Zero padding `k / 2`; stride 1 keeps the spatial size.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 5 {
            return Err(Error::ShapeMismatch(format!("conv3d input {xs:?}, weights {ws:?}")));
        }
        let k = ws[2];
        if ws[3] != k || ws[4] != k || k.is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!("conv3d kernel must be odd and cubic, got {ws:?}")));
        }
        if ws[1] != xs[0] {
            return Err(Error::ShapeMismatch(format!("conv3d expects {} input channels, got {}", ws[1], xs[0])));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv3d stride must be >= 1".into()));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[0]] {
                return Err(Error::ShapeMismatch(format!("conv3d bias {:?}", self.value(b).shape())));
            }
        }
        let geom = ConvGeom::new(ws[1], ws[0], k, stride, [xs[1], xs[2], xs[3]]);
        let out = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let shape = vec![geom.cout, geom.output[0], geom.output[1], geom.output[2]];
        Ok(self.push(Tensor { shape, data: out }, Op::Conv { x, w, b, geom }))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor { shape, data }, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiply every element by a constant.
    pub fn scalar_mul(&mut self, a: Var, c: T) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("scalar multiplier {c}")));
        }
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| x * c).collect(),
        };
        Ok(self.push(out, Op::Scale(a, c)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh(a))
    }

    /// Channels `start..start + len` of a `[c, ...]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape.is_empty() || start + len > t.shape[0] {
            return Err(Error::ShapeMismatch(format!(
                "channel slice {start}..{} of {:?}",
                start + len,
                t.shape
            )));
        }
        let per: usize = t.shape[1..].iter().product();
        let mut shape = t.shape.clone();
        shape[0] = len;
        let data = t.data[start * per..(start + len) * per].to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Slice { x, start, len }))
    }

    /// Align-corners trilinear upsampling of `[c, z, y, x]` by an integer factor.
    pub fn upsample_trilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!("upsample expects [c,z,y,x], got {:?}", t.shape)));
        }
        if factor < 2 {
            return Err(Error::InvalidArgument(format!("upsample factor must be >= 2, got {factor}")));
        }
        let [nz, ny, nx] = t.spatial();
        let (wz, wy, wx) = (
            upsample_axis::<T>(nz, factor),
            upsample_axis::<T>(ny, factor),
            upsample_axis::<T>(nx, factor),
        );
        let c = t.shape[0];
        let mut data = Vec::with_capacity(c * wz.len() * wy.len() * wx.len());
        for ch in 0..c {
            let src = &t.data[ch * nz * ny * nx..(ch + 1) * nz * ny * nx];
            for az in &wz {
                for ay in &wy {
                    for ax in &wx {
                        data.push(interp::sample(src, [nx, ny, nz], [
                            T::from_usize(ax.i0).unwrap() + ax.frac,
                            T::from_usize(ay.i0).unwrap() + ay.frac,
                            T::from_usize(az.i0).unwrap() + az.frac,
                        ]));
                    }
                }
            }
        }
        let shape = vec![c, wz.len(), wy.len(), wx.len()];
        Ok(self.push(Tensor { shape, data }, Op::Upsample { x, factor }))
    }

    /// Spatial transformer: `out[c](p) = x[c](p + phi(p))` with `phi: [3, z, y, x]`
    /// in voxel units (channel 0 along x). Trilinear, clamped at the edges.
    pub fn warp_st(&mut self, x: Var, phi: Var) -> Result<Var> {
        let (xt, pt) = (self.value(x), self.value(phi));
        if xt.shape.len() != 4 || pt.shape.len() != 4 || pt.shape[0] != 3 || xt.shape[1..] != pt.shape[1..] {
            return Err(Error::ShapeMismatch(format!("warp_st image {:?}, field {:?}", xt.shape, pt.shape)));
        }
        let [nz, ny, nx] = xt.spatial();
        let n = nz * ny * nx;
        let c = xt.shape[0];
        let mut data = vec![T::zero(); c * n];
        for idx in 0..n {
            let pos = warp_position(pt.data(), idx, [nx, ny, nz]);
            for ch in 0..c {
                data[ch * n + idx] = interp::sample(&xt.data[ch * n..(ch + 1) * n], [nx, ny, nz], pos);
            }
        }
        let shape = xt.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Warp { x, phi }))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mse")?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s: T = x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum();
        let v = s / T::from_usize(x.len()).unwrap();
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b)))
    }

    /// Smoothness regulariser of a `[3, z, y, x]` voxel-unit field: mean over
    /// voxels of the squared forward-difference gradient norm.
    pub fn grad_norm_penalty(&mut self, phi: Var) -> Result<Var> {
        let t = self.value(phi);
        if t.shape.len() != 4 || t.shape[0] != 3 {
            return Err(Error::ShapeMismatch(format!("penalty expects [3,z,y,x], got {:?}", t.shape)));
        }
        let [nz, ny, nx] = t.spatial();
        let n = nx * ny * nz;
        let v = smoothness_of([&t.data[..n], &t.data[n..2 * n], &t.data[2 * n..]], [nx, ny, nz]);
        Ok(self.push(Tensor::scalar(v), Op::Smooth(phi)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Propagate `d loss / d node` from a scalar `loss` back through the record.
    /// Gradients of parameter nodes are added to what they already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).shape.clone()));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        self.last_order.clear();

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            self.last_order.push(id);
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.propagate(id, &g, &mut adj);
            let node = &mut self.nodes[id];
            if node.requires_grad {
                match &mut node.grad {
                    Some(acc) => acc.data.iter_mut().zip(&g).for_each(|(a, &d)| *a += d),
                    None => {
                        node.grad = Some(Tensor {
                            shape: node.value.shape.clone(),
                            data: g,
                        })
                    }
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, id: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if self.wants(v) {
                let slot = adj[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
                f(slot);
            }
        };
        match node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                if self.wants(x) {
                    let gx = conv::backward_input(&geom, g, self.value(w).data());
                    acc(x, &mut |s| add_into(s, &gx));
                }
                if self.wants(w) {
                    let gw = conv::backward_weight(&geom, g, self.value(x).data());
                    acc(w, &mut |s| add_into(s, &gw));
                }
                if let Some(b) = b {
                    let per: usize = geom.output.iter().product();
                    acc(b, &mut |s| {
                        for (co, chunk) in g.chunks(per).enumerate() {
                            s[co] += chunk.iter().copied().sum::<T>();
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(a, &mut |s| add_into(s, g));
                acc(b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |s| add_into(s, g));
                acc(b, &mut |s| s.iter_mut().zip(g).for_each(|(x, &d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                acc(a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(a, &mut |s| s.iter_mut().zip(g).for_each(|(x, &d)| *x += c * d)),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * (T::one() - y[i] * y[i]);
                    }
                });
            }
            Op::Slice { x, start, len } => {
                let per = g.len() / len.max(1);
                acc(x, &mut |s| add_into(&mut s[start * per..(start + len) * per], g));
            }
            Op::Upsample { x, factor } => {
                let t = self.value(x);
                let [nz, ny, nx] = t.spatial();
                let (wz, wy, wx) = (
                    upsample_axis::<T>(nz, factor),
                    upsample_axis::<T>(ny, factor),
                    upsample_axis::<T>(nx, factor),
                );
                let n_in = nz * ny * nx;
                acc(x, &mut |s| {
                    let mut o = 0;
                    for ch in 0..t.shape[0] {
                        let dst = &mut s[ch * n_in..(ch + 1) * n_in];
                        for az in &wz {
                            for ay in &wy {
                                for ax in &wx {
                                    let pos = [
                                        T::from_usize(ax.i0).unwrap() + ax.frac,
                                        T::from_usize(ay.i0).unwrap() + ay.frac,
                                        T::from_usize(az.i0).unwrap() + az.frac,
                                    ];
                                    for (i, w) in interp::sample_weights([nx, ny, nz], pos) {
                                        dst[i] += w * g[o];
                                    }
                                    o += 1;
                                }
                            }
                        }
                    }
                });
            }
            Op::Warp { x, phi } => {
                let (xt, pt) = (self.value(x), self.value(phi));
                let [nz, ny, nx] = xt.spatial();
                let dims = [nx, ny, nz];
                let n = nz * ny * nx;
                let c = xt.shape[0];
                acc(x, &mut |s| {
                    for idx in 0..n {
                        let pos = warp_position(pt.data(), idx, dims);
                        let w = interp::sample_weights(dims, pos);
                        for ch in 0..c {
                            let go = g[ch * n + idx];
                            for &(i, wt) in &w {
                                s[ch * n + i] += wt * go;
                            }
                        }
                    }
                });
                acc(phi, &mut |s| {
                    for idx in 0..n {
                        let pos = warp_position(pt.data(), idx, dims);
                        for ch in 0..c {
                            let (_, d) = interp::sample_with_grad(&xt.data[ch * n..(ch + 1) * n], dims, pos);
                            let go = g[ch * n + idx];
                            for a in 0..3 {
                                s[a * n + idx] += go * d[a];
                            }
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let k = T::of(2.0) * g[0] / T::from_usize(va.len()).unwrap();
                acc(a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += k * (va[i] - vb[i]);
                    }
                });
                acc(b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] -= k * (va[i] - vb[i]);
                    }
                });
            }
            Op::Smooth(phi) => {
                let t = self.value(phi);
                let [nz, ny, nx] = t.spatial();
                let n = nx * ny * nz;
                acc(phi, &mut |s| {
                    for a in 0..3 {
                        smoothness_grad(&t.data[a * n..(a + 1) * n], [nx, ny, nz], g[0], &mut s[a * n..(a + 1) * n]);
                    }
                });
            }
            Op::Sum(a) => acc(a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
        }
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

#[inline]
fn warp_position<T: Scalar>(phi: &[T], idx: usize, dims: [usize; 3]) -> [T; 3] {
    let n = dims[0] * dims[1] * dims[2];
    let i = idx % dims[0];
    let j = (idx / dims[0]) % dims[1];
    let k = idx / (dims[0] * dims[1]);
    [
        T::from_usize(i).unwrap() + phi[idx],
        T::from_usize(j).unwrap() + phi[n + idx],
        T::from_usize(k).unwrap() + phi[2 * n + idx],
    ]
}

/// Weights of one ConvLSTM layer. Gates are packed `i, f, g, o` along the
/// output-channel axis of both convolutions.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[4h, cin, k, k, k]`
    pub wx: Var,
    /// `[4h, h, k, k, k]`
    pub wh: Var,
    /// `[4h]`
    pub b: Var,
}

/// One ConvLSTM step. `x_gates` is the already computed input convolution
/// (with bias) so a constant input can be convolved once and reused.
pub fn convlstm3d_cell_pre<T: Scalar>(
    g: &mut Graph<T>,
    x_gates: Var,
    state: Option<(Var, Var)>,
    w: &LstmWeights,
) -> Result<(Var, Var)> {
    let hidden = g.value(w.wh).shape()[1];
    let z = match state {
        Some((h, _)) => {
            let hg = g.conv3d(h, w.wh, None, 1)?;
            g.add(x_gates, hg)?
        }
        None => x_gates,
    };
    let zi = g.slice_channels(z, 0, hidden)?;
    let zf = g.slice_channels(z, hidden, hidden)?;
    let zg = g.slice_channels(z, 2 * hidden, hidden)?;
    let zo = g.slice_channels(z, 3 * hidden, hidden)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let gg = g.tanh(zg);
    let o = g.sigmoid(zo);
    let ig = g.mul(i, gg)?;
    let c = match state {
        Some((_, c_prev)) => {
            if g.value(c_prev).shape() != g.value(ig).shape() {
                return Err(Error::ShapeMismatch(format!(
                    "cell state {:?} vs gates {:?}",
                    g.value(c_prev).shape(),
                    g.value(ig).shape()
                )));
            }
            let fc = g.mul(f, c_prev)?;
            g.add(fc, ig)?
        }
        None => ig,
    };
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// One ConvLSTM step: gates from `conv(x) + conv(h_prev) + b`, sigmoid on
/// `i, f, o`, tanh on `g`; `c = f*c_prev + i*g`, `h = o*tanh(c)`.
/// A missing state means zero hidden and cell state.
pub fn convlstm3d_cell<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    state: Option<(Var, Var)>,
    w: &LstmWeights,
) -> Result<(Var, Var)> {
    if let Some((h, _)) = state {
        let (xs, hs) = (g.value(x).shape(), g.value(h).shape());
        if xs.len() != 4 || hs.len() != 4 || xs[1..] != hs[1..] {
            return Err(Error::ShapeMismatch(format!("cell input {xs:?} vs hidden {hs:?}")));
        }
    }
    let xg = g.conv3d(x, w.wx, Some(w.b), 1)?;
    convlstm3d_cell_pre(g, xg, state, w)
}

#[cfg(test)]
pub(crate) mod tests;
