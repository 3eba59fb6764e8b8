use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub(crate) fn random(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Central finite differences against the tape, returning the worst relative
/// error. Elements are compared relative to `max(|a|, |n|, 1e-3 * max|grad|)`.
pub(crate) fn gradcheck(
    inputs: &[Tensor<f64>],
    h: f64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; t.numel()]))
        .collect();

    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&mut g, &vars);
        g.value(l).item()
    };
    let mut numeric = Vec::new();
    for (which, t) in inputs.iter().enumerate() {
        let mut col = Vec::with_capacity(t.numel());
        for e in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[e] -= h;
            col.push((eval(&plus) - eval(&minus)) / (2.0 * h));
        }
        numeric.push(col);
    }

    let gmax = analytic
        .iter()
        .chain(&numeric)
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * gmax;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.iter().zip(n) {
            let denom = x.abs().max(y.abs()).max(floor);
            if denom > 0.0 {
                worst = worst.max((x - y).abs() / denom);
            }
        }
    }
    worst
}

/// `sum(out * r)` for a fixed random `r`, turning any tensor into a scalar loss.
pub(crate) fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let r = random(g.value(out).shape(), 1.0, seed);
    let rv = g.constant(r);
    let m = g.mul(out, rv).unwrap();
    g.sum(m)
}

#[test]
fn pointwise_kernel_scales() {
    let mut g = Graph::new();
    let x = g.constant(random(&[1, 3, 4, 5], 1.0, 1));
    let w = g.constant(Tensor::new(vec![1, 1, 1, 1, 1], vec![2.5]).unwrap());
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv3d(x, w, Some(b), 1).unwrap();
    for (o, i) in g.value(y).data().iter().zip(g.value(x).data()) {
        assert_eq!(*o, 2.5 * i);
    }
}

#[test]
fn identity_kernel_copies_input() {
    let mut g = Graph::new();
    let x = g.constant(random(&[1, 4, 4, 4], 1.0, 2));
    let mut k = vec![0.0; 27];
    k[13] = 1.0;
    let w = g.constant(Tensor::new(vec![1, 1, 3, 3, 3], k).unwrap());
    let y = g.conv3d(x, w, None, 1).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f64>::zeros(&[2, 4, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3, 3]));
    assert!(g.conv3d(x, w, None, 1).is_err());
    let w2 = g.constant(Tensor::zeros(&[1, 2, 2, 2, 2]));
    assert!(g.conv3d(x, w2, None, 1).is_err());
}

#[test]
fn conv_gradients_match_finite_differences() {
    for stride in [1, 2] {
        let inputs = [random(&[2, 4, 4, 4], 1.0, 3), random(&[3, 2, 3, 3, 3], 0.5, 4), random(&[3], 0.5, 5)];
        let err = gradcheck(&inputs, 1e-6, |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), stride).unwrap();
            project(g, y, 6)
        });
        assert!(err < 1e-6, "stride {stride}: {err}");
    }
}

fn lstm_inputs(seed: u64, hidden: usize, cin: usize) -> Vec<Tensor<f64>> {
    vec![
        random(&[cin, 3, 3, 3], 1.0, seed),
        random(&[hidden, 3, 3, 3], 1.0, seed + 1),
        random(&[hidden, 3, 3, 3], 1.0, seed + 2),
        random(&[4 * hidden, cin, 3, 3, 3], 0.3, seed + 3),
        random(&[4 * hidden, hidden, 3, 3, 3], 0.3, seed + 4),
        random(&[4 * hidden], 0.3, seed + 5),
    ]
}

#[test]
fn zero_weight_cell_closed_form() {
    let mut g = Graph::new();
    let ins = lstm_inputs(10, 2, 1);
    let x = g.constant(ins[0].clone());
    let h = g.constant(ins[1].clone());
    let c = g.constant(ins[2].clone());
    let w = LstmWeights {
        wx: g.constant(Tensor::zeros(&[8, 1, 3, 3, 3])),
        wh: g.constant(Tensor::zeros(&[8, 2, 3, 3, 3])),
        b: g.constant(Tensor::zeros(&[8])),
    };
    let (h1, c1) = convlstm3d_cell(&mut g, x, Some((h, c)), &w).unwrap();
    for (i, &cp) in ins[2].data().iter().enumerate() {
        let cn = g.value(c1).data()[i];
        assert!((cn - cp / 2.0).abs() < 1e-15);
        assert!((g.value(h1).data()[i] - 0.5 * cn.tanh()).abs() < 1e-15);
    }
}

#[test]
fn saturated_forget_gate_carries_memory() {
    let mut g = Graph::new();
    let ins = lstm_inputs(20, 2, 1);
    let x = g.constant(ins[0].clone());
    let h = g.constant(ins[1].clone());
    let c = g.constant(ins[2].clone());
    let mut bias = ins[5].clone();
    bias.data_mut()[2..4].iter_mut().for_each(|v| *v = 20.0);
    let w = LstmWeights {
        wx: g.constant(ins[3].clone()),
        wh: g.constant(ins[4].clone()),
        b: g.constant(bias),
    };
    let (_, c1) = convlstm3d_cell(&mut g, x, Some((h, c)), &w).unwrap();
    // rebuild i*g on the same tape to compare against c_prev + i*g
    let xg = g.conv3d(x, w.wx, Some(w.b), 1).unwrap();
    let hg = g.conv3d(h, w.wh, None, 1).unwrap();
    let z = g.add(xg, hg).unwrap();
    let zi = g.slice_channels(z, 0, 2).unwrap();
    let zg = g.slice_channels(z, 4, 2).unwrap();
    let i = g.sigmoid(zi);
    let gg = g.tanh(zg);
    let ig = g.mul(i, gg).unwrap();
    for k in 0..ins[2].numel() {
        let expect = ins[2].data()[k] + g.value(ig).data()[k];
        assert!((g.value(c1).data()[k] - expect).abs() < 1e-6);
    }
}

#[test]
fn cell_gradients_match_finite_differences() {
    let inputs = lstm_inputs(30, 2, 2);
    let err = gradcheck(&inputs, 1e-6, |g, v| {
        let w = LstmWeights { wx: v[3], wh: v[4], b: v[5] };
        let (h, c) = convlstm3d_cell(g, v[0], Some((v[1], v[2])), &w).unwrap();
        let a = project(g, h, 31);
        let b = project(g, c, 32);
        g.add(a, b).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn cell_rejects_mismatched_state() {
    let mut g = Graph::new();
    let ins = lstm_inputs(40, 2, 1);
    let x = g.constant(ins[0].clone());
    let h = g.constant(Tensor::zeros(&[2, 4, 4, 4]));
    let w = LstmWeights {
        wx: g.constant(ins[3].clone()),
        wh: g.constant(ins[4].clone()),
        b: g.constant(ins[5].clone()),
    };
    assert!(convlstm3d_cell(&mut g, x, Some((h, h)), &w).is_err());
}

#[test]
fn upsample_examples() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[2, 3, 2, 4], 1.75));
    let u = g.upsample_trilinear(c, 2).unwrap();
    assert_eq!(g.value(u).shape(), &[2, 6, 4, 8]);
    assert!(g.value(u).data().iter().all(|&v| v == 1.75));

    let n = 4;
    let ramp: Vec<f64> = (0..n * n * n).map(|i| (i % n) as f64 * 3.0 - 1.0).collect();
    let r = g.constant(Tensor::new(vec![1, n, n, n], ramp).unwrap());
    let u = g.upsample_trilinear(r, 2).unwrap();
    let m = 2 * n;
    for (o, v) in g.value(u).data().iter().enumerate() {
        let x = (o % m) as f64 * (n - 1) as f64 / (m - 1) as f64;
        assert!((v - (3.0 * x - 1.0)).abs() < 1e-12);
    }
    assert!(g.upsample_trilinear(r, 1).is_err());
}

#[test]
fn upsample_gradients_match_finite_differences() {
    let err = gradcheck(&[random(&[2, 3, 3, 3], 1.0, 50)], 1e-6, |g, v| {
        let u = g.upsample_trilinear(v[0], 2).unwrap();
        project(g, u, 51)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn warp_identity_and_image_gradient() {
    let n = 5;
    let x = random(&[1, n, n, n], 1.0, 60);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let phi = g.param(Tensor::zeros(&[3, n, n, n]));
    let y = g.warp_st(xv, phi).unwrap();
    assert_eq!(g.value(y).data(), x.data());
    let l = g.sum(y);
    g.backward(l).unwrap();
    let gp = g.grad(phi).unwrap().data();
    let d = x.data();
    let nn = n * n * n;
    // at lattice points the derivative is the forward difference (backward at the far edge)
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let idx = i + n * (j + n * k);
                let fx = if i + 1 < n { d[idx + 1] - d[idx] } else { d[idx] - d[idx - 1] };
                let fz = if k + 1 < n { d[idx + n * n] - d[idx] } else { d[idx] - d[idx - n * n] };
                assert!((gp[idx] - fx).abs() < 1e-14);
                assert!((gp[2 * nn + idx] - fz).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn warp_integer_shift() {
    let n = 4;
    let x = random(&[2, n, n, n], 1.0, 61);
    let mut shift = Tensor::zeros(&[3, n, n, n]);
    shift.data_mut()[2 * n * n * n..].iter_mut().for_each(|v| *v = 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = g.constant(shift);
    let y = g.warp_st(xv, pv).unwrap();
    let out = g.value(y).data();
    for c in 0..2 {
        for k in 0..n - 1 {
            for p in 0..n * n {
                let o = c * n * n * n + k * n * n + p;
                assert_eq!(out[o], x.data()[o + n * n]);
            }
        }
    }
}

#[test]
fn warp_gradients_match_finite_differences() {
    let n = 5;
    let x = random(&[2, n, n, n], 1.0, 70);
    // smooth field with positions kept clear of lattice lines and borders
    let mut phi = Tensor::zeros(&[3, n, n, n]);
    let nn = n * n * n;
    for idx in 0..nn {
        let (i, j, k) = (idx % n, (idx / n) % n, idx / (n * n));
        for a in 0..3 {
            let c = [i, j, k][a];
            let mut v = 0.31 + 0.1 * ((i + 2 * j + 3 * k + a) as f64 * 0.7).sin();
            if c + 1 == n {
                v = -v;
            }
            phi.data_mut()[a * nn + idx] = v;
        }
    }
    let err = gradcheck(&[x, phi], 1e-6, |g, v| {
        let y = g.warp_st(v[0], v[1]).unwrap();
        project(g, y, 71)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.param(random(&[2, 3], 1.0, 80));
    let l = g.mse(x, x).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));

    let mut g = Graph::new();
    let x = g.param(random(&[4], 1.0, 81));
    let z = g.scalar_mul(x, 0.0).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    let l = g.sum(z);
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(g.scalar_mul(x, f64::NAN).is_err());
    let y = g.param(random(&[5], 1.0, 82));
    assert!(g.add(x, y).is_err());
    assert!(g.mse(x, y).is_err());
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let a = random(&[3, 2, 2, 2], 2.0, 90);
    let b = random(&[3, 2, 2, 2], 2.0, 91);
    type Build = fn(&mut Graph<f64>, &[Var]) -> Var;
    let cases: [(&str, Build); 8] = [
        ("add", |g, v| { let y = g.add(v[0], v[1]).unwrap(); project(g, y, 1) }),
        ("sub", |g, v| { let y = g.sub(v[0], v[1]).unwrap(); project(g, y, 2) }),
        ("mul", |g, v| { let y = g.mul(v[0], v[1]).unwrap(); project(g, y, 3) }),
        ("scalar_mul", |g, v| { let y = g.scalar_mul(v[0], -1.7).unwrap(); project(g, y, 4) }),
        ("sigmoid", |g, v| { let y = g.sigmoid(v[0]); project(g, y, 5) }),
        ("tanh", |g, v| { let y = g.tanh(v[1]); project(g, y, 6) }),
        ("mse", |g, v| g.mse(v[0], v[1]).unwrap()),
        ("slice", |g, v| { let y = g.slice_channels(v[0], 1, 2).unwrap(); project(g, y, 7) }),
    ];
    for (name, f) in cases {
        let err = gradcheck(&[a.clone(), b.clone()], 1e-6, f);
        assert!(err < 1e-6, "{name}: {err}");
    }
    let phi = random(&[3, 3, 4, 2], 1.0, 92);
    let err = gradcheck(&[phi], 1e-6, |g, v| g.grad_norm_penalty(v[0]).unwrap());
    assert!(err < 1e-6, "penalty: {err}");
}

#[test]
fn penalty_matches_field_route() {
    use crate::field::{smoothness_penalty, Dvf};
    use crate::volume::Grid;
    let grid = Grid::new([4, 3, 5], [2.0, 1.0, 0.5]).unwrap();
    let t = random(&[3, 5, 3, 4], 1.0, 93);
    let dvf = Dvf::from_voxel_units(grid, t.data()).unwrap();
    let mut g = Graph::new();
    let p = g.constant(t);
    let s = g.grad_norm_penalty(p).unwrap();
    assert!((g.value(s).item() - smoothness_penalty(&dvf)).abs() < 1e-12);
}

#[test]
fn backward_contract() {
    let x = random(&[6], 1.0, 100);
    let mut g = Graph::new();
    let w = g.param(random(&[6], 1.0, 101));
    let xv = g.constant(x.clone());
    let p = g.mul(w, xv).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), x.data());
    assert!(g.grad(xv).is_none());
    g.backward(l).unwrap();
    for (a, b) in g.grad(w).unwrap().data().iter().zip(x.data()) {
        assert_eq!(*a, 2.0 * b);
    }
    assert!(matches!(g.backward(p), Err(Error::NonScalarLoss(_))));
    g.zero_grads();
    assert!(g.grad(w).is_none());
}

#[test]
fn backward_visits_in_reverse_execution_order() {
    let mut g = Graph::new();
    let a = g.param(random(&[1, 3, 3, 3], 1.0, 110));
    let b = g.param(random(&[1, 3, 3, 3], 1.0, 111));
    let c = g.add(a, b).unwrap();
    let d = g.tanh(c);
    let e = g.mul(d, a).unwrap();
    let unused = g.sigmoid(b);
    let f = g.sum(e);
    g.backward(f).unwrap();
    let order = g.backward_order();
    assert_eq!(order, &[f.index(), e.index(), d.index(), c.index(), b.index(), a.index()]);
    assert!(order.windows(2).all(|w| w[0] > w[1]));
    assert!(!order.contains(&unused.index()));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let ins = lstm_inputs(120, 2, 1);
        let mut g = Graph::new();
        let v: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let w = LstmWeights { wx: v[3], wh: v[4], b: v[5] };
        let (h, _) = convlstm3d_cell(&mut g, v[0], Some((v[1], v[2])), &w).unwrap();
        g.value(h).data().to_vec()
    };
    assert_eq!(run(), run());
}
