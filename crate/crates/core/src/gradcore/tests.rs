use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Direct nested-loop convolution with explicit zero padding.
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize, depthwise: bool) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = ((h + 2 * pad - kh) / stride + 1, (wd + 2 * pad - kw) / stride + 1);
    let mut out = Vec::new();
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[oi];
                    let chans: Vec<usize> = if depthwise { vec![oi] } else { (0..c).collect() };
                    for ci in chans {
                        let wc = if depthwise { 0 } else { ci };
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[ni, ci, iy as usize, ix as usize]) * w.at(&[oi, wc, ky, kx]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn tensor_rejects_bad_shapes() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    let mut a = Tensor::zeros(&[2]);
    assert!(a.set_grad(vec![1.0]).is_err());
    assert!(a.set_grad(vec![1.0, 2.0]).is_ok());
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[9.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xi = rand_tensor(&mut rng, &[1, 1, 4, 4]);
    let x = g.constant(xi.clone());
    let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), xi.data());
}

#[test]
fn conv2d_matches_naive_oracle() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (stride, pad, k) in [(1, 1, 3), (2, 0, 2), (4, 0, 4), (2, 1, 3), (1, 0, 1)] {
            let x = rand_tensor(&mut rng, &[2, 2, 8, 8]);
            let w = rand_tensor(&mut rng, &[3, 2, k, k]);
            let b = rand_tensor(&mut rng, &[3]);
            let mut g = Graph::new();
            let (xn, wn, bn) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(xn, wn, bn, stride, pad).unwrap();
            let want = naive_conv(&x, &w, &b, stride, pad, false);
            assert!(max_abs_diff(g.value(y).data(), &want) <= 1e-12);
        }
    }
    // the literal case from the table: 1×2×4×4 input, 3×2×3×3 weight, pad 1
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (x, w, b) = (
        rand_tensor(&mut rng, &[1, 2, 4, 4]),
        rand_tensor(&mut rng, &[3, 2, 3, 3]),
        rand_tensor(&mut rng, &[3]),
    );
    let mut g = Graph::new();
    let (xn, wn, bn) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xn, wn, bn, 1, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 3, 4, 4]);
    assert!(max_abs_diff(g.value(y).data(), &naive_conv(&x, &w, &b, 1, 1, false)) <= 1e-12);
}

#[test]
fn conv2d_names_offending_axis() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[3, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(&[3]));
    let err = g.conv2d(x, w, b, 1, 1).unwrap_err();
    assert!(matches!(err, crate::Error::Dimension { .. }), "{err}");
    assert!(err.to_string().contains("channel"), "{err}");
}

#[test]
fn depthwise_examples_and_oracle() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.depthwise_conv2d(x, w, b, 0).unwrap();
    assert_eq!(g.value(y).data(), &[9.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xi = rand_tensor(&mut rng, &[2, 3, 5, 5]);
    let mut delta = Tensor::zeros(&[3, 1, 3, 3]);
    for c in 0..3 {
        delta.data_mut()[c * 9 + 4] = 1.0;
    }
    let (xn, wn, bn) = (g.constant(xi.clone()), g.constant(delta), g.constant(Tensor::zeros(&[3])));
    let y = g.depthwise_conv2d(xn, wn, bn, 1).unwrap();
    assert_eq!(g.value(y).data(), xi.data());

    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_tensor(&mut rng, &[2, 4, 6, 6]);
        let w = rand_tensor(&mut rng, &[4, 1, 3, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.depthwise_conv2d(xn, wn, bn, 1).unwrap();
        assert!(max_abs_diff(g.value(y).data(), &naive_conv(&x, &w, &b, 1, 1, true)) <= 1e-12);
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
    let b = g.constant(Tensor::zeros(&[3]));
    assert!(g.depthwise_conv2d(x, w, b, 1).is_err());
}

#[test]
fn linear_examples_and_oracle() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = g.constant(t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]));
    let b = g.constant(Tensor::zeros(&[2]));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 2.0]);

    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = g.linear(x, eye, b).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);

    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (x, w, b) = (
            rand_tensor(&mut rng, &[5, 7]),
            rand_tensor(&mut rng, &[3, 7]),
            rand_tensor(&mut rng, &[3]),
        );
        let mut want = Vec::new();
        for r in 0..5 {
            for o in 0..3 {
                let mut acc = b.data()[o];
                for i in 0..7 {
                    acc += x.at(&[r, i]) * w.at(&[o, i]);
                }
                want.push(acc);
            }
        }
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.constant(x), g.constant(w), g.constant(b));
        let y = g.linear(xn, wn, bn).unwrap();
        assert!(max_abs_diff(g.value(y).data(), &want) <= 1e-12);
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[2, 4]));
    let b = g.constant(Tensor::zeros(&[2]));
    assert!(g.linear(x, w, b).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let one = g.constant(Tensor::full(&[3], 1.0));
    let zero = g.constant(Tensor::zeros(&[3]));
    let y = g.layer_norm(x, one, zero, 0.0).unwrap();
    // (x − 2) / sqrt(2/3)
    let s = (1.5f64).sqrt();
    let want = [-s, 0.0, s];
    assert!(max_abs_diff(g.value(y).data(), &want) <= 1e-15);
    assert!((g.value(y).data()[2] - 1.224744871391589).abs() <= 1e-15);

    let c = g.constant(Tensor::full(&[2, 3], 0.7));
    let gamma = g.constant(t(&[3], &[2.0, -1.0, 0.5]));
    let beta = g.constant(t(&[3], &[0.1, 0.2, 0.3]));
    let y = g.layer_norm(c, gamma, beta, 1e-6).unwrap();
    let want = [0.1, 0.2, 0.3, 0.1, 0.2, 0.3];
    assert!(max_abs_diff(g.value(y).data(), &want) <= 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xr = g.constant(rand_tensor(&mut rng, &[4, 3]));
    let g0 = g.constant(Tensor::zeros(&[3]));
    let y = g.layer_norm(xr, g0, beta, 1e-6).unwrap();
    assert!(g.value(y).data().chunks(3).all(|r| r == [0.1, 0.2, 0.3]));
}

#[test]
fn gelu_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[0.0, 10.0, -10.0]));
    let y = g.gelu(x);
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-9);
    assert!(v[2].abs() < 1e-9);
}

#[test]
fn attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 4;
    let ws: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, &[d, d])).collect();

    // single token: weight exactly 1, output = x·wv·wo
    let x = rand_tensor(&mut rng, &[1, 1, d]);
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let w: Vec<NodeId> = ws.iter().map(|w| g.constant(w.clone())).collect();
    let y = g.attention(xn, w[0], w[1], w[2], w[3]).unwrap();
    assert_eq!(g.attention_probs(y).unwrap(), &[1.0]);
    let v = kernels::matmul(x.data(), ws[2].data(), 1, d, d);
    let want = kernels::matmul(&v, ws[3].data(), 1, d, d);
    assert!(max_abs_diff(g.value(y).data(), &want) <= 1e-14);

    // identical tokens: uniform weights
    let row = rand_tensor(&mut rng, &[d]);
    let same = Tensor::from_fn(&[1, 5, d], |i| row.data()[i % d]);
    let xn = g.constant(same);
    let y = g.attention(xn, w[0], w[1], w[2], w[3]).unwrap();
    assert!(g.attention_probs(y).unwrap().iter().all(|&p| (p - 0.2).abs() <= 1e-15));

    // random: rows sum to one
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let xn = g.constant(rand_tensor(&mut rng, &[3, 6, d]).reshape(&[3, 6, d]).unwrap());
        let y = g.attention(xn, w[0], w[1], w[2], w[3]).unwrap();
        for r in g.attention_probs(y).unwrap().chunks(6) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn global_avg_pool_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);
    let c = g.constant(Tensor::full(&[2, 3, 4, 4], 0.3));
    let yc = g.global_avg_pool(c).unwrap();
    assert!(g.value(yc).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[1.0, -2.0, 5.0]), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 3]);

    let mut g = Graph::new();
    let a = g.leaf(Tensor::scalar(3.0), true);
    let b = g.leaf(Tensor::scalar(-4.0), true);
    let p = g.mul(a, b).unwrap();
    g.backward(p).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[-4.0]);
    assert_eq!(g.grad(b).unwrap(), &[3.0]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(crate::Error::NonScalarLoss(_))));
}

#[test]
fn unreached_leaves_get_zero_gradients() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[2], 1.0), true);
    let unused = g.leaf(Tensor::full(&[3], 1.0), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &[0.0; 3]);
}

#[test]
fn gradients_accumulate_across_consumers() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xv = rand_tensor(&mut rng, &[4]);
    // x used twice: sum(x ⊙ x) + sum(3x)
    let mut g = Graph::new();
    let x = g.leaf(xv.clone(), true);
    let sq = g.mul(x, x).unwrap();
    let tri = g.scale(x, 3.0);
    let both = g.add(sq, tri).unwrap();
    let s = g.sum(both);
    g.backward(s).unwrap();
    // single-branch refactoring: each use gets its own leaf
    let mut h = Graph::new();
    let x1 = h.leaf(xv.clone(), true);
    let x2 = h.leaf(xv.clone(), true);
    let x3 = h.leaf(xv.clone(), true);
    let sq = h.mul(x1, x2).unwrap();
    let tri = h.scale(x3, 3.0);
    let both = h.add(sq, tri).unwrap();
    let s = h.sum(both);
    h.backward(s).unwrap();
    for i in 0..4 {
        let want = h.grad(x1).unwrap()[i] + h.grad(x2).unwrap()[i] + h.grad(x3).unwrap()[i];
        assert_eq!(g.grad(x).unwrap()[i], want);
        assert!((want - (2.0 * xv.data()[i] + 3.0)).abs() < 1e-15);
    }
}

#[test]
fn forward_ops_are_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (x, w, b) = (
        rand_tensor(&mut rng, &[2, 3, 6, 6]),
        rand_tensor(&mut rng, &[4, 3, 3, 3]),
        rand_tensor(&mut rng, &[4]),
    );
    let run = || {
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xn, wn, bn, 1, 1).unwrap();
        let y = g.gelu(y);
        let p = g.global_avg_pool(y).unwrap();
        g.value(p).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn finite_diff_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = vec![rand_tensor(&mut rng, &[5])];
    let linear = |g: &mut Graph, v: &[NodeId]| -> Result<NodeId> {
        let s = g.scale(v[0], 2.5);
        let s = g.add_scalar(s, 1.0);
        Ok(g.sum(s))
    };
    assert!(finite_diff_check(linear, &p, 1e-4).unwrap().max_rel_error <= 1e-9);

    let constant = |g: &mut Graph, _: &[NodeId]| -> Result<NodeId> { Ok(g.constant(Tensor::scalar(4.0))) };
    let mut g = Graph::new();
    let leaf = g.leaf(p[0].clone(), true);
    let c = constant(&mut g, &[leaf]).unwrap();
    g.backward(c).unwrap();
    assert!(g.grad(leaf).unwrap().iter().all(|&v| v == 0.0));
    let rep = finite_diff_check(constant, &p, 1e-4).unwrap();
    assert_eq!(rep.max_rel_error, 0.0);
    assert!(finite_diff_check(constant, &p, 0.0).is_err());
}

#[test]
fn composite_conv_ln_linear_cosine_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let params = vec![
            rand_tensor(&mut rng, &[2, 2, 4, 4]),
            rand_tensor(&mut rng, &[3, 2, 3, 3]),
            rand_tensor(&mut rng, &[3]),
            rand_tensor(&mut rng, &[3]),
            rand_tensor(&mut rng, &[3]),
            rand_tensor(&mut rng, &[4, 3]),
            rand_tensor(&mut rng, &[4]),
            rand_tensor(&mut rng, &[2, 4]),
        ];
        let f = |g: &mut Graph, v: &[NodeId]| -> Result<NodeId> {
            let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
            let y = g.global_avg_pool(y)?;
            let y = g.layer_norm(y, v[3], v[4], 1e-6)?;
            let y = g.linear(y, v[5], v[6])?;
            let c = g.cosine_rows(y, v[7])?;
            Ok(g.mean(c))
        };
        let rep = finite_diff_check(f, &params, 1e-4).unwrap();
        assert!(rep.max_rel_error <= 1e-4, "seed {seed}: {rep:?}");
    }
}
