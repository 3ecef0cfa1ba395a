use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// Central-difference check of d(sum(out * r))/d(input) for every input coordinate.
// Coordinates whose perturbation changes the kink pattern are skipped.
fn max_rel_err(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eps = 1e-4;
    let eval = |ts: &[Tensor]| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let r = random(g.shape(out), 99);
        let r = g.constant(r);
        let prod = g.mul(out, r).unwrap();
        let loss = g.sum(prod);
        (g, vars, loss)
    };
    let (mut g, vars, loss) = eval(inputs);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).unwrap().to_vec();
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let (gp, _, lp) = eval(&plus);
            let (gm, _, lm) = eval(&minus);
            if gp.kink_pattern() != g.kink_pattern() || gm.kink_pattern() != g.kink_pattern() {
                continue;
            }
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * eps);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            let e = (analytic[i] - numeric).abs() / denom;
            worst = worst.max(e);
        }
    }
    worst
}

#[test]
fn unit_pointwise_conv_is_identity() {
    let mut g = Graph::new();
    let x = random(&[1, 1, 3, 4, 5], 1);
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv3d(xv, w, Some(b), [1; 3], [0; 3]).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn constant_field_convolution() {
    let mut g = Graph::new();
    let c = 0.7;
    let x = g.constant(Tensor::full(&[1, 1, 5, 5, 5], c));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0));
    let y = g.conv3d(x, w, None, [1; 3], [0; 3]).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 3, 3, 3]);
    for v in g.value(y).data() {
        assert!((v - 27.0 * c).abs() < 1e-12);
    }
}

#[test]
fn conv_output_shape_and_channel_diagnostic() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3, 8, 7, 6]));
    let w = g.constant(Tensor::zeros(&[5, 3, 3, 3, 3]));
    let y = g.conv3d(x, w, None, [2, 1, 2], [1, 1, 0]).unwrap();
    // floor((8+2-3)/2)+1 = 4, floor((7+2-3)/1)+1 = 7, floor((6-3)/2)+1 = 2
    assert_eq!(g.shape(y), &[2, 5, 4, 7, 2]);

    let bad = g.constant(Tensor::zeros(&[5, 4, 3, 3, 3]));
    let err = g.conv3d(x, bad, None, [1; 3], [1; 3]).unwrap_err().to_string();
    assert!(err.contains("Cin=3") && err.contains("Cin=4"), "{err}");
}

#[test]
fn same_padding_preserves_shape() {
    let mut g = Graph::new();
    for k in [1usize, 3, 5] {
        let x = g.constant(Tensor::zeros(&[1, 2, 5, 6, 7]));
        let w = g.constant(Tensor::zeros(&[3, 2, k, k, k]));
        let y = g.conv3d(x, w, None, [1; 3], [k / 2; 3]).unwrap();
        assert_eq!(&g.shape(y)[2..], &[5, 6, 7]);
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let inputs = [
        random(&[1, 2, 5, 6, 6], 2),
        random(&[2, 2, 3, 3, 3], 3),
        random(&[2], 4),
    ];
    let err = max_rel_err(&inputs, |g, v| g.conv3d(v[0], v[1], Some(v[2]), [1; 3], [0; 3]).unwrap());
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn strided_padded_conv_gradients_match_finite_differences() {
    let inputs = [random(&[1, 2, 4, 4, 6], 5), random(&[3, 2, 3, 3, 3], 6)];
    let err = max_rel_err(&inputs, |g, v| g.conv3d(v[0], v[1], None, [1, 2, 2], [1; 3]).unwrap());
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn transposed_conv_identity_and_expansion() {
    let mut g = Graph::new();
    let x = random(&[1, 1, 2, 3, 4], 7);
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
    let y = g.conv3d_transposed(xv, w, None, [1; 3]).unwrap();
    assert_eq!(g.value(y), &x);

    let (a, b) = (0.3, -1.7);
    let xv = g.constant(Tensor::new(&[1, 1, 1, 1, 2], vec![a, b]).unwrap());
    let w = g.constant(Tensor::full(&[1, 1, 1, 1, 2], 1.0));
    let y = g.conv3d_transposed(xv, w, None, [1, 1, 2]).unwrap();
    assert_eq!(g.value(y).data(), &[a, a, b, b]);
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    // <convT(x, w), y> == <x, conv(y, w)> for stride == kernel, no padding
    let x = random(&[1, 2, 2, 3, 2], 8);
    let y = random(&[1, 3, 4, 6, 4], 9);
    let w = random(&[2, 3, 2, 2, 2], 10); // convT layout [Cin=2, Cout=3]
    let mut g = Graph::new();
    let (xv, yv, wv) = (g.constant(x.clone()), g.constant(y.clone()), g.constant(w.clone()));
    let up = g.conv3d_transposed(xv, wv, None, [2; 3]).unwrap();
    // the same buffer read as conv weight [Cout=2, Cin=3]
    let down = g.conv3d(yv, wv, None, [2; 3], [0; 3]).unwrap();
    let lhs: f64 = g.value(up).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = g.value(down).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn transposed_conv_gradients_match_finite_differences() {
    let inputs = [
        random(&[1, 2, 2, 3, 3], 11),
        random(&[2, 3, 1, 2, 2], 12),
        random(&[3], 13),
    ];
    let err = max_rel_err(&inputs, |g, v| {
        g.conv3d_transposed(v[0], v[1], Some(v[2]), [1, 2, 2]).unwrap()
    });
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn instance_norm_standardizes_each_slice() {
    let mut g = Graph::new();
    let x = g.constant(random(&[2, 3, 3, 4, 5], 14).reshape(&[2, 3, 3, 4, 5]).unwrap());
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let y = g.instance_norm(x, gamma, beta, 1e-5).unwrap();
    for slice in g.value(y).data().chunks(60) {
        let m = slice.iter().sum::<f64>() / 60.0;
        let v = slice.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 60.0;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-3, "variance {v}");
    }
}

#[test]
fn instance_norm_constant_slice_yields_beta() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 2, 2, 2, 2], 4.2));
    let gamma = g.constant(Tensor::full(&[2], 3.0));
    let beta = g.constant(Tensor::new(&[2], vec![0.5, -1.5]).unwrap());
    let y = g.instance_norm(x, gamma, beta, 1e-5).unwrap();
    let d = g.value(y).data();
    assert!(d[..8].iter().all(|&v| v == 0.5));
    assert!(d[8..].iter().all(|&v| v == -1.5));
}

#[test]
fn instance_norm_gradients_match_finite_differences() {
    let inputs = [random(&[1, 2, 2, 3, 3], 15), random(&[2], 16), random(&[2], 17)];
    let err = max_rel_err(&inputs, |g, v| g.instance_norm(v[0], v[1], v[2], 1e-5).unwrap());
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn leaky_relu_values_and_slopes() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.leaky_relu(x, 0.01).unwrap();
    assert_eq!(g.value(y).data(), &[-0.01, 0.0, 2.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.01, 0.01, 1.0]);
    assert!(g.leaky_relu(x, 1.5).is_err());
}

#[test]
fn leaky_relu_gradients_away_from_kink() {
    let mut t = random(&[2, 3, 4], 18);
    for v in t.data_mut() {
        if v.abs() < 1e-3 {
            *v = 0.5;
        }
    }
    let err = max_rel_err(&[t], |g, v| g.leaky_relu(v[0], 0.01).unwrap());
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn softmax_uniform_and_normalized() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
    let p = g.softmax_channel(x).unwrap();
    assert!(g.value(p).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

    let x = g.constant(random(&[2, 4, 3, 5], 19));
    let p = g.softmax_channel(x).unwrap();
    let d = g.value(p).data();
    for b in 0..2 {
        for s in 0..15 {
            let total: f64 = (0..4).map(|c| d[b * 60 + c * 15 + s]).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn sigmoid_at_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1]));
    let y = g.sigmoid(x);
    assert_eq!(g.value(y).item(), 0.5);
}

#[test]
fn elementwise_op_gradients() {
    let a = random(&[2, 3, 2, 2], 20);
    let mut b = random(&[2, 3, 2, 2], 21);
    b.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
    let bc = random(&[2, 3, 1, 1], 22);
    let one = random(&[2, 1, 2, 2], 23);

    type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;
    let cases: Vec<(Vec<Tensor>, Build)> = vec![
        (vec![a.clone()], Box::new(|g, v| g.softmax_channel(v[0]).unwrap())),
        (vec![a.clone()], Box::new(|g, v| g.log_softmax_channel(v[0]).unwrap())),
        (vec![a.clone()], Box::new(|g, v| g.sigmoid(v[0]))),
        (vec![b.clone()], Box::new(|g, v| g.log(v[0]))),
        (vec![a.clone(), b.clone()], Box::new(|g, v| g.add(v[0], v[1]).unwrap())),
        (vec![a.clone(), b.clone()], Box::new(|g, v| g.sub(v[0], v[1]).unwrap())),
        (vec![a.clone(), b.clone()], Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        (vec![a.clone(), b.clone()], Box::new(|g, v| g.div(v[0], v[1]).unwrap())),
        (vec![a.clone(), bc.clone()], Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        (vec![one.clone(), a.clone()], Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        (vec![a.clone()], Box::new(|g, v| g.affine(v[0], -2.5, 1.0))),
        (vec![a.clone(), one.clone()], Box::new(|g, v| g.concat_channels(&[v[0], v[1]]).unwrap())),
        (vec![a.clone()], Box::new(|g, v| g.select_channels(v[0], 1, 2).unwrap())),
        (vec![a.clone()], Box::new(|g, v| g.sum(v[0]))),
        (vec![a.clone()], Box::new(|g, v| g.mean(v[0]))),
        (vec![a.clone()], Box::new(|g, v| g.spatial_mean(v[0]).unwrap())),
        (vec![a.clone()], Box::new(|g, v| g.channel_mean(v[0]).unwrap())),
        (vec![a.clone()], Box::new(|g, v| g.channel_max(v[0]).unwrap())),
    ];
    for (k, (inputs, build)) in cases.iter().enumerate() {
        let err = max_rel_err(inputs, build);
        assert!(err < 1e-3, "case {k}: max relative error {err}");
    }
}

#[test]
fn backward_sum_and_square() {
    let mut g = Graph::new();
    let x = g.param(random(&[2, 3], 24));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    // a second call accumulates
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
    g.zero_grad();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn constants_do_not_hold_gradients() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[2], 3.0));
    let p = g.param(Tensor::full(&[2], 2.0));
    let y = g.mul(c, p).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(p).unwrap(), &[3.0, 3.0]);
}

#[test]
fn composite_chain_gradients() {
    let inputs = [
        random(&[1, 2, 4, 4, 4], 25),
        random(&[3, 2, 3, 3, 3], 26),
        random(&[3], 27),
        random(&[3], 28),
        random(&[3], 29),
    ];
    let err = max_rel_err(&inputs, |g, v| {
        let c = g.conv3d(v[0], v[1], Some(v[2]), [1; 3], [1; 3]).unwrap();
        let n = g.instance_norm(c, v[3], v[4], 1e-5).unwrap();
        g.leaky_relu(n, 0.01).unwrap()
    });
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn replay_is_bitwise_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(random(&[2, 3, 4, 4, 4], 30));
        let w = g.param(random(&[4, 3, 3, 3, 3], 31));
        let y = g.conv3d(x, w, None, [1; 3], [1; 3]).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        (g.value(y).clone(), g.grad(w).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
