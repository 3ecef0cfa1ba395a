#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dfseg::blocks::{ConvNormAct, CrossAttention, CrossAttentionSpec, DownPool, ResidualStage, StageSpec, SupervisionHead, UpSample};
use dfseg::io::Task;
use dfseg::losses::{deep_supervised_loss, one_hot, LabelPyramid};
use dfseg::models::{build_initialized, Arch, Model, ModelConfig};
use dfseg::params::{Binding, ParamStore};
use dfseg::phantom::{generate_case, PhantomConfig};
use dfseg::pipeline::training_case;
use dfseg::preprocess::{preprocess_case, PreparedCase, PreprocessConfig, RawCase};
use dfseg::trainer::TrainCase;
use dfseg::volume::LabelMap;
use dfseg::{Graph, Tensor, Var};

pub const FD_EPS: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn random_labels(n: usize, classes: u8, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, Default)]
pub struct FdReport {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl FdReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.worst = self.worst.max(rel_err(analytic, numeric));
        self.checked += 1;
    }

    /// Within tolerance, with at least three quarters of the coordinates compared.
    pub fn ok(&self) -> bool {
        self.worst < FD_TOL && self.checked > 0 && self.checked >= 3 * self.skipped
    }
}

/// Central-difference check of `sum(out * r)` against every input coordinate,
/// skipping coordinates whose perturbation crosses a kink.
pub fn op_rel_err(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> FdReport {
    let eval = |ts: &[Tensor]| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let r = g.constant(random_tensor(g.shape(out), 99, -1.0, 1.0));
        let prod = g.mul(out, r).unwrap();
        let loss = g.sum(prod);
        (g, vars, loss)
    };
    let (mut g, vars, loss) = eval(inputs);
    g.backward(loss).unwrap();
    let kinks = g.kink_pattern();
    let mut report = FdReport::default();
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).unwrap().to_vec();
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_EPS;
            let (gp, _, lp) = eval(&plus);
            let (gm, _, lm) = eval(&minus);
            if gp.kink_pattern() != kinks || gm.kink_pattern() != kinks {
                report.skipped += 1;
                continue;
            }
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * FD_EPS);
            report.record(analytic[i], numeric);
        }
    }
    report
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Var>);

/// Every differentiable graph operation with representative shapes.
pub fn op_cases() -> Vec<OpCase> {
    let t = |shape: &[usize], seed: u64| random_tensor(shape, seed, -1.0, 1.0);
    let pos = |shape: &[usize], seed: u64| random_tensor(shape, seed, 0.5, 1.5);
    let x5 = [2, 3, 2, 2, 3];
    vec![
        (
            "conv3d",
            vec![t(&[2, 2, 3, 4, 4], 1), t(&[3, 2, 3, 3, 3], 2), t(&[3], 3)],
            Box::new(|g, v| g.conv3d(v[0], v[1], Some(v[2]), [1; 3], [1; 3]).unwrap()),
        ),
        (
            "conv3d_strided",
            vec![t(&[1, 2, 3, 5, 5], 4), t(&[2, 2, 1, 3, 3], 5)],
            Box::new(|g, v| g.conv3d(v[0], v[1], None, [1, 2, 2], [0, 1, 1]).unwrap()),
        ),
        (
            "conv3d_large_kernel",
            vec![t(&[1, 2, 3, 4, 4], 6), t(&[1, 2, 5, 5, 5], 7), t(&[1], 8)],
            Box::new(|g, v| g.conv3d(v[0], v[1], Some(v[2]), [1; 3], [2; 3]).unwrap()),
        ),
        (
            "conv3d_transposed",
            vec![t(&[1, 2, 2, 3, 3], 9), t(&[2, 3, 2, 2, 2], 10), t(&[3], 11)],
            Box::new(|g, v| g.conv3d_transposed(v[0], v[1], Some(v[2]), [2; 3]).unwrap()),
        ),
        (
            "conv3d_transposed_anisotropic",
            vec![t(&[1, 2, 2, 2, 2], 12), t(&[2, 2, 1, 2, 2], 13)],
            Box::new(|g, v| g.conv3d_transposed(v[0], v[1], None, [1, 2, 2]).unwrap()),
        ),
        (
            "instance_norm",
            vec![t(&[2, 3, 2, 3, 3], 14), t(&[3], 15), t(&[3], 16)],
            Box::new(|g, v| g.instance_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        ),
        ("leaky_relu", vec![t(&x5, 17)], Box::new(|g, v| g.leaky_relu(v[0], 0.01).unwrap())),
        ("sigmoid", vec![t(&x5, 18)], Box::new(|g, v| g.sigmoid(v[0]))),
        ("softmax_channel", vec![t(&x5, 19)], Box::new(|g, v| g.softmax_channel(v[0]).unwrap())),
        (
            "log_softmax_channel",
            vec![t(&x5, 20)],
            Box::new(|g, v| g.log_softmax_channel(v[0]).unwrap()),
        ),
        ("log", vec![pos(&x5, 21)], Box::new(|g, v| g.log(v[0]))),
        ("add", vec![t(&x5, 22), t(&x5, 23)], Box::new(|g, v| g.add(v[0], v[1]).unwrap())),
        (
            "sub_broadcast",
            vec![t(&x5, 24), t(&[2, 3, 1, 1, 1], 25)],
            Box::new(|g, v| g.sub(v[0], v[1]).unwrap()),
        ),
        (
            "mul_broadcast",
            vec![t(&x5, 26), t(&[2, 1, 2, 2, 3], 27)],
            Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
        ),
        (
            "div_broadcast",
            vec![t(&x5, 28), pos(&[1, 3, 1, 1, 1], 29)],
            Box::new(|g, v| g.div(v[0], v[1]).unwrap()),
        ),
        ("affine", vec![t(&x5, 30)], Box::new(|g, v| g.affine(v[0], -1.5, 0.25))),
        ("scale", vec![t(&x5, 31)], Box::new(|g, v| g.scale(v[0], 3.0))),
        (
            "concat_channels",
            vec![t(&[2, 1, 2, 2, 2], 32), t(&[2, 2, 2, 2, 2], 33)],
            Box::new(|g, v| g.concat_channels(&[v[0], v[1]]).unwrap()),
        ),
        (
            "select_channels",
            vec![t(&x5, 34)],
            Box::new(|g, v| g.select_channels(v[0], 1, 2).unwrap()),
        ),
        ("sum", vec![t(&x5, 35)], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![t(&x5, 36)], Box::new(|g, v| g.mean(v[0]))),
        ("spatial_mean", vec![t(&x5, 37)], Box::new(|g, v| g.spatial_mean(v[0]).unwrap())),
        ("channel_mean", vec![t(&x5, 38)], Box::new(|g, v| g.channel_mean(v[0]).unwrap())),
        ("channel_max", vec![t(&x5, 39)], Box::new(|g, v| g.channel_max(v[0]).unwrap())),
    ]
}

/// Central differences of `loss` with respect to sampled coordinates of every
/// parameter tensor of `store` and of the input, against the analytic
/// gradients. `loss` builds the scalar from a binding and the input variable.
pub fn store_rel_err(
    store: &ParamStore,
    input: &Tensor,
    samples: usize,
    seed: u64,
    loss: impl Fn(&mut Graph, &Binding, Var) -> Var,
) -> FdReport {
    let eval = |store: &ParamStore, x: &Tensor| -> (Graph, Binding, Var, Var) {
        let mut g = Graph::new();
        let b = store.bind(&mut g, true);
        let xv = g.param(x.clone());
        let l = loss(&mut g, &b, xv);
        (g, b, xv, l)
    };
    let (mut g, binding, xv, l) = eval(store, input);
    g.backward(l).unwrap();
    let kinks = g.kink_pattern();
    let grads = binding.grads(&g);
    let input_grad = g.grad(xv).unwrap().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport::default();
    let check = |report: &mut FdReport, analytic: f64, plus: (ParamStore, Tensor), minus: (ParamStore, Tensor)| {
        let (gp, _, _, lp) = eval(&plus.0, &plus.1);
        let (gm, _, _, lm) = eval(&minus.0, &minus.1);
        if gp.kink_pattern() != kinks || gm.kink_pattern() != kinks {
            report.skipped += 1;
            return;
        }
        let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * FD_EPS);
        report.record(analytic, numeric);
    };
    for (k, id) in store.ids().enumerate() {
        let n = store.get(id).numel();
        for _ in 0..samples.min(n) {
            let i = rng.random_range(0..n);
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += FD_EPS;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= FD_EPS;
            check(&mut report, grads[k][i], (plus, input.clone()), (minus, input.clone()));
        }
    }
    for _ in 0..samples {
        let i = rng.random_range(0..input.numel());
        let mut plus = input.clone();
        plus.data_mut()[i] += FD_EPS;
        let mut minus = input.clone();
        minus.data_mut()[i] -= FD_EPS;
        check(&mut report, input_grad[i], (store.clone(), plus), (store.clone(), minus));
    }
    report
}

/// Parameters perturbed away from their initial values so norm shifts and
/// biases are nonzero.
pub fn jitter_params(store: &mut ParamStore, seed: u64, amount: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-amount..amount);
        }
    }
}

fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Var {
    let r = g.constant(random_tensor(g.shape(out), seed, -1.0, 1.0));
    let p = g.mul(out, r).unwrap();
    g.sum(p)
}

/// Worst relative error of each network block on a small input.
pub fn block_rel_errs() -> Vec<(&'static str, FdReport)> {
    let x = random_tensor(&[1, 2, 2, 4, 4], 50, -1.0, 1.0);
    let mut out = Vec::new();

    let mut s = ParamStore::new();
    let b = ConvNormAct::new(&mut s, "cna", 2, 3, [1, 2, 2]);
    jitter_params(&mut s, 1, 0.3);
    let e = store_rel_err(&s, &x, 6, 1, |g, p, x| {
        let o = b.forward(g, p, x).unwrap();
        weighted_sum(g, o, 2)
    });
    out.push(("conv_norm_act", e));

    let mut s = ParamStore::new();
    let spec = StageSpec {
        channels_in: 2,
        channels_out: 4,
        pool: [1, 2, 2],
    };
    let b = ResidualStage::new(&mut s, "res", spec);
    jitter_params(&mut s, 3, 0.3);
    let e = store_rel_err(&s, &x, 6, 3, |g, p, x| {
        let o = b.forward(g, p, x).unwrap();
        weighted_sum(g, o, 4)
    });
    out.push(("residual_stage", e));

    let mut s = ParamStore::new();
    let b = DownPool::new(&mut s, "pool", 2, 4, [1, 2, 2]);
    jitter_params(&mut s, 5, 0.3);
    let e = store_rel_err(&s, &x, 6, 5, |g, p, x| {
        let o = b.forward(g, p, x).unwrap();
        weighted_sum(g, o, 6)
    });
    out.push(("down_pool", e));

    let mut s = ParamStore::new();
    let b = UpSample::new(&mut s, "up", 4, 2, [1, 2, 2]);
    jitter_params(&mut s, 7, 0.3);
    let coarse = random_tensor(&[1, 4, 2, 2, 2], 51, -1.0, 1.0);
    let skip = random_tensor(&[1, 2, 2, 4, 4], 52, -1.0, 1.0);
    let e = store_rel_err(&s, &coarse, 6, 7, |g, p, x| {
        let sk = g.param(skip.clone());
        let o = b.forward(g, p, x, sk).unwrap();
        weighted_sum(g, o, 8)
    });
    out.push(("upsample", e));

    let mut s = ParamStore::new();
    let b = SupervisionHead::new(&mut s, "head", 2);
    jitter_params(&mut s, 9, 0.3);
    let e = store_rel_err(&s, &x, 6, 9, |g, p, x| {
        let o = b.forward(g, p, x).unwrap();
        weighted_sum(g, o, 10)
    });
    out.push(("supervision_head", e));

    let mut s = ParamStore::new();
    let b = CrossAttention::new(&mut s, "fuse", CrossAttentionSpec::new(4));
    jitter_params(&mut s, 11, 0.3);
    let mid = random_tensor(&[1, 4, 2, 4, 4], 53, -1.0, 1.0);
    let pre = random_tensor(&[1, 4, 2, 4, 4], 54, -1.0, 1.0);
    let e = store_rel_err(&s, &mid, 6, 11, |g, p, x| {
        let pv = g.param(pre.clone());
        let o = b.forward(g, p, x, pv).unwrap();
        weighted_sum(g, o, 12)
    });
    out.push(("cross_attention", e));
    out
}

/// Toy network on a tiny input, parameters jittered off their initial values.
pub fn toy_model(arch: Arch, in_channels: usize, seed: u64) -> Model {
    let mut m = build_initialized(&ModelConfig::toy(arch, in_channels), seed).unwrap();
    jitter_params(m.params_mut(), seed + 1, 0.05);
    m
}

/// Worst relative error of the deep-supervised training loss of a full toy
/// network with respect to sampled parameters and inputs.
pub fn model_rel_err(arch: Arch, in_channels: usize, samples: usize) -> FdReport {
    let model = toy_model(arch, in_channels, 3);
    let dims = [4, 8, 8];
    let x = random_tensor(&[1, in_channels, dims[0], dims[1], dims[2]], 60, -1.0, 1.0);
    let y = one_hot(&random_labels(dims.iter().product(), 3, 61), 1, 3, dims).unwrap();
    store_rel_err(model.params(), &x, samples, 4, |g, p, x| {
        let logits = model.forward(g, p, x).unwrap();
        let pyr = LabelPyramid::for_logits(g, &y, &logits).unwrap();
        deep_supervised_loss(g, &logits, &pyr).unwrap()
    })
}

/// Row-wise softmax of `[N, C, ...]` logits.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let s = logits.shape();
    let (n, c) = (s[0], s[1]);
    let vox = logits.numel() / (n * c);
    (0..n)
        .map(|b| {
            (0..vox)
                .map(|v| {
                    let row: Vec<f64> = (0..c).map(|k| logits.data()[(b * c + k) * vox + v]).collect();
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|r| (r - m).exp()).sum();
                    row.iter().map(|r| (r - m).exp() / z).collect()
                })
                .collect()
        })
        .collect()
}

fn target_at(t: &Tensor, b: usize, k: usize, v: usize) -> f64 {
    let s = t.shape();
    let vox = t.numel() / (s[0] * s[1]);
    t.data()[(b * s[1] + k) * vox + v]
}

/// Mean soft cross-entropy, computed directly.
pub fn ce_oracle(logits: &Tensor, target: &Tensor) -> f64 {
    let p = softmax_rows(logits);
    let mut total = 0.0;
    let mut rows = 0.0;
    for (b, voxels) in p.iter().enumerate() {
        for (v, row) in voxels.iter().enumerate() {
            for (k, pk) in row.iter().enumerate() {
                total -= target_at(target, b, k, v) * pk.ln();
            }
            rows += 1.0;
        }
    }
    total / rows
}

/// Batch-pooled foreground soft Dice loss, computed directly.
pub fn dice_oracle(logits: &Tensor, target: &Tensor, smooth: f64) -> f64 {
    let p = softmax_rows(logits);
    let c = logits.shape()[1];
    let mut mean = 0.0;
    for k in 1..c {
        let (mut i, mut ps, mut ts) = (0.0, 0.0, 0.0);
        for (b, voxels) in p.iter().enumerate() {
            for (v, row) in voxels.iter().enumerate() {
                let t = target_at(target, b, k, v);
                i += row[k] * t;
                ps += row[k];
                ts += t;
            }
        }
        mean += (2.0 * i + smooth) / (ps + ts + smooth) / (c - 1) as f64;
    }
    1.0 - mean
}

/// Brute-force per-class pooled Dice by voxel counting.
pub fn aggregated_dsc_oracle(pairs: &[(Vec<u8>, Vec<u8>)]) -> [f64; 2] {
    [1u8, 2].map(|c| {
        let mut inter = 0usize;
        let mut size = 0usize;
        for (p, r) in pairs {
            for i in 0..p.len() {
                if p[i] == c && r[i] == c {
                    inter += 1;
                }
                if p[i] == c {
                    size += 1;
                }
                if r[i] == c {
                    size += 1;
                }
            }
        }
        if size == 0 {
            1.0
        } else {
            2.0 * inter as f64 / size as f64
        }
    })
}

/// Preprocessed task-2 phantoms.
pub fn task2_prepared(seed: u64, n: usize, dims: [usize; 3]) -> Vec<PreparedCase> {
    let cfg = PhantomConfig::new(dims, Task::Task2);
    (0..n as u64)
        .map(|i| {
            let p = generate_case(&cfg, seed, i).unwrap();
            let (mid, mid_labels) = p.mid.unwrap();
            let raw = RawCase {
                images: vec![mid, p.pre_image],
                masks: vec![p.pre_labels],
                labels: Some(mid_labels),
            };
            preprocess_case(&raw, &PreprocessConfig::default(), None).unwrap()
        })
        .collect()
}

pub fn train_cases(prepared: &[PreparedCase], in_channels: usize) -> Vec<TrainCase> {
    prepared
        .iter()
        .enumerate()
        .map(|(i, p)| training_case(&format!("case{i:03}"), p, in_channels).unwrap())
        .collect()
}

pub fn label_map(dims: [usize; 3], data: Vec<u8>) -> LabelMap {
    LabelMap::new(dims, [1.0; 3], data).unwrap()
}

pub fn workspace_root() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}
