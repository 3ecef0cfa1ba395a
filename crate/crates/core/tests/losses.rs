mod common;

use common::{ce_oracle, dice_oracle, random_labels, random_tensor};
use dfseg::losses::{
    cross_entropy, deep_supervised_loss, level_loss, level_weights, mixup_loss, one_hot, soft_dice, LabelPyramid,
    DICE_SMOOTH,
};
use dfseg::{Graph, Tensor};

fn scalar(f: impl FnOnce(&mut Graph) -> dfseg::Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).item()
}

/// `[1, C, 1, 1, V]` logits from per-voxel rows.
fn rows(voxels: &[&[f64]]) -> Tensor {
    let c = voxels[0].len();
    let v = voxels.len();
    Tensor::from_fn(&[1, c, 1, 1, v], |i| voxels[i % v][i / v])
}

#[test]
fn uniform_logits_give_ln3() {
    let logits = Tensor::zeros(&[2, 3, 2, 2, 2]);
    let y = one_hot(&random_labels(16, 3, 1), 2, 3, [2, 2, 2]).unwrap();
    let ce = scalar(|g| {
        let l = g.constant(logits);
        cross_entropy(g, l, &y).unwrap()
    });
    assert!((ce - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn saturated_logits_give_near_zero_cross_entropy() {
    let labels = random_labels(8, 3, 2);
    let y = one_hot(&labels, 1, 3, [2, 2, 2]).unwrap();
    let logits = Tensor::from_fn(y.shape(), |i| 20.0 * y.data()[i]);
    let ce = scalar(|g| {
        let l = g.constant(logits);
        cross_entropy(g, l, &y).unwrap()
    });
    assert!(ce < 1e-8, "{ce}");
}

#[test]
fn two_voxel_cross_entropy_by_hand() {
    let logits = rows(&[&[1.0, 2.0, 3.0], &[0.5, -1.0, 0.0]]);
    let y = one_hot(&[2, 0], 1, 3, [1, 1, 2]).unwrap();
    let l0 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
    let l1 = (0.5f64.exp() + (-1f64).exp() + 1.0).ln() - 0.5;
    let ce = scalar(|g| {
        let l = g.constant(logits);
        cross_entropy(g, l, &y).unwrap()
    });
    assert!((ce - (l0 + l1) / 2.0).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_soft_targets() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[1, 3, 1, 1, 1]));
    let t = Tensor::new(&[1, 3, 1, 1, 1], vec![0.5, 0.5, 0.0]).unwrap();
    assert!(cross_entropy(&mut g, l, &t).is_err());
}

#[test]
fn perfect_prediction_has_near_zero_dice_loss() {
    let y = one_hot(&random_labels(27, 3, 3), 1, 3, [3, 3, 3]).unwrap();
    let logits = Tensor::from_fn(y.shape(), |i| 20.0 * y.data()[i]);
    let d = scalar(|g| {
        let l = g.constant(logits);
        soft_dice(g, l, &y, DICE_SMOOTH).unwrap()
    });
    assert!(d < 1e-3, "{d}");
}

#[test]
fn disjoint_prediction_has_dice_loss_near_one() {
    let y = one_hot(&[1, 1, 2, 2], 1, 3, [1, 2, 2]).unwrap();
    let pred = one_hot(&[2, 2, 1, 1], 1, 3, [1, 2, 2]).unwrap();
    let logits = Tensor::from_fn(pred.shape(), |i| 20.0 * pred.data()[i]);
    let d = scalar(|g| {
        let l = g.constant(logits.clone());
        soft_dice(g, l, &y, DICE_SMOOTH).unwrap()
    });
    assert!((d - dice_oracle(&logits, &y, DICE_SMOOTH)).abs() < 1e-12);
    assert!((d - 1.0).abs() < 1e-5, "{d}");
}

#[test]
fn half_probability_dice_by_hand() {
    let logits = Tensor::zeros(&[1, 2, 1, 2, 2]);
    let y = one_hot(&[1, 1, 0, 0], 1, 2, [1, 2, 2]).unwrap();
    let s = DICE_SMOOTH;
    let want = 1.0 - (2.0 * (0.5 * 2.0) + s) / (0.5 * 4.0 + 2.0 + s);
    let d = scalar(|g| {
        let l = g.constant(logits);
        soft_dice(g, l, &y, s).unwrap()
    });
    assert!((d - want).abs() < 1e-12);
}

#[test]
fn single_level_is_cross_entropy_plus_dice() {
    let logits = random_tensor(&[2, 3, 2, 4, 4], 4, -2.0, 2.0);
    let y = one_hot(&random_labels(64, 3, 5), 2, 3, [2, 4, 4]).unwrap();
    let pyr = LabelPyramid::new(&y, &[[2, 4, 4]]).unwrap();
    let got = scalar(|g| {
        let l = g.constant(logits.clone());
        deep_supervised_loss(g, &[l], &pyr).unwrap()
    });
    let want = ce_oracle(&logits, &y) + dice_oracle(&logits, &y, DICE_SMOOTH);
    assert!((got - want).abs() < 1e-12);
    let level = scalar(|g| {
        let l = g.constant(logits.clone());
        level_loss(g, l, &y).unwrap()
    });
    assert!((got - level).abs() < 1e-12);
}

#[test]
fn two_levels_sum_independent_losses() {
    let l0 = random_tensor(&[1, 3, 2, 4, 4], 6, -2.0, 2.0);
    let l1 = random_tensor(&[1, 3, 1, 2, 2], 7, -2.0, 2.0);
    let labels = random_labels(32, 3, 8);
    let y0 = one_hot(&labels, 1, 3, [2, 4, 4]).unwrap();
    let coarse: Vec<u8> = (0..4).map(|i| labels[(i / 2) * 8 + (i % 2) * 2]).collect();
    let y1 = one_hot(&coarse, 1, 3, [1, 2, 2]).unwrap();
    let pyr = LabelPyramid::new(&y0, &[[2, 4, 4], [1, 2, 2]]).unwrap();
    assert_eq!(pyr.levels()[1], y1);
    let got = scalar(|g| {
        let a = g.constant(l0.clone());
        let b = g.constant(l1.clone());
        deep_supervised_loss(g, &[a, b], &pyr).unwrap()
    });
    let want = ce_oracle(&l0, &y0) + dice_oracle(&l0, &y0, DICE_SMOOTH)
        + 0.5 * (ce_oracle(&l1, &y1) + dice_oracle(&l1, &y1, DICE_SMOOTH));
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn level_count_mismatch_is_rejected() {
    let y = one_hot(&[0; 8], 1, 3, [2, 2, 2]).unwrap();
    let pyr = LabelPyramid::new(&y, &[[2, 2, 2], [1, 1, 1]]).unwrap();
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[1, 3, 2, 2, 2]));
    assert!(deep_supervised_loss(&mut g, &[l], &pyr).is_err());
    assert!(LabelPyramid::new(&y, &[[3, 2, 2]]).is_err());
}

#[test]
fn weights_follow_inverse_powers_of_two() {
    assert_eq!(level_weights(5), vec![1.0, 0.5, 0.25, 0.125, 0.0625]);
}

#[test]
fn even_mix_on_uniform_logits_gives_ln3() {
    let yi = one_hot(&[0, 1], 1, 3, [1, 1, 2]).unwrap();
    let yj = one_hot(&[2, 2], 1, 3, [1, 1, 2]).unwrap();
    let mixed = Tensor::from_fn(yi.shape(), |i| 0.5 * yi.data()[i] + 0.5 * yj.data()[i]);
    let v = scalar(|g| {
        let l = g.constant(Tensor::zeros(&[1, 3, 1, 1, 2]));
        mixup_loss(g, l, &mixed).unwrap()
    });
    assert!((v - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn two_voxel_mixup_by_hand() {
    let logits = rows(&[&[2.0, 0.0, -1.0], &[0.0, 1.0, 0.5]]);
    let yi = one_hot(&[0, 1], 1, 3, [1, 1, 2]).unwrap();
    let yj = one_hot(&[2, 0], 1, 3, [1, 1, 2]).unwrap();
    let lambda = 0.3;
    let mixed = Tensor::from_fn(yi.shape(), |i| lambda * yi.data()[i] + (1.0 - lambda) * yj.data()[i]);
    let logp = |row: [f64; 3], k: usize| row[k] - row.iter().map(|v| v.exp()).sum::<f64>().ln();
    let v0 = -(lambda * logp([2.0, 0.0, -1.0], 0) + (1.0 - lambda) * logp([2.0, 0.0, -1.0], 2));
    let v1 = -(lambda * logp([0.0, 1.0, 0.5], 1) + (1.0 - lambda) * logp([0.0, 1.0, 0.5], 0));
    let got = scalar(|g| {
        let l = g.constant(logits);
        mixup_loss(g, l, &mixed).unwrap()
    });
    assert!((got - (v0 + v1) / 2.0).abs() < 1e-12);
}

#[test]
fn mixup_rejects_rows_not_summing_to_one() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[1, 3, 1, 1, 1]));
    let t = Tensor::new(&[1, 3, 1, 1, 1], vec![0.5, 0.4, 0.0]).unwrap();
    assert!(mixup_loss(&mut g, l, &t).is_err());
    let neg = Tensor::new(&[1, 3, 1, 1, 1], vec![1.2, -0.2, 0.0]).unwrap();
    assert!(mixup_loss(&mut g, l, &neg).is_err());
}
