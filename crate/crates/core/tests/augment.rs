mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use common::{label_map, random_tensor};
use dfseg::augment::{
    bezier_intensity, flip_buffer, flip_labels, flip_tensor, mixup, mixup_with_lambda, random_flip, sample_lambda,
    sample_origin, sample_patch, BezierCurve, MIXUP_ALPHA,
};
use dfseg::volume::Volume;
use dfseg::Tensor;

#[test]
fn lambda_one_returns_first_sample() {
    let (xi, xj) = (random_tensor(&[1, 2, 2, 2], 1, -1.0, 1.0), random_tensor(&[1, 2, 2, 2], 2, -1.0, 1.0));
    let (yi, yj) = (random_tensor(&[3, 2, 2, 2], 3, 0.0, 1.0), random_tensor(&[3, 2, 2, 2], 4, 0.0, 1.0));
    let m = mixup_with_lambda(&xi, &yi, &xj, &yj, 1.0).unwrap();
    assert_eq!(m.x, xi);
    assert_eq!(m.y, yi);
}

#[test]
fn half_mix_of_ones_and_zeros() {
    let ones = Tensor::full(&[1, 2, 2, 2], 1.0);
    let zeros = Tensor::zeros(&[1, 2, 2, 2]);
    let m = mixup_with_lambda(&ones, &ones, &zeros, &zeros, 0.5).unwrap();
    assert!(m.x.data().iter().all(|&v| v == 0.5));
    assert!(mixup_with_lambda(&ones, &ones, &zeros, &zeros, 1.5).is_err());
}

#[test]
fn mixed_sample_is_the_convex_combination() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (xi, xj) = (random_tensor(&[2, 2, 3, 3], 6, -1.0, 1.0), random_tensor(&[2, 2, 3, 3], 7, -1.0, 1.0));
    let m = mixup(&xi, &xi, &xj, &xj, MIXUP_ALPHA, &mut rng).unwrap();
    for i in 0..xi.numel() {
        let want = m.lambda * xi.data()[i] + (1.0 - m.lambda) * xj.data()[i];
        assert!((m.x.data()[i] - want).abs() < 1e-15);
    }
    assert!(mixup(&xi, &xi, &xj, &xj, 0.0, &mut rng).is_err());
}

#[test]
fn lambda_draws_match_symmetric_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 10_000;
    let draws: Vec<f64> = (0..n).map(|_| sample_lambda(MIXUP_ALPHA, &mut rng).unwrap()).collect();
    assert!(draws.iter().all(|v| (0.0..=1.0).contains(v)));
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = 1.0 / (4.0 * (2.0 * MIXUP_ALPHA + 1.0));
    let se = (var / n as f64).sqrt();
    assert!((mean - 0.5).abs() < 3.0 * se, "mean {mean}");
}

#[test]
fn collinear_control_points_give_identity() {
    let c = BezierCurve::identity();
    let worst = (0..=1000).map(|i| i as f64 / 1000.0).map(|x| (c.eval(x) - x).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn symmetric_inverted_curve_fixes_ends_and_midpoint() {
    let c = BezierCurve::new((0.0, 1.0), (1.0, 0.0)).unwrap();
    assert!(c.eval(0.0).abs() < 1e-12);
    assert!((c.eval(1.0) - 1.0).abs() < 1e-12);
    assert!((c.eval(0.5) - 0.5).abs() < 1e-9);
}

#[test]
fn random_curves_are_non_decreasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let c = BezierCurve::random(&mut rng);
        let ys: Vec<f64> = (0..1000).map(|i| c.eval(i as f64 / 999.0)).collect();
        assert!(ys.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        assert!(ys[0].abs() < 1e-9 && (ys[999] - 1.0).abs() < 1e-9);
    }
}

#[test]
fn intensity_remap_keeps_the_range() {
    let v = Volume::new([2, 3, 4], [1.0; 3], (0..24).map(|i| 10.0 + i as f64).collect()).unwrap();
    let out = bezier_intensity(&v, &BezierCurve::new((0.1, 0.8), (0.3, 0.9)).unwrap());
    let (a, b) = (v.stats(), out.stats());
    assert!((a.min - b.min).abs() < 1e-9 && (a.max - b.max).abs() < 1e-9);
    let constant = Volume::filled([2, 2, 2], [1.0; 3], 3.0).unwrap();
    assert_eq!(bezier_intensity(&constant, &BezierCurve::identity()), constant);
}

#[test]
fn flips_permute_a_marker_patch() {
    let data: Vec<u8> = (0..8).collect();
    assert_eq!(flip_buffer(&data, [2, 2, 2], [false, false, true]), vec![1, 0, 3, 2, 5, 4, 7, 6]);
    assert_eq!(flip_buffer(&data, [2, 2, 2], [false, true, false]), vec![2, 3, 0, 1, 6, 7, 4, 5]);
    assert_eq!(flip_buffer(&data, [2, 2, 2], [true, false, false]), vec![4, 5, 6, 7, 0, 1, 2, 3]);
    assert_eq!(flip_buffer(&data, [2, 2, 2], [true; 3]), vec![7, 6, 5, 4, 3, 2, 1, 0]);
}

#[test]
fn double_flip_is_identity() {
    let t = random_tensor(&[2, 3, 4, 5], 10, -1.0, 1.0);
    for axes in [[true, false, false], [false, true, true], [true; 3]] {
        assert_eq!(flip_tensor(&flip_tensor(&t, axes), axes), t);
    }
    let l = label_map([3, 4, 5], (0..60).map(|i| (i % 3) as u8).collect());
    assert_eq!(flip_labels(&flip_labels(&l, [true; 3]), [true; 3]), l);
}

#[test]
fn random_flip_keeps_image_and_labels_aligned() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let labels = label_map([3, 4, 5], (0..60).map(|i| ((i * 7) % 3) as u8).collect());
    let image = Tensor::new(&[1, 3, 4, 5], labels.data().iter().map(|&v| v as f64).collect()).unwrap();
    let mut seen = std::collections::HashSet::new();
    for _ in 0..64 {
        let (x, y, axes) = random_flip(&image, &labels, [true; 3], &mut rng).unwrap();
        assert!(x.data().iter().zip(y.data()).all(|(&a, &b)| a == b as f64));
        seen.insert(axes);
    }
    assert_eq!(seen.len(), 8);
    let (_, _, axes) = random_flip(&image, &labels, [false; 3], &mut rng).unwrap();
    assert_eq!(axes, [false; 3]);
}

#[test]
fn foreground_sampling_always_covers_the_lone_voxel() {
    let mut data = vec![0u8; 8 * 16 * 16];
    data[(3 * 16 + 10) * 16 + 2] = 1;
    let labels = label_map([8, 16, 16], data);
    let image = Tensor::new(&[1, 8, 16, 16], labels.data().iter().map(|&v| v as f64).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let (x, y) = sample_patch(&image, &labels, [4, 8, 8], 1.0, &mut rng).unwrap();
        assert_eq!(y.data().iter().filter(|&&v| v == 1).count(), 1);
        assert_eq!(x.data().iter().sum::<f64>(), 1.0);
    }
}

#[test]
fn background_sampling_is_uniform_over_origins() {
    let labels = label_map([7, 7, 7], vec![0; 343]);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut counts = [0usize; 64];
    let n = 10_000;
    for _ in 0..n {
        let o = sample_origin(&labels, [4, 4, 4], 0.0, &mut rng);
        assert!(o.iter().all(|&v| (0..4).contains(&v)));
        counts[(o[0] * 16 + o[1] * 4 + o[2]) as usize] += 1;
    }
    let expected = n as f64 / 64.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(63.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi-square {chi2}, p {p}");
}

#[test]
fn full_size_patch_equals_the_volume() {
    let image = random_tensor(&[2, 3, 4, 5], 14, -1.0, 1.0);
    let labels = label_map([3, 4, 5], (0..60).map(|i| (i % 3) as u8).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for fg in [0.0, 1.0] {
        let (x, y) = sample_patch(&image, &labels, [3, 4, 5], fg, &mut rng).unwrap();
        assert_eq!(x, image);
        assert_eq!(y, labels);
    }
}

#[test]
fn oversized_patch_is_zero_padded() {
    let image = Tensor::full(&[1, 2, 2, 2], 1.0);
    let labels = label_map([2, 2, 2], vec![1; 8]);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (x, y) = sample_patch(&image, &labels, [4, 4, 4], 0.0, &mut rng).unwrap();
    assert_eq!(x.data().iter().sum::<f64>(), 8.0);
    assert_eq!(y.data().iter().filter(|&&v| v == 1).count(), 8);
}
