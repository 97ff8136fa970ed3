use approx::assert_abs_diff_eq;
use candle_core::{Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vtcd_model::denoiser::{edit_feature_map, edit_latent, fit_hyperplane, semantic_distance, EditConfig, Hyperplane};
use vtcd_model::Error;

fn clusters(dim: usize, shift: f64, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut draw = |sign: f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..dim)
                    .map(|j| noise.sample(&mut rng) + if j == 0 { sign * shift } else { 0.0 })
                    .collect()
            })
            .collect()
    };
    let low = draw(1.0);
    let high = draw(-1.0);
    (low, high)
}

fn plane(n: Vec<f64>) -> Hyperplane {
    Hyperplane {
        n,
        fit_accuracy: 1.0,
        flipped: false,
    }
}

#[test]
fn separated_clusters_recover_first_axis() {
    let (low, high) = clusters(4, 2.0, 40, 1);
    let h = fit_hyperplane(&low, &high).unwrap();
    assert_abs_diff_eq!(h.n.iter().map(|v| v * v).sum::<f64>(), 1.0, epsilon = 1e-12);
    assert!(h.n[0] > 0.95, "{:?}", h.n);
    assert_eq!(h.fit_accuracy, 1.0);
    for v in &low {
        assert!(semantic_distance(v, &h).unwrap() > 0.0);
    }
    for v in &high {
        assert!(semantic_distance(v, &h).unwrap() < 0.0);
    }
}

#[test]
fn swapping_classes_negates_normal() {
    let (low, high) = clusters(3, 1.5, 30, 2);
    let a = fit_hyperplane(&low, &high).unwrap();
    let b = fit_hyperplane(&high, &low).unwrap();
    for (x, y) in a.n.iter().zip(&b.n) {
        assert_abs_diff_eq!(*x, -*y, epsilon = 1e-9);
    }
}

#[test]
fn identical_latents_are_degenerate() {
    let v = vec![vec![0.5, -1.0]; 4];
    assert!(matches!(fit_hyperplane(&v, &v), Err(Error::Degenerate(_))));
}

#[test]
fn too_few_or_ragged_samples_rejected() {
    assert!(fit_hyperplane(&[vec![1.0]], &[vec![0.0], vec![2.0]]).is_err());
    assert!(fit_hyperplane(&[vec![1.0], vec![1.0, 2.0]], &[vec![0.0], vec![2.0]]).is_err());
}

#[test]
fn distance_examples() {
    let h = plane(vec![0.6, 0.8]);
    assert_abs_diff_eq!(semantic_distance(&[1.0, 1.0], &h).unwrap(), 1.4, epsilon = 1e-12);
    assert!(matches!(semantic_distance(&[1.0], &h), Err(Error::Dimension(_))));
}

#[test]
fn edit_example() {
    let h = plane(vec![1.0, 0.0]);
    let out = edit_latent(&[2.0, 3.0], &h, &EditConfig::full_range(0.5, 10)).unwrap();
    assert_eq!(out, vec![3.0, 3.0]);
}

#[test]
fn zero_strength_is_identity() {
    let h = plane(vec![0.6, 0.8]);
    let x = [0.123, -4.5];
    assert_eq!(edit_latent(&x, &h, &EditConfig::full_range(0.0, 4)).unwrap(), x.to_vec());
}

#[test]
fn edit_range_gates_steps() {
    let cfg = EditConfig::new(0.3, (3, 5)).unwrap();
    assert!(!cfg.active_at(2));
    assert!(cfg.active_at(3) && cfg.active_at(5));
    assert!(!cfg.active_at(6));
    assert!(!EditConfig::full_range(0.0, 8).active_at(4));
    assert!(EditConfig::new(0.3, (5, 3)).is_err());
    assert!(EditConfig::new(f64::NAN, (1, 3)).is_err());
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

proptest! {
    #[test]
    fn edit_scales_distance(
        raw in prop::collection::vec(-1.0f64..1.0, 5),
        x in prop::collection::vec(-3.0f64..3.0, 5),
        lambda in -0.9f64..2.0,
    ) {
        prop_assume!(raw.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let h = plane(unit(raw));
        let cfg = EditConfig::full_range(lambda, 4);
        let d = semantic_distance(&x, &h).unwrap();
        let edited = edit_latent(&x, &h, &cfg).unwrap();
        let d2 = semantic_distance(&edited, &h).unwrap();
        prop_assert!((d2 - (1.0 + lambda) * d).abs() < 1e-9);
        // Orthogonal complement untouched.
        let perp = |v: &[f64], dv: f64| -> Vec<f64> { v.iter().zip(&h.n).map(|(a, n)| a - dv * n).collect() };
        for (a, b) in perp(&x, d).iter().zip(perp(&edited, d2)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        // Two edits compose to one of strength (1 + lambda)^2 - 1.
        let twice = edit_latent(&edited, &h, &cfg).unwrap();
        let once = edit_latent(&x, &h, &EditConfig::full_range((1.0 + lambda).powi(2) - 1.0, 4)).unwrap();
        for (a, b) in twice.iter().zip(&once) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn feature_map_edit_matches_per_pixel_edit() {
    let n = unit(vec![0.3, -0.5, 0.8]);
    let h = plane(n.clone());
    let vals: Vec<f32> = (0..3 * 2 * 2).map(|i| (i as f32 * 0.37).sin()).collect();
    let e = Tensor::from_vec(vals.clone(), (1, 3, 2, 2), &Device::Cpu).unwrap();
    let nt = Tensor::from_vec(n.iter().map(|v| *v as f32).collect::<Vec<_>>(), 3, &Device::Cpu).unwrap();
    let out = edit_feature_map(&e, &nt, 0.7).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    for p in 0..4 {
        let x: Vec<f64> = (0..3).map(|k| vals[k * 4 + p] as f64).collect();
        let want = edit_latent(&x, &h, &EditConfig::full_range(0.7, 1)).unwrap();
        for k in 0..3 {
            assert!((out[k * 4 + p] as f64 - want[k]).abs() < 1e-5);
        }
    }
}
