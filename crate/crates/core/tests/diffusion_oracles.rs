use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtcd_core::diffusion::{full_reverse, gaussian_field, make_linear_schedule, q_sample, reverse_step, NoiseSchedule};
use vtcd_core::Result;

fn max_abs(a: &Array2<f32>, b: &Array2<f32>) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Predicts the noise that takes `x0` to the current state, whatever the
/// state is.
fn state_oracle(x0: Array2<f32>, sched: NoiseSchedule) -> impl Fn(ArrayView2<'_, f32>, usize) -> Result<Array2<f32>> {
    move |x_t, t| {
        let ab = sched.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(ndarray::Zip::from(&x_t)
            .and(&x0)
            .map_collect(|&x, &x0| ((x as f64 - a * x0 as f64) / b) as f32))
    }
}

#[test]
fn q_sample_moments_match_closed_form() {
    let sched = make_linear_schedule(10, 1e-3, 0.2).unwrap();
    let t = 6;
    let ab = sched.alpha_bar(t);
    let n = 100_000;
    let x0 = Array2::from_elem((100, 1000), 0.3f32);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eps = gaussian_field(&mut rng, (100, 1000));
    let xt = q_sample(x0.view(), t, eps.view(), &sched).unwrap();
    let mean = xt.iter().map(|v| *v as f64).sum::<f64>() / n as f64;
    let var = xt.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let want_mean = ab.sqrt() * 0.3;
    let want_var = 1.0 - ab;
    let se_mean = (want_var / n as f64).sqrt();
    let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
    assert!((mean - want_mean).abs() < 4.0 * se_mean, "mean {mean} vs {want_mean}");
    assert!((var - want_var).abs() < 4.0 * se_var, "var {var} vs {want_var}");
}

#[test]
fn reverse_step_is_affine_with_stated_coefficients() {
    let sched = make_linear_schedule(8, 1e-2, 0.1).unwrap();
    let t = 5;
    let (b, ab) = (sched.beta(t), sched.alpha_bar(t));
    let c_x = 1.0 / (1.0 - b).sqrt();
    let c_e = -b / ((1.0 - ab).sqrt() * (1.0 - b).sqrt());
    let c_z = sched.sigma(t);
    let one = Array2::from_elem((1, 1), 1.0f32);
    let zero = Array2::zeros((1, 1));
    let probe = |x: &Array2<f32>, e: &Array2<f32>, z: &Array2<f32>| {
        reverse_step(x.view(), e.view(), t, &sched, z.view()).unwrap()[[0, 0]] as f64
    };
    assert!((probe(&zero, &zero, &zero)).abs() < 1e-12);
    assert!((probe(&one, &zero, &zero) - c_x).abs() < 1e-6);
    assert!((probe(&zero, &one, &zero) - c_e).abs() < 1e-6);
    assert!((probe(&zero, &zero, &one) - c_z).abs() < 1e-6);
}

#[test]
fn one_step_inversion() {
    let sched = make_linear_schedule(10, 1e-3, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let prev = Array2::from_shape_simple_fn((8, 8), || rng.random::<f32>());
    let eps = gaussian_field(&mut rng, (8, 8));
    for t in [1, 4, 10] {
        let b = sched.beta(t);
        let ab = sched.alpha_bar(t);
        let x_t = prev.mapv(|v| v * (1.0 - b).sqrt() as f32) + &eps.mapv(|e| e * b.sqrt() as f32);
        // The prediction under which the reverse mean undoes the forward step.
        let eps_pred = eps.mapv(|e| (e as f64 * (1.0 - ab).sqrt() / b.sqrt()) as f32);
        let zero = Array2::zeros((8, 8));
        let back = reverse_step(x_t.view(), eps_pred.view(), t, &sched, zero.view()).unwrap();
        assert!(max_abs(&back, &prev) < 1e-6, "t={t}: {}", max_abs(&back, &prev));
    }
}

#[test]
fn oracle_round_trip_t10() {
    let sched = make_linear_schedule(10, 1e-4, 0.02).unwrap().with_sigma_scale(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0 = Array2::from_shape_simple_fn((8, 8), || rng.random::<f32>());
    let eps = gaussian_field(&mut rng, (8, 8));
    let x_t = q_sample(x0.view(), 10, eps.view(), &sched).unwrap();
    let out = full_reverse(x_t.view(), &state_oracle(x0.clone(), sched.clone()), &sched, 3).unwrap();
    assert!(max_abs(&out, &x0) < 1e-5, "{}", max_abs(&out, &x0));
}

#[test]
fn oracle_round_trip_single_step() {
    let sched = make_linear_schedule(1, 0.3, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x0 = Array2::from_shape_simple_fn((4, 4), || rng.random::<f32>());
    let eps = gaussian_field(&mut rng, (4, 4));
    let x1 = q_sample(x0.view(), 1, eps.view(), &sched).unwrap();
    let out = full_reverse(x1.view(), &state_oracle(x0.clone(), sched.clone()), &sched, 0).unwrap();
    assert!(max_abs(&out, &x0) < 1e-6);
}

#[test]
fn zero_predictor_scales_by_inverse_product() {
    let sched = make_linear_schedule(12, 1e-4, 1e-3).unwrap().with_sigma_scale(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x_t = Array2::from_shape_simple_fn((5, 5), || rng.random::<f32>());
    let zero = |x: ArrayView2<'_, f32>, _t: usize| -> Result<Array2<f32>> { Ok(Array2::zeros(x.dim())) };
    let out = full_reverse(x_t.view(), &zero, &sched, 0).unwrap();
    let prod: f64 = sched.betas().iter().map(|b| (1.0 - b).sqrt()).product();
    let want = x_t.mapv(|v| (v as f64 / prod) as f32);
    assert!(max_abs(&out, &want) < 1e-6);
}

#[test]
fn schedule_identity_and_monotonicity() {
    let sched = make_linear_schedule(16, 1e-4, 4e-3).unwrap();
    assert_eq!(sched.alpha_bar(0), 1.0);
    for t in 1..=16 {
        assert!(sched.alpha_bar(t) < sched.alpha_bar(t - 1));
        let ab = sched.alpha_bar(t);
        assert!((ab.sqrt().powi(2) + (1.0 - ab) - 1.0).abs() < 1e-15);
    }
    assert_eq!(sched.sigma(1), 0.0);
    assert!((sched.sigma(2) - sched.beta(2).sqrt()).abs() < 1e-15);
}
