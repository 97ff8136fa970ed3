mod common;

use candle_core::{Device, Tensor};
use common::{grad_check, loss_gradient_suite, FD_REL_TOL};
use vtcd_model::losses::{self, scalar};

#[test]
fn every_loss_matches_central_differences() {
    for (name, worst) in loss_gradient_suite(40).unwrap() {
        assert!(worst < FD_REL_TOL, "{name}: relative error {worst}");
    }
}

#[test]
fn tv_gradient_on_rank_two_input() {
    let worst = grad_check(&[&[12, 12]], 3, |x| losses::tv_loss(&x[0])).unwrap();
    assert!(worst < FD_REL_TOL, "{worst}");
}

#[test]
fn tv_of_step_image() {
    let t = Tensor::from_vec(vec![0.0f64, 1.0, 0.0, 1.0], (2, 2), &Device::Cpu).unwrap();
    assert_eq!(scalar(&losses::tv_loss(&t).unwrap()).unwrap(), 0.25);
}

#[test]
fn tv_gradient_is_finite_on_flat_input() {
    let v = candle_core::Var::from_tensor(&Tensor::zeros((4, 4), candle_core::DType::F64, &Device::Cpu).unwrap()).unwrap();
    let g = losses::tv_loss(v.as_tensor()).unwrap().backward().unwrap();
    let g = g.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!(g.iter().all(|x| *x == 0.0));
}

#[test]
fn least_squares_adversarial_values() {
    let ones = Tensor::ones((2, 3), candle_core::DType::F64, &Device::Cpu).unwrap();
    let zeros = ones.zeros_like().unwrap();
    assert_eq!(scalar(&losses::adversarial_d(&ones, &zeros).unwrap()).unwrap(), 0.0);
    assert_eq!(scalar(&losses::adversarial_d(&zeros, &ones).unwrap()).unwrap(), 2.0);
    assert_eq!(scalar(&losses::adversarial_g(&ones).unwrap()).unwrap(), 0.0);
    assert_eq!(scalar(&losses::adversarial_g(&zeros).unwrap()).unwrap(), 1.0);
}

#[test]
fn shape_mismatch_is_rejected() {
    let a = Tensor::zeros((2, 2), candle_core::DType::F64, &Device::Cpu).unwrap();
    let b = Tensor::zeros((2, 3), candle_core::DType::F64, &Device::Cpu).unwrap();
    assert!(losses::cycle_consistency(&a, &b).is_err());
    assert!(losses::identity_loss(&a, &b).is_err());
    assert!(losses::diffusion_loss(&a, &b).is_err());
    assert!(losses::tv_loss(&Tensor::zeros(5, candle_core::DType::F64, &Device::Cpu).unwrap()).is_err());
}
