#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtcd_core::phantom::{degrade_volume, generate_phantom, DegradationSpec, PhantomSpec};
use vtcd_core::Volume3D;
use vtcd_model::losses::{self, scalar};
use vtcd_model::srm::Encoder;
use vtcd_model::Result;

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;
pub const FD_COORDS: usize = 100;

/// Largest relative error between the autodiff gradient of `f` and central
/// differences, over `FD_COORDS` distinct coordinates drawn across all inputs.
pub fn grad_check<F>(shapes: &[&[usize]], seed: u64, f: F) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| (0..s.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let build = |vals: &[Vec<f64>]| -> Result<Vec<Tensor>> {
        vals.iter()
            .zip(shapes)
            .map(|(v, s)| Ok(Tensor::from_vec(v.clone(), *s, &Device::Cpu)?))
            .collect()
    };
    let vars: Vec<Var> = build(&values)?
        .iter()
        .map(Var::from_tensor)
        .collect::<std::result::Result<_, _>>()?;
    let inputs: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let loss = f(&inputs)?;
    assert_eq!(loss.dtype(), DType::F64);
    let grads = loss.backward()?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| match grads.get(v.as_tensor()) {
            Some(g) => Ok(g.flatten_all()?.to_vec1::<f64>()?),
            None => Ok(vec![0.0; v.elem_count()]),
        })
        .collect::<Result<_>>()?;

    let offsets: Vec<usize> = values
        .iter()
        .scan(0, |acc, v| {
            let start = *acc;
            *acc += v.len();
            Some(start)
        })
        .collect();
    let total: usize = values.iter().map(Vec::len).sum();
    assert!(total >= FD_COORDS, "only {total} coordinates");
    let mut worst = 0.0f64;
    for flat in sample(&mut rng, total, FD_COORDS) {
        let k = offsets.iter().rposition(|o| *o <= flat).unwrap();
        let i = flat - offsets[k];
        let eval = |delta: f64| -> Result<f64> {
            let mut vals = values.clone();
            vals[k][i] += delta;
            scalar(&f(&build(&vals)?)?)
        };
        let fd = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
        let a = analytic[k][i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Maximum relative error of every loss in the losses module on random
/// `(8, 1, 4, 4)` inputs.
pub fn loss_gradient_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let img: &[usize] = &[8, 1, 4, 4];
    let encoder = Encoder::seeded(4, 7)?;
    Ok(vec![
        ("adversarial_d", grad_check(&[img, img], seed, |x| losses::adversarial_d(&x[0], &x[1]))?),
        ("adversarial_g", grad_check(&[img], seed + 1, |x| losses::adversarial_g(&x[0]))?),
        ("cycle_consistency", grad_check(&[img, img], seed + 2, |x| losses::cycle_consistency(&x[0], &x[1]))?),
        ("identity_loss", grad_check(&[img, img], seed + 3, |x| losses::identity_loss(&x[0], &x[1]))?),
        ("tv_loss", grad_check(&[img], seed + 4, |x| losses::tv_loss(&x[0]))?),
        (
            "content_loss",
            grad_check(&[img, img], seed + 5, |x| {
                losses::content_loss(&x[0], &x[1], |t| encoder.encode(t))
            })?,
        ),
        ("diffusion_loss", grad_check(&[img, img], seed + 6, |x| losses::diffusion_loss(&x[0], &x[1]))?),
    ])
}

/// Small degraded phantoms: `n` volumes of `(size, size, depth)` from
/// `(size, size, 4 * depth)` clean ones.
pub fn small_volumes(n: usize, size: usize, depth: usize, seed: u64) -> Vec<(Volume3D, Volume3D)> {
    (0..n as u64)
        .map(|i| {
            let clean = generate_phantom(&PhantomSpec {
                dims: [size, size, 4 * depth],
                num_cells: 2,
                radius_range: [3.0, 5.0],
                seed: seed + i,
                ..PhantomSpec::default()
            })
            .unwrap();
            let deg = DegradationSpec {
                seed: seed + 1000 + i,
                ..DegradationSpec::default()
            };
            let lr = degrade_volume(&clean, &deg).unwrap();
            (lr, clean)
        })
        .collect()
}

pub fn random_volume(dims: (usize, usize, usize), seed: u64) -> Volume3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume3D::from_data(ndarray::Array3::from_shape_simple_fn(dims, || rng.random::<f32>())).unwrap()
}
