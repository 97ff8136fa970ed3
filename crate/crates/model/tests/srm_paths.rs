mod common;

use candle_core::{Device, Tensor};
use common::random_volume;
use ndarray::Array3;
use proptest::prelude::*;
use vtcd_core::resample::{upsample_slice_z, ZAlignment};
use vtcd_core::{PlaneId, Volume3D};
use vtcd_model::srm::{
    accumulate_neighbors, build_feature_grid, overlay_slice, super_resolve_volume, Encoder, SrmConfig, SrmModel, NEIGHBOURS,
};

fn identity_model(align: ZAlignment) -> SrmModel {
    let config = SrmConfig {
        scale: 1,
        align,
        ..SrmConfig::default()
    };
    SrmModel::with_encoder(config, Encoder::Identity).unwrap()
}

#[test]
fn fresh_model_is_identity_at_unit_scale() {
    let model = SrmModel::new(SrmConfig {
        scale: 1,
        ..SrmConfig::default()
    })
    .unwrap();
    for seed in 0..3 {
        let vol = random_volume((8, 6, 5), seed);
        let out = super_resolve_volume(&vol, &model, 1).unwrap();
        assert_eq!(out.data(), vol.data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn one_hot_zero_head_identity(h in 2usize..7, w in 2usize..7, c in 1usize..6, seed in 0u64..1000) {
        let model = SrmModel::new(SrmConfig { scale: 1, ..SrmConfig::default() }).unwrap();
        let vol = random_volume((h, w, c), seed);
        let out = super_resolve_volume(&vol, &model, 1).unwrap();
        prop_assert_eq!(out.data(), vol.data());
    }
}

#[test]
fn unit_scale_grid_is_encoded_stack() {
    let model = SrmModel::new(SrmConfig::default()).unwrap();
    let vol = random_volume((6, 5, 4), 9);
    let grid = build_feature_grid(&vol, &model, 1).unwrap().to_array().unwrap();
    for z in 0..4 {
        let s = vol.xy_slice(z);
        let t = Tensor::from_vec(s.iter().copied().collect::<Vec<_>>(), (1, 1, 6, 5), &Device::Cpu).unwrap();
        let f = model.encoder.encode(&t).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let d = model.encoder.features();
        for k in 0..d {
            for x in 0..6 {
                for y in 0..5 {
                    assert_eq!(grid[[k, x, y, z]], f[(k * 6 + x) * 5 + y]);
                }
            }
        }
    }
}

#[test]
fn corner_grid_keeps_source_slices() {
    let model = SrmModel::new(SrmConfig {
        align: ZAlignment::Corner,
        ..SrmConfig::default()
    })
    .unwrap();
    let vol = random_volume((5, 5, 3), 10);
    let one = build_feature_grid(&vol, &model, 1).unwrap().to_array().unwrap();
    for s in [2, 4] {
        let up = build_feature_grid(&vol, &model, s).unwrap().to_array().unwrap();
        assert_eq!(up.dim().3, 3 * s);
        for z in 0..3 {
            for k in 0..model.encoder.features() {
                for x in 0..5 {
                    for y in 0..5 {
                        assert_eq!(up[[k, x, y, s * z]], one[[k, x, y, z]]);
                    }
                }
            }
        }
    }
}

#[test]
fn corner_midpoint_is_half() {
    let model = identity_model(ZAlignment::Corner);
    let mut d = Array3::<f32>::zeros((2, 2, 2));
    d.index_axis_mut(ndarray::Axis(2), 1).fill(1.0);
    let vol = Volume3D::from_data(d).unwrap();
    let grid = build_feature_grid(&vol, &model, 2).unwrap().to_array().unwrap();
    assert_eq!(grid[[0, 0, 0, 1]], 0.5);
    assert_eq!(grid[[0, 1, 1, 0]], 0.0);
}

#[test]
fn uniform_theta_averages_neighbourhood() {
    let model = identity_model(ZAlignment::Center);
    model.set_constant_theta(&[1.0 / 27.0; NEIGHBOURS]).unwrap();
    let d = Array3::from_shape_fn((3, 3, 3), |(i, j, k)| (9 * i + 3 * j + k) as f32);
    let vol = Volume3D::new(d, [1.0; 3], (0.0, 26.0)).unwrap();
    let grid = build_feature_grid(&vol, &model, 1).unwrap();
    let out = accumulate_neighbors(&grid, &model).unwrap().to_array().unwrap();
    assert!((out[[0, 1, 1, 1]] - 13.0).abs() < 1e-5, "{}", out[[0, 1, 1, 1]]);
}

#[test]
fn uniform_theta_keeps_constant_grid() {
    let model = identity_model(ZAlignment::Center);
    model.set_constant_theta(&[1.0 / 27.0; NEIGHBOURS]).unwrap();
    let vol = Volume3D::from_data(Array3::from_elem((4, 4, 4), 0.3)).unwrap();
    let out = accumulate_neighbors(&build_feature_grid(&vol, &model, 1).unwrap(), &model)
        .unwrap()
        .to_array()
        .unwrap();
    assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-6));
}

#[test]
fn one_hot_accumulator_is_exact() {
    let model = SrmModel::new(SrmConfig::default()).unwrap();
    let vol = random_volume((5, 4, 3), 12);
    let grid = build_feature_grid(&vol, &model, 2).unwrap();
    let acc = accumulate_neighbors(&grid, &model).unwrap();
    assert_eq!(acc.to_array().unwrap(), grid.to_array().unwrap());
}

#[test]
fn overlay_with_zero_head_is_linear_upsampling() {
    let model = SrmModel::new(SrmConfig::default()).unwrap();
    let vol = random_volume((6, 5, 3), 13);
    let grid = accumulate_neighbors(&build_feature_grid(&vol, &model, 4).unwrap(), &model).unwrap();
    let slice = vol.data().index_axis(ndarray::Axis(1), 2);
    let out = overlay_slice(slice, PlaneId::Xz, 2, &grid, &model).unwrap();
    assert_eq!(out, upsample_slice_z(slice, 4, ZAlignment::Center));
}

#[test]
fn overlay_with_constant_head_adds_constant() {
    let model = SrmModel::new(SrmConfig::default()).unwrap();
    let bias = model.head.bias.as_ref().unwrap();
    bias.set(&Tensor::new(&[0.1f32], &Device::Cpu).unwrap()).unwrap();
    let vol = random_volume((6, 5, 3), 14);
    let grid = accumulate_neighbors(&build_feature_grid(&vol, &model, 2).unwrap(), &model).unwrap();
    let slice = vol.data().index_axis(ndarray::Axis(0), 1);
    let out = overlay_slice(slice, PlaneId::Yz, 1, &grid, &model).unwrap();
    let base = upsample_slice_z(slice, 2, ZAlignment::Center);
    assert_eq!(out.dim(), (5, 6));
    for (o, b) in out.iter().zip(&base) {
        assert!((o - b - 0.1).abs() < 1e-6);
    }
}

#[test]
fn overlay_rejects_bad_plane_and_index() {
    let model = SrmModel::new(SrmConfig::default()).unwrap();
    let vol = random_volume((6, 5, 3), 15);
    let grid = build_feature_grid(&vol, &model, 2).unwrap();
    let xz = vol.data().index_axis(ndarray::Axis(1), 0);
    assert!(overlay_slice(xz, PlaneId::Xz, 5, &grid, &model).is_err());
    assert!(overlay_slice(xz, PlaneId::Xy, 0, &grid, &model).is_err());
    let yz = vol.data().index_axis(ndarray::Axis(0), 0);
    assert!(overlay_slice(yz, PlaneId::Xz, 0, &grid, &model).is_err());
}

#[test]
fn output_shape_law() {
    let model = SrmModel::new(SrmConfig::default()).unwrap();
    let vol = random_volume((7, 6, 5), 16);
    for s in [1, 2, 4] {
        let out = super_resolve_volume(&vol, &model, s).unwrap();
        assert_eq!(out.dims(), (7, 6, 5 * s));
        assert_eq!(out.voxel_size()[2], vol.voxel_size()[2] / s as f64);
    }
    assert!(super_resolve_volume(&vol, &model, 0).is_err());
}

#[test]
fn theta_length_checked() {
    let model = identity_model(ZAlignment::Center);
    assert!(model.set_constant_theta(&[0.0; 26]).is_err());
}
