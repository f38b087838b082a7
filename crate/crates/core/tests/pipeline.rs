//! End-to-end properties of the forward pipeline on synthetic scans.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scanreg::encoder::{WindowAttention, WindowLayout};
use scanreg::model::{Frame, ModelConfig, RegistrationModel};
use scanreg::params::{ParamStore, Session};
use scanreg::pointcloud::{quat_norm, synth_pair, PointCloud, Pose, SensorFov, Vec3};
use scanreg::projection::{build_default_grid, GridPreset};
use scanreg::tensor::Tensor;
use scanreg::Error;

/// Median nearest-neighbor distance; robust to points the other scan misses.
fn median_nn_distance(src: &[Vec3], tgt: &[Vec3]) -> f64 {
    let mut d: Vec<f64> = src
        .iter()
        .map(|p| {
            tgt.iter()
                .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

#[test]
fn ground_truth_warp_brings_scans_together() {
    for seed in 0..4 {
        let p = synth_pair(seed, 1500, 30.0, 10.0, 2.0, SensorFov::default());
        let sample: Vec<Vec3> = p.source.points.iter().step_by(10).cloned().collect();
        let before = median_nn_distance(&sample, &p.target.points);
        let warped: Vec<Vec3> = sample.iter().map(|x| p.gt.transform_point(*x)).collect();
        let after = median_nn_distance(&warped, &p.target.points);
        // Independent scans of the same scene from the same spot set the floor.
        let still = synth_pair(seed, 1500, 30.0, 0.0, 0.0, SensorFov::default());
        let still_sample: Vec<Vec3> = still.source.points.iter().step_by(10).cloned().collect();
        let floor = median_nn_distance(&still_sample, &still.target.points);
        // The inverse warp must make things worse: guards the direction.
        let wrong: Vec<Vec3> = sample
            .iter()
            .map(|x| p.gt.inverse().transform_point(*x))
            .collect();
        let wrong = median_nn_distance(&wrong, &p.target.points);
        assert!(
            after < before && before < wrong,
            "seed {seed}: {before} -> {after} (inverse {wrong})"
        );
        // Moving the sensor changes the sampling density, hence the slack.
        assert!(after < 2.0 * floor, "seed {seed}: {after} vs floor {floor}");
    }
}

#[test]
fn window_attention_is_symmetric_under_head_relabeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (dim, heads, d) = (16, 2, 8);
    let mut store = ParamStore::<f64>::new();
    let att = WindowAttention::new(&mut store, "a", dim, heads, 4, &mut rng);
    for t in store.values_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    // Swap the two heads: output columns of q/k/v, input rows of proj, and
    // bias table columns.
    let mut swapped = store.clone();
    let swap_col = |i: usize| if i < d { i + d } else { i - d };
    for lin in [&att.q, &att.k, &att.v] {
        let w = store.get(lin.w).data().to_vec();
        let b = store.get(lin.b.unwrap()).data().to_vec();
        let wd = swapped.get_mut(lin.w).data_mut();
        for r in 0..dim {
            for c in 0..dim {
                wd[r * dim + swap_col(c)] = w[r * dim + c];
            }
        }
        let bd = swapped.get_mut(lin.b.unwrap()).data_mut();
        for c in 0..dim {
            bd[swap_col(c)] = b[c];
        }
    }
    let w = store.get(att.proj.w).data().to_vec();
    let wd = swapped.get_mut(att.proj.w).data_mut();
    for r in 0..dim {
        wd[swap_col(r) * dim..(swap_col(r) + 1) * dim].copy_from_slice(&w[r * dim..(r + 1) * dim]);
    }
    let table = store.get(att.bias_table).data().to_vec();
    let td = swapped.get_mut(att.bias_table).data_mut();
    for row in 0..table.len() / heads {
        td[row * heads] = table[row * heads + 1];
        td[row * heads + 1] = table[row * heads];
    }
    let x: Vec<f64> = (0..64 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let valid: Vec<bool> = (0..64).map(|i| i % 5 != 0).collect();
    let layout = WindowLayout::new(4, 16, 4, 2, true).unwrap();
    let run = |store: &ParamStore<f64>| {
        let mut s = Session::new(store);
        let xv = s.g.constant(Tensor::new(vec![64, dim], x.clone()).unwrap());
        let out = att.forward(&mut s, xv, &layout, &valid).unwrap();
        s.g.data(out).to_vec()
    };
    let (a, b) = (run(&store), run(&swapped));
    let diff = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

fn toy_frames(seed: u64) -> (Frame, Frame) {
    let grid = build_default_grid(GridPreset::Desk16x64).unwrap();
    let p = synth_pair(seed, 1500, 30.0, 10.0, 2.0, SensorFov::default());
    (
        Frame::project(&p.source, &grid).unwrap(),
        Frame::project(&p.target, &grid).unwrap(),
    )
}

#[test]
fn same_seed_same_predictions() {
    let (src, tgt) = toy_frames(1);
    let cfg = ModelConfig::toy();
    let (m1, s1) = RegistrationModel::init::<f32>(&cfg, 11).unwrap();
    let (m2, s2) = RegistrationModel::init::<f32>(&cfg, 11).unwrap();
    let (m3, s3) = RegistrationModel::init::<f32>(&cfg, 12).unwrap();
    let a = m1.predict(&s1, &src, &tgt).unwrap();
    assert_eq!(a, m2.predict(&s2, &src, &tgt).unwrap());
    assert_ne!(a, m3.predict(&s3, &src, &tgt).unwrap());
}

#[test]
fn every_ablation_runs_and_changes_the_output() {
    let (src, tgt) = toy_frames(2);
    let base = ModelConfig::toy();
    let (model, store) = RegistrationModel::init::<f64>(&base, 5).unwrap();
    let full = model.predict(&store, &src, &tgt).unwrap();
    let variants = [
        ModelConfig {
            use_mask: false,
            ..base.clone()
        },
        ModelConfig {
            cross_attention: false,
            ..base.clone()
        },
        ModelConfig {
            all_to_all: false,
            k: 4,
            ..base.clone()
        },
    ];
    for cfg in variants {
        let m = RegistrationModel {
            config: cfg.clone(),
            ..model.clone()
        };
        let out = m.predict(&store, &src, &tgt).unwrap();
        assert!(out.iter().all(|p| (quat_norm(p.q()) - 1.0).abs() < 1e-9));
        assert_ne!(out[3], full[3], "{cfg:?}");
    }
}

#[test]
fn sparse_frames_either_run_or_report_degenerate_input() {
    let grid = build_default_grid(GridPreset::Desk16x64).unwrap();
    let (model, store) = RegistrationModel::init::<f64>(&ModelConfig::toy(), 5).unwrap();
    let tiny = PointCloud::new(vec![[5.0, 0.0, 0.0], [0.0, 5.0, 0.2], [-4.0, -1.0, -0.3]]);
    let (_, full) = toy_frames(3);
    let src = Frame::project(&tiny, &grid).unwrap();
    match model.predict(&store, &src, &full) {
        Ok(poses) => assert!(poses.iter().all(|p| (quat_norm(p.q()) - 1.0).abs() < 1e-9)),
        Err(e) => assert!(matches!(e, Error::Degenerate(_)), "{e}"),
    }
}

#[test]
fn predicted_pose_is_finite_for_large_motion() {
    let grid = build_default_grid(GridPreset::Desk16x64).unwrap();
    let p = synth_pair(9, 1500, 30.0, 170.0, 8.0, SensorFov::default());
    let src = Frame::project(&p.source, &grid).unwrap();
    let tgt = Frame::project(&p.target, &grid).unwrap();
    let (model, store) = RegistrationModel::init::<f32>(&ModelConfig::toy(), 1).unwrap();
    for pose in model.predict(&store, &src, &tgt).unwrap() {
        assert!(pose.t.iter().all(|v| v.is_finite()));
        assert!((quat_norm(pose.q()) - 1.0).abs() < 1e-5);
        assert!(Pose::identity().angle_to(&pose).is_finite());
    }
}
