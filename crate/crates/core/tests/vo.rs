mod common;

use common::slide;
use nalgebra::Vector3;
use objslam::recognizer::{ransac_pnp, PnPResult, RansacConfig};
use objslam::scene::{generate_correspondences, NoiseConfig};
use objslam::se3::{Covariance6, Pose};
use objslam::vo::{initialize_scale, VoConfig, VoError, VoSimulator, VoState};

fn initialized(sim: &VoSimulator) -> VoState {
    VoState {
        scale: sim.true_scale(),
        initialized: true,
        ..Default::default()
    }
}

fn exact(pose: Pose) -> PnPResult {
    PnPResult {
        pose,
        inlier_ids: vec![],
        covariance: Covariance6::from_sigmas(1e-3, 1e-3),
        rmse: 0.0,
    }
}

#[test]
fn noiseless_initialized_odometry_is_ground_truth() {
    let s = common::orbit(50, 0.8, 0.4, NoiseConfig::zero(), 3);
    let sim = VoSimulator::new(&s, VoConfig::default());
    let st = initialized(&sim);
    let mut acc = s.camera_pose(0);
    for k in 1..s.len() {
        let m = sim.measure(k, &st);
        let (dt, da) = m.relative.distance(&s.ground_truth_relative(k));
        assert!(dt < 1e-12 && da < 1e-12);
        acc = acc.compose(&m.relative);
    }
    let (dt, da) = acc.distance(&s.camera_pose(s.len() - 1));
    assert!(dt < 1e-9 && da < 1e-9);
}

#[test]
fn unscaled_odometry_has_one_unknown_scale() {
    let s = common::orbit(50, 0.8, 0.4, NoiseConfig::zero(), 8);
    let sim = VoSimulator::new(&s, VoConfig::default());
    let st = VoState::default();
    let ratios: Vec<f64> = (1..s.len())
        .map(|k| {
            sim.measure(k, &st).relative.translation().norm()
                / s.ground_truth_relative(k).translation().norm()
        })
        .collect();
    for r in &ratios {
        assert!((r - ratios[0]).abs() < 1e-9);
    }
    assert!((ratios[0] - 1.0 / sim.true_scale()).abs() < 1e-12);
}

#[test]
fn drift_matches_closed_form_on_straight_path() {
    let noise = NoiseConfig {
        vo_translation_drift: 0.01,
        ..NoiseConfig::zero()
    };
    let s = slide(301, 10.0 / 300.0, noise, 1);
    let sim = VoSimulator::new(&s, VoConfig::default());
    let st = initialized(&sim);
    let mut acc = s.camera_pose(0);
    for k in 1..s.len() {
        acc = acc.compose(&sim.measure(k, &st).relative);
    }
    let err = (acc.translation() - s.camera_pose(300).translation()).norm();
    assert!((err - 10.0 * 0.01 * (10.0 / 2.0)).abs() < 1e-9, "{err}");
}

#[test]
fn expected_drift_error_tracks_closed_form_under_noise() {
    let noise = NoiseConfig {
        vo_translation_drift: 0.01,
        vo_translation_sigma: 0.001,
        vo_rotation_sigma: 0.0,
        ..NoiseConfig::zero()
    };
    for (frames, d) in [(151, 5.0), (301, 10.0)] {
        let mut mean = 0.0;
        let seeds = 40;
        for seed in 0..seeds {
            let s = slide(frames, d / (frames - 1) as f64, noise, seed);
            let sim = VoSimulator::new(&s, VoConfig::default());
            let st = initialized(&sim);
            let mut acc = s.camera_pose(0);
            for k in 1..s.len() {
                acc = acc.compose(&sim.measure(k, &st).relative);
            }
            mean += (acc.translation() - s.camera_pose(frames - 1).translation()).x / seeds as f64;
        }
        let expected = 0.01 * d * d / 2.0;
        assert!(
            (mean - expected).abs() < 0.1 * expected,
            "{d} m: {mean} vs {expected}"
        );
    }
}

#[test]
fn keyframe_policy_examples() {
    let cfg = VoConfig::default();
    let mut st = VoState::default();
    assert!(st.keyframe_policy(&cfg, 0, 0.0, 0.0));
    assert!(!st.keyframe_policy(&cfg, 1, 9.9, 0.0));
    assert!(st.keyframe_policy(&cfg, 2, 10.0, 0.0));
    st.initialized = true;
    assert!(!st.keyframe_policy(&cfg, 3, 0.0, 0.049));
    assert!(st.keyframe_policy(&cfg, 4, 0.0, 0.051));
    for k in 5..200 {
        st.keyframe_policy(&cfg, k, 0.0, 0.06);
        assert!(st.keyframes.len() <= 100);
    }
    assert_eq!(st.keyframes.len(), 100);
    assert_eq!(st.keyframes.front(), Some(&100));
}

#[test]
fn noiseless_scale_is_exact() {
    let s = slide(4, 0.05, NoiseConfig::zero(), 5);
    let sim = VoSimulator::new(&s, VoConfig::default());
    let st = VoState::default();
    let vo = sim
        .measure(1, &st)
        .relative
        .compose(&sim.measure(2, &st).relative);
    let o1 = exact(s.object_in_camera(0, "box").unwrap());
    let o2 = exact(s.object_in_camera(2, "box").unwrap());
    let scale = initialize_scale(&o1, &o2, &vo).unwrap();
    assert!((scale - sim.true_scale()).abs() < 1e-9);
}

#[test]
fn pure_rotation_is_degenerate() {
    let cam = Pose::identity();
    let o = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
    let turned = Pose::from_axis_angle(Vector3::new(0.0, 0.2, 0.0), Vector3::zeros());
    let o1 = exact(cam.between(&o));
    let o2 = exact(turned.between(&o));
    let r = initialize_scale(&o1, &o2, &turned);
    assert!(matches!(r, Err(VoError::Degenerate { .. })));
}

#[test]
fn noisy_scale_within_five_percent() {
    let mut good = 0;
    for seed in 0..50 {
        let noise = NoiseConfig {
            correspondence_pixel_sigma: 1.0,
            ..NoiseConfig::zero()
        };
        let s = slide(3, 0.05, noise, seed);
        let sim = VoSimulator::new(&s, VoConfig::default());
        let st = VoState::default();
        let vo = sim
            .measure(1, &st)
            .relative
            .compose(&sim.measure(2, &st).relative);
        let cfg = RansacConfig {
            seed,
            ..Default::default()
        };
        let pnp = |k| {
            ransac_pnp(
                &generate_correspondences(&s, k, "box").unwrap(),
                &s.intrinsics,
                &cfg,
            )
            .unwrap()
        };
        let scale = initialize_scale(&pnp(0), &pnp(2), &vo).unwrap();
        if (scale / sim.true_scale() - 1.0).abs() <= 0.05 {
            good += 1;
        }
    }
    assert!(good >= 45, "{good}/50");
}

#[test]
fn tracking_fails_without_features() {
    let s = common::orbit(5, 0.8, 0.4, NoiseConfig::zero(), 3);
    let sim = VoSimulator::new(&s, VoConfig::default());
    assert!(VoSimulator::visible_features(&s, 1) >= 20);
    assert!(sim.step(&s, 1, &VoState::default()).is_some());
    let strict = VoSimulator::new(
        &s,
        VoConfig {
            min_features: 1000,
            ..Default::default()
        },
    );
    assert!(strict.step(&s, 1, &VoState::default()).is_none());
}
