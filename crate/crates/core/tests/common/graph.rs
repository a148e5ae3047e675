//! Pose-graph fixtures: a random camera path with landmarks, measurement
//! builders, and a brute-force minimizer for small graphs.

use nalgebra::{DMatrix, DVector, Vector3};
use objslam::mapper::{FactorKind, Mapper, MapperConfig, ObjectMeasurement, OptimizeReport, Var};
use objslam::se3::{Covariance6, Mat6, Pose, Twist, Vec6};
use objslam::vo::OdometryMeasurement;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss6(r: &mut ChaCha8Rng, st: f64, sr: f64) -> Vec6 {
    let mut v = Vec6::zeros();
    for i in 0..6 {
        let s = if i < 3 { st } else { sr };
        v[i] = s * r.sample::<f64, _>(StandardNormal);
    }
    v
}

pub fn random_pose(r: &mut ChaCha8Rng, st: f64, sr: f64) -> Pose {
    Pose::exp(&Twist::from_vector(&gauss6(r, st, sr)))
}

pub fn odo(frame: usize, relative: Pose, sigma: (f64, f64)) -> OdometryMeasurement {
    OdometryMeasurement {
        frame,
        relative,
        covariance: Covariance6::from_sigmas(sigma.0, sigma.1),
        scaled: true,
    }
}

pub fn obs(frame: usize, label: &str, pose: Pose) -> ObjectMeasurement {
    ObjectMeasurement {
        frame,
        label: label.into(),
        pose,
        covariance: Covariance6::from_sigmas(0.01, 0.02),
        health: 1.0,
    }
}

pub fn checked(m: &mut Mapper) -> OptimizeReport {
    let anchor = m
        .graph()
        .factors
        .iter()
        .find(|f| f.kind == FactorKind::Prior)
        .map(|f| (f.vars[0].clone(), f.measurement));
    let rep = m.optimize().unwrap();
    assert!(rep.is_monotone(), "{:?}", rep.cost_history);
    if let Some((Var::Pose(k), z)) = anchor {
        if m.config().prior_sigma <= 1e-6 {
            let d = z.local(&m.graph().poses[&k]).unwrap().norm();
            assert!(d < 1e-9, "anchor moved by {d}");
        }
    }
    rep
}

/// Ground-truth world: camera path with `n` poses and landmarks at known
/// poses; measurements carry optional noise.
pub struct World {
    pub cams: Vec<Pose>,
    pub objects: Vec<(String, Pose)>,
}

impl World {
    pub fn new(n: usize, landmarks: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let mut cams = vec![Pose::identity()];
        for _ in 1..n {
            let step = Pose::exp(&Twist::from_vector(
                &(Vec6::new(0.03, 0.0, 0.0, 0.0, 0.0, 0.02) + gauss6(&mut r, 0.01, 0.01)),
            ));
            cams.push(cams.last().unwrap().compose(&step));
        }
        let objects = (0..landmarks)
            .map(|j| {
                let t = Vector3::new(0.3 * j as f64, 0.5, 1.0)
                    + 0.1 * Vector3::new(r.random(), r.random(), r.random());
                (
                    format!("obj{j}"),
                    Pose::from_axis_angle(Vector3::new(0.1, 0.2, r.random_range(-1.0..1.0)), t),
                )
            })
            .collect();
        Self { cams, objects }
    }

    pub fn relative(&self, k: usize) -> Pose {
        self.cams[k - 1].between(&self.cams[k])
    }

    pub fn seen(&self, k: usize, j: usize) -> Pose {
        self.cams[k].between(&self.objects[j].1)
    }

    /// Builds a mapper, every landmark observed every `every` frames.
    pub fn mapper(&self, cfg: MapperConfig, noise: (f64, f64), every: usize, seed: u64) -> Mapper {
        let mut r = rng(seed ^ 0xabc);
        let mut m = Mapper::new(cfg).unwrap();
        m.anchor(0, self.cams[0]).unwrap();
        for k in 0..self.cams.len() {
            if k > 0 {
                let rel = self.relative(k).retract(&gauss6(&mut r, noise.0, noise.1));
                m.add_odometry(&odo(k, rel, (0.05, 5f64.to_radians())))
                    .unwrap();
            }
            if k % every == 0 {
                for j in 0..self.objects.len() {
                    let z = self.seen(k, j).retract(&gauss6(&mut r, noise.0, noise.1));
                    let label = self.objects[j].0.clone();
                    let out = m.process_measurement(&obs(k, &label, z)).unwrap();
                    assert!(out.factor_added || noise.0 > 0.0);
                }
            }
        }
        m
    }
}

/// Independent minimizer for the toy graph: Gauss-Newton on the dense
/// parameter vector with central-difference Jacobians of a residual built
/// directly from poses, started from several perturbed points.
pub mod oracle {
    use super::*;

    pub struct Toy {
        pub priors: Vec<(usize, Pose, Mat6)>,
        pub betweens: Vec<(usize, usize, Pose, Mat6)>,
    }

    fn whiten(cov: &Mat6) -> Mat6 {
        cov.try_inverse()
            .unwrap()
            .cholesky()
            .unwrap()
            .l()
            .transpose()
    }

    fn residuals(t: &Toy, x: &[Pose]) -> DVector<f64> {
        let mut out = Vec::new();
        for (i, z, c) in &t.priors {
            out.extend((whiten(c) * z.local(&x[*i]).unwrap()).iter().copied());
        }
        for (a, b, z, c) in &t.betweens {
            let pred = x[*a].inverse().compose(&x[*b]);
            out.extend((whiten(c) * z.local(&pred).unwrap()).iter().copied());
        }
        DVector::from_vec(out)
    }

    pub fn minimize(t: &Toy, start: &[Pose]) -> Vec<Pose> {
        let n = start.len();
        let mut x = start.to_vec();
        for _ in 0..200 {
            let r0 = residuals(t, &x);
            let mut j = DMatrix::zeros(r0.len(), 6 * n);
            let h = 1e-7;
            for v in 0..6 * n {
                let mut e = Vec6::zeros();
                e[v % 6] = h;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[v / 6] = x[v / 6].retract(&e);
                xm[v / 6] = x[v / 6].retract(&(-e));
                j.set_column(v, &((residuals(t, &xp) - residuals(t, &xm)) / (2.0 * h)));
            }
            let jt = j.transpose();
            let step = (&jt * &j).lu().solve(&(-(&jt * &r0))).unwrap();
            for i in 0..n {
                x[i] = x[i].retract(&Vec6::from_column_slice(&step.as_slice()[6 * i..6 * i + 6]));
            }
            if step.norm() < 1e-13 {
                break;
            }
        }
        x
    }
}
