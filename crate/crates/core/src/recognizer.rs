//! Object pose from 2D-3D correspondences: damped Gauss-Newton PnP and a
//! RANSAC wrapper over minimal four-point subsets.

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector2, Vector3};
use thiserror::Error;

use crate::rng::{self, streams};
use crate::scene::Correspondence;
use crate::se3::{point_jacobian, CameraIntrinsics, Covariance6, Pose, Vec6};

pub const MIN_CORRESPONDENCES: usize = 4;

const MAX_ITERATIONS: usize = 50;
const STEP_TOLERANCE: f64 = 1e-10;
const MAX_DAMPING: f64 = 1e12;
const RANK_TOLERANCE: f64 = 1e-12;
const TRANSLATION_FLOOR: f64 = 1e-3;
const ROTATION_FLOOR: f64 = 0.1 * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecognitionError {
    #[error("need at least {MIN_CORRESPONDENCES} correspondences, got {0}")]
    TooFew(usize),
    #[error("degenerate correspondence geometry")]
    Degenerate,
    #[error("a model point projects behind the camera")]
    BehindCamera,
    #[error("refinement diverged")]
    Diverged,
    #[error("no hypothesis reached {MIN_CORRESPONDENCES} inliers")]
    NoConsensus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnPResult {
    /// Object pose in the camera frame.
    pub pose: Pose,
    /// Sorted feature ids used in the final refinement.
    pub inlier_ids: Vec<u32>,
    pub covariance: Covariance6,
    /// Root-mean-square reprojection error over the inliers (pixels).
    pub rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inclusive reprojection-distance threshold (pixels).
    pub inlier_px: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            inlier_px: 3.0,
            seed: 0,
        }
    }
}

/// Reprojection distance of one correspondence, `None` behind the camera.
pub fn reprojection_error(pose: &Pose, c: &Correspondence, intr: &CameraIntrinsics) -> Option<f64> {
    let px = intr.project(&pose.transform_point(&c.point)).ok()?;
    Some((px - c.pixel).norm())
}

pub fn is_inlier(distance: f64, inlier_px: f64) -> bool {
    distance <= inlier_px
}

/// Indices of the correspondences within `inlier_px` of their projection.
pub fn inliers(
    pose: &Pose,
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    inlier_px: f64,
) -> Vec<usize> {
    corrs
        .iter()
        .enumerate()
        .filter(|(_, c)| reprojection_error(pose, c, intr).is_some_and(|d| is_inlier(d, inlier_px)))
        .map(|(i, _)| i)
        .collect()
}

fn cost(pose: &Pose, corrs: &[Correspondence], intr: &CameraIntrinsics) -> Option<f64> {
    corrs.iter().try_fold(0.0, |acc, c| {
        reprojection_error(pose, c, intr).map(|d| acc + d * d)
    })
}

/// Normal equations `(J^T J, J^T r)` of the reprojection residuals.
fn normal_equations(
    pose: &Pose,
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
) -> Option<(Matrix6<f64>, Vec6)> {
    let mut h = Matrix6::zeros();
    let mut g = Vec6::zeros();
    for c in corrs {
        let pc = pose.transform_point(&c.point);
        let px = intr.project(&pc).ok()?;
        let r: Vector2<f64> = px - c.pixel;
        let j = intr.project_jacobian(&pc) * point_jacobian(pose, &c.point);
        h += j.transpose() * j;
        g += j.transpose() * r;
    }
    Some((h, g))
}

fn check_rank(h: &Matrix6<f64>) -> Result<(), RecognitionError> {
    let eig = SymmetricEigen::new(*h).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || lo <= RANK_TOLERANCE * hi {
        return Err(RecognitionError::Degenerate);
    }
    Ok(())
}

/// Locally minimizes the squared reprojection error starting at `init`.
pub fn pnp_refine(
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    init: &Pose,
) -> Result<PnPResult, RecognitionError> {
    if corrs.len() < MIN_CORRESPONDENCES {
        return Err(RecognitionError::TooFew(corrs.len()));
    }
    let mut pose = *init;
    let mut current = cost(&pose, corrs, intr).ok_or(RecognitionError::BehindCamera)?;
    let mut lambda = 1e-4;
    for _ in 0..MAX_ITERATIONS {
        let (h, g) = normal_equations(&pose, corrs, intr).ok_or(RecognitionError::BehindCamera)?;
        check_rank(&h)?;
        let mut accepted = false;
        let mut converged = false;
        while lambda <= MAX_DAMPING {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)];
            }
            let Some(delta) = damped.cholesky().map(|ch| -ch.solve(&g)) else {
                lambda *= 10.0;
                continue;
            };
            if delta.norm() < STEP_TOLERANCE {
                converged = true;
                break;
            }
            let trial = pose.retract(&delta);
            match cost(&trial, corrs, intr) {
                Some(c) if c <= current => {
                    pose = trial;
                    current = c;
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = true;
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if converged {
            break;
        }
        if !accepted {
            return Err(RecognitionError::Diverged);
        }
    }
    finish(pose, corrs, intr, current)
}

fn finish(
    pose: Pose,
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    sse: f64,
) -> Result<PnPResult, RecognitionError> {
    let (h, _) = normal_equations(&pose, corrs, intr).ok_or(RecognitionError::BehindCamera)?;
    check_rank(&h)?;
    let dof = (2 * corrs.len()).saturating_sub(6).max(1) as f64;
    let sigma2 = sse / dof;
    let inv = h.try_inverse().ok_or(RecognitionError::Degenerate)?;
    let mut cov = inv * sigma2;
    for i in 0..3 {
        cov[(i, i)] += TRANSLATION_FLOOR * TRANSLATION_FLOOR;
        cov[(i + 3, i + 3)] += ROTATION_FLOOR * ROTATION_FLOOR;
    }
    let mut ids: Vec<u32> = corrs.iter().map(|c| c.feature_id).collect();
    ids.sort_unstable();
    Ok(PnPResult {
        pose,
        inlier_ids: ids,
        covariance: Covariance6::from_matrix_unchecked(crate::se3::symmetrize(&cov)),
        rmse: (sse / corrs.len() as f64).sqrt(),
    })
}

/// Coarse pose from a handful of correspondences: depth from the ratio of
/// model spread to image spread, rotation from a Kabsch fit of the model
/// points to the rays back-projected at that depth.
pub fn coarse_pose(corrs: &[Correspondence], intr: &CameraIntrinsics) -> Option<Pose> {
    let n = corrs.len() as f64;
    let model_c = corrs.iter().map(|c| c.point).sum::<Vector3<f64>>() / n;
    let pix_c = corrs.iter().map(|c| c.pixel).sum::<Vector2<f64>>() / n;
    let model_spread = corrs
        .iter()
        .map(|c| (c.point - model_c).norm())
        .sum::<f64>()
        / n;
    let pix_spread = corrs.iter().map(|c| (c.pixel - pix_c).norm()).sum::<f64>() / n;
    if pix_spread < 1e-9 || model_spread < 1e-12 {
        return None;
    }
    let depth = 0.5 * (intr.fx + intr.fy) * model_spread / pix_spread;
    let rays: Vec<Vector3<f64>> = corrs
        .iter()
        .map(|c| intr.back_project(&c.pixel) * depth)
        .collect();
    let ray_c = rays.iter().sum::<Vector3<f64>>() / n;
    let mut cross = Matrix3::zeros();
    for (c, p) in corrs.iter().zip(&rays) {
        cross += (p - ray_c) * (c.point - model_c).transpose();
    }
    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let d = (u * v_t).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    Some(Pose::new(r, ray_c - r * model_c))
}

fn subset(corrs: &[Correspondence], idx: &[usize]) -> Vec<Correspondence> {
    idx.iter().map(|&i| corrs[i].clone()).collect()
}

/// Robust pose: minimal-subset hypotheses scored by inlier count (ties
/// broken by inlier error), then refined on the consensus set.
pub fn ransac_pnp(
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PnPResult, RecognitionError> {
    if corrs.len() < MIN_CORRESPONDENCES {
        return Err(RecognitionError::TooFew(corrs.len()));
    }
    let mut rng = rng::stream(cfg.seed, streams::RANSAC, corrs.len() as u64);
    let mut best: Option<(usize, f64, Pose)> = None;
    for _ in 0..cfg.iterations {
        let pick = rand::seq::index::sample(&mut rng, corrs.len(), MIN_CORRESPONDENCES).into_vec();
        let sample = subset(corrs, &pick);
        let Some(init) = coarse_pose(&sample, intr) else {
            continue;
        };
        let Ok(hyp) = pnp_refine(&sample, intr, &init) else {
            continue;
        };
        let inl = inliers(&hyp.pose, corrs, intr, cfg.inlier_px);
        let err: f64 = inl
            .iter()
            .filter_map(|&i| reprojection_error(&hyp.pose, &corrs[i], intr))
            .sum();
        let better = match &best {
            None => true,
            Some((count, e, _)) => inl.len() > *count || (inl.len() == *count && err < *e),
        };
        if better {
            best = Some((inl.len(), err, hyp.pose));
        }
    }
    let Some((count, _, mut pose)) = best else {
        return Err(RecognitionError::NoConsensus);
    };
    if count < MIN_CORRESPONDENCES {
        return Err(RecognitionError::NoConsensus);
    }
    let mut inl = inliers(&pose, corrs, intr, cfg.inlier_px);
    for _ in 0..3 {
        if inl.len() < MIN_CORRESPONDENCES {
            return Err(RecognitionError::NoConsensus);
        }
        let refined = pnp_refine(&subset(corrs, &inl), intr, &pose)?;
        pose = refined.pose;
        let next = inliers(&pose, corrs, intr, cfg.inlier_px);
        if next == inl {
            return Ok(refined);
        }
        inl = next;
    }
    if inl.len() < MIN_CORRESPONDENCES {
        return Err(RecognitionError::NoConsensus);
    }
    pnp_refine(&subset(corrs, &inl), intr, &pose)
}
