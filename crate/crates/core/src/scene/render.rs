//! Edge-map rendering and 2D-3D correspondence generation.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Scenario, ScenarioError, WireframeModel};
use crate::rng::{self, label_key, streams};
use crate::se3::{CameraIntrinsics, Pose};

/// Segments are clipped to this depth before projection.
const NEAR_PLANE: f64 = 0.05;
/// Upper bound on rasterized samples per segment.
const MAX_SEGMENT_SAMPLES: usize = 4096;
const CLUTTER_LENGTH_PX: (f64, f64) = (15.0, 60.0);
const CELL: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgePixel {
    pub u: f64,
    pub v: f64,
    /// Edge direction in `[0, pi)`.
    pub orientation: f64,
}

/// Sub-pixel edge locations of one frame, bucketed on a coarse grid for
/// neighbourhood queries.
#[derive(Debug, Clone)]
pub struct EdgeMap {
    pub frame: usize,
    pub width: u32,
    pub height: u32,
    pixels: Vec<EdgePixel>,
    grid_w: usize,
    grid_h: usize,
    cell_start: Vec<u32>,
    cell_items: Vec<u32>,
}

impl EdgeMap {
    /// Builds the map, dropping pixels outside the image.
    pub fn new(frame: usize, width: u32, height: u32, pixels: Vec<EdgePixel>) -> Self {
        let (w, h) = (width as f64, height as f64);
        let pixels: Vec<EdgePixel> = pixels
            .into_iter()
            .filter(|p| p.u >= 0.0 && p.v >= 0.0 && p.u < w && p.v < h)
            .collect();
        let grid_w = (width as usize).div_ceil(CELL);
        let grid_h = (height as usize).div_ceil(CELL);
        let cell_of = |p: &EdgePixel| (p.v as usize / CELL) * grid_w + p.u as usize / CELL;
        let mut counts = vec![0u32; grid_w * grid_h + 1];
        for p in &pixels {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let cell_start = counts.clone();
        let mut fill = counts;
        let mut cell_items = vec![0u32; pixels.len()];
        for (i, p) in pixels.iter().enumerate() {
            let c = cell_of(p);
            cell_items[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        Self {
            frame,
            width,
            height,
            pixels,
            grid_w,
            grid_h,
            cell_start,
            cell_items,
        }
    }

    pub fn empty(frame: usize, width: u32, height: u32) -> Self {
        Self::new(frame, width, height, Vec::new())
    }

    pub fn pixels(&self) -> &[EdgePixel] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Edge pixels bucketed in the grid cell containing image point `(u, v)`.
    pub fn near(&self, u: f64, v: f64) -> impl Iterator<Item = &EdgePixel> {
        let range = if u < 0.0 || v < 0.0 {
            0..0
        } else {
            let (cx, cy) = (u as usize / CELL, v as usize / CELL);
            if cx >= self.grid_w || cy >= self.grid_h {
                0..0
            } else {
                let c = cy * self.grid_w + cx;
                self.cell_start[c] as usize..self.cell_start[c + 1] as usize
            }
        };
        self.cell_items[range]
            .iter()
            .map(move |&i| &self.pixels[i as usize])
    }
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        sigma * rng.sample::<f64, _>(StandardNormal)
    }
}

fn orientation_of(d: &Vector2<f64>) -> f64 {
    let a = d.y.atan2(d.x);
    if a < 0.0 {
        a + std::f64::consts::PI
    } else if a >= std::f64::consts::PI {
        a - std::f64::consts::PI
    } else {
        a
    }
}

/// Rasterizes the part `[s0, s1]` of a model segment at roughly one sample
/// per pixel.
#[allow(clippy::too_many_arguments)]
fn rasterize(
    intr: &CameraIntrinsics,
    pose: &Pose,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    s0: f64,
    s1: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<EdgePixel>,
) {
    let pa = pose.transform_point(a);
    let pb = pose.transform_point(b);
    let at = |s: f64| pa + (pb - pa) * s;
    let (za, zb) = (at(s0).z, at(s1).z);
    let (mut lo, mut hi) = (s0, s1);
    if za < NEAR_PLANE && zb < NEAR_PLANE {
        return;
    }
    if za < NEAR_PLANE || zb < NEAR_PLANE {
        let cut = s0 + (s1 - s0) * (NEAR_PLANE - za) / (zb - za);
        if za < NEAR_PLANE {
            lo = cut;
        } else {
            hi = cut;
        }
    }
    let (Ok(u0), Ok(u1)) = (intr.project(&at(lo)), intr.project(&at(hi))) else {
        return;
    };
    let orientation = orientation_of(&(u1 - u0));
    let n = ((u1 - u0).norm().ceil() as usize).clamp(1, MAX_SEGMENT_SAMPLES);
    for i in 0..=n {
        let s = lo + (hi - lo) * i as f64 / n as f64;
        let Ok(px) = intr.project(&at(s)) else {
            continue;
        };
        let u = px.x + gaussian(rng, sigma);
        let v = px.y + gaussian(rng, sigma);
        out.push(EdgePixel { u, v, orientation });
    }
}

/// Visible parameter intervals of a segment given a hidden range.
fn visible_intervals(hidden: Option<(f64, f64)>) -> Vec<(f64, f64)> {
    match hidden {
        None => vec![(0.0, 1.0)],
        Some((a, b)) => {
            let mut v = Vec::new();
            if a > 0.0 {
                v.push((0.0, a));
            }
            if b < 1.0 {
                v.push((b, 1.0));
            }
            v
        }
    }
}

fn render_model(
    scn: &Scenario,
    frame: usize,
    model: &WireframeModel,
    pose_co: &Pose,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<EdgePixel>,
) {
    let intervals = visible_intervals(scn.hidden_range(&model.label, frame));
    for i in 0..model.segments.len() {
        let (a, b) = model.segment(i);
        for &(s0, s1) in &intervals {
            rasterize(
                &scn.intrinsics,
                pose_co,
                &a,
                &b,
                s0,
                s1,
                scn.noise.edge_pixel_sigma,
                rng,
                out,
            );
        }
    }
}

fn render_clutter(scn: &Scenario, frame: usize, out: &mut Vec<EdgePixel>) {
    let mut rng = rng::stream(scn.seed, streams::CLUTTER, frame as u64);
    let density = scn.noise.clutter_edge_density;
    let mut count = density.floor() as usize;
    if rng.random::<f64>() < density.fract() {
        count += 1;
    }
    let (w, h) = (scn.intrinsics.width as f64, scn.intrinsics.height as f64);
    for _ in 0..count {
        let c = Vector2::new(rng.random_range(0.0..w), rng.random_range(0.0..h));
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let len = rng.random_range(CLUTTER_LENGTH_PX.0..CLUTTER_LENGTH_PX.1);
        let d = Vector2::new(angle.cos(), angle.sin());
        let n = len.ceil() as usize;
        for i in 0..=n {
            let p = c + d * (len * (i as f64 / n as f64 - 0.5));
            let u = p.x + gaussian(&mut rng, scn.noise.edge_pixel_sigma);
            let v = p.y + gaussian(&mut rng, scn.noise.edge_pixel_sigma);
            out.push(EdgePixel {
                u,
                v,
                orientation: angle,
            });
        }
    }
}

/// Renders the edge evidence of `frame`: the ground-truth projection of every
/// object's segments minus the occluded parameter range, perturbed by
/// `edge_pixel_sigma`, plus random clutter segments.
pub fn render_edge_map(scn: &Scenario, frame: usize) -> EdgeMap {
    let mut pixels = Vec::new();
    let cam = scn.camera_pose(frame);
    for obj in &scn.objects {
        let pose_co = cam.between(&obj.pose.to_pose());
        let mut rng = rng::stream(
            scn.seed ^ label_key(&obj.model.label),
            streams::EDGE_NOISE,
            frame as u64,
        );
        render_model(scn, frame, &obj.model, &pose_co, &mut rng, &mut pixels);
    }
    render_clutter(scn, frame, &mut pixels);
    EdgeMap::new(frame, scn.intrinsics.width, scn.intrinsics.height, pixels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub feature_id: u32,
    /// Observed pixel.
    pub pixel: Vector2<f64>,
    /// Object-frame model point.
    pub point: Vector3<f64>,
    /// Simulator ground truth: the pixel was replaced by a random point.
    /// Consumers under test must not read this.
    pub outlier: bool,
}

/// Whether a model landmark falls in the occluded part of its host segment.
pub(crate) fn landmark_hidden(
    model: &WireframeModel,
    point: &Vector3<f64>,
    hidden: Option<(f64, f64)>,
) -> bool {
    match hidden {
        None => false,
        Some((a, b)) => {
            let (_, t) = model.host_segment(point);
            (a..=b).contains(&t)
        }
    }
}

/// Projects the unoccluded, in-image landmarks of `label` through ground truth
/// with pixel noise, then swaps `round(ratio * n)` of them for uniform random
/// image points.
pub fn generate_correspondences(
    scn: &Scenario,
    frame: usize,
    label: &str,
) -> Result<Vec<Correspondence>, ScenarioError> {
    if frame >= scn.len() {
        return Err(ScenarioError::FrameOutOfRange {
            frame,
            len: scn.len(),
        });
    }
    let obj = scn.object(label)?;
    let pose_co = scn.object_in_camera(frame, label)?;
    let hidden = scn.hidden_range(label, frame);
    let mut rng = rng::stream(
        scn.seed ^ label_key(label),
        streams::CORRESPONDENCE,
        frame as u64,
    );
    let sigma = scn.noise.correspondence_pixel_sigma;
    let mut out = Vec::new();
    for lm in &obj.model.landmarks {
        let p = Vector3::from(lm.position);
        if landmark_hidden(&obj.model, &p, hidden) {
            continue;
        }
        let Ok(px) = scn.intrinsics.project(&pose_co.transform_point(&p)) else {
            continue;
        };
        if !scn.intrinsics.contains(&px) {
            continue;
        }
        let noisy = px + Vector2::new(gaussian(&mut rng, sigma), gaussian(&mut rng, sigma));
        out.push(Correspondence {
            feature_id: lm.id,
            pixel: noisy,
            point: p,
            outlier: false,
        });
    }
    let n_out = (scn.noise.correspondence_outlier_ratio * out.len() as f64).round() as usize;
    if n_out > 0 {
        let (w, h) = (scn.intrinsics.width as f64, scn.intrinsics.height as f64);
        for i in rand::seq::index::sample(&mut rng, out.len(), n_out).into_iter() {
            out[i].pixel = Vector2::new(rng.random_range(0.0..w), rng.random_range(0.0..h));
            out[i].outlier = true;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{
        look_at, NoiseConfig, Occlusion, PoseRecord, SceneObject, StampedPose, DEFAULT_FRAME_PERIOD,
    };

    fn cube_scene() -> Scenario {
        let cam = look_at(&Vector3::new(0.0, -1.0, 0.3), &Vector3::zeros());
        Scenario {
            name: "cube".into(),
            frame_period: DEFAULT_FRAME_PERIOD,
            seed: 11,
            intrinsics: CameraIntrinsics::default(),
            noise: NoiseConfig::zero(),
            trajectory: vec![
                StampedPose::new(0.0, &cam),
                StampedPose::new(DEFAULT_FRAME_PERIOD, &cam),
            ],
            objects: vec![SceneObject {
                model: WireframeModel::cuboid("cube", 0.2, 0.2, 0.2),
                pose: PoseRecord::from_pose(&Pose::identity()),
            }],
            occlusions: vec![],
            background_points: vec![],
        }
    }

    fn dist_to_segment(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
        let d = b - a;
        let t = ((p - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
        (a + d * t - p).norm()
    }

    #[test]
    fn noiseless_pixels_lie_on_projected_segments() {
        let scn = cube_scene();
        let map = render_edge_map(&scn, 0);
        assert!(map.len() > 500);
        let pose = scn.object_in_camera(0, "cube").unwrap();
        let model = &scn.objects[0].model;
        let projected: Vec<_> = (0..model.segments.len())
            .map(|i| {
                let (a, b) = model.segment(i);
                (
                    scn.intrinsics.project(&pose.transform_point(&a)).unwrap(),
                    scn.intrinsics.project(&pose.transform_point(&b)).unwrap(),
                )
            })
            .collect();
        for p in map.pixels() {
            let q = Vector2::new(p.u, p.v);
            let d = projected
                .iter()
                .map(|(a, b)| dist_to_segment(&q, a, b))
                .fold(f64::INFINITY, f64::min);
            assert!(d < 0.5, "pixel {q} is {d} px from every segment");
        }
    }

    #[test]
    fn full_occlusion_renders_nothing() {
        let mut scn = cube_scene();
        scn.occlusions.push(Occlusion {
            label: "cube".into(),
            start: 0,
            end: 1,
            fraction: 1.0,
        });
        assert!(render_edge_map(&scn, 0).is_empty());
        assert!(generate_correspondences(&scn, 0, "cube")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn half_occlusion_halves_pixel_count() {
        let base = render_edge_map(&cube_scene(), 0).len() as f64;
        for seed in 0..100 {
            let mut scn = cube_scene();
            scn.seed = seed;
            scn.occlusions.push(Occlusion {
                label: "cube".into(),
                start: 0,
                end: 1,
                fraction: 0.5,
            });
            let ratio = render_edge_map(&scn, 0).len() as f64 / base;
            assert!((0.4..=0.6).contains(&ratio), "seed {seed}: ratio {ratio}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut scn = cube_scene();
        scn.noise = NoiseConfig::default();
        let a = render_edge_map(&scn, 1);
        let b = render_edge_map(&scn, 1);
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn clutter_density_adds_segments() {
        let mut scn = cube_scene();
        let base = render_edge_map(&scn, 0).len();
        scn.noise.clutter_edge_density = 10.0;
        let cluttered = render_edge_map(&scn, 0).len();
        assert!(cluttered > base + 10 * 15);
    }

    #[test]
    fn noiseless_correspondences_reproject_exactly() {
        let scn = cube_scene();
        let pose = scn.object_in_camera(0, "cube").unwrap();
        let corrs = generate_correspondences(&scn, 0, "cube").unwrap();
        assert_eq!(corrs.len(), 44);
        for c in &corrs {
            let px = scn
                .intrinsics
                .project(&pose.transform_point(&c.point))
                .unwrap();
            assert!((px - c.pixel).norm() < 1e-9);
        }
    }

    #[test]
    fn outlier_count_is_rounded_ratio() {
        let mut scn = cube_scene();
        scn.objects[0].model.landmarks.truncate(20);
        scn.noise.correspondence_outlier_ratio = 0.3;
        let corrs = generate_correspondences(&scn, 0, "cube").unwrap();
        assert_eq!(corrs.len(), 20);
        assert_eq!(corrs.iter().filter(|c| c.outlier).count(), 6);
    }

    #[test]
    fn occlusion_hides_same_subset_for_edges_and_landmarks() {
        let mut scn = cube_scene();
        scn.occlusions.push(Occlusion {
            label: "cube".into(),
            start: 0,
            end: 1,
            fraction: 0.5,
        });
        let model = &scn.objects[0].model;
        let (a, b) = scn.hidden_range("cube", 0).unwrap();
        let ids: std::collections::HashSet<u32> = generate_correspondences(&scn, 0, "cube")
            .unwrap()
            .iter()
            .map(|c| c.feature_id)
            .collect();
        for lm in &model.landmarks {
            let (_, t) = model.host_segment(&Vector3::from(lm.position));
            assert_eq!(ids.contains(&lm.id), !(a..=b).contains(&t));
        }
    }
}
