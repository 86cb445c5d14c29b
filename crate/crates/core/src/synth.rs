//! Synthetic two-view planar scenes.
//!
//! A scene is a set of world planes seen by two pinhole cameras with unit
//! focal length. Camera 1 sits at the origin looking down `+z`; camera 2 is
//! placed by the ground-truth relative pose. Each plane carries a convex
//! quadrilateral footprint, a descriptor, and a few point tracks for the
//! homography baselines.

use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::SynthError;
use crate::geom::{project, unit_angle, warp_plane, Plane, PlanePair, Polygon, Pose, UnitQuaternion, Vec3};
use crate::rng::{domain, stream};

pub const FORMAT_MAGIC: &str = "planesac-scenes";
pub const FORMAT_VERSION: u32 = 1;

/// Half-widths of the uniform box a pose is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRange {
    /// Per rotation-vector axis, radians.
    pub rotation: f64,
    /// Per translation axis, meters.
    pub translation: f64,
}

impl PoseRange {
    /// The box used to train the auto-encoder.
    pub const AIM: PoseRange = PoseRange { rotation: 2.5, translation: 2.5 };
    pub const SCENE: PoseRange = PoseRange { rotation: 0.5, translation: 1.0 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub seed: u64,
    pub scenes: usize,
    pub min_planes: usize,
    pub max_planes: usize,
    pub pose_range: PoseRange,
    pub offset_noise: f64,
    pub normal_noise_deg: f64,
    pub descriptor_dim: usize,
    /// Norm of the Gaussian noise added to each observed descriptor.
    pub descriptor_noise: f64,
    /// Fraction of planes whose frame-2 descriptor is lured onto a distractor.
    pub outlier_rate: f64,
    /// Random unmatched observations added to each view.
    pub distractors: usize,
    pub init_rotation_sigma_deg: f64,
    pub init_translation_sigma: f64,
    pub points_per_plane: usize,
    pub pixel_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 100,
            min_planes: 3,
            max_planes: 8,
            pose_range: PoseRange::SCENE,
            offset_noise: 0.0,
            normal_noise_deg: 0.0,
            descriptor_dim: 256,
            descriptor_noise: 0.5,
            outlier_rate: 0.0,
            distractors: 0,
            init_rotation_sigma_deg: 10.0,
            init_translation_sigma: 0.3,
            points_per_plane: 8,
            pixel_noise: 0.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.scenes == 0 {
            return bad("scene count must be at least 1");
        }
        if self.min_planes < 3 || self.min_planes > self.max_planes {
            return bad("plane count range must satisfy 3 <= min <= max");
        }
        if self.max_planes > 16 {
            return bad("at most 16 planes per scene");
        }
        let sigmas = [
            self.offset_noise,
            self.normal_noise_deg,
            self.descriptor_noise,
            self.init_rotation_sigma_deg,
            self.init_translation_sigma,
            self.pixel_noise,
            self.pose_range.rotation,
            self.pose_range.translation,
        ];
        if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("noise levels and ranges must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return bad("outlier rate must lie in [0, 1)");
        }
        if self.descriptor_dim == 0 {
            return bad("descriptor dimension must be positive");
        }
        if self.points_per_plane < 4 {
            return bad("homography baselines need at least 4 points per plane");
        }
        Ok(())
    }
}

/// One detected plane in one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub plane: Plane,
    pub descriptor: Vec<f64>,
    pub polygon: Polygon,
    /// Index into [`ScenePair::planes`]; `None` for distractors.
    pub plane_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePair {
    pub pose: Pose,
    /// Coarse initial pose handed to every refinement method.
    pub init: Pose,
    /// Ground-truth planes in frame 1.
    pub planes: Vec<Plane>,
    /// Quadrilateral footprint corners in frame 1, per plane.
    pub corners: Vec<[Vec3; 4]>,
    pub views: [Vec<Observation>; 2],
    /// `(view-1 index, view-2 index)` pairs observing the same plane.
    pub correspondences: Vec<(usize, usize)>,
    /// Point tracks `[x1, y1, x2, y2]` in normalized coordinates, per plane.
    pub points: Vec<Vec<[f64; 4]>>,
    /// Planes whose frame-2 descriptor was moved onto a distractor.
    pub corrupted: Vec<usize>,
}

impl ScenePair {
    /// Observed plane pairs along the ground-truth correspondences.
    pub fn gt_pairs(&self) -> Vec<PlanePair> {
        self.correspondences
            .iter()
            .map(|&(i, j)| PlanePair::new(self.views[0][i].plane, self.views[1][j].plane))
            .collect()
    }

    /// Ground-truth planes expressed in frame 2.
    pub fn planes_in_second(&self) -> Vec<Plane> {
        self.planes.iter().map(|p| warp_plane(p, &self.pose)).collect()
    }

    /// Frame-2 footprint of every ground-truth plane.
    pub fn polygons_in_second(&self) -> Vec<Polygon> {
        self.corners.iter().map(|c| footprint(c, &self.pose)).collect()
    }

    pub fn descriptors(&self, view: usize) -> Vec<Vec<f64>> {
        self.views[view].iter().map(|o| o.descriptor.clone()).collect()
    }

    pub fn observed_planes(&self, view: usize) -> Vec<Plane> {
        self.views[view].iter().map(|o| o.plane).collect()
    }
}

/// Rotation-vector and translation axes each uniform in their half-width.
pub fn sample_pose(rng: &mut impl Rng, range: PoseRange) -> Pose {
    let mut uniform = |h: f64| if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 };
    let rv = Vec3::new(uniform(range.rotation), uniform(range.rotation), uniform(range.rotation));
    let t = Vec3::new(uniform(range.translation), uniform(range.translation), uniform(range.translation));
    Pose::new(UnitQuaternion::from_rotation_vector(&rv).canonicalize(), t)
}

/// Gaussian perturbation of a pose: rotation-vector components with
/// standard deviation `sigma_rot_deg`, translation components `sigma_t`.
/// The rotation noise is applied on the left.
pub fn perturb_pose(pose: &Pose, sigma_rot_deg: f64, sigma_t: f64, rng: &mut impl Rng) -> Pose {
    let rv = gaussian_vec(rng) * sigma_rot_deg.to_radians();
    let dq = UnitQuaternion::from_rotation_vector(&rv);
    Pose::new(dq.mul(pose.rotation).canonicalize(), pose.translation + gaussian_vec(rng) * sigma_t)
}

fn gaussian_vec(rng: &mut impl Rng) -> Vec3 {
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

fn unit_vec(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = gaussian_vec(rng);
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn random_descriptor(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Adds isotropic noise of expected norm `sigma` and renormalizes.
fn noisy_descriptor(base: &[f64], sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return base.to_vec();
    }
    let s = sigma / (base.len() as f64).sqrt();
    let v: Vec<f64> = base.iter().map(|b| b + s * rng.sample::<f64, _>(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Rotates `n` by a Gaussian angle about a random axis perpendicular to it,
/// so the angular error itself is the Gaussian draw.
fn perturb_normal(n: &Vec3, sigma_deg: f64, rng: &mut impl Rng) -> Vec3 {
    if sigma_deg == 0.0 {
        return *n;
    }
    let axis = loop {
        let a = unit_vec(rng).cross(n);
        if a.norm() > 1e-6 {
            break a.normalize();
        }
    };
    let angle = rng.sample::<f64, _>(StandardNormal) * sigma_deg.to_radians();
    UnitQuaternion::from_axis_angle(&axis, angle).rotate(n).normalize()
}

fn in_plane_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = n.cross(&helper).normalize();
    (u, n.cross(&u))
}

/// Projected footprint in the camera of `pose`, ordered counter-clockwise.
pub fn footprint(corners: &[Vec3; 4], pose: &Pose) -> Polygon {
    let mut poly: Polygon = corners
        .iter()
        .map(|c| {
            let p = project(&pose.transform_point(c)).unwrap_or_else(|| Vector2::new(f64::NAN, f64::NAN));
            [p.x, p.y]
        })
        .collect();
    if signed_area(&poly) < 0.0 {
        poly.reverse();
    }
    poly
}

pub(crate) fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        * 0.5
}

const MIN_NORMAL_SEPARATION_DEG: f64 = 10.0;
const MIN_DEPTH: f64 = 0.3;
/// Camera rays may not graze a plane more steeply than this.
const MAX_INCIDENCE_DEG: f64 = 75.0;

fn visible(x: &Vec3) -> bool {
    x.z > MIN_DEPTH && (x.x / x.z).abs() < 1.5 && (x.y / x.z).abs() < 1.5
}

struct WorldPlane {
    plane: Plane,
    corners: [Vec3; 4],
}

/// Tries to place one plane seen by both cameras. The camera centers lie
/// on the origin side of every plane, so warped offsets stay positive.
fn sample_world_plane(rng: &mut impl Rng, pose: &Pose, existing: &[WorldPlane]) -> Option<WorldPlane> {
    let z = rng.random_range(1.5..5.0);
    let center = Vec3::new(rng.random_range(-0.6..0.6) * z, rng.random_range(-0.6..0.6) * z, z);
    if !visible(&pose.transform_point(&center)) {
        return None;
    }
    let mut normal = unit_vec(rng);
    if normal.dot(&center) < 0.0 {
        normal = -normal;
    }
    let offset = normal.dot(&center);
    if !(0.5..=5.0).contains(&offset) {
        return None;
    }
    let cam2 = pose.inverse().translation;
    let cos_max = MAX_INCIDENCE_DEG.to_radians().cos();
    if offset / center.norm() < cos_max {
        return None;
    }
    let c2 = center - cam2;
    if (offset - normal.dot(&cam2)) / c2.norm() < cos_max {
        return None;
    }
    if existing.iter().any(|w| unit_angle(&w.plane.normal, &normal).to_degrees() < MIN_NORMAL_SEPARATION_DEG) {
        return None;
    }
    let (u, v) = in_plane_basis(&normal);
    let (a, b) = (rng.random_range(0.3..1.0), rng.random_range(0.3..1.0));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    // corners on an ellipse in angular order form a convex quadrilateral
    let mut angles = [0.0; 4];
    for (k, ang) in angles.iter_mut().enumerate() {
        *ang = phase + std::f64::consts::FRAC_PI_2 * (k as f64 + rng.random_range(-0.3..0.3));
    }
    let corners = angles.map(|t| center + u * (a * t.cos()) + v * (b * t.sin()));
    let all_visible = corners.iter().all(|c| c.z > MIN_DEPTH && pose.transform_point(c).z > MIN_DEPTH);
    all_visible.then_some(WorldPlane { plane: Plane::new(normal, offset), corners })
}

/// Smallest singular value of the stacked normals.
fn normal_conditioning(planes: &[WorldPlane]) -> f64 {
    let rows: Vec<f64> = planes.iter().flat_map(|w| w.plane.normal.iter().copied().collect::<Vec<_>>()).collect();
    let m = nalgebra::DMatrix::from_row_slice(planes.len(), 3, &rows);
    m.singular_values().min()
}

fn sample_point_tracks(rng: &mut impl Rng, corners: &[Vec3; 4], pose: &Pose, count: usize) -> Vec<[f64; 4]> {
    (0..count)
        .map(|_| {
            let mut w = [0.0; 4];
            for x in w.iter_mut() {
                *x = rng.random_range(0.05..1.0);
            }
            let s: f64 = w.iter().sum();
            let x: Vec3 = corners.iter().zip(w).map(|(c, wi)| c * (wi / s)).sum();
            let p1 = project(&x).expect("track in front of camera 1");
            let p2 = project(&pose.transform_point(&x)).expect("track in front of camera 2");
            [p1.x, p1.y, p2.x, p2.y]
        })
        .collect()
}

/// A clean scene: exact plane parameters in both views, noisy descriptors
/// only. Apply [`perturb`] and [`inject_outliers`] for the noisy variants.
pub fn sample_scene(rng: &mut impl Rng, cfg: &SceneConfig) -> ScenePair {
    let k = rng.random_range(cfg.min_planes..=cfg.max_planes);
    let (pose, world) = loop {
        let pose = sample_pose(rng, cfg.pose_range);
        let mut world: Vec<WorldPlane> = Vec::with_capacity(k);
        let mut attempts = 0;
        while world.len() < k && attempts < 400 {
            attempts += 1;
            if let Some(w) = sample_world_plane(rng, &pose, &world) {
                world.push(w);
            }
        }
        if world.len() == k && normal_conditioning(&world) > 0.25 {
            break (pose, world);
        }
    };
    let bases: Vec<Vec<f64>> = (0..k).map(|_| random_descriptor(rng, cfg.descriptor_dim)).collect();
    let mut views: [Vec<Observation>; 2] = [Vec::with_capacity(k), Vec::with_capacity(k)];
    for (id, w) in world.iter().enumerate() {
        views[0].push(Observation {
            plane: w.plane,
            descriptor: noisy_descriptor(&bases[id], cfg.descriptor_noise, rng),
            polygon: footprint(&w.corners, &Pose::identity()),
            plane_id: Some(id),
        });
    }
    // view 2 lists planes in a shuffled order so indices carry no identity
    let mut order: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut correspondences = vec![(0, 0); k];
    for (j, &id) in order.iter().enumerate() {
        let w = &world[id];
        views[1].push(Observation {
            plane: warp_plane(&w.plane, &pose),
            descriptor: noisy_descriptor(&bases[id], cfg.descriptor_noise, rng),
            polygon: footprint(&w.corners, &pose),
            plane_id: Some(id),
        });
        correspondences[id] = (id, j);
    }
    let points = world.iter().map(|w| sample_point_tracks(rng, &w.corners, &pose, cfg.points_per_plane)).collect();
    let init = perturb_pose(&pose, cfg.init_rotation_sigma_deg, cfg.init_translation_sigma, rng);
    ScenePair {
        pose,
        init,
        planes: world.iter().map(|w| w.plane).collect(),
        corners: world.iter().map(|w| w.corners).collect(),
        views,
        correspondences,
        points,
        corrupted: Vec::new(),
    }
}

/// Gaussian noise on observed plane parameters (both views), descriptors,
/// and point tracks. Ground truth is untouched.
pub fn perturb(
    scene: &ScenePair,
    sigma_offset: f64,
    sigma_normal_deg: f64,
    descriptor_noise: f64,
    pixel_noise: f64,
    rng: &mut impl Rng,
) -> ScenePair {
    let mut out = scene.clone();
    for obs in out.views.iter_mut().flatten() {
        let normal = perturb_normal(&obs.plane.normal, sigma_normal_deg, rng);
        let offset = obs.plane.offset + sigma_offset * rng.sample::<f64, _>(StandardNormal);
        obs.plane = Plane::from_signed(normal, offset);
        obs.descriptor = noisy_descriptor(&obs.descriptor, descriptor_noise, rng);
    }
    if pixel_noise > 0.0 {
        for p in out.points.iter_mut().flatten() {
            for c in p.iter_mut() {
                *c += pixel_noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    out
}

fn random_observation(rng: &mut impl Rng, dim: usize, descriptor: Vec<f64>) -> Observation {
    let z = rng.random_range(1.5..5.0);
    let center = Vec3::new(rng.random_range(-0.6..0.6) * z, rng.random_range(-0.6..0.6) * z, z);
    let mut normal = unit_vec(rng);
    if normal.dot(&center) < 0.0 {
        normal = -normal;
    }
    let plane = Plane::new(normal, normal.dot(&center).max(0.5));
    let (u, v) = in_plane_basis(&plane.normal);
    let s = rng.random_range(0.3..1.0);
    let corners = [u + v, v - u, -u - v, u - v].map(|d| center + d * s);
    let descriptor = if descriptor.is_empty() { random_descriptor(rng, dim) } else { descriptor };
    Observation { plane, descriptor, polygon: footprint(&corners, &Pose::identity()), plane_id: None }
}

/// Corrupts `round(rate * K)` planes: the frame-2 descriptor of each is
/// handed to a new distractor with unrelated geometry and the true
/// observation receives a fresh random descriptor, so appearance alone
/// proposes a false match. Ground-truth correspondences stay on the true
/// planes. `distractors` unmatched clutter observations are added per view.
pub fn inject_outliers(scene: &ScenePair, rate: f64, distractors: usize, rng: &mut impl Rng) -> ScenePair {
    let mut out = scene.clone();
    let k = scene.planes.len();
    let dim = scene.views[0].first().map_or(0, |o| o.descriptor.len());
    let n_corrupt = ((rate * k as f64).round() as usize).min(k);
    let mut ids: Vec<usize> = (0..k).collect();
    for i in 0..n_corrupt {
        let j = rng.random_range(i..k);
        ids.swap(i, j);
    }
    let mut corrupted: Vec<usize> = ids[..n_corrupt].to_vec();
    corrupted.sort_unstable();
    for &id in &corrupted {
        let (_, j) = out.correspondences[id];
        let lure = std::mem::replace(&mut out.views[1][j].descriptor, random_descriptor(rng, dim));
        let obs = random_observation(rng, dim, lure);
        out.views[1].push(obs);
    }
    for view in 0..2 {
        for _ in 0..distractors {
            let obs = random_observation(rng, dim, Vec::new());
            out.views[view].push(obs);
        }
    }
    out.corrupted = corrupted;
    out
}

/// Scene `index` of a dataset: clean sample, then outliers, then noise, each
/// from its own stream.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> ScenePair {
    let clean = sample_scene(&mut stream(cfg.seed, domain::SCENE, index), cfg);
    let lured = inject_outliers(&clean, cfg.outlier_rate, cfg.distractors, &mut stream(cfg.seed, domain::OUTLIERS, index));
    perturb(
        &lured,
        cfg.offset_noise,
        cfg.normal_noise_deg,
        0.0,
        cfg.pixel_noise,
        &mut stream(cfg.seed, domain::NOISE, index),
    )
}

/// Generates `cfg.scenes` scenes in parallel; the result does not depend on
/// the thread count.
pub fn generate_dataset(cfg: &SceneConfig) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    let scenes = (0..cfg.scenes as u64).into_par_iter().map(|i| generate_scene(cfg, i)).collect();
    Ok(Dataset { config: cfg.clone(), scenes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: SceneConfig,
    pub scenes: Vec<ScenePair>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    config: SceneConfig,
    scenes: Vec<ScenePair>,
}

/// Writes every float with 17 significant digits, which round-trips `f64`.
struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + std::io::Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

impl Dataset {
    pub fn to_json(&self) -> Result<Vec<u8>, SynthError> {
        let file = DatasetFile {
            format: FORMAT_MAGIC.to_string(),
            version: FORMAT_VERSION,
            config: self.config.clone(),
            scenes: self.scenes.clone(),
        };
        let mut out = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut out, SeventeenDigits);
        file.serialize(&mut ser)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, SynthError> {
        let value: serde_json::Value = serde_json::from_slice(bytes)?;
        if value.get("format").and_then(|f| f.as_str()) != Some(FORMAT_MAGIC) {
            return Err(SynthError::Format("missing or wrong format tag".into()));
        }
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version != u64::from(FORMAT_VERSION) {
            return Err(SynthError::Version(version as u32));
        }
        let file: DatasetFile = serde_json::from_value(value)?;
        let ds = Dataset { config: file.config, scenes: file.scenes };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<(), SynthError> {
        for (s, scene) in self.scenes.iter().enumerate() {
            let bad = scene.correspondences.iter().any(|&(i, j)| i >= scene.views[0].len() || j >= scene.views[1].len());
            if bad || scene.points.len() != scene.planes.len() || scene.corners.len() != scene.planes.len() {
                return Err(SynthError::Format(format!("scene {s} references missing observations")));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), SynthError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, SynthError> {
        Self::from_json(&std::fs::read(path)?)
    }
}
