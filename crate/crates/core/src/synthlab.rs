//! Synthetic scenes with analytic ground truth, rig selection and depth
//! evaluation.

use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, ReconError, Result};
use crate::formats::{read_camera, read_pfm, read_pnm, read_tracks, write_camera, write_pfm, write_pnm, write_tracks, ByteImage, FloatMap};
use crate::geometry::Camera;
use crate::vcscore::{rank_combinations, GaussianParams, RankedCombination, ScoreMatrix, Track, TrackSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half_extents: [f64; 3] },
    /// Square patch facing `normal`.
    Plane { center: [f64; 3], normal: [f64; 3], half_size: f64 },
}

impl Primitive {
    pub fn center(&self) -> Vector3<f64> {
        match self {
            Primitive::Sphere { center, .. } | Primitive::Box { center, .. } | Primitive::Plane { center, .. } => {
                Vector3::from(*center)
            }
        }
    }

    pub fn bounding_radius(&self) -> f64 {
        match self {
            Primitive::Sphere { radius, .. } => *radius,
            Primitive::Box { half_extents, .. } => Vector3::from(*half_extents).norm(),
            Primitive::Plane { half_size, .. } => half_size * std::f64::consts::SQRT_2,
        }
    }

    fn plane_basis(normal: &[f64; 3]) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let n = Vector3::from(*normal).normalize();
        let helper = if n.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
        let u = helper.cross(&n).normalize();
        (n, u, n.cross(&u))
    }

    /// Signed distance (negative inside; signed plane distance for planes).
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => (p - Vector3::from(*center)).norm() - radius,
            Primitive::Box { center, half_extents } => {
                let q = (p - Vector3::from(*center)).abs() - Vector3::from(*half_extents);
                q.map(|v| v.max(0.0)).norm() + q.max().min(0.0)
            }
            Primitive::Plane { center, normal, .. } => {
                (p - Vector3::from(*center)).dot(&Vector3::from(*normal).normalize())
            }
        }
    }

    /// First hit distance and outward normal.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match self {
            Primitive::Sphere { center, radius } => {
                let oc = o - Vector3::from(*center);
                let b = oc.dot(d);
                let disc = b * b - (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > 1e-9 { -b - sq } else { -b + sq };
                (t > 1e-9).then(|| (t, (o + d * t - Vector3::from(*center)) / *radius))
            }
            Primitive::Box { center, half_extents } => {
                let c = Vector3::from(*center);
                let h = Vector3::from(*half_extents);
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis0 = 0;
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if (o[a] - c[a]).abs() > h[a] {
                            return None;
                        }
                        continue;
                    }
                    let ta = (c[a] - h[a] - o[a]) / d[a];
                    let tb = (c[a] + h[a] - o[a]) / d[a];
                    let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
                    if lo > t0 {
                        t0 = lo;
                        axis0 = a;
                    }
                    t1 = t1.min(hi);
                }
                if t0 > t1 || t0 <= 1e-9 {
                    return None;
                }
                let mut n = Vector3::zeros();
                n[axis0] = -d[axis0].signum();
                Some((t0, n))
            }
            Primitive::Plane { center, normal, half_size } => {
                let (n, u, v) = Self::plane_basis(normal);
                let denom = d.dot(&n);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let c = Vector3::from(*center);
                let t = (c - o).dot(&n) / denom;
                let q = o + d * t - c;
                (t > 1e-9 && q.dot(&u).abs() <= *half_size && q.dot(&v).abs() <= *half_size)
                    .then(|| (t, if denom < 0.0 { n } else { -n }))
            }
        }
    }

    /// Uniform surface sample.
    pub fn sample_surface(&self, rng: &mut impl Rng) -> Vector3<f64> {
        match self {
            Primitive::Sphere { center, radius } => {
                let z: f64 = rng.random_range(-1.0..1.0);
                let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                Vector3::from(*center) + Vector3::new(r * phi.cos(), r * phi.sin(), z) * *radius
            }
            Primitive::Box { center, half_extents } => {
                let h = Vector3::from(*half_extents);
                let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut axis = 2;
                for (a, &ar) in areas.iter().enumerate() {
                    if pick < ar {
                        axis = a;
                        break;
                    }
                    pick -= ar;
                }
                let mut p = Vector3::new(
                    rng.random_range(-h.x..=h.x),
                    rng.random_range(-h.y..=h.y),
                    rng.random_range(-h.z..=h.z),
                );
                p[axis] = if rng.random::<bool>() { h[axis] } else { -h[axis] };
                Vector3::from(*center) + p
            }
            Primitive::Plane { center, normal, half_size } => {
                let (_, u, v) = Self::plane_basis(normal);
                let a = rng.random_range(-*half_size..=*half_size);
                let b = rng.random_range(-*half_size..=*half_size);
                Vector3::from(*center) + u * a + v * b
            }
        }
    }

    /// Two-dimensional surface coordinates in units of the primitive size.
    fn surface_uv(&self, p: &Vector3<f64>) -> (f64, f64) {
        match self {
            Primitive::Sphere { center, radius } => {
                let q = (p - Vector3::from(*center)) / *radius;
                let phi = q.y.atan2(q.x) / std::f64::consts::TAU + 0.5;
                let theta = q.z.clamp(-1.0, 1.0).acos() / std::f64::consts::PI;
                (phi, theta)
            }
            Primitive::Box { center, half_extents } => {
                let s = 2.0 * Vector3::from(*half_extents).max();
                let q = (p - Vector3::from(*center)) / s;
                (q.x + q.z, q.y + q.z)
            }
            Primitive::Plane { center, normal, half_size } => {
                let (_, u, v) = Self::plane_basis(normal);
                let q = (p - Vector3::from(*center)) / (2.0 * half_size);
                (q.dot(&u), q.dot(&v))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    Checker,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Texture {
    pub kind: TextureKind,
    /// Cycles across the primitive.
    pub scale: f64,
    pub palette: Vec<[f64; 3]>,
}

impl Default for Texture {
    fn default() -> Self {
        Self { kind: TextureKind::Checker, scale: 8.0, palette: vec![[0.9, 0.75, 0.3], [0.15, 0.3, 0.7]] }
    }
}

fn hash3(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [x, y, z] {
        h ^= v as u64;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(p: Vector3<f64>, seed: u64) -> f64 {
    let f = p.map(f64::floor);
    let r = p - f;
    let s = r.map(|v| v * v * (3.0 - 2.0 * v));
    let (ix, iy, iz) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { s.x } else { 1.0 - s.x })
                    * (if dy == 1 { s.y } else { 1.0 - s.y })
                    * (if dz == 1 { s.z } else { 1.0 - s.z });
                acc += w * hash3(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}

impl Texture {
    pub fn albedo(&self, prim: &Primitive, p: &Vector3<f64>, seed: u64) -> Vector3<f64> {
        let pal: Vec<Vector3<f64>> = self.palette.iter().map(|c| Vector3::from(*c)).collect();
        let a = pal.first().copied().unwrap_or(Vector3::repeat(0.8));
        let b = pal.get(1).copied().unwrap_or(Vector3::repeat(0.2));
        match self.kind {
            TextureKind::Checker => {
                let (u, v) = prim.surface_uv(p);
                let parity = ((u * self.scale).floor() + (v * self.scale).floor()) as i64;
                if parity.rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
            TextureKind::Noise => {
                let q = (p - prim.center()) / prim.bounding_radius() * self.scale;
                let t = value_noise(q, seed);
                a * (1.0 - t) + b * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub count: usize,
    pub radius: f64,
    /// Degrees above the horizontal plane through the primitive centre.
    pub elevation: f64,
    /// Azimuths in degrees; evenly spaced when absent.
    pub angles: Option<Vec<f64>>,
    /// Horizontal field of view in degrees.
    pub fov: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self { count: 8, radius: 4.0, elevation: 20.0, angles: None, fov: 40.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub primitive: Primitive,
    pub texture: Texture,
    pub rig: RigSpec,
    pub width: usize,
    pub height: usize,
    /// Surface samples tested for visibility when building tracks.
    pub track_samples: usize,
    pub light: [f64; 3],
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            primitive: Primitive::Sphere { center: [0.0; 3], radius: 1.0 },
            texture: Texture::default(),
            rig: RigSpec::default(),
            width: 64,
            height: 64,
            track_samples: 400,
            light: [0.4, 0.3, 1.0],
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.rig.count == 0 {
            return Err(ReconError::Config("image extent and camera count must be positive".into()));
        }
        if let Some(a) = &self.rig.angles {
            if a.len() != self.rig.count {
                return Err(ReconError::Config(format!("{} angles for {} cameras", a.len(), self.rig.count)));
            }
        }
        if !(self.rig.fov > 0.0 && self.rig.fov < 180.0) {
            return Err(ReconError::Config(format!("field of view {} out of range", self.rig.fov)));
        }
        Ok(())
    }

    pub fn azimuths(&self) -> Vec<f64> {
        self.rig
            .angles
            .clone()
            .unwrap_or_else(|| (0..self.rig.count).map(|i| 360.0 * i as f64 / self.rig.count as f64).collect())
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.validate()?;
        let c = self.primitive.center();
        let rb = self.primitive.bounding_radius();
        let r = self.rig.radius;
        let el = self.rig.elevation.to_radians();
        let focal = self.width as f64 / 2.0 / (self.rig.fov.to_radians() / 2.0).tan();
        let dmin = (r - 1.5 * rb).max(0.1 * r);
        let dmax = r + 1.5 * rb;
        self.azimuths()
            .iter()
            .map(|a| {
                let a = a.to_radians();
                let eye = c + Vector3::new(el.cos() * a.cos(), el.cos() * a.sin(), el.sin()) * r;
                if self.primitive.sdf(&eye) <= 0.0 && !matches!(self.primitive, Primitive::Plane { .. }) {
                    return Err(ReconError::Config("camera lies inside the primitive".into()));
                }
                Camera::look_at(eye, c, Vector3::z(), focal, self.width, self.height, dmin, dmax)
            })
            .collect()
    }
}

/// Rendered scene with exact depth and tracks.
#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub cams: Vec<Camera>,
    pub images: Vec<ByteImage>,
    /// Camera-axis depth, 0 where the ray misses.
    pub depths: Vec<FloatMap>,
    pub tracks: TrackSet,
}

fn trace(spec: &SceneSpec, cam: &Camera) -> (ByteImage, FloatMap) {
    let (w, h) = (cam.width, cam.height);
    let light = Vector3::from(spec.light).normalize();
    let origin = cam.center();
    let axis = cam.optical_axis();
    let pixels: Vec<(Vector3<f64>, f32)> = (0..w * h)
        .into_par_iter()
        .map(|p| {
            let dir = cam.pixel_direction(&Vector2::new((p % w) as f64, (p / w) as f64));
            match spec.primitive.intersect(&origin, &dir) {
                Some((t, n)) => {
                    let x = origin + dir * t;
                    let shade = 0.3 + 0.7 * n.dot(&light).max(0.0);
                    let c = spec.texture.albedo(&spec.primitive, &x, spec.seed) * shade;
                    (c, (t * dir.dot(&axis)) as f32)
                }
                None => (Vector3::zeros(), 0.0),
            }
        })
        .collect();
    let planar: Vec<f32> = (0..3).flat_map(|c| pixels.iter().map(move |(col, _)| col[c] as f32)).collect();
    let image = ByteImage::from_planar(&planar, 3, h, w);
    let depth = FloatMap { width: w, height: h, data: pixels.iter().map(|p| p.1).collect() };
    (image, depth)
}

/// Whether `p` on the surface is unoccluded and inside the image of `cam`.
pub fn visible(prim: &Primitive, cam: &Camera, p: &Vector3<f64>) -> bool {
    let (px, z) = cam.project_point(p);
    if !(z > 0.0) || !cam.contains(&px) {
        return false;
    }
    let o = cam.center();
    let dist = (p - o).norm();
    match prim.intersect(&o, &((p - o) / dist)) {
        Some((t, _)) => (t - dist).abs() <= 1e-6 * dist.max(1.0),
        None => false,
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    let cams = spec.cameras()?;
    let (images, depths): (Vec<_>, Vec<_>) = cams.iter().map(|c| trace(spec, c)).unzip();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let samples: Vec<Vector3<f64>> = (0..spec.track_samples).map(|_| spec.primitive.sample_surface(&mut rng)).collect();
    let tracks = samples
        .par_iter()
        .filter_map(|p| {
            let views: Vec<usize> = (0..cams.len()).filter(|&i| visible(&spec.primitive, &cams[i], p)).collect();
            (views.len() >= 2).then(|| Track { position: *p, views })
        })
        .collect();
    Ok(Scene { spec: spec.clone(), cams, images, depths, tracks: TrackSet { tracks } })
}

impl Scene {
    pub fn views(&self) -> usize {
        self.cams.len()
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["cams", "images", "depths"] {
            fs::create_dir_all(dir.join(sub)).map_err(io_err(dir.join(sub)))?;
        }
        for (i, ((cam, img), depth)) in self.cams.iter().zip(&self.images).zip(&self.depths).enumerate() {
            write_camera(dir.join(format!("cams/{i:04}_cam.txt")), cam)?;
            write_pnm(dir.join(format!("images/{i:04}.ppm")), img)?;
            write_pfm(dir.join(format!("depths/{i:04}.pfm")), depth)?;
        }
        write_tracks(dir.join("tracks.txt"), &self.tracks)?;
        let spec = serde_json::to_string_pretty(&self.spec)?;
        fs::write(dir.join("spec.json"), spec).map_err(io_err(dir.join("spec.json")))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec_path = dir.join("spec.json");
        let text = fs::read_to_string(&spec_path).map_err(io_err(&spec_path))?;
        let spec: SceneSpec = serde_json::from_str(&text)?;
        let mut cams = Vec::new();
        let mut images = Vec::new();
        let mut depths = Vec::new();
        for i in 0.. {
            let img_path = dir.join(format!("images/{i:04}.ppm"));
            if !img_path.exists() {
                break;
            }
            let img = read_pnm(&img_path)?;
            cams.push(read_camera(dir.join(format!("cams/{i:04}_cam.txt")), img.width, img.height)?);
            depths.push(read_pfm(dir.join(format!("depths/{i:04}.pfm")))?);
            images.push(img);
        }
        if cams.is_empty() {
            return Err(ReconError::Invalid(format!("{} contains no views", dir.display())));
        }
        let tracks = read_tracks(dir.join("tracks.txt"))?;
        tracks.validate(cams.len())?;
        Ok(Self { spec, cams, images, depths, tracks })
    }

    /// Images of `views` as planar `[N, 3, H, W]` values in `[0, 1]`.
    pub fn image_batch(&self, views: &[usize]) -> Vec<f32> {
        views.iter().flat_map(|&v| self.images[v].to_planar()).collect()
    }

    pub fn score_matrix(&self, g: &GaussianParams) -> Result<ScoreMatrix> {
        ScoreMatrix::new(&self.cams, &self.tracks, g)
    }
}

/// Top- and bottom-ranked `k`-view combinations.
pub fn make_rigs(cams: &[Camera], tracks: &TrackSet, k: usize, g: &GaussianParams) -> Result<(RankedCombination, RankedCombination)> {
    let matrix = ScoreMatrix::new(cams, tracks, g)?;
    let views: Vec<usize> = (0..cams.len()).collect();
    let ranking = rank_combinations(&views, k, &matrix)?;
    Ok((ranking.best().clone(), ranking.worst().clone()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub mae: f64,
    /// Fractions of valid pixels within 1%, 2% and 5% of the depth range.
    pub inliers: [f64; 3],
    /// `None` when either cloud is empty.
    pub chamfer: Option<f64>,
    pub valid_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    pub view: usize,
    #[serde(flatten)]
    pub metrics: DepthMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub inliers: [f64; 3],
    pub chamfer: Option<f64>,
    pub per_view: Vec<ViewReport>,
}

pub const INLIER_FRACTIONS: [f64; 3] = [0.01, 0.02, 0.05];

fn nearest_mean(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    let total: f64 = a
        .par_iter()
        .map(|p| b.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
        .sum();
    total / a.len() as f64
}

/// Mean of the two directed mean nearest-neighbour distances.
pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    Some(0.5 * (nearest_mean(a, b) + nearest_mean(b, a)))
}

/// World points of the pixels whose depth is positive and not masked out.
pub fn back_project_depth(cam: &Camera, depth: &[f32], keep: Option<&[bool]>) -> Vec<Vector3<f64>> {
    depth
        .iter()
        .enumerate()
        .filter(|&(p, &d)| d > 0.0 && keep.is_none_or(|k| k[p]))
        .map(|(p, &d)| cam.back_project(&Vector2::new((p % cam.width) as f64, (p / cam.width) as f64), d as f64))
        .collect()
}

/// Depth metrics for one view. `pred_hit` masks predicted pixels used for
/// the Chamfer cloud; errors are measured on every GT-valid pixel.
pub fn evaluate_view(cam: &Camera, pred: &[f32], pred_hit: Option<&[bool]>, gt: &[f32]) -> Result<DepthMetrics> {
    if pred.len() != gt.len() {
        return Err(ReconError::Invalid(format!("{} predicted and {} GT pixels", pred.len(), gt.len())));
    }
    let range = cam.depth_max - cam.depth_min;
    let errs: Vec<f64> = gt.iter().zip(pred).filter(|(&g, _)| g > 0.0).map(|(&g, &p)| (p as f64 - g as f64).abs()).collect();
    if errs.is_empty() {
        return Err(ReconError::Invalid("no valid ground-truth pixels".into()));
    }
    let n = errs.len() as f64;
    let inliers = INLIER_FRACTIONS.map(|f| errs.iter().filter(|&&e| e < f * range).count() as f64 / n);
    let pc = back_project_depth(cam, pred, pred_hit);
    let gc = back_project_depth(cam, gt, None);
    Ok(DepthMetrics { mae: errs.iter().sum::<f64>() / n, inliers, chamfer: chamfer(&pc, &gc), valid_pixels: errs.len() })
}

/// Pixel-weighted aggregate over views; Chamfer is the mean over views that
/// have one.
pub fn aggregate(per_view: Vec<ViewReport>) -> Result<EvalReport> {
    let total: usize = per_view.iter().map(|v| v.metrics.valid_pixels).sum();
    if total == 0 {
        return Err(ReconError::Invalid("no valid ground-truth pixels".into()));
    }
    let wsum = |f: &dyn Fn(&DepthMetrics) -> f64| {
        per_view.iter().map(|v| f(&v.metrics) * v.metrics.valid_pixels as f64).sum::<f64>() / total as f64
    };
    let mae = wsum(&|m| m.mae);
    let inliers = [0, 1, 2].map(|i| wsum(&|m| m.inliers[i]));
    let ch: Vec<f64> = per_view.iter().filter_map(|v| v.metrics.chamfer).collect();
    let chamfer = (!ch.is_empty()).then(|| ch.iter().sum::<f64>() / ch.len() as f64);
    Ok(EvalReport { mae, inliers, chamfer, per_view })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec { width: 32, height: 32, track_samples: 100, ..Default::default() }
    }

    #[test]
    fn sphere_centre_depth() {
        let scene = generate_scene(&small_spec()).unwrap();
        let cam = &scene.cams[0];
        let (px, _) = cam.project_point(&Vector3::zeros());
        assert!((px.x - 15.5).abs() < 1e-9 && (px.y - 15.5).abs() < 1e-9);
        // Pixel (16, 16) is half a pixel off-axis; its depth is within 1e-3 of r - R.
        let d = scene.depths[0].data[16 * 32 + 16] as f64;
        assert!((d - 3.0).abs() < 2e-3, "{d}");
    }

    #[test]
    fn tracks_reproject_into_listed_views() {
        let scene = generate_scene(&small_spec()).unwrap();
        assert!(!scene.tracks.tracks.is_empty());
        for t in &scene.tracks.tracks {
            for &v in &t.views {
                let (px, z) = scene.cams[v].project_point(&t.position);
                assert!(z > 0.0 && scene.cams[v].contains(&px));
            }
        }
    }

    #[test]
    fn depth_back_projects_onto_surface() {
        let scene = generate_scene(&small_spec()).unwrap();
        let pts = back_project_depth(&scene.cams[2], &scene.depths[2].data, None);
        assert!(pts.iter().all(|p| (p.norm() - 1.0).abs() < 1e-5));
    }

    #[test]
    fn ring_rigs_adjacent_vs_spread() {
        let scene = generate_scene(&SceneSpec { track_samples: 600, ..small_spec() }).unwrap();
        let (fav, unfav) = make_rigs(&scene.cams, &scene.tracks, 3, &GaussianParams::default()).unwrap();
        assert!(fav.score > unfav.score);
        let gaps = |v: &[usize]| {
            let mut g = vec![v[1] - v[0], v[2] - v[1], 8 - v[2] + v[0]];
            g.sort_unstable();
            g
        };
        assert_eq!(gaps(&fav.views), vec![1, 1, 6]);
        assert_eq!(gaps(&unfav.views), vec![2, 3, 3]);
    }

    #[test]
    fn exact_prediction_scores_perfectly() {
        let scene = generate_scene(&small_spec()).unwrap();
        let d = &scene.depths[1].data;
        let m = evaluate_view(&scene.cams[1], d, None, d).unwrap();
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.inliers, [1.0; 3]);
        assert_eq!(m.chamfer, Some(0.0));
        let biased: Vec<f32> = d.iter().map(|&x| if x > 0.0 { x + 0.25 } else { 0.0 }).collect();
        assert!((evaluate_view(&scene.cams[1], &biased, None, d).unwrap().mae - 0.25).abs() < 1e-6);
    }

    #[test]
    fn box_and_plane_render() {
        for prim in [
            Primitive::Box { center: [0.0; 3], half_extents: [0.6, 0.5, 0.4] },
            Primitive::Plane { center: [0.0; 3], normal: [1.0, 0.0, 0.2], half_size: 1.0 },
        ] {
            let spec = SceneSpec { primitive: prim.clone(), rig: RigSpec { count: 3, angles: Some(vec![-10.0, 0.0, 10.0]), ..Default::default() }, ..small_spec() };
            let scene = generate_scene(&spec).unwrap();
            for (cam, depth) in scene.cams.iter().zip(&scene.depths) {
                let pts = back_project_depth(cam, &depth.data, None);
                assert!(!pts.is_empty());
                assert!(pts.iter().all(|p| prim.sdf(p).abs() < 1e-5));
            }
        }
    }
}
