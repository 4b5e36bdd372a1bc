//! Pinhole cameras, projection, rays and plane-sweep warping.
//!
//! Extrinsics map world to camera coordinates (x right, y down, z forward).
//! Integer pixel coordinates address pixel centres. Depth always means the
//! camera-frame z coordinate; rays are parameterized by length `t`.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use ufo_tensor::{DenseArray, Result as TResult, Scalar, Var};

use crate::error::{ReconError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub k: Matrix3<f64>,
    pub extrinsic: Matrix4<f64>,
    pub depth_min: f64,
    pub depth_max: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        k: Matrix3<f64>,
        extrinsic: Matrix4<f64>,
        depth_min: f64,
        depth_max: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self { k, extrinsic, depth_min, depth_max, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.k;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(ReconError::Camera("intrinsics must be upper triangular with K[2][2] = 1".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(ReconError::Camera("focal lengths must be positive".into()));
        }
        let r = self.rotation();
        if (r * r.transpose() - Matrix3::identity()).abs().max() > 1e-6 || r.determinant() < 0.0 {
            return Err(ReconError::Camera("extrinsic rotation is not orthonormal".into()));
        }
        let bottom = self.extrinsic.row(3);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(ReconError::Camera("extrinsic bottom row must be [0 0 0 1]".into()));
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max) {
            return Err(ReconError::Camera(format!(
                "need 0 < depth_min < depth_max, got {} and {}",
                self.depth_min, self.depth_max
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(ReconError::Camera("image extent must be positive".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` resolves roll (image y
    /// points away from it).
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
        depth_min: f64,
        depth_max: f64,
    ) -> Result<Self> {
        let z = (target - eye).try_normalize(1e-12).ok_or_else(|| ReconError::Camera("eye equals target".into()))?;
        let x = z.cross(&up).try_normalize(1e-12).ok_or_else(|| ReconError::Camera("up is parallel to view".into()))?;
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -r * eye;
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let k = Matrix3::new(
            focal,
            0.0,
            (width as f64 - 1.0) / 2.0,
            0.0,
            focal,
            (height as f64 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self::new(k, e, depth_min, depth_max, width, height)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsic.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.extrinsic.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn center(&self) -> Vector3<f64> {
        -self.rotation().transpose() * self.translation()
    }

    /// Viewing direction (camera +z) in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation().row(2).transpose()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Pixel and depth of a world point (no validity test).
    pub fn project_point(&self, p: &Vector3<f64>) -> (Vector2<f64>, f64) {
        let pc = self.to_camera(p);
        let h = self.k * pc;
        (Vector2::new(h.x / h.z, h.y / h.z), pc.z)
    }

    /// Whether a pixel coordinate lies in the image rectangle
    /// `[-0.5, W - 0.5) x [-0.5, H - 0.5)`.
    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= -0.5 && px.y >= -0.5 && px.x < self.width as f64 - 0.5 && px.y < self.height as f64 - 0.5
    }

    pub fn project(&self, points: &[Vector3<f64>]) -> Projection {
        let mut out = Projection::default();
        for p in points {
            let (px, d) = self.project_point(p);
            let valid = d > 0.0 && px.x.is_finite() && px.y.is_finite() && self.contains(&px);
            out.pixels.push(px);
            out.depths.push(d);
            out.valid.push(valid);
        }
        out
    }

    pub fn back_project(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        let kinv = self.k_inv();
        let pc = kinv * Vector3::new(pixel.x, pixel.y, 1.0) * depth;
        self.rotation().transpose() * (pc - self.translation())
    }

    pub fn k_inv(&self) -> Matrix3<f64> {
        // K is upper triangular with positive diagonal, so always invertible.
        self.k.try_inverse().expect("validated intrinsics are invertible")
    }

    /// Unit world-space direction through a pixel.
    pub fn pixel_direction(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        let d = self.rotation().transpose() * (self.k_inv() * Vector3::new(pixel.x, pixel.y, 1.0));
        d.normalize()
    }

    pub fn generate_rays(&self, pixels: &[Vector2<f64>]) -> RayBatch {
        let origin = self.center();
        let axis = self.optical_axis();
        let mut rays = RayBatch::default();
        for px in pixels {
            let dir = self.pixel_direction(px);
            let cos = dir.dot(&axis);
            rays.origins.push(origin);
            rays.directions.push(dir);
            rays.pixels.push(*px);
            rays.near.push(self.depth_min / cos);
            rays.far.push(self.depth_max / cos);
        }
        rays
    }

    /// Same pose with intrinsics and extent scaled by `factor` (for pyramid
    /// levels produced by stride-2 convolutions: centre `i` of the coarse
    /// grid sits on centre `2i` of the fine grid).
    pub fn scaled(&self, factor: f64) -> Camera {
        let mut k = self.k;
        for c in 0..3 {
            k[(0, c)] *= factor;
            k[(1, c)] *= factor;
        }
        Camera {
            k,
            width: ((self.width as f64 * factor).round() as usize).max(1),
            height: ((self.height as f64 * factor).round() as usize).max(1),
            ..self.clone()
        }
    }

    /// Applies a rigid motion `m` (world to world) to the camera pose.
    pub fn transformed(&self, m: &Matrix4<f64>) -> Camera {
        let inv = m.try_inverse().expect("rigid motions are invertible");
        Camera { extrinsic: self.extrinsic * inv, ..self.clone() }
    }

    pub fn pixel_grid(&self) -> Vec<Vector2<f64>> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| Vector2::new(x as f64, y as f64)))
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Projection {
    pub pixels: Vec<Vector2<f64>>,
    pub depths: Vec<f64>,
    pub valid: Vec<bool>,
}

#[derive(Clone, Debug, Default)]
pub struct RayBatch {
    pub origins: Vec<Vector3<f64>>,
    pub directions: Vec<Vector3<f64>>,
    pub pixels: Vec<Vector2<f64>>,
    pub near: Vec<f64>,
    pub far: Vec<f64>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn point(&self, ray: usize, t: f64) -> Vector3<f64> {
        self.origins[ray] + self.directions[ray] * t
    }
}

/// Per-pixel depth hypotheses `start + d * interval`, `d < count`, over an
/// `h x w` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthHypotheses {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub start: Vec<f64>,
    pub interval: Vec<f64>,
}

impl DepthHypotheses {
    /// Same `count` depths spanning `[lo, hi]` at every pixel.
    pub fn uniform(count: usize, height: usize, width: usize, lo: f64, hi: f64) -> Self {
        let interval = if count > 1 { (hi - lo) / (count - 1) as f64 } else { 0.0 };
        Self {
            count,
            height,
            width,
            start: vec![lo; height * width],
            interval: vec![interval; height * width],
        }
    }

    pub fn depth(&self, d: usize, pixel: usize) -> f64 {
        self.start[pixel] + d as f64 * self.interval[pixel]
    }

    pub fn end(&self, pixel: usize) -> f64 {
        self.depth(self.count.saturating_sub(1), pixel)
    }

    /// Depths as a `[D, h, w]` array.
    pub fn to_array<T: Scalar>(&self) -> DenseArray<T> {
        let hw = self.height * self.width;
        DenseArray::from_fn(&[self.count, self.height, self.width], |i| T::lit(self.depth(i / hw, i % hw)))
    }
}

/// Source pixel coordinates of every (hypothesis, reference pixel) pair in
/// row-major `[D, h, w]` order, with validity (positive source depth).
/// Invalid entries carry NaN coordinates so samplers treat them as outside.
pub fn warp_coordinates(src: &Camera, reference: &Camera, hyps: &DepthHypotheses) -> (Vec<[f64; 2]>, Vec<bool>) {
    let (h, w) = (hyps.height, hyps.width);
    let kinv = reference.k_inv();
    let r_ref_t = reference.rotation().transpose();
    let t_ref = reference.translation();
    // World-to-source composed with reference-to-world.
    let r = src.rotation() * r_ref_t;
    let t = src.translation() - r * t_ref;
    let rays: Vec<Vector3<f64>> = (0..h * w)
        .map(|p| kinv * Vector3::new((p % w) as f64, (p / w) as f64, 1.0))
        .collect();
    let mut coords = Vec::with_capacity(hyps.count * h * w);
    let mut valid = Vec::with_capacity(hyps.count * h * w);
    for d in 0..hyps.count {
        for (p, ray) in rays.iter().enumerate() {
            let xs = r * (ray * hyps.depth(d, p)) + t;
            if xs.z <= 1e-9 {
                coords.push([f64::NAN, f64::NAN]);
                valid.push(false);
                continue;
            }
            let q = src.k * xs;
            coords.push([q.x / q.z, q.y / q.z]);
            valid.push(true);
        }
    }
    (coords, valid)
}

/// Warps a `[C, h, w]` source feature map into the reference view at every
/// depth hypothesis: returns `[D, C, h, w]` and a `[D * h * w]` validity mask.
/// Differentiable with respect to the source features.
pub fn homography_warp<'g, T: Scalar>(
    src_feat: Var<'g, T>,
    src_cam: &Camera,
    ref_cam: &Camera,
    hyps: &DepthHypotheses,
) -> TResult<(Var<'g, T>, Vec<bool>)> {
    let c = src_feat.shape()[0];
    let (coords, front) = warp_coordinates(src_cam, ref_cam, hyps);
    let (sampled, mask) = src_feat.bilinear_sample(&coords)?;
    let valid: Vec<bool> = front.iter().zip(&mask.0).map(|(&a, &b)| a && b).collect();
    let warped = sampled
        .reshape(&[hyps.count, hyps.height * hyps.width, c])?
        .permute(&[0, 2, 1])?
        .reshape(&[hyps.count, c, hyps.height, hyps.width])?;
    Ok((warped, valid))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn test_camera(eye: Vector3<f64>) -> Camera {
        Camera::look_at(eye, Vector3::zeros(), Vector3::z(), 40.0, 32, 24, 1.0, 10.0).unwrap()
    }

    #[test]
    fn optical_axis_point_projects_to_principal_point() {
        let cam = test_camera(Vector3::new(4.0, 1.0, 0.5));
        let p = cam.center() + cam.optical_axis() * 3.0;
        let (px, d) = cam.project_point(&p);
        assert!((px.x - cam.k[(0, 2)]).abs() < 1e-9 && (px.y - cam.k[(1, 2)]).abs() < 1e-9);
        assert!((d - 3.0).abs() < 1e-12);
        assert!(!cam.project(&[cam.center()]).valid[0]);
    }

    #[test]
    fn principal_ray_is_optical_axis() {
        let cam = test_camera(Vector3::new(-3.0, 2.0, 1.0));
        let rays = cam.generate_rays(&[Vector2::new(cam.k[(0, 2)], cam.k[(1, 2)]), Vector2::new(0.0, 0.0)]);
        assert!((rays.directions[0] - cam.optical_axis()).norm() < 1e-12);
        assert!(rays.directions[0].cross(&rays.directions[1]).norm() > 1e-3);
        assert!((rays.near[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_rotation() {
        let mut cam = test_camera(Vector3::new(5.0, 0.0, 0.0));
        cam.extrinsic[(0, 0)] += 0.05;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn scaled_camera_halves_grid() {
        let cam = test_camera(Vector3::new(5.0, 0.0, 0.0)).scaled(0.5);
        assert_eq!((cam.width, cam.height), (16, 12));
        assert_eq!(cam.k[(0, 0)], 20.0);
    }
}
