//! Group-wise cosine similarity of matching features across view pairs.

use nalgebra::Vector3;
use ufo_tensor::{sum_n, DenseArray, Scalar, Var};

use crate::error::{ReconError, Result};
use crate::geometry::Camera;

pub const DEFAULT_GROUPS: usize = 4;
const NORM_EPS: f64 = 1e-12;

/// Pixel coordinates of `points` in `cam`, NaN where the point is behind the
/// camera or outside the image.
pub fn projected_coords(cam: &Camera, points: &[Vector3<f64>]) -> Vec<[f64; 2]> {
    points
        .iter()
        .map(|p| {
            let (px, z) = cam.project_point(p);
            if z > 0.0 && cam.contains(&px) {
                [px.x, px.y]
            } else {
                [f64::NAN; 2]
            }
        })
        .collect()
}

/// Mean over valid view pairs of per-group cosine similarity between the
/// features sampled at each point's projections. Returns `[P, groups]` and
/// a mask of points with at least one valid pair.
///
/// `feats[v]` is `[C, h, w]` with `cams[v]` scaled to that grid.
pub fn encode_similarity<'g, T: Scalar>(
    feats: &[Var<'g, T>],
    cams: &[Camera],
    points: &[Vector3<f64>],
    groups: usize,
) -> Result<(Var<'g, T>, Vec<bool>)> {
    if feats.len() < 2 || feats.len() != cams.len() {
        return Err(ReconError::Invalid("similarity needs at least two views with cameras".into()));
    }
    let c = feats[0].shape()[0];
    if groups == 0 || c % groups != 0 {
        return Err(ReconError::Config(format!("{groups} groups do not divide {c} channels")));
    }
    let p = points.len();
    let mut samples = Vec::with_capacity(feats.len());
    for (f, cam) in feats.iter().zip(cams) {
        let (s, m) = f.bilinear_sample(&projected_coords(cam, points))?;
        samples.push((s.reshape(&[p, groups, c / groups])?, m));
    }
    let mut count = vec![0usize; p];
    let mut terms = Vec::new();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let (mi, mj) = (&samples[i].1, &samples[j].1);
            let both: Vec<bool> = (0..p).map(|k| mi.get(k) && mj.get(k)).collect();
            both.iter().zip(count.iter_mut()).for_each(|(&b, n)| *n += usize::from(b));
            let mask = DenseArray::from_fn(&[p, 1], |k| if both[k] { T::one() } else { T::zero() });
            terms.push(samples[i].0.cosine_similarity(samples[j].0, 2, NORM_EPS)?.mul_const(&mask)?);
        }
    }
    let inv = DenseArray::from_fn(&[p, 1], |k| if count[k] > 0 { T::lit(1.0 / count[k] as f64) } else { T::zero() });
    let out = sum_n(&terms)?.mul_const(&inv)?;
    Ok((out, count.iter().map(|&n| n > 0).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ufo_tensor::Graph;

    fn cam(x: f64) -> Camera {
        Camera::look_at(Vector3::new(x, 0.0, -4.0), Vector3::new(x, 0.0, 0.0), -Vector3::y(), 8.0, 8, 8, 2.0, 6.0).unwrap()
    }

    #[test]
    fn identical_features_give_one_per_group() {
        let g = Graph::<f64>::inference();
        let f = DenseArray::from_fn(&[8, 8, 8], |i| 1.0 + (i % 13) as f64);
        let feats = vec![g.constant(f.clone()), g.constant(f.clone()), g.constant(f)];
        let cams = vec![cam(0.0), cam(0.0), cam(0.0)];
        let (s, m) = encode_similarity(&feats, &cams, &[Vector3::new(0.1, -0.2, 0.0)], 4).unwrap();
        assert_eq!(s.shape(), vec![1, 4]);
        assert!(m[0]);
        assert!(s.value().data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn orthogonal_groups_and_misses() {
        let g = Graph::<f64>::inference();
        let a = DenseArray::from_fn(&[4, 8, 8], |i| if (i / 64) % 2 == 0 { 1.0 } else { 0.0 });
        let b = DenseArray::from_fn(&[4, 8, 8], |i| if (i / 64) % 2 == 1 { 1.0 } else { 0.0 });
        let feats = vec![g.constant(a), g.constant(b)];
        let pts = [Vector3::zeros(), Vector3::new(0.0, 0.0, -9.0)];
        let (s, m) = encode_similarity(&feats, &[cam(0.0), cam(0.1)], &pts, 2).unwrap();
        assert!(s.value().data().iter().all(|&x| x == 0.0));
        assert_eq!(m, vec![true, false]);
    }
}
