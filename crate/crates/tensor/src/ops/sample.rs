//! Bilinear and trilinear sampling at constant coordinates. Integer
//! coordinates address sample centres; outside the grid the signal is zero.

use crate::array::DenseArray;
use crate::error::{invalid, Result};
use crate::graph::Var;
use crate::scalar::Scalar;

/// Per-point validity: false when any corner with nonzero weight fell
/// outside the grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleMask(pub Vec<bool>);

impl SampleMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }
    /// 1/0 column of shape `[P, 1]`.
    pub fn to_array<T: Scalar>(&self) -> DenseArray<T> {
        let v = self.0.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        DenseArray::new(&[self.0.len(), 1], v).expect("mask shape")
    }
}

/// Linear interpolation taps along one axis: up to two (index, weight)
/// pairs with positive weight, plus whether every such tap is in range.
fn taps(c: f64, n: usize) -> ([(usize, f64); 2], usize, bool) {
    let f = c.floor();
    let w1 = c - f;
    let i0 = f as i64;
    let mut out = [(0, 0.0); 2];
    let mut k = 0;
    let mut inside = true;
    for (i, w) in [(i0, 1.0 - w1), (i0 + 1, w1)] {
        if w <= 0.0 {
            continue;
        }
        if i < 0 || i >= n as i64 {
            inside = false;
            continue;
        }
        out[k] = (i as usize, w);
        k += 1;
    }
    (out, k, inside)
}

/// Corner lists for every point: flat spatial offset and weight.
struct Stencil {
    offsets: Vec<Vec<(usize, f64)>>,
    mask: SampleMask,
}

fn stencil(points: &[[f64; 3]], dims: [usize; 3]) -> Stencil {
    let [d, h, w] = dims;
    let mut offsets = Vec::with_capacity(points.len());
    let mut mask = Vec::with_capacity(points.len());
    for &[x, y, z] in points {
        let mut list = Vec::new();
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            offsets.push(list);
            mask.push(false);
            continue;
        }
        let (tx, nx, okx) = taps(x, w);
        let (ty, ny, oky) = taps(y, h);
        let (tz, nz, okz) = taps(z, d);
        for &(iz, wz) in &tz[..nz] {
            for &(iy, wy) in &ty[..ny] {
                for &(ix, wx) in &tx[..nx] {
                    list.push(((iz * h + iy) * w + ix, wz * wy * wx));
                }
            }
        }
        offsets.push(list);
        mask.push(okx && oky && okz);
    }
    Stencil { offsets, mask: SampleMask(mask) }
}

fn gather<T: Scalar>(data: &[T], channels: usize, plane: usize, st: &Stencil) -> Vec<T> {
    let mut out = vec![T::zero(); st.offsets.len() * channels];
    for (p, list) in st.offsets.iter().enumerate() {
        for &(off, wt) in list {
            let wt = T::lit(wt);
            for c in 0..channels {
                out[p * channels + c] += wt * data[c * plane + off];
            }
        }
    }
    out
}

fn sample_impl<'g, T: Scalar>(
    op: &'static str,
    x: Var<'g, T>,
    points: Vec<[f64; 3]>,
    dims: [usize; 3],
) -> Result<(Var<'g, T>, SampleMask)> {
    let v = x.value();
    let channels = v.shape()[0];
    let plane: usize = dims.iter().product();
    if points.is_empty() {
        return Err(invalid(op, "no sample points"));
    }
    let st = stencil(&points, dims);
    let out = gather(v.data(), channels, plane, &st);
    let value = DenseArray::new(&[points.len(), channels], out)?;
    let mask = st.mask.clone();
    let shape = v.shape().to_vec();
    let var = x.graph().custom(op, &[x], value, move |g| {
        let gd = g.data();
        let mut gi = vec![T::zero(); channels * plane];
        for (p, list) in st.offsets.iter().enumerate() {
            for &(off, wt) in list {
                let wt = T::lit(wt);
                for c in 0..channels {
                    gi[c * plane + off] += wt * gd[p * channels + c];
                }
            }
        }
        vec![Some(DenseArray::new(&shape, gi).expect("sample grad"))]
    })?;
    Ok((var, mask))
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Samples a `[C, H, W]` map at pixel coordinates `(x, y)`; returns `[P, C]`.
    pub fn bilinear_sample(self, coords: &[[f64; 2]]) -> Result<(Var<'g, T>, SampleMask)> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(invalid("bilinear-sample", format!("expected [C, H, W], got {s:?}")));
        }
        let pts = coords.iter().map(|&[x, y]| [x, y, 0.0]).collect();
        sample_impl("bilinear-sample", self, pts, [1, s[1], s[2]])
    }

    /// Samples a `[C, D, H, W]` volume at `(x, y, z)` with `z` a fractional
    /// index along D; returns `[P, C]`.
    pub fn trilinear_sample(self, coords: &[[f64; 3]]) -> Result<(Var<'g, T>, SampleMask)> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(invalid("trilinear-sample", format!("expected [C, D, H, W], got {s:?}")));
        }
        sample_impl("trilinear-sample", self, coords.to_vec(), [s[1], s[2], s[3]])
    }
}

/// Untracked bilinear sampling of a `[C, H, W]` array.
pub fn bilinear_sample_array<T: Scalar>(
    map: &DenseArray<T>,
    coords: &[[f64; 2]],
) -> Result<(DenseArray<T>, SampleMask)> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(invalid("bilinear-sample", format!("expected [C, H, W], got {s:?}")));
    }
    let pts: Vec<[f64; 3]> = coords.iter().map(|&[x, y]| [x, y, 0.0]).collect();
    let st = stencil(&pts, [1, s[1], s[2]]);
    let out = gather(map.data(), s[0], s[1] * s[2], &st);
    Ok((DenseArray::new(&[coords.len(), s[0]], out)?, st.mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    #[test]
    fn lattice_points_are_exact() {
        let map = DenseArray::from_fn(&[2, 3, 4], |i| i as f64 * 0.5);
        let (s, m) = bilinear_sample_array(&map, &[[3.0, 2.0], [0.0, 0.0]]).unwrap();
        assert_eq!(s.data(), &[map.at(&[0, 2, 3]), map.at(&[1, 2, 3]), 0.0, map.at(&[1, 0, 0])]);
        assert!(m.get(0) && m.get(1));
    }

    #[test]
    fn edge_straddling_point_is_invalid() {
        let map = DenseArray::<f64>::ones(&[1, 2, 2]);
        let (s, m) = bilinear_sample_array(&map, &[[1.5, 0.0], [-0.25, 1.0]]).unwrap();
        assert_eq!(s.data(), &[0.5, 0.75]);
        assert!(!m.get(0) && !m.get(1));
    }

    #[test]
    fn trilinear_midpoint_averages_corners() {
        let g = Graph::<f64>::new();
        let vol = g.leaf(DenseArray::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let (s, m) = vol.trilinear_sample(&[[0.5, 0.5, 0.5]]).unwrap();
        assert!((s.item() - 3.5).abs() < 1e-12);
        assert!(m.get(0));
        let grads = g.gradients(s.sum_all().unwrap()).unwrap();
        assert!(grads.get(vol).unwrap().data().iter().all(|&v| (v - 0.125).abs() < 1e-15));
    }
}
