use crate::array::{split_axis, DenseArray};
use crate::error::{invalid, mismatch, Result};
use crate::graph::Var;
use crate::scalar::Scalar;

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim || s.len() == 1 {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn sum(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        self.sum_scaled(axis, keepdim, T::one(), "sum")
    }

    pub fn mean(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(invalid("mean", format!("axis {axis} for shape {shape:?}")));
        }
        let n = T::lit(shape[axis] as f64);
        self.sum_scaled(axis, keepdim, T::one() / n, "mean")
    }

    fn sum_scaled(self, axis: usize, keepdim: bool, scale: T, op: &'static str) -> Result<Var<'g, T>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(invalid(op, format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        let d = v.data();
        for o in 0..outer {
            for e in 0..extent {
                let src = &d[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (a, &b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        if scale != T::one() {
            out.iter_mut().for_each(|x| *x *= scale);
        }
        let value = DenseArray::new(&reduced_shape(&shape, axis, keepdim), out)?;
        self.graph().custom(op, &[self], value, move |g| {
            let mut gi = vec![T::zero(); outer * extent * inner];
            let gd = g.data();
            for o in 0..outer {
                for e in 0..extent {
                    let dst = &mut gi[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                    for (a, &b) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                        *a = b * scale;
                    }
                }
            }
            vec![Some(DenseArray::new(&shape, gi).expect("sum grad"))]
        })
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum_all(self) -> Result<Var<'g, T>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let value = DenseArray::scalar(v.sum());
        self.graph().custom("sum", &[self], value, move |g| {
            vec![Some(DenseArray::full(&shape, g.item()))]
        })
    }

    pub fn mean_all(self) -> Result<Var<'g, T>> {
        let n = self.len() as f64;
        self.sum_all()?.mul_scalar(1.0 / n)
    }

    /// Maximum along `axis` (removed from the shape) with argmax indices.
    ///
    /// With a mask of the input's shape, entries where the mask is zero are
    /// ignored; a fully masked slice yields value 0 and index `usize::MAX`.
    pub fn max_axis(
        self,
        axis: usize,
        mask: Option<&DenseArray<T>>,
    ) -> Result<(Var<'g, T>, Vec<usize>)> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(invalid("max", format!("axis {axis} for shape {shape:?}")));
        }
        if let Some(m) = mask {
            if m.shape() != shape.as_slice() {
                return Err(mismatch("max", &shape, m.shape()));
            }
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let d = v.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut idx = vec![usize::MAX; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = T::neg_infinity();
                for e in 0..extent {
                    let s = (o * extent + e) * inner + i;
                    if mask.is_some_and(|m| m.data()[s] == T::zero()) {
                        continue;
                    }
                    if idx[o * inner + i] == usize::MAX || d[s] > best {
                        best = d[s];
                        idx[o * inner + i] = e;
                    }
                }
                if idx[o * inner + i] != usize::MAX {
                    out[o * inner + i] = best;
                }
            }
        }
        let value = DenseArray::new(&reduced_shape(&shape, axis, false), out)?;
        let indices = idx.clone();
        let var = self.graph().custom("max", &[self], value, move |g| {
            let mut gi = vec![T::zero(); outer * extent * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let e = idx[o * inner + i];
                    if e != usize::MAX {
                        gi[(o * extent + e) * inner + i] += g.data()[o * inner + i];
                    }
                }
            }
            vec![Some(DenseArray::new(&shape, gi).expect("max grad"))]
        })?;
        Ok((var, indices))
    }
}

#[cfg(test)]
mod tests {
    use crate::{DenseArray, Graph};

    #[test]
    fn axis_sums() {
        let g = Graph::<f64>::new();
        let a = g.constant(DenseArray::from_fn(&[2, 3], |i| i as f64));
        assert_eq!(a.sum(0, false).unwrap().value().data(), &[3.0, 5.0, 7.0]);
        assert_eq!(a.sum(1, true).unwrap().shape(), vec![2, 1]);
        assert_eq!(a.mean(1, false).unwrap().value().data(), &[1.0, 4.0]);
    }

    #[test]
    fn masked_max_skips_entries() {
        let g = Graph::<f64>::new();
        let a = g.constant(DenseArray::from_f64(&[2, 3], &[5.0, 1.0, 2.0, 3.0, 9.0, 4.0]).unwrap());
        let mask = DenseArray::from_f64(&[2, 3], &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let (m, idx) = a.max_axis(1, Some(&mask)).unwrap();
        assert_eq!(m.value().data(), &[2.0, 0.0]);
        assert_eq!(idx, vec![2, usize::MAX]);
    }
}
