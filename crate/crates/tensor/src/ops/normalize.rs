use crate::array::{split_axis, DenseArray};
use crate::error::{invalid, mismatch, Result};
use crate::graph::Var;
use crate::scalar::Scalar;

impl<'g, T: Scalar> Var<'g, T> {
    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        self.softmax_impl(axis, None)
    }

    /// Softmax over the entries whose mask is nonzero; masked entries are
    /// exactly 0 and a fully masked slice is all zeros.
    pub fn masked_softmax(self, axis: usize, mask: &DenseArray<T>) -> Result<Var<'g, T>> {
        self.softmax_impl(axis, Some(mask))
    }

    fn softmax_impl(self, axis: usize, mask: Option<&DenseArray<T>>) -> Result<Var<'g, T>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(invalid("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        if let Some(m) = mask {
            if m.shape() != shape.as_slice() {
                return Err(mismatch("softmax", &shape, m.shape()));
            }
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let d = v.data();
        let mut out = vec![T::zero(); d.len()];
        let on = |s: usize| mask.is_none_or(|m| m.data()[s] != T::zero());
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * extent + e) * inner + i;
                let mut mx = T::neg_infinity();
                for e in 0..extent {
                    if on(at(e)) && d[at(e)] > mx {
                        mx = d[at(e)];
                    }
                }
                if mx == T::neg_infinity() {
                    continue;
                }
                let mut z = T::zero();
                for e in 0..extent {
                    if on(at(e)) {
                        let ex = (d[at(e)] - mx).exp();
                        out[at(e)] = ex;
                        z += ex;
                    }
                }
                for e in 0..extent {
                    out[at(e)] /= z;
                }
            }
        }
        let value = DenseArray::new(&shape, out)?;
        let y = value.clone();
        self.graph().custom("softmax", &[self], value, move |g| {
            let (yd, gd) = (y.data(), g.data());
            let mut gi = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |e: usize| (o * extent + e) * inner + i;
                    let dot: T = (0..extent).map(|e| yd[at(e)] * gd[at(e)]).sum();
                    for e in 0..extent {
                        gi[at(e)] = yd[at(e)] * (gd[at(e)] - dot);
                    }
                }
            }
            vec![Some(DenseArray::new(y.shape(), gi).expect("softmax grad"))]
        })
    }

    /// Normalizes the last axis to zero mean and unit variance.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'g, T>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let n = *shape.last().ok_or_else(|| invalid("layer-norm", "rank 0"))?;
        let rows = v.len() / n;
        let eps = T::lit(eps);
        let nf = T::lit(n as f64);
        let mut out = vec![T::zero(); v.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let x = &v.data()[r * n..(r + 1) * n];
            let mean = x.iter().copied().sum::<T>() / nf;
            let var = x.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &a) in out[r * n..(r + 1) * n].iter_mut().zip(x) {
                *o = (a - mean) * is;
            }
        }
        let value = DenseArray::new(&shape, out)?;
        let y = value.clone();
        self.graph().custom("layer-norm", &[self], value, move |g| {
            let mut gi = vec![T::zero(); y.len()];
            for r in 0..rows {
                let yr = &y.data()[r * n..(r + 1) * n];
                let gr = &g.data()[r * n..(r + 1) * n];
                let mg = gr.iter().copied().sum::<T>() / nf;
                let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                for k in 0..n {
                    gi[r * n + k] = inv_std[r] * (gr[k] - mg - yr[k] * mgy);
                }
            }
            vec![Some(DenseArray::new(y.shape(), gi).expect("layer-norm grad"))]
        })
    }

    /// Cosine similarity along `axis` (removed). Pairs where either vector
    /// has norm below `eps` yield 0.
    pub fn cosine_similarity(self, other: Var<'g, T>, axis: usize, eps: f64) -> Result<Var<'g, T>> {
        let (av, bv) = (self.value(), other.value());
        if av.shape() != bv.shape() {
            return Err(mismatch("cosine-similarity", av.shape(), bv.shape()));
        }
        let shape = av.shape().to_vec();
        if axis >= shape.len() {
            return Err(invalid("cosine-similarity", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let eps = T::lit(eps);
        let m = outer * inner;
        let (mut dots, mut na, mut nb) = (vec![T::zero(); m], vec![T::zero(); m], vec![T::zero(); m]);
        let (ad, bd) = (av.data(), bv.data());
        for o in 0..outer {
            for e in 0..extent {
                for i in 0..inner {
                    let s = (o * extent + e) * inner + i;
                    let r = o * inner + i;
                    dots[r] += ad[s] * bd[s];
                    na[r] += ad[s] * ad[s];
                    nb[r] += bd[s] * bd[s];
                }
            }
        }
        na.iter_mut().for_each(|x| *x = x.sqrt());
        nb.iter_mut().for_each(|x| *x = x.sqrt());
        let cos: Vec<T> = (0..m)
            .map(|r| {
                if na[r] < eps || nb[r] < eps {
                    T::zero()
                } else {
                    dots[r] / (na[r] * nb[r])
                }
            })
            .collect();
        let mut out_shape = shape.clone();
        if out_shape.len() == 1 {
            out_shape[0] = 1;
        } else {
            out_shape.remove(axis);
        }
        let value = DenseArray::new(&out_shape, cos.clone())?;
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        self.graph().custom("cosine-similarity", &[self, other], value, move |g| {
            let (ad, bd) = (av.data(), bv.data());
            let mut ga = vec![T::zero(); ad.len()];
            let mut gb = vec![T::zero(); ad.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let r = o * inner + i;
                    if na[r] < eps || nb[r] < eps {
                        continue;
                    }
                    let gr = g.data()[r];
                    let inv = T::one() / (na[r] * nb[r]);
                    for e in 0..extent {
                        let s = (o * extent + e) * inner + i;
                        ga[s] = gr * (bd[s] * inv - cos[r] * ad[s] / (na[r] * na[r]));
                        gb[s] = gr * (ad[s] * inv - cos[r] * bd[s] / (nb[r] * nb[r]));
                    }
                }
            }
            vec![
                ra.then(|| DenseArray::new(av.shape(), ga).expect("cos grad")),
                rb.then(|| DenseArray::new(bv.shape(), gb).expect("cos grad")),
            ]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::{DenseArray, Graph};

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let g = Graph::<f64>::new();
        let x = g.constant(DenseArray::zeros(&[3]));
        let y = x.softmax(0).unwrap();
        for &p in y.value().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_single_valid_entry() {
        let g = Graph::<f64>::new();
        let x = g.constant(DenseArray::from_f64(&[3], &[0.3, -2.0, 5.0]).unwrap());
        let mask = DenseArray::from_f64(&[3], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(x.masked_softmax(0, &mask).unwrap().value().data(), &[0.0, 1.0, 0.0]);
        let none = DenseArray::zeros(&[3]);
        assert_eq!(x.masked_softmax(0, &none).unwrap().value().data(), &[0.0; 3]);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        let g = Graph::<f64>::new();
        let a = g.constant(DenseArray::zeros(&[2, 3]));
        let b = g.constant(DenseArray::ones(&[2, 3]));
        assert_eq!(a.cosine_similarity(b, 1, 1e-12).unwrap().value().data(), &[0.0, 0.0]);
        let c = b.cosine_similarity(b, 1, 1e-12).unwrap();
        assert!(c.value().data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }
}
