use crate::array::{broadcast_shape, split_axis, DenseArray};
use crate::error::{invalid, mismatch, Result};
use crate::graph::Var;
use crate::scalar::Scalar;

impl<'g, T: Scalar> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        let old = v.shape().to_vec();
        let value = (*v).clone().reshape(shape)?;
        self.graph().custom("reshape", &[self], value, move |g| {
            vec![Some(g.clone().reshape(&old).expect("reshape grad"))]
        })
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        if broadcast_shape(v.shape(), shape).as_deref() != Some(shape) {
            return Err(mismatch("broadcast", v.shape(), shape));
        }
        let zeros = self.graph().constant(DenseArray::zeros(shape));
        self.add(zeros)
    }

    /// Contiguous range `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'g, T>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            out.extend_from_slice(&v.data()[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = DenseArray::new(&out_shape, out)?;
        self.graph().custom("slice", &[self], value, move |g| {
            let mut full = DenseArray::zeros(&shape);
            let fd = full.data_mut();
            for o in 0..outer {
                let base = o * extent * inner;
                fd[base + start * inner..base + end * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(full)]
        })
    }

    /// Selects entries along `axis` by index (repeats allowed).
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axis >= shape.len() || indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(invalid("index_select", format!("bad indices for axis {axis} of {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let k = indices.len();
        let mut out = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * extent + i) * inner;
                out.extend_from_slice(&v.data()[s..s + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = k;
        let value = DenseArray::new(&out_shape, out)?;
        let indices = indices.to_vec();
        self.graph().custom("index_select", &[self], value, move |g| {
            let mut full = DenseArray::zeros(&shape);
            let fd = full.data_mut();
            let gd = g.data();
            for o in 0..outer {
                for (j, &i) in indices.iter().enumerate() {
                    let s = (o * extent + i) * inner;
                    let d = (o * k + j) * inner;
                    for t in 0..inner {
                        fd[s + t] += gd[d + t];
                    }
                }
            }
            vec![Some(full)]
        })
    }

    /// Nearest-neighbour upsampling of the last two axes by `factor`.
    pub fn upsample_nearest2d(self, factor: usize) -> Result<Var<'g, T>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let r = shape.len();
        if r < 2 || factor == 0 {
            return Err(invalid("upsample", format!("shape {shape:?}, factor {factor}")));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes = v.len() / (h * w);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            for y in 0..ho {
                for x in 0..wo {
                    out[(p * ho + y) * wo + x] = v.data()[(p * h + y / factor) * w + x / factor];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        let value = DenseArray::new(&out_shape, out)?;
        self.graph().custom("upsample", &[self], value, move |g| {
            let mut gi = DenseArray::zeros(&shape);
            let gd = gi.data_mut();
            for p in 0..planes {
                for y in 0..ho {
                    for x in 0..wo {
                        gd[(p * h + y / factor) * w + x / factor] += g.data()[(p * ho + y) * wo + x];
                    }
                }
            }
            vec![Some(gi)]
        })
    }
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<'g, T: Scalar>(vars: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
    let first = vars
        .first()
        .ok_or_else(|| invalid("concat", "no inputs"))?;
    let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(invalid("concat", format!("axis {axis} for rank {}", base.len())));
    }
    for v in &values[1..] {
        let s = v.shape();
        if s.len() != base.len()
            || s.iter()
                .zip(&base)
                .enumerate()
                .any(|(d, (a, b))| d != axis && a != b)
        {
            return Err(mismatch("concat", &base, s));
        }
    }
    let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let (outer, _, inner) = split_axis(&base, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &e) in values.iter().zip(&extents) {
            out.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let value = DenseArray::new(&out_shape, out)?;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    first.graph().custom("concat", vars, value, move |g| {
        let mut parts: Vec<Vec<T>> = extents
            .iter()
            .map(|&e| Vec::with_capacity(outer * e * inner))
            .collect();
        let gd = g.data();
        let mut off = 0;
        for _ in 0..outer {
            for (p, &e) in parts.iter_mut().zip(&extents) {
                p.extend_from_slice(&gd[off..off + e * inner]);
                off += e * inner;
            }
        }
        parts
            .into_iter()
            .zip(&shapes)
            .map(|(p, s)| Some(DenseArray::new(s, p).expect("concat grad")))
            .collect()
    })
}

/// Stacks equally shaped inputs along a new leading axis.
pub fn stack<'g, T: Scalar>(vars: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let lifted = vars
        .iter()
        .map(|v| {
            let mut s = vec![1];
            s.extend(v.shape());
            v.reshape(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&lifted, 0)
}
