//! Linear attention with the `elu(x) + 1` feature map and a transformer
//! layer built on it.

use rand::Rng;
use ufo_tensor::nn::{LayerNorm, Linear};
use ufo_tensor::{concat, DenseArray, Graph, ParamStore, Result, Scalar, Var};

const EPS: f64 = 1e-6;

fn feature_map<'g, T: Scalar>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    x.elu()?.add_scalar(1.0)
}

fn split_heads<'g, T: Scalar>(x: Var<'g, T>, heads: usize) -> Result<Var<'g, T>> {
    let s = x.shape();
    let (b, t, c) = (s[0], s[1], s[2]);
    x.reshape(&[b, t, heads, c / heads])?.permute(&[0, 2, 1, 3])
}

/// `q: [B, T, C]`, `k, v: [B, S, C]`; `key_mask: [B, S, 1]` removes keys.
pub fn linear_attention<'g, T: Scalar>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    heads: usize,
    key_mask: Option<&DenseArray<T>>,
) -> Result<Var<'g, T>> {
    let s = q.shape();
    let (b, t, c) = (s[0], s[1], s[2]);
    let mut fk = feature_map(k)?;
    let mut v = v;
    if let Some(m) = key_mask {
        fk = fk.mul_const(m)?;
        v = v.mul_const(m)?;
    }
    let fq = split_heads(feature_map(q)?, heads)?;
    let fk = split_heads(fk, heads)?;
    let v = split_heads(v, heads)?;
    let kv = fk.transpose()?.matmul(v)?;
    let num = fq.matmul(kv)?;
    let ksum = fk.sum(2, true)?;
    let den = fq.matmul(ksum.transpose()?)?.add_scalar(EPS)?;
    num.div(den)?.permute(&[0, 2, 1, 3])?.reshape(&[b, t, c])
}

/// Message passing layer: attention from `x` to `source`, merged, normalized
/// and refined by a two-layer MLP on `[x, message]`, then added to `x`.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    merge: Linear,
    mlp1: Linear,
    mlp2: Linear,
    norm1: LayerNorm,
    norm2: LayerNorm,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let lin = |store: &mut ParamStore<T>, n: &str, i, o, rng: &mut _| Linear::new(store, &format!("{name}.{n}"), i, o, false, rng);
        Ok(Self {
            q: lin(store, "q", dim, dim, rng)?,
            k: lin(store, "k", dim, dim, rng)?,
            v: lin(store, "v", dim, dim, rng)?,
            merge: lin(store, "merge", dim, dim, rng)?,
            mlp1: lin(store, "mlp1", 2 * dim, 2 * dim, rng)?,
            mlp2: lin(store, "mlp2", 2 * dim, dim, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            heads,
            dim,
        })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
        source: Var<'g, T>,
        key_mask: Option<&DenseArray<T>>,
    ) -> Result<Var<'g, T>> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, source)?;
        let v = self.v.forward(g, store, source)?;
        let msg = linear_attention(q, k, v, self.heads, key_mask)?;
        let msg = self.norm1.forward(g, store, self.merge.forward(g, store, msg)?)?;
        let h = self.mlp1.forward(g, store, concat(&[x, msg], 2)?)?.relu()?;
        let msg = self.norm2.forward(g, store, self.mlp2.forward(g, store, h)?)?;
        x.add(msg)
    }
}

/// Largest head count not above `max` that divides `dim`.
pub fn head_count(dim: usize, max: usize) -> usize {
    (1..=dim.min(max)).rev().find(|h| dim % h == 0).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_key_returns_its_value() {
        let g = Graph::<f64>::new();
        let q = g.constant(DenseArray::from_fn(&[1, 3, 4], |i| i as f64 * 0.1));
        let k = g.constant(DenseArray::from_fn(&[1, 1, 4], |i| i as f64 * -0.2));
        let v = g.constant(DenseArray::from_f64(&[1, 1, 4], &[1.0, -2.0, 3.0, 0.5]).unwrap());
        let out = linear_attention(q, k, v, 2, None).unwrap();
        for t in 0..3 {
            for c in 0..4 {
                assert!((out.value().at(&[0, t, c]) - v.value().at(&[0, 0, c])).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn masked_keys_do_not_contribute() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = DenseArray::<f64>::uniform(&[1, 2, 4], -1.0, 1.0, &mut rng);
        let kv = DenseArray::<f64>::uniform(&[1, 3, 4], -1.0, 1.0, &mut rng);
        let g = Graph::<f64>::new();
        let mask = DenseArray::from_f64(&[1, 3, 1], &[1.0, 0.0, 1.0]).unwrap();
        let full = linear_attention(g.constant(q.clone()), g.constant(kv.clone()), g.constant(kv.clone()), 2, Some(&mask)).unwrap();
        let kept = g.constant(kv).index_select(1, &[0, 2]).unwrap();
        let reduced = linear_attention(g.constant(q), kept, kept, 2, None).unwrap();
        for (a, b) in full.value().data().iter().zip(reduced.value().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_divide_width() {
        assert_eq!(head_count(32, 8), 8);
        assert_eq!(head_count(12, 8), 6);
        assert_eq!(head_count(5, 8), 5);
        assert_eq!(head_count(16, 3), 2);
    }
}
