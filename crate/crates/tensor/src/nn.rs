//! Parameterized layers. Each layer owns only parameter ids; values live in
//! a [`ParamStore`] and are bound to a [`Graph`] at forward time.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::ops::ConvSpec;
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// `y = x W + b` over the last axis; `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng)?;
        let bias = if bias {
            Some(store.add_zeros(format!("{name}.bias"), &[out_dim])?)
        } else {
            None
        };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let y = x.matmul(g.param(store, self.weight))?;
        match self.bias {
            Some(b) => y.add(g.param(store, b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add_uniform(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], fan_in, rng)?;
        let bias = Some(store.add_zeros(format!("{name}.bias"), &[out_ch])?);
        Ok(Self { weight, bias, stride, pad })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let b = self.bias.map(|b| g.param(store, b));
        x.conv2d(g.param(store, self.weight), b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv3d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let [kd, kh, kw] = spec.kernel;
        let fan_in = in_ch * kd * kh * kw;
        let weight = store.add_uniform(format!("{name}.weight"), &[out_ch, in_ch, kd, kh, kw], fan_in, rng)?;
        let bias = Some(store.add_zeros(format!("{name}.bias"), &[out_ch])?);
        Ok(Self { weight, bias, spec })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let b = self.bias.map(|b| g.param(store, b));
        x.conv3d(g.param(store, self.weight), b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub output_pad: [usize; 3],
}

impl ConvTranspose3d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        spec: ConvSpec,
        output_pad: [usize; 3],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let [kd, kh, kw] = spec.kernel;
        let fan_in = in_ch * kd * kh * kw;
        let weight = store.add_uniform(format!("{name}.weight"), &[in_ch, out_ch, kd, kh, kw], fan_in, rng)?;
        let bias = Some(store.add_zeros(format!("{name}.bias"), &[out_ch])?);
        Ok(Self { weight, bias, spec, output_pad })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let b = self.bias.map(|b| g.param(store, b));
        x.conv_transpose3d(g.param(store, self.weight), b, self.spec, self.output_pad)
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), crate::DenseArray::ones(&[dim]))?;
        let shift = store.add_zeros(format!("{name}.shift"), &[dim])?;
        Ok(Self { gain, shift, dim, eps: 1e-5 })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        if x.shape().last() != Some(&self.dim) {
            return Err(invalid("layer-norm", format!("expected last extent {}, got {:?}", self.dim, x.shape())));
        }
        x.layer_norm(self.eps)?
            .mul(g.param(store, self.gain))?
            .add(g.param(store, self.shift))
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(invalid("mlp", "need at least input and output widths"));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        mut x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, store, x)?;
            if i + 1 < n {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::DenseArray;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let l = Linear::new(&mut store, "fc", 12, 5, true, &mut rng).unwrap();
        let bound = (3.0f64 / 12.0).sqrt();
        assert!(store.get(l.weight).value.data().iter().all(|w| w.abs() <= bound));
        assert!(store.get(l.bias.unwrap()).value.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn linear_applies_over_leading_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let l = Linear::new(&mut store, "fc", 3, 2, true, &mut rng).unwrap();
        let g = Graph::new();
        let x = g.constant(DenseArray::ones(&[4, 5, 3]));
        assert_eq!(l.forward(&g, &store, x).unwrap().shape(), vec![4, 5, 2]);
    }
}
