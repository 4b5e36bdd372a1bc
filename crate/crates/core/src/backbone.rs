//! Feature pyramid and cross-view matching transformer.
//!
//! Pyramid levels are indexed coarse to fine: level `l` of an `L`-level
//! pyramid has stride `2^(L-1-l)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use ufo_tensor::nn::Conv2d;
use ufo_tensor::{sum_n, DenseArray, Graph, ParamStore, Scalar, Var};

use crate::attention::{head_count, AttentionLayer};
use crate::error::{ReconError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub levels: usize,
    /// Encoder widths from full resolution down, one per level.
    pub encoder_channels: Vec<usize>,
    pub fpn_width: usize,
    /// Output widths, coarse to fine.
    pub out_channels: Vec<usize>,
    pub attention_blocks: usize,
    pub heads: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            encoder_channels: vec![8, 16, 32],
            fpn_width: 32,
            out_channels: vec![32, 16, 8],
            attention_blocks: 4,
            heads: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.levels;
        if l == 0 || self.encoder_channels.len() != l || self.out_channels.len() != l {
            return Err(ReconError::Config(format!(
                "backbone needs {l} encoder and output widths, got {} and {}",
                self.encoder_channels.len(),
                self.out_channels.len()
            )));
        }
        if let Some(c) = self.out_channels.iter().find(|&&c| c % 4 != 0) {
            return Err(ReconError::Config(format!("output width {c} must be a multiple of 4")));
        }
        Ok(())
    }

    pub fn stride(&self, level: usize) -> usize {
        1 << (self.levels - 1 - level)
    }
}

/// Checks that an image extent can be halved `levels - 1` times.
pub fn check_divisible(height: usize, width: usize, levels: usize) -> Result<()> {
    let m = 1usize << (levels.max(1) - 1);
    if height % m != 0 || width % m != 0 {
        let pad = |n: usize| (m - n % m) % m;
        return Err(ReconError::Invalid(format!(
            "image {width}x{height} must be divisible by {m}; pad by {} columns and {} rows",
            pad(width),
            pad(height)
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, s: &ParamStore<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.b.forward(g, s, self.a.forward(g, s, x)?.relu()?)?;
        Ok(x.add(h)?.relu()?)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv2d,
    res: ResBlock,
}

/// Conv encoder with a top-down lateral path.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    stem: Conv2d,
    stages: Vec<Stage>,
    laterals: Vec<Conv2d>,
    heads: Vec<Conv2d>,
    pub config: BackboneConfig,
}

impl FeaturePyramid {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let ch = &config.encoder_channels;
        let p = "backbone.fpn";
        let stem = Conv2d::new(store, &format!("{p}.stem"), 3, ch[0], 3, 1, 1, rng)?;
        let mut stages = Vec::new();
        for k in 1..config.levels {
            let c = ch[k];
            stages.push(Stage {
                down: Conv2d::new(store, &format!("{p}.down{k}"), ch[k - 1], c, 3, 2, 1, rng)?,
                res: ResBlock {
                    a: Conv2d::new(store, &format!("{p}.res{k}.a"), c, c, 3, 1, 1, rng)?,
                    b: Conv2d::new(store, &format!("{p}.res{k}.b"), c, c, 3, 1, 1, rng)?,
                },
            });
        }
        let laterals = (0..config.levels)
            .map(|k| Conv2d::new(store, &format!("{p}.lateral{k}"), ch[k], config.fpn_width, 1, 1, 0, rng))
            .collect::<ufo_tensor::Result<_>>()?;
        let heads = (0..config.levels)
            .map(|l| Conv2d::new(store, &format!("{p}.head{l}"), config.fpn_width, config.out_channels[l], 3, 1, 1, rng))
            .collect::<ufo_tensor::Result<_>>()?;
        Ok(Self { stem, stages, laterals, heads, config: config.clone() })
    }

    /// `images: [N, 3, H, W]` to levels `[N, C_l, H/s_l, W/s_l]`, coarse first.
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        images: Var<'g, T>,
    ) -> Result<Vec<Var<'g, T>>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(ReconError::Invalid(format!("expected [N, 3, H, W] images, got {shape:?}")));
        }
        let l = self.config.levels;
        check_divisible(shape[2], shape[3], l)?;
        let mut enc = vec![self.stem.forward(g, store, images)?.relu()?];
        for st in &self.stages {
            let x = st.down.forward(g, store, *enc.last().unwrap())?.relu()?;
            enc.push(st.res.forward(g, store, x)?);
        }
        let mut top = self.laterals[l - 1].forward(g, store, enc[l - 1])?;
        let mut fused = vec![top];
        for k in (0..l - 1).rev() {
            top = self.laterals[k].forward(g, store, enc[k])?.add(top.upsample_nearest2d(2)?)?;
            fused.push(top);
        }
        fused
            .into_iter()
            .zip(&self.heads)
            .map(|(f, h)| Ok(h.forward(g, store, f)?))
            .collect()
    }
}

/// Fixed 2D sinusoidal encoding `[h * w, c]` (`c` divisible by 4): channel
/// quadruples hold sin/cos of x and sin/cos of y at geometric frequencies.
pub fn positional_encoding<T: Scalar>(c: usize, h: usize, w: usize) -> DenseArray<T> {
    let quads = c / 4;
    DenseArray::from_fn(&[h * w, c], |i| {
        let (p, ch) = (i / c, i % c);
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        let k = ch / 4;
        let freq = (-(2.0 * k as f64) * 10000f64.ln() / (2 * quads) as f64).exp();
        T::lit(match ch % 4 {
            0 => (x * freq).sin(),
            1 => (x * freq).cos(),
            2 => (y * freq).sin(),
            _ => (y * freq).cos(),
        })
    })
}

/// Alternating self/cross attention blocks per level, applied to every
/// unordered view pair once; each view sums the outputs of its pairs.
#[derive(Clone, Debug)]
pub struct MatchingTransformer {
    levels: Vec<Vec<AttentionLayer>>,
}

impl MatchingTransformer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut levels = Vec::new();
        for (l, &c) in config.out_channels.iter().enumerate() {
            let heads = head_count(c, config.heads);
            let blocks = (0..config.attention_blocks)
                .map(|b| AttentionLayer::new(store, &format!("backbone.match.l{l}.b{b}"), c, heads, rng))
                .collect::<ufo_tensor::Result<_>>()?;
            levels.push(blocks);
        }
        Ok(Self { levels })
    }

    /// Pyramid levels `[N, C, h, w]` to matching features of the same shapes.
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        pyramid: &[Var<'g, T>],
    ) -> Result<Vec<Var<'g, T>>> {
        if pyramid.len() != self.levels.len() {
            return Err(ReconError::Invalid(format!("expected {} levels, got {}", self.levels.len(), pyramid.len())));
        }
        let n = pyramid[0].shape()[0];
        if n < 2 {
            return Err(ReconError::Invalid("cross-view matching needs at least two views".into()));
        }
        let mut order = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                order.extend([i, j]);
            }
        }
        let partner: Vec<usize> = (0..order.len()).map(|k| k ^ 1).collect();
        let mut out = Vec::with_capacity(pyramid.len());
        for (level, blocks) in pyramid.iter().zip(&self.levels) {
            let s = level.shape();
            let (c, h, w) = (s[1], s[2], s[3]);
            let tokens = level
                .reshape(&[n, c, h * w])?
                .permute(&[0, 2, 1])?
                .add_const(&positional_encoding(c, h, w))?;
            let mut x = tokens.index_select(0, &order)?;
            for (b, layer) in blocks.iter().enumerate() {
                let src = if b % 2 == 0 { x } else { x.index_select(0, &partner)? };
                x = layer.forward(g, store, x, src, None)?;
            }
            let mut per_view = Vec::with_capacity(n);
            for v in 0..n {
                let parts = order
                    .iter()
                    .enumerate()
                    .filter(|(_, &o)| o == v)
                    .map(|(k, _)| x.slice(0, k, k + 1))
                    .collect::<ufo_tensor::Result<Vec<_>>>()?;
                per_view.push(sum_n(&parts)?);
            }
            let f = ufo_tensor::concat(&per_view, 0)?.permute(&[0, 2, 1])?.reshape(&[n, c, h, w])?;
            out.push(f);
        }
        Ok(out)
    }
}

/// Pyramid plus matching transformer.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub fpn: FeaturePyramid,
    pub matcher: MatchingTransformer,
}

/// Backbone outputs for a batch of views, both coarse to fine.
pub struct BackboneOutput<'g, T: Scalar> {
    pub pyramid: Vec<Var<'g, T>>,
    pub matching: Vec<Var<'g, T>>,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            fpn: FeaturePyramid::new(store, config, rng)?,
            matcher: MatchingTransformer::new(store, config, rng)?,
        })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        images: Var<'g, T>,
    ) -> Result<BackboneOutput<'g, T>> {
        let pyramid = self.fpn.forward(g, store, images)?;
        let matching = self.matcher.forward(g, store, &pyramid)?;
        Ok(BackboneOutput { pyramid, matching })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            encoder_channels: vec![4, 8, 8],
            fpn_width: 8,
            out_channels: vec![8, 8, 4],
            attention_blocks: 2,
            ..Default::default()
        }
    }

    #[test]
    fn default_plan_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let fpn = FeaturePyramid::new(&mut store, &BackboneConfig::default(), &mut rng).unwrap();
        let g = Graph::inference();
        let img = g.constant(DenseArray::zeros(&[1, 3, 64, 64]));
        let levels = fpn.forward(&g, &store, img).unwrap();
        let shapes: Vec<Vec<usize>> = levels.iter().map(|v| v.shape()).collect();
        assert_eq!(shapes, vec![vec![1, 32, 16, 16], vec![1, 16, 32, 32], vec![1, 8, 64, 64]]);
        assert!(levels.iter().all(|v| v.value().all_finite()));
    }

    #[test]
    fn indivisible_extent_names_padding() {
        let err = check_divisible(30, 64, 3).unwrap_err().to_string();
        assert!(err.contains("2 rows"), "{err}");
        assert!(check_divisible(17, 9, 1).is_ok());
    }

    #[test]
    fn other_views_commute() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut store, &small(), &mut rng).unwrap();
        let imgs = DenseArray::<f64>::uniform(&[3, 3, 8, 8], 0.0, 1.0, &mut rng);
        let g = Graph::inference();
        let a = bb.forward(&g, &store, g.constant(imgs.clone())).unwrap();
        let swapped = g.constant(imgs).index_select(0, &[0, 2, 1]).unwrap();
        let b = bb.forward(&g, &store, swapped).unwrap();
        for (fa, fb) in a.matching.iter().zip(&b.matching) {
            let fa0 = fa.slice(0, 0, 1).unwrap().value();
            let fb0 = fb.slice(0, 0, 1).unwrap().value();
            for (x, y) in fa0.data().iter().zip(fb0.data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        let single: Vec<_> = a.pyramid.iter().map(|p| p.slice(0, 0, 1).unwrap()).collect();
        assert!(bb.matcher.forward(&g, &store, &single).is_err());
    }

    #[test]
    fn encoding_starts_with_sin_cos_of_zero() {
        let pe = positional_encoding::<f64>(8, 2, 3);
        assert_eq!(pe.shape(), &[6, 8]);
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(&[1, 0]) - 1f64.sin()).abs() < 1e-12);
    }
}
