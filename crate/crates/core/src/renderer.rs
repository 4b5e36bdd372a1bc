//! Ray sampling, view aggregation, the ray transformer with its SDF head, and
//! SDF-based volume rendering.

use nalgebra::Vector3;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use ufo_tensor::nn::{Linear, Mlp};
use ufo_tensor::{concat, DenseArray, Graph, ParamId, ParamStore, Scalar, Var};

use crate::attention::{head_count, AttentionLayer};
use crate::error::{ReconError, Result};
use crate::geometry::RayBatch;

const PDF_PADDING: f64 = 1e-5;
const PHI_FLOOR: f64 = 1e-12;
/// Rays whose accumulated opacity falls below this are misses.
pub const MISS_OPACITY: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RendererConfig {
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub aggregation_blocks: usize,
    pub ray_blocks: usize,
    pub sdf_hidden: usize,
    pub octaves: usize,
    pub init_sharpness: f64,
    /// Feed the source-depth crossing to the ray transformer; without it the
    /// offset is taken from the middle of the ray.
    pub depth_prior: bool,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            coarse_samples: 64,
            fine_samples: 64,
            token_dim: 16,
            heads: 4,
            aggregation_blocks: 2,
            ray_blocks: 1,
            sdf_hidden: 32,
            octaves: 6,
            init_sharpness: 20.0,
            depth_prior: true,
        }
    }
}

impl RendererConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_samples < 2 {
            return Err(ReconError::Config("at least two coarse samples per ray are required".into()));
        }
        if self.token_dim == 0 || self.init_sharpness <= 0.0 {
            return Err(ReconError::Config("token width and initial sharpness must be positive".into()));
        }
        Ok(())
    }

    pub fn samples_per_ray(&self) -> usize {
        self.coarse_samples + self.fine_samples
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Stratified jitter inside each bin.
    Train,
    /// Bin midpoints.
    Eval,
}

/// `m` samples in equal bins of `[near, far]`, jittered when `rng` is given.
pub fn coarse_t(near: f64, far: f64, m: usize, rng: Option<&mut dyn RngCore>) -> Vec<f64> {
    let step = (far - near) / m as f64;
    match rng {
        Some(r) => (0..m).map(|k| near + (k as f64 + r.random::<f64>()) * step).collect(),
        None => (0..m).map(|k| near + (k as f64 + 0.5) * step).collect(),
    }
}

/// Inverse-CDF draws from the piecewise-constant density given by `weights`
/// over the equal bins of `[near, far]`.
pub fn fine_t(near: f64, far: f64, weights: &[f64], count: usize, rng: Option<&mut dyn RngCore>) -> Vec<f64> {
    let m = weights.len();
    let step = (far - near) / m as f64;
    let pdf: Vec<f64> = weights.iter().map(|w| w.max(0.0) + PDF_PADDING).collect();
    let total: f64 = pdf.iter().sum();
    let mut cdf = Vec::with_capacity(m + 1);
    cdf.push(0.0);
    for p in &pdf {
        cdf.push(cdf.last().unwrap() + p / total);
    }
    let us: Vec<f64> = match rng {
        Some(r) => (0..count).map(|j| (j as f64 + r.random::<f64>()) / count as f64).collect(),
        None => (0..count).map(|j| (j as f64 + 0.5) / count as f64).collect(),
    };
    us.into_iter()
        .map(|u| {
            let k = cdf[1..].partition_point(|&c| c <= u).min(m - 1);
            let frac = ((u - cdf[k]) / (cdf[k + 1] - cdf[k])).clamp(0.0, 1.0);
            near + (k as f64 + frac) * step
        })
        .collect()
}

/// Sorted union of two sample sets with duplicates nudged apart.
pub fn merge_t(a: &[f64], b: &[f64], near: f64, far: f64) -> Vec<f64> {
    let mut t: Vec<f64> = a.iter().chain(b).copied().collect();
    t.sort_by(f64::total_cmp);
    let eps = (far - near).abs().max(1.0) * 1e-9;
    for i in 1..t.len() {
        if t[i] <= t[i - 1] {
            t[i] = t[i - 1] + eps;
        }
    }
    t
}

/// `[sin(2^k pi x / range), cos(2^k pi x / range)]` for `k < octaves`.
pub fn offset_encoding(x: f64, range: f64, octaves: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * octaves);
    for k in 0..octaves {
        let a = (1u64 << k) as f64 * std::f64::consts::PI * x / range;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Discrete opacity from consecutive SDF samples `[R, M]` with sharpness
/// `exp(log_s)`: `max((phi_m - phi_{m+1}) / phi_m, 0)`, zero at the last
/// sample and wherever `phi_m` underflows.
pub fn neus_alpha<'g, T: Scalar>(sdf: Var<'g, T>, log_s: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = sdf.shape();
    if shape.len() != 2 || shape[1] < 1 {
        return Err(ReconError::Invalid(format!("sdf must be [rays, samples], got {shape:?}")));
    }
    let (r, m) = (shape[0], shape[1]);
    let x: Vec<f64> = sdf.value().data().iter().map(|v| v.as_f64()).collect();
    let s = log_s.value().item().as_f64().exp();
    let phi: Vec<f64> = x.iter().map(|&v| sigmoid(s * v)).collect();
    let mut alpha = vec![0.0; r * m];
    for ray in 0..r {
        for k in 0..m.saturating_sub(1) {
            let (a, b) = (phi[ray * m + k], phi[ray * m + k + 1]);
            if a >= PHI_FLOOR && a > b {
                alpha[ray * m + k] = (a - b) / a;
            }
        }
    }
    let value = DenseArray::new(&shape, alpha.iter().map(|&a| T::lit(a)).collect())?;
    let g = sdf.graph();
    Ok(g.custom("neus-alpha", &[sdf, log_s], value, move |grad| {
        let gd = grad.data();
        let mut gx = vec![T::zero(); r * m];
        let mut gs = 0.0;
        for ray in 0..r {
            for k in 0..m.saturating_sub(1) {
                let i = ray * m + k;
                if alpha[i] <= 0.0 {
                    continue;
                }
                let g = gd[i].as_f64();
                let (a, b) = (phi[i], phi[i + 1]);
                let da = s * a * (1.0 - a);
                let db = s * b * (1.0 - b);
                let ga = g * b / (a * a);
                let gb = -g / a;
                gx[i] += T::lit(ga * da);
                gx[i + 1] += T::lit(gb * db);
                gs += ga * da * x[i] + gb * db * x[i + 1];
            }
        }
        vec![
            Some(DenseArray::new(&[r, m], gx).expect("alpha grad")),
            Some(DenseArray::full(&[1], T::lit(gs))),
        ]
    })?)
}

/// Compositing weights `T_m * alpha_m` with `T_m = prod_{k<m} (1 - alpha_k)`.
pub fn composite_weights<'g, T: Scalar>(alpha: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = alpha.shape();
    if shape.len() != 2 {
        return Err(ReconError::Invalid(format!("alpha must be [rays, samples], got {shape:?}")));
    }
    let (r, m) = (shape[0], shape[1]);
    let a: Vec<f64> = alpha.value().data().iter().map(|v| v.as_f64()).collect();
    let mut trans = vec![0.0; r * m];
    let mut w = vec![T::zero(); r * m];
    for ray in 0..r {
        let mut t = 1.0;
        for k in 0..m {
            trans[ray * m + k] = t;
            w[ray * m + k] = T::lit(t * a[ray * m + k]);
            t *= 1.0 - a[ray * m + k];
        }
    }
    let value = DenseArray::new(&shape, w)?;
    Ok(alpha.graph().custom("composite", &[alpha], value, move |grad| {
        let gd = grad.data();
        let mut ga = vec![T::zero(); r * m];
        for ray in 0..r {
            // rest = sum_{j>k} g_j alpha_j prod_{k<i<j} (1 - alpha_i)
            let mut rest = 0.0;
            for k in (0..m).rev() {
                let i = ray * m + k;
                ga[i] = T::lit(trans[i] * (gd[i].as_f64() - rest));
                rest = gd[i].as_f64() * a[i] + (1.0 - a[i]) * rest;
            }
        }
        vec![Some(DenseArray::new(&[r, m], ga).expect("composite grad"))]
    })?)
}

/// Per-ray composited quantities.
pub struct Composite<'g, T: Scalar> {
    /// `[R, M]`.
    pub weights: Var<'g, T>,
    /// `[R, 3]`.
    pub color: Var<'g, T>,
    /// Expected ray length with residual transmittance placed at `far`: `[R]`.
    pub depth: Var<'g, T>,
    /// `[R]`.
    pub opacity: Var<'g, T>,
}

/// `colors: [R, M, 3]`, `t` and `far` row-major per ray.
pub fn composite<'g, T: Scalar>(alpha: Var<'g, T>, colors: Var<'g, T>, t: &[f64], far: &[f64]) -> Result<Composite<'g, T>> {
    let s = alpha.shape();
    let (r, m) = (s[0], s[1]);
    let weights = composite_weights(alpha)?;
    let color = weights.reshape(&[r, m, 1])?.mul(colors)?.sum(1, false)?;
    let opacity = weights.sum(1, false)?;
    let t_arr = DenseArray::from_fn(&[r, m], |i| T::lit(t[i]));
    let far_arr = DenseArray::from_fn(&[r], |i| T::lit(far[i]));
    let residual = opacity.neg()?.add_scalar(1.0)?.mul_const(&far_arr)?;
    let depth = weights.mul_const(&t_arr)?.sum(1, false)?.add(residual)?;
    Ok(Composite { weights, color, depth, opacity })
}

/// Per-sample network inputs for `P = R * M` points and `N` views.
pub struct SampleInputs<'g, T: Scalar> {
    /// `[P, N, C_img + 4]`: image features, pixel colour and validity.
    pub view_tokens: Var<'g, T>,
    /// `[P, N, 3]`.
    pub colors: Var<'g, T>,
    /// `[P, N]` validity of each projection.
    pub view_mask: DenseArray<T>,
    /// `[P, C_vol]`.
    pub volume: Var<'g, T>,
    pub volume_mask: Vec<bool>,
    /// `[P, G]`.
    pub similarity: Var<'g, T>,
    pub similarity_mask: Vec<bool>,
    /// `z_m - z_d` per sample.
    pub offsets: Vec<f64>,
    pub depth_range: f64,
}

/// Aggregation transformer over view tokens, ray transformer and SDF head.
/// The stored sharpness parameter `v` gives `s = exp(SHARPNESS_SCALE * v)`.
pub const SHARPNESS_SCALE: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct RenderNet {
    f0: ParamId,
    view_embed: Linear,
    volume_embed: Linear,
    similarity_embed: Linear,
    aggregation: Vec<AttentionLayer>,
    blend: Linear,
    ray_in: Linear,
    ray: Vec<AttentionLayer>,
    sdf: Mlp,
    pub log_s: ParamId,
    pub config: RendererConfig,
}

impl RenderNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &RendererConfig,
        image_channels: usize,
        volume_channels: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.token_dim;
        let heads = head_count(d, cfg.heads);
        let f0 = store.add_uniform("renderer.f0", &[1, d], d, rng)?;
        let view_embed = Linear::new(store, "renderer.view_embed", image_channels + 4, d, true, rng)?;
        let volume_embed = Linear::new(store, "renderer.volume_embed", volume_channels, d, true, rng)?;
        let similarity_embed = Linear::new(store, "renderer.similarity_embed", groups, d, true, rng)?;
        let aggregation = (0..cfg.aggregation_blocks)
            .map(|b| AttentionLayer::new(store, &format!("renderer.aggregate.b{b}"), d, heads, rng))
            .collect::<ufo_tensor::Result<_>>()?;
        let blend = Linear::new(store, "renderer.blend", d, 1, true, rng)?;
        let ray_in = Linear::new(store, "renderer.ray_in", d + 2 * cfg.octaves, d, true, rng)?;
        let ray = (0..cfg.ray_blocks)
            .map(|b| AttentionLayer::new(store, &format!("renderer.ray.b{b}"), d, heads, rng))
            .collect::<ufo_tensor::Result<_>>()?;
        let sdf = Mlp::new(store, "renderer.sdf", &[d, cfg.sdf_hidden, 1], rng)?;
        let log_s = store.add("renderer.log_s", DenseArray::full(&[1], T::lit(cfg.init_sharpness.ln() / SHARPNESS_SCALE)))?;
        Ok(Self { f0, view_embed, volume_embed, similarity_embed, aggregation, blend, ray_in, ray, sdf, log_s, config: cfg.clone() })
    }

    /// Returns per-sample SDF `[R, M]` and blended colour `[R, M, 3]`.
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        inputs: &SampleInputs<'g, T>,
        rays: usize,
        samples: usize,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let s = inputs.view_tokens.shape();
        let (p, n) = (s[0], s[1]);
        if p != rays * samples {
            return Err(ReconError::Invalid(format!("{p} sample inputs for {rays} x {samples} samples")));
        }
        let d = self.config.token_dim;
        let views = self.view_embed.forward(g, store, inputs.view_tokens)?;
        let volume = self.volume_embed.forward(g, store, inputs.volume)?.reshape(&[p, 1, d])?;
        let sim = self.similarity_embed.forward(g, store, inputs.similarity)?.reshape(&[p, 1, d])?;
        let f0 = g.param(store, self.f0).reshape(&[1, 1, d])?.broadcast_to(&[p, 1, d])?;
        let mut x = concat(&[f0, views, volume, sim], 1)?;
        let vm = inputs.view_mask.data();
        let key_mask = DenseArray::from_fn(&[p, n + 3, 1], |i| {
            let (pt, slot) = (i / (n + 3), i % (n + 3));
            let on = match slot {
                0 => true,
                k if k <= n => vm[pt * n + k - 1] != T::zero(),
                k if k == n + 1 => inputs.volume_mask[pt],
                _ => inputs.similarity_mask[pt],
            };
            if on {
                T::one()
            } else {
                T::zero()
            }
        });
        for layer in &self.aggregation {
            x = layer.forward(g, store, x, x, Some(&key_mask))?;
        }
        let fp = x.slice(1, 0, 1)?.reshape(&[p, d])?;
        let logits = self.blend.forward(g, store, x.slice(1, 1, n + 1)?)?.reshape(&[p, n])?;
        let blend = logits.masked_softmax(1, &inputs.view_mask)?;
        let colors = blend.reshape(&[p, n, 1])?.mul(inputs.colors)?.sum(1, false)?.reshape(&[rays, samples, 3])?;

        let oct = self.config.octaves;
        let enc: Vec<T> = inputs
            .offsets
            .iter()
            .flat_map(|&z| offset_encoding(z, inputs.depth_range, oct))
            .map(T::lit)
            .collect();
        let enc = DenseArray::new(&[p, 2 * oct], enc)?;
        let mut h = self
            .ray_in
            .forward(g, store, concat(&[fp, g.constant(enc)], 1)?)?
            .reshape(&[rays, samples, d])?;
        for layer in &self.ray {
            h = layer.forward(g, store, h, h, None)?;
        }
        let sdf = self.sdf.forward(g, store, h)?.reshape(&[rays, samples])?;
        Ok((sdf, colors))
    }

    pub fn sharpness<T: Scalar>(&self, store: &ParamStore<T>) -> f64 {
        (store.get(self.log_s).value.item().as_f64() * SHARPNESS_SCALE).exp()
    }
}

/// Rendering of a closed-form SDF along given rays at bin midpoints, using
/// the same opacity and compositing operators as the network path.
#[derive(Clone, Debug)]
pub struct AnalyticRender {
    pub t: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

pub fn render_analytic(
    rays: &RayBatch,
    sdf: impl Fn(&Vector3<f64>) -> f64,
    samples: usize,
    sharpness: f64,
) -> Result<AnalyticRender> {
    let r = rays.len();
    let t: Vec<Vec<f64>> = (0..r).map(|i| coarse_t(rays.near[i], rays.far[i], samples, None)).collect();
    let flat_t: Vec<f64> = t.iter().flatten().copied().collect();
    let values: Vec<f64> = (0..r * samples).map(|k| sdf(&rays.point(k / samples, flat_t[k]))).collect();
    let g = Graph::<f64>::inference();
    let sdf_var = g.constant(DenseArray::new(&[r, samples], values)?);
    let log_s = g.constant(DenseArray::full(&[1], sharpness.ln()));
    let alpha = neus_alpha(sdf_var, log_s)?;
    let colors = g.constant(DenseArray::zeros(&[r, samples, 3]));
    let out = composite(alpha, colors, &flat_t, &rays.far)?;
    let w = out.weights.value();
    Ok(AnalyticRender {
        weights: w.data().chunks(samples).map(<[f64]>::to_vec).collect(),
        t,
        depth: out.depth.value().data().to_vec(),
        opacity: out.opacity.value().data().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_midpoints() {
        assert_eq!(coarse_t(1.0, 2.0, 4, None), vec![1.125, 1.375, 1.625, 1.875]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = coarse_t(1.0, 2.0, 4, Some(&mut rng));
        assert!(t.iter().enumerate().all(|(k, &v)| v >= 1.0 + 0.25 * k as f64 && v < 1.25 + 0.25 * k as f64));
    }

    #[test]
    fn fine_samples_concentrate() {
        let mut w = vec![0.0; 16];
        w[5] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = fine_t(0.0, 16.0, &w, 200, Some(&mut rng));
        assert!(t.iter().all(|&x| (0.0..=16.0).contains(&x)));
        let near = t.iter().filter(|&&x| (4.0..7.0).contains(&x)).count();
        assert!(near as f64 > 0.8 * 200.0, "{near}");
        let merged = merge_t(&coarse_t(0.0, 16.0, 16, None), &t, 0.0, 16.0);
        assert!(merged.windows(2).all(|p| p[1] > p[0]));
    }

    #[test]
    fn encoding_of_zero() {
        let e = offset_encoding(0.0, 3.0, 6);
        assert_eq!(e.len(), 12);
        assert!(e.chunks(2).all(|c| c[0] == 0.0 && c[1] == 1.0));
    }

    fn alpha_of(sdf: &[f64], s: f64) -> Vec<f64> {
        let g = Graph::<f64>::inference();
        let x = g.constant(DenseArray::new(&[1, sdf.len()], sdf.to_vec()).unwrap());
        let ls = g.constant(DenseArray::full(&[1], s.ln()));
        neus_alpha(x, ls).unwrap().value().data().to_vec()
    }

    #[test]
    fn opacity_limits() {
        assert!(alpha_of(&[0.3, 0.3, 0.3], 10.0).iter().all(|&a| a == 0.0));
        let a = alpha_of(&[0.5, -0.5], 1e3);
        assert!((a[0] - 1.0).abs() < 1e-9 && a[1] == 0.0);
    }

    #[test]
    fn hand_composite() {
        let g = Graph::<f64>::inference();
        let alpha = g.constant(DenseArray::from_f64(&[1, 2], &[0.5, 1.0]).unwrap());
        let colors = g.constant(DenseArray::from_f64(&[1, 2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let out = composite(alpha, colors, &[1.0, 2.0], &[3.0]).unwrap();
        assert_eq!(out.weights.value().data(), &[0.5, 0.5]);
        assert_eq!(out.color.value().data(), &[0.5, 0.5, 0.0]);
        assert_eq!(out.depth.item(), 1.5);
        let none = composite(g.constant(DenseArray::zeros(&[1, 3])), g.constant(DenseArray::ones(&[1, 3, 3])), &[1.0, 2.0, 3.0], &[4.0]).unwrap();
        assert_eq!(none.color.value().data(), &[0.0; 3]);
        assert_eq!(none.opacity.item(), 0.0);
        assert_eq!(none.depth.item(), 4.0);
    }

    #[test]
    fn single_sample_full_opacity() {
        let g = Graph::<f64>::inference();
        let alpha = g.constant(DenseArray::from_f64(&[1, 1], &[1.0]).unwrap());
        let colors = g.constant(DenseArray::from_f64(&[1, 1, 3], &[0.2, 0.4, 0.6]).unwrap());
        let out = composite(alpha, colors, &[1.0], &[2.0]).unwrap();
        assert_eq!(out.weights.value().data(), &[1.0]);
        assert_eq!(out.color.value().data(), &[0.2, 0.4, 0.6]);
    }
}
