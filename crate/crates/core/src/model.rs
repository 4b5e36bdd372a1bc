//! End-to-end pipeline: source views to features, frustums and rendered rays.

use std::rc::Rc;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use ufo_tensor::{bilinear_sample_array, concat, DenseArray, Graph, ParamStore, Scalar, Var};

use crate::backbone::{Backbone, BackboneConfig, BackboneOutput};
use crate::error::{ReconError, Result};
use crate::frustum::{sample_global_feature, Cascade, FrustumConfig, FrustumNet, VolumeGrid};
use crate::geometry::{Camera, DepthHypotheses, RayBatch};
use crate::renderer::{coarse_t, composite, fine_t, merge_t, neus_alpha, RenderNet, RendererConfig, SampleInputs, SampleMode, SHARPNESS_SCALE};
use crate::similarity::{encode_similarity, projected_coords, DEFAULT_GROUPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub frustum: FrustumConfig,
    pub renderer: RendererConfig,
    pub similarity_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            frustum: FrustumConfig::default(),
            renderer: RendererConfig::default(),
            similarity_groups: DEFAULT_GROUPS,
        }
    }
}

impl ModelConfig {
    /// Laptop-sized settings for 64x64 scenes.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig { attention_blocks: 2, ..Default::default() },
            frustum: FrustumConfig {
                hypotheses: vec![32, 16, 8],
                reg_channels: [4, 8, 16],
                volume_channels: 4,
                ..Default::default()
            },
            renderer: RendererConfig { coarse_samples: 16, fine_samples: 16, aggregation_blocks: 1, ..Default::default() },
            ..Default::default()
        }
    }

    /// Single-level, tiny-width network whose outputs are smooth functions
    /// of the inputs (no detached hypothesis refinement, no resampling).
    pub fn micro() -> Self {
        Self {
            backbone: BackboneConfig {
                levels: 1,
                encoder_channels: vec![4],
                fpn_width: 4,
                out_channels: vec![4],
                attention_blocks: 2,
                heads: 2,
            },
            frustum: FrustumConfig { hypotheses: vec![4], shrink: 0.5, reg_channels: [2, 2, 2], volume_channels: 2 },
            renderer: RendererConfig {
                coarse_samples: 8,
                fine_samples: 0,
                token_dim: 4,
                heads: 2,
                aggregation_blocks: 1,
                ray_blocks: 1,
                sdf_hidden: 4,
                octaves: 2,
                init_sharpness: 4.0,
                depth_prior: false,
            },
            similarity_groups: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.frustum.validate(self.backbone.levels)?;
        self.renderer.validate()?;
        let c0 = self.backbone.out_channels[0];
        if self.similarity_groups == 0 || c0 % self.similarity_groups != 0 {
            return Err(ReconError::Config(format!(
                "{} similarity groups do not divide the coarsest width {c0}",
                self.similarity_groups
            )));
        }
        Ok(())
    }
}

/// Everything the renderer reads from the encoded source views.
#[derive(Clone)]
pub struct RenderSources<'g, T: Scalar> {
    pub cams: Vec<Camera>,
    /// `[3, H, W]` per view.
    pub images: Vec<Var<'g, T>>,
    /// Finest pyramid level `[C, H, W]` per view.
    pub image_feats: Vec<Var<'g, T>>,
    /// Coarsest matching level `[C, h, w]` per view.
    pub match_coarse: Vec<Var<'g, T>>,
    pub match_cams: Vec<Camera>,
    pub volumes: Vec<VolumeGrid<'g, T>>,
    /// Final cascade depth `[1, H, W]` per view, detached.
    pub depth_maps: Vec<Rc<DenseArray<T>>>,
}

/// Graph-independent snapshot of [`RenderSources`].
#[derive(Clone)]
pub struct FrozenSources<T: Scalar> {
    cams: Vec<Camera>,
    images: Vec<Rc<DenseArray<T>>>,
    image_feats: Vec<Rc<DenseArray<T>>>,
    match_coarse: Vec<Rc<DenseArray<T>>>,
    match_cams: Vec<Camera>,
    volumes: Vec<(Vec<Camera>, Vec<DepthHypotheses>, Vec<Rc<DenseArray<T>>>)>,
    depth_maps: Vec<Rc<DenseArray<T>>>,
}

fn values<T: Scalar>(vars: &[Var<'_, T>]) -> Vec<Rc<DenseArray<T>>> {
    vars.iter().map(|v| v.value()).collect()
}

fn constants<'g, T: Scalar>(g: &'g Graph<T>, vals: &[Rc<DenseArray<T>>]) -> Vec<Var<'g, T>> {
    vals.iter().map(|v| g.constant_rc(v.clone())).collect()
}

impl<'g, T: Scalar> RenderSources<'g, T> {
    pub fn freeze(&self) -> FrozenSources<T> {
        FrozenSources {
            cams: self.cams.clone(),
            images: values(&self.images),
            image_feats: values(&self.image_feats),
            match_coarse: values(&self.match_coarse),
            match_cams: self.match_cams.clone(),
            volumes: self.volumes.iter().map(|v| (v.cams.clone(), v.hyps.clone(), values(&v.feats))).collect(),
            depth_maps: self.depth_maps.clone(),
        }
    }

    pub fn views(&self) -> usize {
        self.cams.len()
    }
}

impl<T: Scalar> FrozenSources<T> {
    pub fn bind<'g>(&self, g: &'g Graph<T>) -> RenderSources<'g, T> {
        RenderSources {
            cams: self.cams.clone(),
            images: constants(g, &self.images),
            image_feats: constants(g, &self.image_feats),
            match_coarse: constants(g, &self.match_coarse),
            match_cams: self.match_cams.clone(),
            volumes: self
                .volumes
                .iter()
                .map(|(c, h, f)| VolumeGrid { cams: c.clone(), hyps: h.clone(), feats: constants(g, f) })
                .collect(),
            depth_maps: self.depth_maps.clone(),
        }
    }

    pub fn cams(&self) -> &[Camera] {
        &self.cams
    }
}

pub struct Encoded<'g, T: Scalar> {
    pub features: BackboneOutput<'g, T>,
    pub cascade: Cascade<'g, T>,
    pub sources: RenderSources<'g, T>,
}

/// Per-ray rendering results.
pub struct RenderOutput<'g, T: Scalar> {
    /// `[R, 3]`.
    pub color: Var<'g, T>,
    /// Expected ray length `[R]`.
    pub depth: Var<'g, T>,
    /// Expected depth along the target camera axis `[R]`.
    pub z_depth: Var<'g, T>,
    /// `[R, M]`.
    pub weights: Var<'g, T>,
    /// `[R, M]`.
    pub sdf: Var<'g, T>,
    /// `[R]`.
    pub opacity: Var<'g, T>,
    /// Rays with at least one sample seen by a source view.
    pub valid: Vec<bool>,
    /// Sample distances, row-major `[R, M]`.
    pub t: Vec<f64>,
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub frustum: FrustumNet,
    pub renderer: RenderNet,
    pub config: ModelConfig,
}

impl Model {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(store, &config.backbone, rng)?;
        let frustum = FrustumNet::new(store, &config.frustum, rng)?;
        let volume_channels = config.frustum.volume_channels * config.backbone.levels;
        let image_channels = *config.backbone.out_channels.last().expect("validated levels");
        let renderer = RenderNet::new(store, &config.renderer, image_channels, volume_channels, config.similarity_groups, rng)?;
        Ok(Self { backbone, frustum, renderer, config: config.clone() })
    }

    /// Runs the backbone and the cascade on `images: [N, 3, H, W]`.
    pub fn encode<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        images: Var<'g, T>,
        cams: &[Camera],
    ) -> Result<Encoded<'g, T>> {
        let s = images.shape();
        if s.len() != 4 || s[0] != cams.len() {
            return Err(ReconError::Invalid(format!("{:?} images for {} cameras", s, cams.len())));
        }
        if cams.len() < 2 {
            return Err(ReconError::Invalid("at least two source views are required".into()));
        }
        if let Some(c) = cams.iter().find(|c| c.width != s[3] || c.height != s[2]) {
            return Err(ReconError::Invalid(format!(
                "camera extent {}x{} does not match images {}x{}",
                c.width, c.height, s[3], s[2]
            )));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let features = self.backbone.forward(g, store, images)?;
        let cascade = self.frustum.forward(g, store, &features.matching, cams)?;
        let per_view = |v: Var<'g, T>| -> Result<Vec<Var<'g, T>>> {
            let sh = v.shape();
            (0..n).map(|i| Ok(v.slice(0, i, i + 1)?.reshape(&sh[1..])?)).collect()
        };
        let coarse = features.matching[0];
        let factor = coarse.shape()[2] as f64 / h as f64;
        let depth = cascade.final_depth().value();
        let depth_maps = (0..n)
            .map(|i| Ok(Rc::new(DenseArray::new(&[1, h, w], depth.data()[i * h * w..(i + 1) * h * w].to_vec())?)))
            .collect::<Result<_>>()?;
        let sources = RenderSources {
            cams: cams.to_vec(),
            images: per_view(images)?,
            image_feats: per_view(*features.pyramid.last().expect("levels"))?,
            match_coarse: per_view(coarse)?,
            match_cams: cams.iter().map(|c| c.scaled(factor)).collect(),
            volumes: cascade.grids()?,
            depth_maps,
        };
        Ok(Encoded { features, cascade, sources })
    }

    /// Renders rays through `pixels` of `target`. With fine samples
    /// configured, a detached coarse pass places the extra samples.
    #[allow(clippy::too_many_arguments)]
    pub fn render_rays<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        sources: &RenderSources<'g, T>,
        target: &Camera,
        pixels: &[Vector2<f64>],
        mode: SampleMode,
        rng: &mut dyn RngCore,
    ) -> Result<RenderOutput<'g, T>> {
        if pixels.is_empty() {
            return Err(ReconError::Invalid("no rays to render".into()));
        }
        let cfg = &self.config.renderer;
        let rays = target.generate_rays(pixels);
        let r = rays.len();
        let mc = cfg.coarse_samples;
        let mut t = Vec::with_capacity(r * mc);
        for i in 0..r {
            let jitter: Option<&mut dyn RngCore> = if mode == SampleMode::Train { Some(&mut *rng) } else { None };
            t.extend(coarse_t(rays.near[i], rays.far[i], mc, jitter));
        }
        if cfg.fine_samples == 0 {
            return self.evaluate(g, store, sources, target, &rays, t, mc);
        }
        let weights = {
            let gi = Graph::<T>::inference();
            let bound = sources.freeze().bind(&gi);
            let coarse = self.evaluate(&gi, store, &bound, target, &rays, t.clone(), mc)?;
            let w = coarse.weights.value();
            w.data().iter().map(|x| x.as_f64()).collect::<Vec<f64>>()
        };
        let m = mc + cfg.fine_samples;
        let mut merged = Vec::with_capacity(r * m);
        for i in 0..r {
            let jitter: Option<&mut dyn RngCore> = if mode == SampleMode::Train { Some(&mut *rng) } else { None };
            let fine = fine_t(rays.near[i], rays.far[i], &weights[i * mc..(i + 1) * mc], cfg.fine_samples, jitter);
            merged.extend(merge_t(&t[i * mc..(i + 1) * mc], &fine, rays.near[i], rays.far[i]));
        }
        self.evaluate(g, store, sources, target, &rays, merged, m)
    }

    /// Full network evaluation at given sample distances.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        src: &RenderSources<'g, T>,
        target: &Camera,
        rays: &RayBatch,
        t: Vec<f64>,
        m: usize,
    ) -> Result<RenderOutput<'g, T>> {
        let r = rays.len();
        let p = r * m;
        let n = src.views();
        let points: Vec<Vector3<f64>> = (0..p).map(|k| rays.point(k / m, t[k])).collect();
        let mut tokens = Vec::with_capacity(n);
        let mut colors = Vec::with_capacity(n);
        let mut view_mask = vec![T::zero(); p * n];
        // Tokens go in a fixed order by camera centre so the set attention
        // reduces over views in the same sequence for any input ordering.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let (ca, cb) = (src.cams[a].center(), src.cams[b].center());
            ca.iter().zip(cb.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        });
        for (slot, &v) in order.iter().enumerate() {
            let coords = projected_coords(&src.cams[v], &points);
            let (feat, mask) = src.image_feats[v].bilinear_sample(&coords)?;
            let (color, _) = src.images[v].bilinear_sample(&coords)?;
            let marr = mask.to_array::<T>();
            for k in 0..p {
                if mask.get(k) {
                    view_mask[k * n + slot] = T::one();
                }
            }
            let tok = concat(&[feat, color, g.constant(marr.clone())], 1)?.mul_const(&marr)?;
            let width = tok.shape()[1];
            tokens.push(tok.reshape(&[p, 1, width])?);
            colors.push(color.reshape(&[p, 1, 3])?);
        }
        let view_mask = DenseArray::new(&[p, n], view_mask)?;
        let (volume, volume_mask) = sample_global_feature(&src.volumes, &points)?;
        let (similarity, similarity_mask) =
            encode_similarity(&src.match_coarse, &src.match_cams, &points, self.config.similarity_groups)?;

        let axis = target.optical_axis();
        let cos: Vec<f64> = rays.directions.iter().map(|d| d.dot(&axis)).collect();
        let prior = if self.config.renderer.depth_prior {
            depth_crossings(src, &points, &t, r, m)?
        } else {
            vec![None; r]
        };
        let mut offsets = Vec::with_capacity(p);
        for i in 0..r {
            let td = prior[i].unwrap_or(0.5 * (rays.near[i] + rays.far[i]));
            for k in 0..m {
                offsets.push((t[i * m + k] - td) * cos[i]);
            }
        }
        let inputs = SampleInputs {
            view_tokens: concat(&tokens, 1)?,
            colors: concat(&colors, 1)?,
            view_mask,
            volume,
            volume_mask,
            similarity,
            similarity_mask,
            offsets,
            depth_range: target.depth_max - target.depth_min,
        };
        let valid: Vec<bool> = (0..r)
            .map(|i| (i * m..(i + 1) * m).any(|k| (0..n).any(|v| inputs.view_mask.data()[k * n + v] != T::zero())))
            .collect();
        let (sdf, sample_colors) = self.renderer.forward(g, store, &inputs, r, m)?;
        let log_s = g.param(store, self.renderer.log_s).mul_scalar(SHARPNESS_SCALE)?;
        let alpha = neus_alpha(sdf, log_s)?;
        let comp = composite(alpha, sample_colors, &t, &rays.far)?;
        let cos_arr = DenseArray::from_fn(&[r], |i| T::lit(cos[i]));
        let z_depth = comp.depth.mul_const(&cos_arr)?;
        Ok(RenderOutput {
            color: comp.color,
            depth: comp.depth,
            z_depth,
            weights: comp.weights,
            sdf,
            opacity: comp.opacity,
            valid,
            t,
            samples: m,
        })
    }
}

/// Ray distance of the first front-to-back crossing of the source depth
/// maps: the mean over views of `z_view - depth_view(projection)` changes
/// sign from negative to non-negative between consecutive samples.
pub fn depth_crossings<T: Scalar>(
    src: &RenderSources<'_, T>,
    points: &[Vector3<f64>],
    t: &[f64],
    rays: usize,
    m: usize,
) -> Result<Vec<Option<f64>>> {
    let p = points.len();
    let mut sum = vec![0.0; p];
    let mut count = vec![0usize; p];
    for (cam, depth) in src.cams.iter().zip(&src.depth_maps) {
        let coords = projected_coords(cam, points);
        let (d, mask) = bilinear_sample_array(depth, &coords)?;
        for k in 0..p {
            let dk = d.data()[k].as_f64();
            if mask.get(k) && dk > 0.0 {
                sum[k] += cam.to_camera(&points[k]).z - dk;
                count[k] += 1;
            }
        }
    }
    let res: Vec<Option<f64>> = (0..p).map(|k| (count[k] > 0).then(|| sum[k] / count[k] as f64)).collect();
    Ok((0..rays)
        .map(|i| {
            (0..m.saturating_sub(1)).find_map(|k| {
                let (a, b) = (res[i * m + k]?, res[i * m + k + 1]?);
                (a < 0.0 && b >= 0.0).then(|| {
                    let (ta, tb) = (t[i * m + k], t[i * m + k + 1]);
                    ta + (tb - ta) * (-a) / (b - a)
                })
            })
        })
        .collect())
}

/// Dense rendering of a target view in pixel chunks.
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    /// Planar `[3, H, W]`.
    pub color: Vec<f32>,
    /// Expected depth along the camera axis.
    pub depth: Vec<f32>,
    pub opacity: Vec<f32>,
    pub valid: Vec<bool>,
}

impl RenderedView {
    /// Pixels whose ray reached the surface.
    pub fn hits(&self) -> Vec<bool> {
        self.opacity.iter().map(|&o| o as f64 >= crate::renderer::MISS_OPACITY).collect()
    }

    /// Depth with misses zeroed.
    pub fn masked_depth(&self) -> Vec<f32> {
        self.depth.iter().zip(self.hits()).map(|(&d, h)| if h { d } else { 0.0 }).collect()
    }
}

impl Model {
    /// Encodes `images: [N, 3, H, W]` once and renders every pixel of
    /// `target` in eval mode.
    pub fn render_view<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: &DenseArray<T>,
        cams: &[Camera],
        target: &Camera,
        chunk: usize,
    ) -> Result<RenderedView> {
        let frozen = {
            let g = Graph::<T>::inference();
            let enc = self.encode(&g, store, g.constant(images.clone()), cams)?;
            enc.sources.freeze()
        };
        let pixels = target.pixel_grid();
        let hw = pixels.len();
        let mut out = RenderedView {
            width: target.width,
            height: target.height,
            color: vec![0.0; 3 * hw],
            depth: vec![0.0; hw],
            opacity: vec![0.0; hw],
            valid: vec![false; hw],
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for (c, batch) in pixels.chunks(chunk.max(1)).enumerate() {
            let g = Graph::<T>::inference();
            let src = frozen.bind(&g);
            let r = self.render_rays(&g, store, &src, target, batch, SampleMode::Eval, &mut rng)?;
            let (color, depth, opacity) = (r.color.value(), r.z_depth.value(), r.opacity.value());
            for k in 0..batch.len() {
                let px = c * chunk.max(1) + k;
                for ch in 0..3 {
                    out.color[ch * hw + px] = color.data()[k * 3 + ch].as_f64() as f32;
                }
                let o = opacity.data()[k].as_f64();
                out.opacity[px] = o as f32;
                out.valid[px] = r.valid[k];
                out.depth[px] = depth.data()[k].as_f64() as f32;
            }
        }
        Ok(out)
    }
}
