//! Losses, source-view sampling and the optimization loop.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ufo_tensor::checkpoint::{self, restore_training, training_records};
use ufo_tensor::{Adam, AdamConfig, DenseArray, Graph, ParamStore, Scalar, Var};

use crate::error::{io_err, ReconError, Result};
use crate::frustum::Cascade;
use crate::model::{Model, ModelConfig, RenderOutput};
use crate::renderer::SampleMode;
use crate::synthlab::{aggregate, evaluate_view, EvalReport, Scene, ViewReport};
use crate::vcscore::{GaussianParams, ScoreMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Best,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_source_views: usize,
    pub rays_per_step: usize,
    pub steps: usize,
    pub lr: f64,
    pub alpha_depth: f64,
    pub sampling_mode: SamplingMode,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Source views used at every step instead of sampling.
    pub fixed_sources: Option<Vec<usize>>,
    /// Views never used as training targets.
    pub holdout: Vec<usize>,
    pub gaussian: GaussianParams,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_source_views: 4,
            rays_per_step: 512,
            steps: 1000,
            lr: 1e-4,
            alpha_depth: 1.0,
            sampling_mode: SamplingMode::Best,
            seed: 0,
            checkpoint_every: 100,
            fixed_sources: None,
            holdout: Vec::new(),
            gaussian: GaussianParams::default(),
            model: ModelConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_source_views < 2 {
            return Err(ReconError::Config("at least two source views are required".into()));
        }
        if !(self.lr > 0.0) {
            return Err(ReconError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.alpha_depth >= 0.0) {
            return Err(ReconError::Config(format!("depth weight {} must be non-negative", self.alpha_depth)));
        }
        if self.rays_per_step == 0 {
            return Err(ReconError::Config("rays_per_step must be positive".into()));
        }
        if let Some(s) = &self.fixed_sources {
            if s.len() < 2 {
                return Err(ReconError::Config("fixed source set needs at least two views".into()));
            }
        }
        self.gaussian.validate()?;
        self.model.validate()
    }
}

/// Picks `k` source views for `target` among the other views. Best mode
/// maximizes the summed pairwise score with the target (ties broken by
/// lower view id); random mode draws uniformly without replacement.
/// Returns sorted ids.
pub fn sample_views(
    n_views: usize,
    target: usize,
    k: usize,
    mode: SamplingMode,
    scores: Option<&ScoreMatrix>,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if target >= n_views {
        return Err(ReconError::Invalid(format!("target {target} out of range for {n_views} views")));
    }
    if n_views <= k {
        return Err(ReconError::Invalid(format!("{n_views} views cannot supply {k} sources and a target")));
    }
    let others: Vec<usize> = (0..n_views).filter(|&v| v != target).collect();
    let mut picked: Vec<usize> = match mode {
        SamplingMode::Random => sample(rng, others.len(), k).into_iter().map(|i| others[i]).collect(),
        SamplingMode::Best => {
            let m = scores.ok_or_else(|| ReconError::Invalid("best-set sampling needs a score matrix".into()))?;
            let mut ranked = others;
            ranked.sort_by(|&a, &b| m.get(target, b).total_cmp(&m.get(target, a)).then(a.cmp(&b)));
            ranked.truncate(k);
            ranked
        }
    };
    picked.sort_unstable();
    Ok(picked)
}

/// Ground truth for a ray batch.
pub struct RayTargets {
    /// `[R, 3]`.
    pub color: Vec<f64>,
    /// Axis depth, 0 where invalid.
    pub depth: Vec<f64>,
}

/// Frustum depth maps `[N, h, w]` paired with GT subsampled to the same grid.
pub struct FrustumTarget<'g, T: Scalar> {
    pub pred: Var<'g, T>,
    pub gt: Vec<f64>,
}

pub struct LossTerms<'g, T: Scalar> {
    pub total: Var<'g, T>,
    pub color: f64,
    pub depth: f64,
}

fn mask_array<T: Scalar>(shape: &[usize], mask: &[bool]) -> DenseArray<T> {
    DenseArray::from_fn(shape, |i| if mask[i] { T::one() } else { T::zero() })
}

fn masked_mae<'g, T: Scalar>(g: &'g Graph<T>, pred: Var<'g, T>, gt: &[f64]) -> Result<Option<Var<'g, T>>> {
    let keep: Vec<bool> = gt.iter().map(|&d| d > 0.0).collect();
    let n = keep.iter().filter(|&&k| k).count();
    if n == 0 {
        return Ok(None);
    }
    let shape = pred.shape();
    let gt = g.constant(DenseArray::from_fn(&shape, |i| T::lit(gt[i])));
    let err = pred.sub(gt)?.abs()?.mul_const(&mask_array(&shape, &keep))?;
    Ok(Some(err.sum_all()?.mul_scalar(1.0 / n as f64)?))
}

/// Colour MSE over valid rays plus `alpha` times the depth MAE of the
/// rendered rays and of every frustum level.
pub fn loss<'g, T: Scalar>(
    g: &'g Graph<T>,
    out: &RenderOutput<'g, T>,
    targets: &RayTargets,
    frustum: &[FrustumTarget<'g, T>],
    alpha: f64,
) -> Result<LossTerms<'g, T>> {
    let r = out.valid.len();
    let n_valid = out.valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(ReconError::Invalid("no valid rays in the batch".into()));
    }
    if targets.color.len() != 3 * r || targets.depth.len() != r {
        return Err(ReconError::Invalid("ray targets do not match the batch".into()));
    }
    let gt_color = g.constant(DenseArray::from_fn(&[r, 3], |i| T::lit(targets.color[i])));
    let color_mask: Vec<bool> = (0..3 * r).map(|i| out.valid[i / 3]).collect();
    let color = out
        .color
        .sub(gt_color)?
        .square()?
        .mul_const(&mask_array(&[r, 3], &color_mask))?
        .sum_all()?
        .mul_scalar(1.0 / (3 * n_valid) as f64)?;
    let mut depth: Option<Var<'g, T>> = masked_mae(g, out.z_depth, &targets.depth)?;
    for f in frustum {
        if let Some(term) = masked_mae(g, f.pred, &f.gt)? {
            depth = Some(match depth {
                Some(d) => d.add(term)?,
                None => term,
            });
        }
    }
    let color_value = color.item().as_f64();
    let (total, depth_value) = match depth {
        Some(d) if alpha > 0.0 => (color.add(d.mul_scalar(alpha)?)?, d.item().as_f64()),
        Some(d) => (color, d.item().as_f64()),
        None => (color, 0.0),
    };
    Ok(LossTerms { total, color: color_value, depth: depth_value })
}

/// Nearest-pixel subsampling of full-resolution depth onto a `h x w` grid
/// of a camera scaled by `w / width`.
pub fn subsample_depth(depth: &[f32], width: usize, height: usize, h: usize, w: usize) -> Vec<f64> {
    let fx = width as f64 / w as f64;
    let fy = height as f64 / h as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = ((y as f64 * fy).round() as usize).min(height - 1);
        for x in 0..w {
            let sx = ((x as f64 * fx).round() as usize).min(width - 1);
            out.push(depth[sy * width + sx] as f64);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub color: f64,
    pub depth: f64,
}

/// Training state over a single scene.
pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore<T>,
    pub adam: Adam<T>,
    pub scene: Scene,
    images: Vec<DenseArray<T>>,
    scores: Option<ScoreMatrix>,
    pub history: Vec<StepLog>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "train.json";
pub const LOG_FILE: &str = "loss.csv";

impl<T: Scalar> Trainer<T> {
    pub fn new(scene: Scene, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let n = scene.views();
        let k = config.fixed_sources.as_ref().map_or(config.n_source_views, Vec::len);
        if let Some(s) = &config.fixed_sources {
            if s.iter().any(|&v| v >= n) {
                return Err(ReconError::Config(format!("fixed source out of range for {n} views")));
            }
        } else if n <= k {
            return Err(ReconError::Config(format!("{n} views cannot supply {k} sources and a target")));
        }
        if (0..n).all(|v| config.holdout.contains(&v)) {
            return Err(ReconError::Config("every view is held out".into()));
        }
        let scores = match config.sampling_mode {
            SamplingMode::Best => Some(scene.score_matrix(&config.gaussian)?),
            SamplingMode::Random => None,
        };
        let images = scene
            .images
            .iter()
            .map(|im| DenseArray::from_f64(&[3, im.height, im.width], &im.to_planar().iter().map(|&x| x as f64).collect::<Vec<_>>()))
            .collect::<std::result::Result<_, _>>()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(&mut store, &config.model, &mut rng)?;
        let adam = Adam::new(AdamConfig { lr: config.lr, ..Default::default() });
        Ok(Self { config, model, store, adam, scene, images, scores, history: Vec::new() })
    }

    pub fn step_count(&self) -> usize {
        self.adam.step as usize
    }

    fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64 + 1);
        rng
    }

    /// Target view and sorted sources for `step`.
    pub fn views_for_step(&self, rng: &mut ChaCha8Rng) -> Result<(usize, Vec<usize>)> {
        let n = self.scene.views();
        let targets: Vec<usize> = (0..n).filter(|v| !self.config.holdout.contains(v)).collect();
        let target = targets[rng.random_range(0..targets.len())];
        let sources = match &self.config.fixed_sources {
            Some(s) => {
                let mut s = s.clone();
                s.sort_unstable();
                s
            }
            None => sample_views(n, target, self.config.n_source_views, self.config.sampling_mode, self.scores.as_ref(), rng)?,
        };
        Ok((target, sources))
    }

    pub fn source_batch(&self, views: &[usize]) -> Result<DenseArray<T>> {
        let (h, w) = (self.scene.cams[0].height, self.scene.cams[0].width);
        let mut data = Vec::with_capacity(views.len() * 3 * h * w);
        for &v in views {
            data.extend_from_slice(self.images[v].data());
        }
        Ok(DenseArray::new(&[views.len(), 3, h, w], data)?)
    }

    fn frustum_targets<'g>(&self, cascade: &Cascade<'g, T>, sources: &[usize]) -> Vec<FrustumTarget<'g, T>> {
        cascade
            .levels
            .iter()
            .map(|level| {
                let s = level.volume.depth.shape();
                let (h, w) = (s[1], s[2]);
                let gt = sources
                    .iter()
                    .flat_map(|&v| {
                        let d = &self.scene.depths[v];
                        subsample_depth(&d.data, d.width, d.height, h, w)
                    })
                    .collect();
                FrustumTarget { pred: level.volume.depth, gt }
            })
            .collect()
    }

    /// Runs one optimization step. Parameters are untouched when the loss
    /// is not finite.
    pub fn step(&mut self) -> Result<StepLog> {
        let step = self.step_count();
        let mut rng = self.step_rng(step);
        let (target, sources) = self.views_for_step(&mut rng)?;
        let cams: Vec<_> = sources.iter().map(|&v| self.scene.cams[v].clone()).collect();
        let tcam = &self.scene.cams[target];
        let hw = tcam.width * tcam.height;
        let pick = sample(&mut rng, hw, self.config.rays_per_step.min(hw)).into_vec();
        let pixels: Vec<Vector2<f64>> =
            pick.iter().map(|&p| Vector2::new((p % tcam.width) as f64, (p / tcam.width) as f64)).collect();
        let img = &self.images[target];
        let targets = RayTargets {
            color: pick.iter().flat_map(|&p| (0..3).map(move |c| img.data()[c * hw + p].as_f64())).collect(),
            depth: pick.iter().map(|&p| self.scene.depths[target].data[p] as f64).collect(),
        };
        let g = Graph::<T>::new();
        let enc = self.model.encode(&g, &self.store, g.constant(self.source_batch(&sources)?), &cams)?;
        let out = self.model.render_rays(&g, &self.store, &enc.sources, tcam, &pixels, SampleMode::Train, &mut rng)?;
        let frustum = self.frustum_targets(&enc.cascade, &sources);
        let terms = loss(&g, &out, &targets, &frustum, self.config.alpha_depth)?;
        let total = terms.total.item().as_f64();
        if !total.is_finite() {
            return Err(ReconError::Invalid(format!("non-finite loss at step {step}")));
        }
        self.store.zero_grad();
        g.backward(terms.total, &mut self.store)?;
        self.adam.step(&mut self.store);
        let log = StepLog { step, total, color: terms.color, depth: terms.depth };
        self.history.push(log);
        Ok(log)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        checkpoint::save(path, &training_records(&self.store, &self.adam)).map_err(|e| match e {
            ufo_tensor::TensorError::Io(source) => ReconError::Io { path: path.to_path_buf(), source },
            other => other.into(),
        })
    }

    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let records = checkpoint::load(path.as_ref())?;
        restore_training(&records, &mut self.store, &mut self.adam)?;
        Ok(())
    }

    /// Trains until `config.steps` total steps, writing the config, the
    /// loss log and checkpoints into `out` when given. On a non-finite
    /// loss the last good parameters are checkpointed before returning
    /// the error.
    pub fn run(&mut self, out: Option<&Path>, mut progress: impl FnMut(&StepLog)) -> Result<()> {
        let mut csv = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                let cfg = dir.join(CONFIG_FILE);
                fs::write(&cfg, serde_json::to_string_pretty(&self.config)?).map_err(io_err(&cfg))?;
                let log = dir.join(LOG_FILE);
                let fresh = self.step_count() == 0 || !log.exists();
                let mut f = fs::OpenOptions::new()
                    .create(true)
                    .append(!fresh)
                    .write(true)
                    .truncate(fresh)
                    .open(&log)
                    .map_err(io_err(&log))?;
                if fresh {
                    writeln!(f, "step,total,color,depth").map_err(io_err(&log))?;
                }
                Some((f, log))
            }
            None => None,
        };
        let ckpt: Option<PathBuf> = out.map(|d| d.join(CHECKPOINT_FILE));
        while self.step_count() < self.config.steps {
            let log = match self.step() {
                Ok(l) => l,
                Err(e) => {
                    if let Some(p) = &ckpt {
                        self.save_checkpoint(p)?;
                    }
                    return Err(e);
                }
            };
            if let Some((f, path)) = csv.as_mut() {
                writeln!(f, "{},{},{},{}", log.step, log.total, log.color, log.depth).map_err(io_err(path.clone()))?;
            }
            progress(&log);
            let every = self.config.checkpoint_every;
            if let Some(p) = &ckpt {
                if every > 0 && self.step_count() % every == 0 {
                    self.save_checkpoint(p)?;
                }
            }
        }
        if let Some(p) = &ckpt {
            self.save_checkpoint(p)?;
        }
        Ok(())
    }
}

/// Planar `[N, 3, H, W]` batch of the scene images of `views`.
pub fn scene_images<T: Scalar>(scene: &Scene, views: &[usize]) -> Result<DenseArray<T>> {
    let first = views.first().ok_or_else(|| ReconError::Invalid("no views selected".into()))?;
    let im = &scene.images[*first];
    let data: Vec<f64> = scene.image_batch(views).iter().map(|&x| x as f64).collect();
    Ok(DenseArray::from_f64(&[views.len(), 3, im.height, im.width], &data)?)
}

/// Renders every target from the `sources` set and scores its depth
/// against the scene ground truth.
pub fn evaluate_sources<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    scene: &Scene,
    sources: &[usize],
    targets: &[usize],
    chunk: usize,
) -> Result<EvalReport> {
    let n = scene.views();
    if let Some(v) = sources.iter().chain(targets).find(|&&v| v >= n) {
        return Err(ReconError::Invalid(format!("view {v} out of range for {n} views")));
    }
    let images = scene_images::<T>(scene, sources)?;
    let cams: Vec<_> = sources.iter().map(|&v| scene.cams[v].clone()).collect();
    let mut per_view = Vec::with_capacity(targets.len());
    for &t in targets {
        let view = model.render_view(store, &images, &cams, &scene.cams[t], chunk)?;
        let metrics = evaluate_view(&scene.cams[t], &view.depth, Some(&view.hits()), &scene.depths[t].data)?;
        per_view.push(ViewReport { view: t, metrics });
    }
    aggregate(per_view)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthlab::{generate_scene, SceneSpec};

    fn micro_scene() -> Scene {
        generate_scene(&SceneSpec { width: 16, height: 16, track_samples: 200, ..Default::default() }).unwrap()
    }

    fn micro_config() -> TrainConfig {
        TrainConfig { n_source_views: 3, rays_per_step: 16, steps: 2, model: ModelConfig::micro(), ..Default::default() }
    }

    #[test]
    fn sampler_modes() {
        let scene = micro_scene();
        let m = scene.score_matrix(&GaussianParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let best = sample_views(8, 0, 3, SamplingMode::Best, Some(&m), &mut rng).unwrap();
        assert_eq!(best, sample_views(8, 0, 3, SamplingMode::Best, Some(&m), &mut rng).unwrap());
        assert!(!best.contains(&0));
        let all: Vec<usize> = (1..8).collect();
        assert_eq!(sample_views(8, 0, 7, SamplingMode::Random, None, &mut rng).unwrap(), all);
        assert_eq!(sample_views(8, 0, 7, SamplingMode::Best, Some(&m), &mut rng).unwrap(), all);
        assert!(sample_views(3, 0, 3, SamplingMode::Random, None, &mut rng).is_err());
    }

    #[test]
    fn subsample_picks_nearest() {
        let d: Vec<f32> = (0..16).map(|i| i as f32).collect();
        assert_eq!(subsample_depth(&d, 4, 4, 2, 2), vec![0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut tr = Trainer::<f64>::new(micro_scene(), TrainConfig { lr: 1e-300, ..micro_config() }).unwrap();
        let before = tr.store.named_values();
        tr.step().unwrap();
        for ((_, a), (_, b)) in before.iter().zip(tr.store.named_values()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Trainer::<f64>::new(micro_scene(), TrainConfig { steps: 3, ..micro_config() }).unwrap();
        a.run(None, |_| {}).unwrap();

        let mut b = Trainer::<f64>::new(micro_scene(), TrainConfig { steps: 1, ..micro_config() }).unwrap();
        b.run(Some(dir.path()), |_| {}).unwrap();
        let mut c = Trainer::<f64>::new(micro_scene(), TrainConfig { steps: 3, ..micro_config() }).unwrap();
        c.load_checkpoint(dir.path().join(CHECKPOINT_FILE)).unwrap();
        c.run(None, |_| {}).unwrap();
        assert_eq!(a.history[1..], c.history[..]);
        assert_eq!(a.store.named_values(), c.store.named_values());
    }
}
