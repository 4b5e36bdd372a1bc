//! Finite-difference checks of the reconstruction operators and of the
//! whole pipeline from rendered loss back to source pixels.

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ufo_tensor::gradcheck::{check_inputs, op_suite, CheckConfig, NamedReport};
use ufo_tensor::{DenseArray, Graph, ParamStore, Var};

use crate::attention::linear_attention;
use crate::error::Result;
use crate::frustum::{build_correlation, soft_argmax};
use crate::geometry::{homography_warp, Camera, DepthHypotheses};
use crate::model::{Model, ModelConfig};
use crate::renderer::{composite, neus_alpha, SampleMode};
use crate::similarity::encode_similarity;
use crate::synthlab::{generate_scene, RigSpec, SceneSpec};

fn weighted<'g>(y: Var<'g, f64>) -> ufo_tensor::Result<Var<'g, f64>> {
    let w = DenseArray::from_fn(&y.shape(), |i| ((i * 104_729) % 17) as f64 / 17.0 - 0.45);
    y.mul_const(&w)?.sum_all()
}

fn micro_spec(size: usize) -> SceneSpec {
    SceneSpec {
        width: size,
        height: size,
        track_samples: 50,
        rig: RigSpec { count: 3, angles: Some(vec![-12.0, 0.0, 12.0]), ..Default::default() },
        ..Default::default()
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DenseArray<f64> {
    DenseArray::uniform(shape, lo, hi, rng)
}

/// Operators built on top of the tensor primitives.
pub fn operator_suite(cfg: &CheckConfig, seed: u64) -> Result<Vec<NamedReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &str,
                   inputs: Vec<DenseArray<f64>>,
                   rng: &mut ChaCha8Rng,
                   f: &dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> ufo_tensor::Result<Var<'g, f64>>|
     -> Result<()> {
        out.push((name.to_string(), check_inputs(&inputs, cfg, rng, f)?));
        Ok(())
    };

    let sdf = uniform(&[3, 6], -0.5, 0.5, &mut rng);
    let log_s = DenseArray::from_f64(&[1], &[1.2])?;
    run("opacity", vec![sdf.clone(), log_s.clone()], &mut rng, &|_, v| weighted(neus_alpha(v[0], v[1]).map_err(to_tensor)?))?;

    let t: Vec<f64> = (0..18).map(|k| 1.0 + (k % 6) as f64 * 0.3).collect();
    let far = vec![3.0; 3];
    let colors = uniform(&[3, 6, 3], 0.0, 1.0, &mut rng);
    run("composite", vec![sdf, log_s, colors], &mut rng, &|_, v| {
        let c = composite(neus_alpha(v[0], v[1]).map_err(to_tensor)?, v[2], &t, &far).map_err(to_tensor)?;
        weighted(c.color)?.add(weighted(c.depth)?)?.add(weighted(c.opacity)?)
    })?;

    let (q, k, val) = (uniform(&[2, 3, 4], -1.0, 1.0, &mut rng), uniform(&[2, 5, 4], -1.0, 1.0, &mut rng), uniform(&[2, 5, 4], -1.0, 1.0, &mut rng));
    let mask = DenseArray::from_fn(&[2, 5, 1], |i| if i % 4 == 3 { 0.0 } else { 1.0 });
    run("linear-attention", vec![q, k, val], &mut rng, &|_, v| weighted(linear_attention(v[0], v[1], v[2], 2, Some(&mask))?))?;

    let scene = generate_scene(&micro_spec(8))?;
    let cams: Vec<Camera> = scene.cams.clone();
    let lo = cams[1].depth_min + 0.3 * (cams[1].depth_max - cams[1].depth_min);
    let hyps = DepthHypotheses::uniform(4, 8, 8, lo, lo + 1.5);
    let feats: Vec<DenseArray<f64>> = (0..3).map(|_| uniform(&[4, 8, 8], -1.0, 1.0, &mut rng)).collect();
    run("homography-warp", vec![feats[0].clone()], &mut rng, &|_, v| {
        weighted(homography_warp(v[0], &cams[0], &cams[1], &hyps)?.0)
    })?;
    run("correlation", feats.clone(), &mut rng, &|_, v| {
        let c = build_correlation(1, v, &cams, &hyps).map_err(to_tensor)?;
        weighted(c.corr)
    })?;
    let depths = hyps.to_array::<f64>().reshape(&[1, 4, 8, 8])?;
    run("soft-argmax", vec![uniform(&[1, 4, 8, 8], -1.0, 1.0, &mut rng)], &mut rng, &|_, v| {
        weighted(soft_argmax(v[0].softmax(1)?, &depths).map_err(to_tensor)?)
    })?;
    let points: Vec<Vector3<f64>> = (0..6).map(|i| Vector3::new(0.1 * i as f64 - 0.3, 0.05 * i as f64, 0.2)).collect();
    run("similarity", feats, &mut rng, &|_, v| {
        weighted(encode_similarity(v, &cams, &points, 2).map_err(to_tensor)?.0)
    })?;
    Ok(out)
}

fn to_tensor(e: crate::ReconError) -> ufo_tensor::TensorError {
    match e {
        crate::ReconError::Tensor(t) => t,
        other => ufo_tensor::TensorError::InvalidArgument { op: "pipeline", msg: other.to_string() },
    }
}

/// Gradient of a colour plus depth loss on rendered rays with respect to
/// the source images of a `size x size`, three-view micro pipeline with
/// `samples` samples per ray.
pub fn pipeline_check(cfg: &CheckConfig, size: usize, samples: usize, seed: u64) -> Result<NamedReport> {
    let scene = generate_scene(&micro_spec(size))?;
    let mut model_cfg = ModelConfig::micro();
    model_cfg.renderer.coarse_samples = samples;
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(&mut store, &model_cfg, &mut rng)?;
    // Zero-initialized biases on a black background put ReLUs exactly on
    // their kink; jitter every parameter to reach a generic point.
    let jittered: Vec<(String, DenseArray<f64>)> = store
        .named_values()
        .into_iter()
        .map(|(name, v)| {
            let noise = uniform(v.shape(), -0.05, 0.05, &mut rng);
            (name, v.zip_map(&noise, |a, b| a + b))
        })
        .collect();
    store.load_values(&jittered)?;
    let sources = [0usize, 2];
    let target = scene.cams[1].clone();
    let cams: Vec<Camera> = sources.iter().map(|&v| scene.cams[v].clone()).chain([scene.cams[1].clone()]).collect();
    let views = [0usize, 2, 1];
    let images: Vec<f64> = scene.image_batch(&views).iter().map(|&x| x as f64).collect();
    let images = DenseArray::from_f64(&[3, 3, size, size], &images)?;
    let c = (size / 2) as f64;
    let pixels: Vec<Vector2<f64>> = (0..6).map(|i| Vector2::new(c - 2.0 + i as f64 * 0.7, c + 1.0 - i as f64 * 0.4)).collect();
    let goal = DenseArray::from_fn(&[pixels.len(), 3], |i| 0.2 + 0.1 * (i % 5) as f64);
    let report = check_inputs(&[images], cfg, &mut rng, |g, v| {
        let enc = model.encode(g, &store, v[0], &cams).map_err(to_tensor)?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = model
            .render_rays(g, &store, &enc.sources, &target, &pixels, SampleMode::Eval, &mut unused)
            .map_err(to_tensor)?;
        let color = out.color.sub(g.constant(goal.clone()))?.square()?.sum_all()?;
        color.add(weighted(out.z_depth)?.mul_scalar(0.1)?)
    })?;
    Ok(("pipeline".to_string(), report))
}

/// Settings used for the end-to-end check: a sample of pixel coordinates
/// plus random directions.
pub fn pipeline_config() -> CheckConfig {
    CheckConfig { max_entries: Some(96), directions: 4, ..CheckConfig::default() }
}

/// Every check: tensor primitives, operators and the micro pipeline.
pub fn full_suite(seed: u64) -> Result<Vec<NamedReport>> {
    let op_cfg = CheckConfig { directions: 2, ..CheckConfig::default() };
    let mut all = op_suite(&op_cfg, seed)?;
    all.extend(operator_suite(&op_cfg, seed)?);
    all.push(pipeline_check(&pipeline_config(), 16, 8, seed)?);
    Ok(all)
}
