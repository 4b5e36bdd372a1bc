use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use ufo_recon::model::{ModelConfig, RenderOutput};
use ufo_recon::synthlab::{generate_scene, SceneSpec};
use ufo_recon::trainer::*;
use ufo_tensor::{checkpoint, DenseArray, Graph, Var};

fn constant_output<'g>(g: &'g Graph<f64>, color: &[f64], z: &[f64], valid: Vec<bool>) -> RenderOutput<'g, f64> {
    let r = z.len();
    let c = |shape: &[usize], v: &[f64]| g.constant(DenseArray::from_f64(shape, v).unwrap());
    let zero = |shape: &[usize]| -> Var<'g, f64> { g.constant(DenseArray::zeros(shape)) };
    RenderOutput {
        color: c(&[r, 3], color),
        depth: c(&[r], z),
        z_depth: c(&[r], z),
        weights: zero(&[r, 2]),
        sdf: zero(&[r, 2]),
        opacity: zero(&[r]),
        valid,
        t: vec![0.0; 2 * r],
        samples: 2,
    }
}

fn two_rays() -> RayTargets {
    RayTargets { color: vec![0.5; 6], depth: vec![2.0, 2.0] }
}

#[test]
fn loss_matches_hand_computation() {
    let g = Graph::<f64>::new();
    // Colour errors 0.1 and 0.3 per channel, depth errors 1 and 3.
    let out = constant_output(&g, &[0.6, 0.6, 0.6, 0.2, 0.2, 0.2], &[3.0, 5.0], vec![true, true]);
    let t = loss(&g, &out, &two_rays(), &[], 1.0).unwrap();
    let color = (3.0 * 0.01 + 3.0 * 0.09) / 6.0;
    assert!((t.color - color).abs() < 1e-12);
    assert!((t.depth - 2.0).abs() < 1e-12);
    assert!((t.total.item() - (color + 2.0)).abs() < 1e-12);

    let pure = loss(&g, &out, &two_rays(), &[], 0.0).unwrap();
    assert!((pure.total.item() - color).abs() < 1e-12);
}

#[test]
fn loss_skips_invalid_rays_and_missing_depth() {
    let g = Graph::<f64>::new();
    let out = constant_output(&g, &[0.6, 0.6, 0.6, 0.2, 0.2, 0.2], &[3.0, 5.0], vec![true, false]);
    let t = loss(&g, &out, &two_rays(), &[], 1.0).unwrap();
    assert!((t.color - 0.01).abs() < 1e-12);
    let mut targets = two_rays();
    targets.depth = vec![0.0, 2.0];
    let out = constant_output(&g, &[0.5; 6], &[3.0, 5.0], vec![true, true]);
    let t = loss(&g, &out, &targets, &[], 1.0).unwrap();
    assert!((t.depth - 3.0).abs() < 1e-12);

    let none = constant_output(&g, &[0.5; 6], &[3.0, 5.0], vec![false, false]);
    assert!(loss(&g, &none, &two_rays(), &[], 1.0).is_err());
}

#[test]
fn frustum_terms_add_to_depth() {
    let g = Graph::<f64>::new();
    let out = constant_output(&g, &[0.5; 6], &[3.0, 5.0], vec![true, true]);
    let pred = g.constant(DenseArray::from_f64(&[1, 1, 2], &[1.0, 1.5]).unwrap());
    let f = [FrustumTarget { pred, gt: vec![2.0, 0.0] }];
    let t = loss(&g, &out, &two_rays(), &f, 0.5).unwrap();
    assert!((t.depth - 3.0).abs() < 1e-12);
    assert!((t.total.item() - 1.5).abs() < 1e-12);
}

#[test]
fn random_sampler_inclusion_is_uniform() {
    let (n, k, draws) = (8, 3, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = vec![0.0f64; n];
    for _ in 0..draws {
        let target = rng.random_range(0..n);
        for v in sample_views(n, target, k, SamplingMode::Random, None, &mut rng).unwrap() {
            counts[v] += 1.0;
        }
    }
    let expected = (draws * k) as f64 / n as f64;
    let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((n - 1) as f64).unwrap().inverse_cdf(0.99);
    assert!(stat < critical, "chi-square {stat} >= {critical}, counts {counts:?}");
}

fn micro_scene() -> ufo_recon::synthlab::Scene {
    generate_scene(&SceneSpec { width: 16, height: 16, track_samples: 200, ..Default::default() }).unwrap()
}

#[test]
fn zero_steps_write_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { steps: 0, rays_per_step: 8, model: ModelConfig::micro(), ..Default::default() };
    let mut tr = Trainer::<f32>::new(micro_scene(), cfg).unwrap();
    let initial = tr.store.named_values();
    tr.run(Some(dir.path()), |_| panic!("no step expected")).unwrap();
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 1);
    let recs = checkpoint::load::<f32>(dir.path().join(CHECKPOINT_FILE)).unwrap();
    for (name, value) in &initial {
        let (_, saved) = recs.iter().find(|(n, _)| n == name).unwrap();
        assert_eq!(saved, value);
    }
    assert!(dir.path().join(CONFIG_FILE).exists());
}

#[test]
fn run_logs_every_step_and_is_seed_deterministic() {
    let cfg = TrainConfig { steps: 2, rays_per_step: 8, n_source_views: 3, model: ModelConfig::micro(), ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut a = Trainer::<f32>::new(micro_scene(), cfg.clone()).unwrap();
    a.run(Some(dir.path()), |_| {}).unwrap();
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 3);
    let mut b = Trainer::<f32>::new(micro_scene(), cfg).unwrap();
    b.run(None, |_| {}).unwrap();
    assert_eq!(a.history, b.history);
    assert!(a.history.iter().all(|l| l.total.is_finite()));
}
