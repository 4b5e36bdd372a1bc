use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use ufo_recon::formats::{write_pfm, write_pnm, ByteImage, FloatMap};
use ufo_recon::gradsuite::full_suite;
use ufo_recon::model::Model;
use ufo_recon::synthlab::{generate_scene, make_rigs, Scene, SceneSpec};
use ufo_recon::trainer::{evaluate_sources, scene_images, TrainConfig, Trainer, CHECKPOINT_FILE, CONFIG_FILE};
use ufo_recon::vcscore::{rank_combinations, GaussianParams};
use ufo_tensor::{checkpoint, ParamStore};

#[derive(Parser, Debug)]
#[command(name = "uforecon", version, about = "Multi-view surface reconstruction toolkit")]
struct Cli {
    /// Cap on worker threads for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Global seed; overrides the seed in scene specs and training configs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene with exact depth and tracks.
    GenScene {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank all k-view combinations of a scene.
    VcScore {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        k: usize,
        /// CSV destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        gaussian: GaussianArgs,
    },
    /// Train on one scene.
    Train {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Train in double precision.
        #[arg(long)]
        double: bool,
    },
    /// Render colour and depth of a target view from chosen sources.
    Render {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        views: Vec<usize>,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1024)]
        chunk: usize,
    },
    /// Depth metrics of a trained run on a source-view set.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// `favorable`, `unfavorable` or comma-separated view ids.
        #[arg(long)]
        set: String,
        /// Set size for favorable/unfavorable; defaults to the run's source count.
        #[arg(long)]
        k: Option<usize>,
        /// Views to reconstruct; defaults to the members of the set.
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1024)]
        chunk: usize,
        #[command(flatten)]
        gaussian: GaussianArgs,
    },
    /// Finite-difference gradient suite.
    GradCheck {
        #[arg(long)]
        double: bool,
    },
}

#[derive(Args, Debug, Clone, Copy)]
struct GaussianArgs {
    #[arg(long, default_value_t = 5.0)]
    theta0: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma1: f64,
    #[arg(long, default_value_t = 10.0)]
    sigma2: f64,
}

impl GaussianArgs {
    fn params(self) -> Result<GaussianParams> {
        let g = GaussianParams { theta0: self.theta0, sigma1: self.sigma1, sigma2: self.sigma2 };
        g.validate()?;
        Ok(g)
    }
}

fn print_config(name: &str, value: &impl Serialize) -> Result<()> {
    println!("{name} configuration:\n{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn check_views(ids: &[usize], n: usize) -> Result<()> {
    if let Some(v) = ids.iter().find(|&&v| v >= n) {
        bail!("view {v} out of range for a scene with {n} views");
    }
    Ok(())
}

struct LoadedRun {
    config: TrainConfig,
    model: Model,
    store: ParamStore<f32>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let config: TrainConfig = read_json(&dir.join(CONFIG_FILE))?;
    let mut store = ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed);
    let model = Model::new(&mut store, &config.model, &mut rng)?;
    let path = dir.join(CHECKPOINT_FILE);
    let records = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    store.load_values(&records)?;
    Ok(LoadedRun { config, model, store })
}

#[derive(Serialize)]
struct EvalOutput {
    set: Vec<usize>,
    vc_score: f64,
    targets: Vec<usize>,
    #[serde(flatten)]
    report: ufo_recon::synthlab::EvalReport,
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    match cli.command {
        Command::GenScene { spec, out } => {
            let mut spec: SceneSpec = read_json(&spec)?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            print_config("scene", &spec)?;
            let scene = generate_scene(&spec)?;
            scene.write(&out)?;
            println!("wrote {} views and {} tracks to {}", scene.views(), scene.tracks.tracks.len(), out.display());
        }
        Command::VcScore { scene, k, out, gaussian } => {
            let g = gaussian.params()?;
            print_config("vc-score", &serde_json::json!({ "scene": scene, "k": k, "gaussian": g }))?;
            let scene = Scene::load(&scene)?;
            let matrix = scene.score_matrix(&g)?;
            let views: Vec<usize> = (0..scene.views()).collect();
            let csv = rank_combinations(&views, k, &matrix)?.to_csv();
            match out {
                Some(p) => write_text(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Train { scene, config, out, resume, double } => {
            let mut cfg = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            print_config("train", &cfg)?;
            let scene = Scene::load(&scene)?;
            if double {
                train::<f64>(scene, cfg, &out, resume)?;
            } else {
                train::<f32>(scene, cfg, &out, resume)?;
            }
        }
        Command::Render { run, scene, views, target, out, chunk } => {
            print_config("render", &serde_json::json!({ "run": run, "scene": scene, "views": views, "target": target, "out": out }))?;
            let scene = Scene::load(&scene)?;
            check_views(&views, scene.views())?;
            check_views(&[target], scene.views())?;
            let loaded = load_run(&run)?;
            let cams: Vec<_> = views.iter().map(|&v| scene.cams[v].clone()).collect();
            let view = loaded.model.render_view(&loaded.store, &scene_images(&scene, &views)?, &cams, &scene.cams[target], chunk)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_pnm(out.join(format!("{target:04}.ppm")), &ByteImage::from_planar(&view.color, 3, view.height, view.width))?;
            let depth = FloatMap { width: view.width, height: view.height, data: view.masked_depth() };
            write_pfm(out.join(format!("{target:04}_depth.pfm")), &depth)?;
            println!("wrote {}", out.display());
        }
        Command::Eval { run, scene, set, k, targets, out, chunk, gaussian } => {
            let scene_dir = scene;
            let scene = Scene::load(&scene_dir)?;
            let loaded = load_run(&run)?;
            let g = gaussian.params()?;
            let k = k.unwrap_or_else(|| loaded.config.fixed_sources.as_ref().map_or(loaded.config.n_source_views, Vec::len));
            let matrix = scene.score_matrix(&g)?;
            let ids: Vec<usize> = match set.as_str() {
                "favorable" | "unfavorable" => {
                    let (fav, unfav) = make_rigs(&scene.cams, &scene.tracks, k, &g)?;
                    if set == "favorable" { fav.views } else { unfav.views }
                }
                list => list
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad view id `{s}` in --set")))
                    .collect::<Result<_>>()?,
            };
            check_views(&ids, scene.views())?;
            if ids.len() < 2 {
                bail!("the evaluation set needs at least two views");
            }
            let targets = targets.unwrap_or_else(|| ids.clone());
            check_views(&targets, scene.views())?;
            print_config(
                "eval",
                &serde_json::json!({ "run": run, "scene": scene_dir, "set": ids, "targets": targets, "gaussian": g, "out": out }),
            )?;
            let report = evaluate_sources(&loaded.model, &loaded.store, &scene, &ids, &targets, chunk)?;
            let report = EvalOutput { vc_score: matrix.vc_score(&ids)?, set: ids, targets, report };
            let json = serde_json::to_string_pretty(&report)?;
            write_text(&out, &json)?;
            println!("{json}");
        }
        Command::GradCheck { double } => {
            print_config("grad-check", &serde_json::json!({ "double": double, "precision": "f64" }))?;
            let seed = cli.seed.unwrap_or(0);
            let reports = full_suite(seed)?;
            let mut failed = 0;
            for (name, r) in &reports {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{status:4} {name:18} probes {:4} max rel {:.2e}", r.checked, r.max_rel_err);
                if !r.passed() {
                    failed += 1;
                    if let Some(w) = &r.worst {
                        println!("     {w}");
                    }
                }
            }
            if failed > 0 {
                bail!("{failed} of {} gradient checks failed", reports.len());
            }
            println!("all {} gradient checks passed", reports.len());
        }
    }
    Ok(())
}

fn train<T: ufo_tensor::Scalar>(scene: Scene, cfg: TrainConfig, out: &Path, resume: bool) -> Result<()> {
    let mut trainer = Trainer::<T>::new(scene, cfg)?;
    if resume {
        trainer.load_checkpoint(out.join(CHECKPOINT_FILE))?;
        println!("resumed at step {}", trainer.step_count());
    }
    let every = (trainer.config.steps / 20).max(1);
    trainer.run(Some(out), |l| {
        if (l.step + 1) % every == 0 {
            println!("step {:6} total {:.5} color {:.5} depth {:.5}", l.step + 1, l.total, l.color, l.depth);
        }
    })?;
    println!("checkpoint written to {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
