//! Command-line front end: scene generation, training, evaluation,
//! prediction export, SVG rendering, and a built-in selftest.
//!
//! Every subcommand is deterministic for fixed inputs and seeds. Errors
//! leave through one path that prints a single machine-parsable line to
//! stderr and maps the error class to a documented exit code.

use clap::{Parser, Subcommand, ValueEnum};
use latentformer::checkpoint::{save_checkpoint, Checkpoint};
use latentformer::config::{ModelConfig, Profile, RunConfig};
use latentformer::decoder::TrajectorySample;
use latentformer::error::{Error, Result};
use latentformer::latent::ModeConfig;
use latentformer::metrics::{self, EvalReport};
use latentformer::model::Model;
use latentformer::oracle;
use latentformer::render::render_scene;
use latentformer::rng::Rng;
use latentformer::scene::{generate_follow, generate_intersection, Scene, SceneSet, A_MAX, GRID};
use latentformer::tensor::{no_grad, Padding, Tensor};
use latentformer::train::{em_loss, posterior_factorized, train, Likelihood};
use std::cell::Cell;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Best-effort stdout line; a closed pipe (e.g. `| head`) is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Best-effort stdout without a trailing newline.
macro_rules! put {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}

const EXIT_HELP: &str = "Exit codes:
  0  success
  2  usage error (bad flags or arguments)
  3  I/O failure (missing or unwritable files)
  4  invalid configuration
  5  malformed or mismatched data
  6  internal error

Environment:
  LATENTFORMER_THREADS  caps inference worker threads for eval and predict
                        (default: machine cores)";

// ─── argument grammar ───────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "latentformer",
    version,
    about = "Multi-agent trajectory prediction: generate scenes, train, evaluate, render",
    after_help = EXIT_HELP
)]
struct Cli {
    /// Print a complete run-config JSON template and exit.
    #[arg(long)]
    print_config: bool,
    /// Profile the template starts from.
    #[arg(long, value_enum, default_value_t = ProfileArg::Small)]
    profile: ProfileArg,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Small,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Small => Profile::Small,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Intersection,
    Follow,
    /// Alternate intersection and follow scenes.
    Mixed,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene set.
    Generate {
        /// Number of scenes.
        #[arg(long)]
        scenes: usize,
        /// Base seed; scene i is generated from seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output scene-set file.
        #[arg(long)]
        out: PathBuf,
        /// Scene family.
        #[arg(long, value_enum, default_value_t = Kind::Intersection)]
        kind: Kind,
        /// Agents per intersection scene.
        #[arg(long, default_value_t = 3)]
        agents: usize,
    },
    /// Train a model; writes per-epoch checkpoints and a metrics log.
    Train {
        /// Scene-set file to train on.
        #[arg(long)]
        data: PathBuf,
        /// Run-config JSON; omitted means the small profile with defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints and metrics.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against a scene set and write a JSON report.
    Eval {
        /// Checkpoint directory (not needed with --oracle).
        #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
        ckpt: Option<PathBuf>,
        /// Scene-set file to score on.
        #[arg(long)]
        data: PathBuf,
        /// Samples per scene.
        #[arg(long)]
        k: usize,
        /// Report output file; the text table always goes to stdout.
        #[arg(long)]
        report: PathBuf,
        /// Stochastic rollouts instead of per-mode mean rollouts.
        #[arg(long, conflicts_with = "oracle")]
        sampled: bool,
        /// Seed for --sampled rollouts.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Score a perfect predictor that returns the ground truth, as a
        /// plumbing check; every metric must come out zero.
        #[arg(long)]
        oracle: bool,
    },
    /// Write mode-conditioned mean trajectories for every scene.
    Predict {
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene-set file.
        #[arg(long)]
        data: PathBuf,
        /// Output prediction file.
        #[arg(long)]
        out: PathBuf,
        /// Samples per scene; defaults to the checkpoint's mode count.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Render one scene, optionally with predictions, to an SVG file.
    Render {
        /// Scene-set file.
        #[arg(long)]
        data: PathBuf,
        /// Id of the scene to draw.
        #[arg(long)]
        scene: String,
        /// Prediction file from `predict`.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Output SVG file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run built-in reference-implementation and gradient checks.
    Selftest,
}

// ─── entry point and error mapping ──────────────────────────────────────────

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => 3,
        Error::Config(_) => 4,
        Error::Format(_) | Error::Dimension(_) | Error::Capacity(_) => 5,
        _ => 6,
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.print_config {
        say!("{}", RunConfig::template(cli.profile.into())?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        eprintln!("error: missing subcommand (try --help or --print-config)");
        std::process::exit(2);
    };
    match command {
        Command::Generate {
            scenes,
            seed,
            out,
            kind,
            agents,
        } => cmd_generate(scenes, seed, &out, kind, agents),
        Command::Train { data, config, out } => cmd_train(&data, config.as_deref(), &out),
        Command::Eval {
            ckpt,
            data,
            k,
            report,
            sampled,
            seed,
            oracle,
        } => cmd_eval(ckpt.as_deref(), &data, k, &report, sampled, seed, oracle),
        Command::Predict { ckpt, data, out, k } => cmd_predict(&ckpt, &data, &out, k),
        Command::Render {
            data,
            scene,
            pred,
            out,
        } => cmd_render(&data, &scene, pred.as_deref(), &out),
        Command::Selftest => selftest(),
    }
}

// ─── subcommands ────────────────────────────────────────────────────────────

fn cmd_generate(scenes: usize, seed: u64, out: &Path, kind: Kind, agents: usize) -> Result<()> {
    if scenes == 0 {
        return Err(Error::Config("--scenes must be at least 1".into()));
    }
    if agents < 1 || agents > A_MAX {
        return Err(Error::Config(format!(
            "--agents {agents} outside 1..={A_MAX}"
        )));
    }
    let mut all = Vec::with_capacity(scenes);
    for i in 0..scenes {
        let s = seed.wrapping_add(i as u64);
        let scene = match kind {
            Kind::Intersection => generate_intersection(s, agents)?,
            Kind::Follow => generate_follow(s)?,
            Kind::Mixed if i % 2 == 0 => generate_intersection(s, agents)?,
            Kind::Mixed => generate_follow(s)?,
        };
        all.push(scene);
    }
    let set = SceneSet::new(all)?;
    set.save(out)?;
    say!("wrote {scenes} scenes to {}", out.display());
    Ok(())
}

fn cmd_train(data: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let set = SceneSet::load(data)?;
    let rc = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mcfg = rc.model_config()?;
    if set.tau != mcfg.tau || set.horizon != mcfg.horizon {
        return Err(Error::Config(format!(
            "data has tau={} horizon={}, model expects tau={} horizon={}",
            set.tau, set.horizon, mcfg.tau, mcfg.horizon
        )));
    }
    let model = Model::new(mcfg, rc.train.seed)?;
    let records = train(&model, &set.scenes, &rc.train, Some(out))?;
    for r in &records {
        say!(
            "epoch {:>4}  lr {:.6}  loss {:>12.6}  tf-min-ade {:>8.4}  grad-norm {:>10.4}  {}",
            r.epoch, r.lr, r.loss, r.tf_min_ade, r.grad_norm, r.likelihood
        );
    }
    say!(
        "trained {} epochs on {} scenes; checkpoints and metrics.jsonl in {}",
        records.len(),
        set.scenes.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: Option<&Path>,
    data: &Path,
    k: usize,
    report: &Path,
    sampled: bool,
    seed: u64,
    oracle: bool,
) -> Result<()> {
    let threads = thread_count()?;
    let set = SceneSet::load(data)?;
    let rep: EvalReport = if oracle {
        metrics::evaluate_samples(&set.scenes, k, "oracle", &|scene| {
            let a = scene.agents.len();
            let points = Model::future_array(scene);
            let mut out = Vec::with_capacity(k);
            for _ in 0..k {
                out.push(TrajectorySample {
                    points: points.clone(),
                    a,
                    t: set.horizon,
                    mode_config: ModeConfig::new(vec![0; a], 1)?,
                });
            }
            Ok(out)
        })?
    } else {
        let ck = Checkpoint::load(ckpt.expect("clap enforces --ckpt"))?;
        let per_scene = infer_parallel(&ck, &set.scenes, threads, |model, scene| {
            metrics::scene_samples(model, scene, k, sampled, seed)
        })?;
        let provenance = if sampled { "sampled" } else { "mode-mean" };
        let next = Cell::new(0);
        metrics::evaluate_samples(&set.scenes, k, provenance, &|_| {
            let i = next.get();
            next.set(i + 1);
            Ok(per_scene[i].clone())
        })?
    };
    std::fs::write(report, rep.to_json()? + "\n")?;
    put!("{}", rep.text_table());
    say!("report written to {}", report.display());
    Ok(())
}

fn cmd_predict(ckpt: &Path, data: &Path, out: &Path, k: Option<usize>) -> Result<()> {
    let threads = thread_count()?;
    let set = SceneSet::load(data)?;
    let ck = Checkpoint::load(ckpt)?;
    let k = k.unwrap_or(ck.manifest.config.k_modes);
    let per_scene = infer_parallel(&ck, &set.scenes, threads, |model, scene| {
        model.predict(scene, k)
    })?;
    let file = PredFile {
        k,
        k_modes: ck.manifest.config.k_modes,
        scenes: set
            .scenes
            .iter()
            .zip(per_scene)
            .map(|(scene, samples)| PredScene {
                scene: scene.id.clone(),
                samples: samples.into_iter().map(PredSample::from).collect(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Format(format!("prediction serialization failed: {e}")))?;
    std::fs::write(out, json + "\n")?;
    say!(
        "wrote {k} predictions per scene for {} scenes to {}",
        file.scenes.len(),
        out.display()
    );
    Ok(())
}

fn cmd_render(data: &Path, scene_id: &str, pred: Option<&Path>, out: &Path) -> Result<()> {
    let set = SceneSet::load(data)?;
    let scene = set
        .scenes
        .iter()
        .find(|s| s.id == scene_id)
        .ok_or_else(|| {
            Error::Format(format!(
                "scene {scene_id:?} not found in {}",
                data.display()
            ))
        })?;
    let samples = match pred {
        None => None,
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let file: PredFile = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("prediction file rejected: {e}")))?;
            let entry = file
                .scenes
                .iter()
                .find(|p| p.scene == scene_id)
                .ok_or_else(|| {
                    Error::Format(format!(
                        "scene {scene_id:?} not found in {}",
                        path.display()
                    ))
                })?;
            let mut v = Vec::with_capacity(entry.samples.len());
            for s in &entry.samples {
                v.push(s.to_sample(file.k_modes)?);
            }
            Some(v)
        }
    };
    std::fs::write(out, render_scene(scene, samples.as_deref()))?;
    say!("wrote {}", out.display());
    Ok(())
}

// ─── prediction file format ─────────────────────────────────────────────────

/// On-disk prediction format shared by `predict` and `render`.
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct PredFile {
    /// Samples per scene.
    k: usize,
    /// Mode vocabulary size of the producing model.
    k_modes: usize,
    scenes: Vec<PredScene>,
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct PredScene {
    scene: String,
    samples: Vec<PredSample>,
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct PredSample {
    modes: Vec<usize>,
    /// [a * t * 2] agent-major flattened positions.
    points: Vec<f64>,
    a: usize,
    t: usize,
}

impl From<TrajectorySample> for PredSample {
    fn from(s: TrajectorySample) -> Self {
        PredSample {
            modes: s.mode_config.modes,
            points: s.points,
            a: s.a,
            t: s.t,
        }
    }
}

impl PredSample {
    fn to_sample(&self, k_modes: usize) -> Result<TrajectorySample> {
        if self.points.len() != self.a * self.t * 2 {
            return Err(Error::Format(format!(
                "sample for {} agents x {} steps carries {} values, expected {}",
                self.a,
                self.t,
                self.points.len(),
                self.a * self.t * 2
            )));
        }
        let mode_config = ModeConfig::new(self.modes.clone(), k_modes.max(1))
            .map_err(|e| Error::Format(format!("bad mode assignment: {e}")))?;
        Ok(TrajectorySample {
            points: self.points.clone(),
            a: self.a,
            t: self.t,
            mode_config,
        })
    }
}

// ─── parallel inference ─────────────────────────────────────────────────────

/// Worker-thread cap: LATENTFORMER_THREADS if set, else machine cores.
fn thread_count() -> Result<usize> {
    match std::env::var("LATENTFORMER_THREADS") {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "LATENTFORMER_THREADS must be a positive integer, got {raw:?}"
            ))),
        },
        Err(std::env::VarError::NotPresent) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
        Err(e) => Err(Error::Config(format!("LATENTFORMER_THREADS: {e}"))),
    }
}

fn model_from(ck: &Checkpoint) -> Result<Model> {
    let model = Model::new(ck.manifest.config, 0)?;
    ck.apply(&model.store)?;
    Ok(model)
}

/// Run `work` once per scene on up to `threads` workers, each with its own
/// model rebuilt from the checkpoint. Results keep scene order, so output
/// is identical to the sequential run regardless of scheduling.
fn infer_parallel<R: Send>(
    ck: &Checkpoint,
    scenes: &[Scene],
    threads: usize,
    work: impl Fn(&Model, &Scene) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = threads.min(scenes.len()).max(1);
    if workers == 1 {
        let model = model_from(ck)?;
        return scenes.iter().map(|s| work(&model, s)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> =
        scenes.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let model = model_from(ck);
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= scenes.len() {
                        break;
                    }
                    let result = match &model {
                        Ok(m) => work(m, &scenes[i]),
                        Err(e) => Err(Error::Contract(format!(
                            "worker could not rebuild the model: {e}"
                        ))),
                    };
                    *slots[i].lock().expect("no panics hold this lock") = Some(result);
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("workers joined")
                .unwrap_or_else(|| Err(Error::Contract("scene left unprocessed".into())))
        })
        .collect()
}

// ─── selftest ───────────────────────────────────────────────────────────────

fn selftest() -> Result<()> {
    let checks: [(&str, fn() -> Result<String>); 8] = [
        ("matmul-reference", check_matmul),
        ("softmax-reference", check_softmax),
        ("layer-norm-reference", check_layer_norm),
        ("conv-reference", check_conv),
        ("attention-reference", check_attention),
        ("scene-determinism", check_scene_determinism),
        ("checkpoint-roundtrip", check_checkpoint),
        ("end-to-end-gradients", check_end_to_end_gradients),
    ];
    for (name, f) in checks {
        let detail = f().map_err(|e| Error::Contract(format!("{name}: {e}")))?;
        say!("selftest {name:<24} ok  ({detail})");
    }
    say!("selftest passed");
    Ok(())
}

fn ensure(err: f64, tol: f64, what: &str) -> Result<()> {
    if !(err <= tol) {
        return Err(Error::Contract(format!("{what} off by {err:.3e} (tol {tol:.0e})")));
    }
    Ok(())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.range(-1.0, 1.0)).collect()
}

fn check_matmul() -> Result<String> {
    let mut rng = Rng::new(11);
    let a = rand_vec(&mut rng, 5 * 4);
    let b = rand_vec(&mut rng, 4 * 3);
    let want = oracle::naive_matmul(&a, &b, 5, 4, 3);
    let got = Tensor::from_vec(a, &[5, 4])?
        .matmul(&Tensor::from_vec(b, &[4, 3])?)?
        .value();
    let err = max_abs_diff(&got, &want);
    ensure(err, 1e-12, "matmul vs naive triple loop")?;
    Ok(format!("max abs err {err:.1e}"))
}

fn check_softmax() -> Result<String> {
    let mut rng = Rng::new(12);
    let x = rand_vec(&mut rng, 9);
    let want = oracle::naive_softmax(&x);
    let got = Tensor::from_vec(x, &[9])?.softmax(0)?.value();
    let err = max_abs_diff(&got, &want);
    ensure(err, 1e-12, "softmax vs exp-sum oracle")?;
    Ok(format!("max abs err {err:.1e}"))
}

fn check_layer_norm() -> Result<String> {
    let mut rng = Rng::new(13);
    let x = rand_vec(&mut rng, 16);
    let want = oracle::naive_layer_norm(&x, 1e-5);
    let d = x.len();
    let got = Tensor::from_vec(x, &[d])?
        .layer_norm(
            &Tensor::from_vec(vec![1.0; d], &[d])?,
            &Tensor::from_vec(vec![0.0; d], &[d])?,
            1e-5,
        )?
        .value();
    let err = max_abs_diff(&got, &want);
    ensure(err, 1e-10, "layer norm vs explicit formula")?;
    Ok(format!("max abs err {err:.1e}"))
}

fn check_conv() -> Result<String> {
    let mut rng = Rng::new(14);
    let x = rand_vec(&mut rng, 2 * 6 * 6);
    let k = rand_vec(&mut rng, 3 * 2 * 3 * 3);
    let want = oracle::naive_conv2d(&x, 2, 6, 6, &k, 3, 3, 3, 2, true);
    let got = Tensor::from_vec(x, &[2, 6, 6])?
        .conv2d(&Tensor::from_vec(k, &[3, 2, 3, 3])?, 2, Padding::Same)?
        .value();
    let err = max_abs_diff(&got, &want);
    ensure(err, 1e-12, "strided conv vs sliding window")?;
    Ok(format!("max abs err {err:.1e}"))
}

fn check_attention() -> Result<String> {
    let mut rng = Rng::new(15);
    let q = rand_vec(&mut rng, 3 * 4);
    let k = rand_vec(&mut rng, 5 * 4);
    let v = rand_vec(&mut rng, 5 * 2);
    let scale = 0.5;
    let want = oracle::naive_attention(&q, &k, &v, 3, 5, 4, 2, scale);
    let got = latentformer::nn::attn(
        &Tensor::from_vec(q, &[3, 4])?,
        &Tensor::from_vec(k, &[5, 4])?,
        &Tensor::from_vec(v, &[5, 2])?,
        None,
        scale,
    )?
    .value();
    let err = max_abs_diff(&got, &want);
    ensure(err, 1e-12, "attention vs naive scores-softmax-mix")?;
    Ok(format!("max abs err {err:.1e}"))
}

fn check_scene_determinism() -> Result<String> {
    let a = generate_intersection(7, 3)?;
    let b = generate_intersection(7, 3)?;
    let same_mask =
        (0..GRID).all(|r| (0..GRID).all(|c| a.mask.cell(r, c) == b.mask.cell(r, c)));
    let same_tracks = a.agents.len() == b.agents.len()
        && a.agents
            .iter()
            .zip(&b.agents)
            .all(|(x, y)| x.past == y.past && x.future == y.future && x.route == y.route);
    if !(same_mask && same_tracks) {
        return Err(Error::Contract("same seed produced different scenes".into()));
    }
    Ok(format!(
        "{} agents, drivable fraction {:.2}",
        a.agents.len(),
        a.mask.drivable_fraction()
    ))
}

fn check_checkpoint() -> Result<String> {
    let mut cfg = ModelConfig::small();
    cfg.d_m = 16;
    cfg.heads = 2;
    cfg.i_e = 1;
    cfg.i_dd = 1;
    cfg.i_dc = 1;
    cfg.k_modes = 2;
    cfg.use_map = false;
    let model = Model::new(cfg, 3)?;
    let dir = std::env::temp_dir().join(format!("lf_selftest_{}", std::process::id()));
    save_checkpoint(&dir, &model.cfg, &model.store)?;
    let reloaded = latentformer::checkpoint::load_model(&dir)?;
    let same = model
        .store
        .iter()
        .zip(reloaded.store.iter())
        .all(|((na, ta), (nb, tb))| na == nb && ta.value() == tb.value());
    std::fs::remove_dir_all(&dir)?;
    if !same {
        return Err(Error::Contract("reloaded parameters differ".into()));
    }
    Ok(format!("{} values round-tripped", model.store.total_values()))
}

fn check_end_to_end_gradients() -> Result<String> {
    let mut cfg = ModelConfig::small();
    cfg.d_m = 8;
    cfg.heads = 2;
    cfg.i_e = 1;
    cfg.i_dd = 1;
    cfg.i_dc = 1;
    cfg.k_modes = 2;
    cfg.head_layers = 2;
    cfg.use_map = false;
    let model = Model::new(cfg, 26)?;
    let scene = generate_intersection(45, 1)?;
    let sc = model.encode_scene(&scene)?;
    let gt = Model::future_array(&scene);
    let q = posterior_factorized(&model, &sc, &gt)?;
    let lp = no_grad(|| model.prior_log_probs(&sc))?.value();
    // Single agent: the baseline assignment is that agent's best mode.
    let baseline = vec![lp
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite log probs"))
        .map(|(i, _)| i)
        .unwrap_or(0)];
    let build = || em_loss(&model, &scene, &q, &baseline, Likelihood::TeacherForced);
    let names = ["traj.embed.w", "prior.queries", "dec.embed.w", "dec.head1.w"];
    let params: Vec<(&str, &Tensor)> = names
        .iter()
        .map(|n| {
            model
                .store
                .get(n)
                .map(|t| (*n, t))
                .ok_or_else(|| Error::Contract(format!("parameter {n} missing")))
        })
        .collect::<Result<_>>()?;
    let report = oracle::check_gradients(&params, &build, 1e-5, 3, &mut Rng::new(27))?;
    ensure(report.max_rel_err, 1e-4, "finite-difference gradient agreement")?;
    Ok(format!(
        "{} partials, max rel err {:.1e}",
        report.checked, report.max_rel_err
    ))
}
