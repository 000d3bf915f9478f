use crate::config::ExperimentConfig;
use anyhow::{bail, ensure, Context, Result};
use gazebc::data::{split, Dataset, DatasetManifest, Outcome, SplitTag, Trajectory};
use gazebc::eval::{evaluate, wilcoxon_signed_rank, EvalReport, PairedTestResult, PolicyController, SeedMetrics, SeedReport};
use gazebc::oracle::run_demonstration;
use gazebc::policy::{self, EpochLog, PolicyNetwork};
use gazebc::world::{sample_configurations, Configuration, WorldConfig};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WORLD_FILE: &str = "world.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollectSummary {
    pub trajectories: usize,
    pub successes: usize,
    pub samples: usize,
    pub manifest: PathBuf,
}

/// Flies the demonstrator over `count` sampled configurations and writes
/// trajectories, the world and a manifest into `out`.
pub fn collect_oracle(cfg: &ExperimentConfig, out: &Path, count: usize, mut progress: impl FnMut(usize, &Trajectory)) -> Result<CollectSummary> {
    ensure!(count > 0, "--count must be positive");
    let world = cfg.world()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join(WORLD_FILE), world.to_json())?;
    let configs = sample_configurations(&world, count, cfg.data.config_seed)?;
    let (_, test) = split(count, cfg.data.split_ratio, cfg.data.split_seed)?;
    let mut manifest = DatasetManifest::new(world.hash());
    let (mut successes, mut samples) = (0, 0);
    for (i, c) in configs.iter().enumerate() {
        let t = run_demonstration(c, &world, cfg.data.demo_seed.wrapping_add(i as u64), &cfg.oracle, &cfg.sim)?;
        let file = format!("traj_{i:04}.gzbc");
        let sum = t.save(&out.join(&file))?;
        let tag = if test.binary_search(&i).is_ok() { SplitTag::Test } else { SplitTag::Train };
        manifest.push(file, &t, sum, tag);
        successes += usize::from(t.outcome == Outcome::Success);
        samples += t.steps.len();
        progress(i, &t);
    }
    let path = out.join(MANIFEST_FILE);
    manifest.save(&path)?;
    Ok(CollectSummary { trajectories: count, successes, samples, manifest: path })
}

/// Loads the manifest in `dir` and checks it was recorded in `world`.
pub fn load_manifest(dir: &Path, world: &WorldConfig) -> Result<DatasetManifest> {
    let m = DatasetManifest::load(&dir.join(MANIFEST_FILE)).with_context(|| format!("loading manifest from {}", dir.display()))?;
    let expected = format!("{:016x}", world.hash());
    ensure!(
        m.world_hash == expected,
        "dataset in {} was recorded in world {} but the configuration describes world {expected}",
        dir.display(),
        m.world_hash
    );
    Ok(m)
}

/// Successful training-split trajectories of the dataset in `dir`.
pub fn load_training_set(cfg: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    let world = cfg.world()?;
    let m = load_manifest(dir, &world)?;
    let mut data = Dataset::new(cfg.model.width, cfg.model.height, cfg.model.hog);
    for e in m.select(SplitTag::Train, true) {
        let t = m.load_entry(dir, e)?;
        data.push(&t).with_context(|| format!("adding {}", e.file))?;
    }
    ensure!(!data.is_empty(), "no successful training trajectories in {}", dir.display());
    Ok(data)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub data: PathBuf,
    pub out: PathBuf,
    /// JSON-lines epoch log; defaults to the checkpoint path with a `.jsonl` extension.
    pub log: Option<PathBuf>,
    pub lambda_gaze: Option<f64>,
    pub lambda_bc: Option<f64>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub samples: usize,
    pub trajectories: usize,
    pub parameters: usize,
    pub epochs: Vec<EpochLog>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn train_with(cfg: &ExperimentConfig, data: &Dataset, opts: &TrainOptions, mut progress: impl FnMut(&EpochLog)) -> Result<TrainSummary> {
    let mut tc = cfg.training.train_config();
    if let Some(v) = opts.lambda_gaze {
        tc.weights.lambda_gaze = v;
    }
    if let Some(v) = opts.lambda_bc {
        tc.weights.lambda_bc = v;
    }
    if let Some(v) = opts.seed {
        tc.seed = v;
    }
    if let Some(v) = opts.epochs {
        tc.epochs = v;
    }
    let log_path = opts.log.clone().unwrap_or_else(|| opts.out.with_extension("jsonl"));
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut write_err = None;
    let (net, epochs) = policy::train(cfg.model.clone(), data, &tc, |e| {
        if write_err.is_none() {
            if let Err(err) = writeln!(log, "{}", serde_json::to_string(e).expect("epoch log serializes")).and_then(|_| log.flush()) {
                write_err = Some(err);
            }
        }
        progress(e);
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing training log");
    }
    net.save(&opts.out)?;
    Ok(TrainSummary {
        samples: data.len(),
        trajectories: data.trajectory_count(),
        parameters: net.param_count(),
        epochs,
        checkpoint: opts.out.clone(),
        log: log_path,
    })
}

pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions, progress: impl FnMut(&EpochLog)) -> Result<TrainSummary> {
    let data = load_training_set(cfg, &opts.data)?;
    train_with(cfg, &data, opts, progress)
}

/// Configurations of one split, in manifest order.
pub fn split_configurations(m: &DatasetManifest, split: SplitTag) -> Vec<Configuration> {
    m.select(split, false).map(|e| e.configuration).collect()
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub data: PathBuf,
    /// One checkpoint per training seed.
    pub checkpoints: Vec<PathBuf>,
    pub split: SplitTag,
    pub label: String,
    pub seed: Option<u64>,
    pub repeats: Option<usize>,
}

pub fn eval(cfg: &ExperimentConfig, opts: &EvalOptions, mut progress: impl FnMut(usize, &SeedMetrics)) -> Result<EvalReport> {
    ensure!(!opts.checkpoints.is_empty(), "at least one --checkpoint is required");
    let world = cfg.world()?;
    let m = load_manifest(&opts.data, &world)?;
    let configs = split_configurations(&m, opts.split);
    ensure!(!configs.is_empty(), "the {:?} split of {} is empty", opts.split, opts.data.display());
    let mut settings = cfg.evaluation.rollout_settings();
    if let Some(r) = opts.repeats {
        settings.repeats = r;
    }
    let sim = cfg.eval_sim();
    let base = opts.seed.unwrap_or(cfg.evaluation.seed);
    let mut seeds = Vec::with_capacity(opts.checkpoints.len());
    for (i, path) in opts.checkpoints.iter().enumerate() {
        let net = PolicyNetwork::<f32>::load(path, cfg.model.clone()).with_context(|| format!("loading {}", path.display()))?;
        let mut ctrl = PolicyController::new(net);
        let seed = base.wrapping_add(i as u64);
        let rollouts = evaluate(&mut ctrl, &world, &configs, seed, &settings, &sim)?;
        let metrics = SeedMetrics::from_results(&rollouts)?;
        progress(i, &metrics);
        let checkpoint = path.file_name().map(|n| n.to_string_lossy().into_owned());
        seeds.push(SeedReport { seed, checkpoint, metrics, rollouts });
    }
    Ok(EvalReport::new(opts.label.clone(), seeds))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Completion,
    Collision,
    Spl,
}

impl Metric {
    pub fn of(self, m: &SeedMetrics) -> f64 {
        match self {
            Metric::Completion => m.completion,
            Metric::Collision => m.collision,
            Metric::Spl => m.spl,
        }
    }
}

/// Signed-rank test of `b - a` over seeds paired by position.
pub fn compare(a: &EvalReport, b: &EvalReport, metric: Metric) -> Result<PairedTestResult> {
    if a.seeds.len() != b.seeds.len() {
        bail!("reports have {} and {} seeds; pairing needs equal counts", a.seeds.len(), b.seeds.len());
    }
    let va: Vec<f64> = a.seeds.iter().map(|s| metric.of(&s.metrics)).collect();
    let vb: Vec<f64> = b.seeds.iter().map(|s| metric.of(&s.metrics)).collect();
    Ok(wilcoxon_signed_rank(&vb, &va)?)
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    EvalReport::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}
