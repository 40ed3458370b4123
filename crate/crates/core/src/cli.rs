//! Batch front end: one subcommand per pipeline stage. Every stage writes its
//! artifacts plus a `manifest.json` under `<out>/<stage>/`; downstream stages
//! refuse to run without their upstream manifest, and a stage whose config
//! hash is unchanged is skipped.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{load_poses, load_scan, load_semantics, PointCloud, SequencePaths};
use crate::error::{Error, Result};
use crate::net::model::{image_to_input, Architecture, ChannelSet, ModelWeights};
use crate::net::train::{train, Hyperparams, Optimizer, TrainingPair, TrainingSet};
use crate::overlap::{generate_labels, label_pair, read_labels_csv, write_labels_csv, LabelConfig, OverlapLabel};
use crate::pipeline::{
    attach_ground_truth, detect, evaluate, recall_at_n, run_detection, weights_fingerprint, DetectionConfig, FeatureCache, Gate,
    LoopCandidate, QueryOutcome, ScoredCandidate, Strategy,
};
use crate::pose::Pose;
use crate::projection::{fit_pca, preprocess, subsample_corpus, PcaModel, ProjectionConfig, ScanImage};
use crate::registration::{icp, IcpConfig, IcpResult};
use crate::synthetic::{compact_projection, loop_trajectory, write_kitti_sequence, Scene};
use crate::tensor_blob::TensorBlob;
use crate::uncertainty::{Cov6, PoseWithCov};

#[derive(Debug, Parser)]
#[command(name = "overlap-loop", version, about = "Loop-closure detection from learned LiDAR scan overlap")]
pub struct Cli {
    /// Dataset root in the KITTI odometry layout.
    #[arg(long, global = true, default_value = "data")]
    pub dataset: PathBuf,
    #[arg(long, global = true, default_value = "00")]
    pub sequence: String,
    /// Comma-separated input channels.
    #[arg(long, global = true, default_value = "depth,normals,intensity,semantics")]
    pub channels: String,
    /// Network geometry; `compact` uses 16 × 360 images.
    #[arg(long, global = true, value_enum, default_value_t = ArchKind::Compact)]
    pub arch: ArchKind,
    /// Weight file stem (`<stem>.tnsr` + `<stem>.json`); defaults to the train stage output.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// `none`, `euclidean:<radius>` or `mahalanobis[:<sigmas>]`.
    #[arg(long, global = true, default_value = "none")]
    pub gate: Gate,
    /// `best` or `top-k[:<k>]`.
    #[arg(long, global = true, default_value = "best")]
    pub strategy: Strategy,
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    /// 64 × 900 input, full-size layers.
    Full,
    Compact,
}

impl ArchKind {
    pub fn architecture(self, channels: usize) -> Architecture {
        match self {
            ArchKind::Full => Architecture::full(channels),
            ArchKind::Compact => Architecture::compact(channels),
        }
    }

    pub fn projection(self) -> ProjectionConfig {
        match self {
            ArchKind::Full => ProjectionConfig::default(),
            ArchKind::Compact => compact_projection(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic loop sequence to `--dataset`.
    Synth(SynthArgs),
    /// Project every scan to a range image with normals.
    Preprocess,
    /// Ground-truth overlap and yaw labels.
    Labels(LabelArgs),
    /// Fit the siamese network to the labeled pairs.
    Train(TrainArgs),
    /// Leg features for every scan and predictions for every labeled pair.
    Infer,
    /// One loop candidate per query.
    Detect(DetectArgs),
    /// Precision-recall, F1, AUC and recall@N.
    Eval(EvalArgs),
    /// All stages from preprocess to eval.
    Run(RunArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 120)]
    pub scans: usize,
    /// Edge length of the square loop, meters.
    #[arg(long, default_value_t = 40.0)]
    pub side: f64,
    /// Sideways offset of the second lap, meters.
    #[arg(long, default_value_t = 0.5)]
    pub lateral_offset: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LabelArgs {
    #[arg(long, default_value_t = 50.0)]
    pub gate_radius: f64,
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1.0)]
    pub negative_ratio: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.99)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    /// Share of labeled pairs held out for best-epoch selection.
    #[arg(long, default_value_t = 0.0)]
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Sgd,
    Adam,
    Amsgrad,
}

impl From<OptimizerArg> for Optimizer {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Adam => Optimizer::Adam,
            OptimizerArg::Amsgrad => Optimizer::AmsGrad,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DetectArgs {
    /// Most recent scans never considered as candidates.
    #[arg(long, default_value_t = 100)]
    pub exclusion: usize,
    /// Ground-truth overlap at which a detection is a true loop.
    #[arg(long, default_value_t = 0.3)]
    pub tp_threshold: f64,
    /// Per-scan odometry noise (translation, meters) for the pose covariance.
    #[arg(long, default_value_t = 0.05)]
    pub odom_sigma_t: f64,
    /// Per-scan odometry noise (rotation, radians).
    #[arg(long, default_value_t = 0.002)]
    pub odom_sigma_r: f64,
    /// Register each detection with ICP seeded by the predicted yaw.
    #[arg(long)]
    pub verify_icp: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    /// Replace predicted overlaps by the ground truth (harness check).
    #[arg(long)]
    pub oracle: bool,
    /// Largest N reported in `recall_at_n.csv`.
    #[arg(long, default_value_t = 25)]
    pub max_n: usize,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub labels: LabelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub detect: DetectArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match cli.jobs {
        Some(0) => Err(Error::Validation("--jobs must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
            pool.install(|| dispatch(cli))
        }
        None => dispatch(cli),
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Preprocess => cmd_preprocess(cli).map(drop),
        Command::Labels(a) => cmd_labels(cli, a).map(drop),
        Command::Train(a) => cmd_train(cli, a).map(drop),
        Command::Infer => cmd_infer(cli).map(drop),
        Command::Detect(a) => cmd_detect(cli, a).map(drop),
        Command::Eval(a) => cmd_eval(cli, a).map(drop),
        Command::Run(a) => {
            cmd_preprocess(cli)?;
            cmd_labels(cli, &a.labels)?;
            cmd_train(cli, &a.train)?;
            cmd_detect(cli, &a.detect)?;
            cmd_eval(cli, &a.eval).map(drop)
        }
    }
}

/// Record of one stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub upstream: Vec<String>,
    pub config: serde_json::Value,
    /// Paths relative to the stage directory.
    pub outputs: Vec<String>,
}

fn stage_dir(cli: &Cli, stage: &str) -> PathBuf {
    cli.out.join(stage)
}

fn manifest_path(cli: &Cli, stage: &str) -> PathBuf {
    stage_dir(cli, stage).join("manifest.json")
}

fn read_manifest(cli: &Cli, stage: &str, needed_by: &str) -> Result<Manifest> {
    let path = manifest_path(cli, stage);
    if !path.exists() {
        return Err(Error::StageOrder { path, hint: format!("run `overlap-loop {stage}` before `{needed_by}`") });
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn config_hash(stage: &str, config: &serde_json::Value, upstream: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update(config.to_string().as_bytes());
    for u in upstream {
        h.update(u.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Existing manifest when it matches `hash` and all its outputs exist.
fn up_to_date(cli: &Cli, stage: &str, hash: &str) -> Option<Manifest> {
    let path = manifest_path(cli, stage);
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&path).ok()?).ok()?;
    let dir = stage_dir(cli, stage);
    (m.config_hash == hash && m.outputs.iter().all(|o| dir.join(o).exists())).then_some(m)
}

fn begin_stage(cli: &Cli, stage: &str, config: &impl Serialize, upstream: &[&Manifest]) -> Result<(Manifest, bool)> {
    let config = serde_json::to_value(config)?;
    let upstream: Vec<String> = upstream.iter().map(|m| m.config_hash.clone()).collect();
    let hash = config_hash(stage, &config, &upstream);
    if let Some(m) = up_to_date(cli, stage, &hash) {
        log::info!("{stage}: up to date ({})", &hash[..12]);
        return Ok((m, true));
    }
    let dir = stage_dir(cli, stage);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok((Manifest { stage: stage.into(), config_hash: hash, upstream, config, outputs: Vec::new() }, false))
}

fn finish_stage(cli: &Cli, m: Manifest) -> Result<Manifest> {
    write_json(&manifest_path(cli, &m.stage), &m)?;
    Ok(m)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn channels(cli: &Cli) -> Result<ChannelSet> {
    cli.channels.parse()
}

fn sequence_paths(cli: &Cli) -> SequencePaths {
    SequencePaths::new(&cli.dataset, &cli.sequence)
}

/// Scans with class probabilities when a `probs/` file exists for them.
fn load_clouds(paths: &SequencePaths, with_semantics: bool) -> Result<Vec<PointCloud>> {
    let files = paths.scan_files()?;
    if files.is_empty() {
        return Err(Error::io(paths.velodyne_dir(), std::io::Error::new(std::io::ErrorKind::NotFound, "no .bin scans")));
    }
    files
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let cloud = load_scan(f)?;
            if !with_semantics {
                return Ok(cloud);
            }
            let probs = load_semantics(paths.probs_file(i), cloud.len())?;
            cloud.with_semantics(probs)
        })
        .collect()
}

fn load_sequence_poses(paths: &SequencePaths, count: usize) -> Result<Vec<Pose>> {
    let poses = load_poses(paths.pose_file(), paths.calib_file())?;
    if poses.len() != count {
        return Err(Error::Validation(format!("{} poses for {count} scans", poses.len())));
    }
    Ok(poses)
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    if a.scans < 2 || !(a.side > 0.0) {
        return Err(Error::Validation("synthetic loop needs at least 2 scans and a positive side".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let poses = loop_trajectory(a.scans, a.side, a.lateral_offset);
    let keep_clear: Vec<_> = poses.iter().map(|p| p.translation()).collect();
    let extent = a.side + 30.0;
    let scene = Scene::random_structured(&mut rng, extent, (extent * extent / 40.0) as usize, &keep_clear, 3.0);
    let paths = write_kitti_sequence(&cli.dataset, &cli.sequence, &scene, &poses, &cli.arch.projection())?;
    log::info!("wrote {} scans to {}", a.scans, paths.sequence_dir().display());
    Ok(())
}

#[derive(Serialize)]
struct PreprocessConfig<'a> {
    dataset: String,
    sequence: &'a str,
    scans: usize,
    channels: String,
    projection: ProjectionConfig,
}

const SCAN_DIR: &str = "scans";
const PCA_FILE: &str = "pca.json";

fn cmd_preprocess(cli: &Cli) -> Result<Manifest> {
    let paths = sequence_paths(cli);
    let channels = channels(cli)?;
    let files = paths.scan_files()?;
    let projection = cli.arch.projection();
    let config = PreprocessConfig {
        dataset: cli.dataset.display().to_string(),
        sequence: &cli.sequence,
        scans: files.len(),
        channels: channels.to_string(),
        projection,
    };
    let (mut m, done) = begin_stage(cli, "preprocess", &config, &[])?;
    if done {
        return Ok(m);
    }
    let semantics = channels.contains(crate::net::model::Channel::Semantics);
    let clouds = load_clouds(&paths, semantics)?;
    let dir = stage_dir(cli, "preprocess");
    let scan_dir = dir.join(SCAN_DIR);
    std::fs::create_dir_all(&scan_dir).map_err(|e| Error::io(&scan_dir, e))?;
    let pca = if semantics {
        let corpus: Vec<_> = clouds.iter().flat_map(|c| c.semantics.as_deref().unwrap_or(&[]).iter().copied()).collect();
        let model = fit_pca(&subsample_corpus(&corpus, 100_000))?;
        model.save_json(dir.join(PCA_FILE))?;
        m.outputs.push(PCA_FILE.into());
        Some(model)
    } else {
        None
    };
    let names: Vec<String> = clouds
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let img = preprocess(c, &projection, pca.as_ref());
            let name = format!("{SCAN_DIR}/{i:06}.tnsr");
            img.to_blob().save(dir.join(&name))?;
            Ok(name)
        })
        .collect::<Result<_>>()?;
    m.outputs.extend(names);
    log::info!("preprocess: {} scans", clouds.len());
    finish_stage(cli, m)
}

fn load_images(cli: &Cli, pre: &Manifest) -> Result<Vec<ScanImage>> {
    let projection: ProjectionConfig = serde_json::from_value(pre.config["projection"].clone())?;
    let dir = stage_dir(cli, "preprocess");
    pre.outputs
        .iter()
        .filter(|o| o.starts_with(SCAN_DIR))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|o| ScanImage::from_blob(&TensorBlob::load(dir.join(o))?, projection))
        .collect()
}

const LABEL_FILE: &str = "labels.csv";

fn cmd_labels(cli: &Cli, a: &LabelArgs) -> Result<Manifest> {
    let pre = read_manifest(cli, "preprocess", "labels")?;
    let label_cfg = LabelConfig { gate_radius: a.gate_radius, epsilon: a.epsilon, negative_ratio: a.negative_ratio, seed: cli.seed, ..Default::default() };
    let (mut m, done) = begin_stage(cli, "labels", &label_cfg, &[&pre])?;
    if done {
        return Ok(m);
    }
    let paths = sequence_paths(cli);
    let clouds = load_clouds(&paths, false)?;
    let poses = load_sequence_poses(&paths, clouds.len())?;
    let projection: ProjectionConfig = serde_json::from_value(pre.config["projection"].clone())?;
    let labels = generate_labels(&clouds, &poses, &projection, &label_cfg)?;
    write_labels_csv(stage_dir(cli, "labels").join(LABEL_FILE), &labels)?;
    m.outputs.push(LABEL_FILE.into());
    log::info!("labels: {} pairs", labels.len());
    finish_stage(cli, m)
}

const MODEL_STEM: &str = "model";

#[derive(Serialize)]
struct TrainConfig<'a> {
    args: &'a TrainArgs,
    arch: ArchKind,
    channels: String,
    seed: u64,
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    lr: f64,
    running_loss: f64,
    validation_loss: Option<f64>,
    validation_mae: Option<f64>,
    validation_yaw_accuracy: Option<f64>,
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<Manifest> {
    let pre = read_manifest(cli, "preprocess", "train")?;
    let lab = read_manifest(cli, "labels", "train")?;
    let channels = channels(cli)?;
    let config = TrainConfig { args: a, arch: cli.arch, channels: channels.to_string(), seed: cli.seed };
    let (mut m, done) = begin_stage(cli, "train", &config, &[&pre, &lab])?;
    if done {
        return Ok(m);
    }
    if !(0.0..1.0).contains(&a.validation_fraction) {
        return Err(Error::Validation("--validation-fraction must lie in [0, 1)".into()));
    }
    let images = load_images(cli, &pre)?;
    let inputs = images.iter().map(|img| image_to_input(img, &channels)).collect::<Result<Vec<_>>>()?;
    let labels = read_labels_csv(stage_dir(cli, "labels").join(LABEL_FILE))?;
    let mut pairs: Vec<TrainingPair> =
        labels.iter().map(|l| TrainingPair { a: l.query_id, b: l.ref_id, overlap: l.overlap, yaw: l.yaw_gt }).collect();
    let held = (pairs.len() as f64 * a.validation_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed ^ 0x5eed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, pairs.len(), held).into_vec();
    picked.sort_unstable();
    let validation_pairs: Vec<TrainingPair> = picked.iter().rev().map(|&i| pairs.remove(i)).collect();
    let set = TrainingSet { inputs: inputs.clone(), pairs };
    let validation = (!validation_pairs.is_empty()).then_some(TrainingSet { inputs, pairs: validation_pairs });

    let hp = Hyperparams {
        lr: a.lr,
        lr_decay: a.lr_decay,
        max_epochs: a.epochs,
        batch_size: a.batch,
        optimizer: a.optimizer.into(),
        seed: cli.seed,
        ..Default::default()
    };
    let init = ModelWeights::init(cli.arch.architecture(channels.depth()), channels, cli.seed)?;
    let outcome = train(init, &set, validation.as_ref(), &hp, |_, _| Ok(()))?;
    let dir = stage_dir(cli, "train");
    outcome.weights.save(dir.join(MODEL_STEM))?;
    let history = dir.join("history.csv");
    let mut w = csv::Writer::from_path(&history)?;
    for r in &outcome.reports {
        w.serialize(HistoryRow {
            epoch: r.epoch,
            lr: r.lr,
            running_loss: r.running_loss,
            validation_loss: r.validation.map(|v| v.mean_loss),
            validation_mae: r.validation.map(|v| v.overlap_mae),
            validation_yaw_accuracy: r.validation.and_then(|v| v.yaw_accuracy),
        })?;
    }
    w.flush().map_err(|e| Error::io(&history, e))?;
    m.outputs.extend([format!("{MODEL_STEM}.tnsr"), format!("{MODEL_STEM}.json"), "history.csv".into()]);
    finish_stage(cli, m)
}

/// Weights from `--weights` or from the train stage, with a fingerprint for
/// manifests and the feature cache.
fn load_weights(cli: &Cli, needed_by: &str) -> Result<(ModelWeights, String)> {
    let stem = match &cli.weights {
        Some(s) => s.clone(),
        None => {
            read_manifest(cli, "train", needed_by)?;
            stage_dir(cli, "train").join(MODEL_STEM)
        }
    };
    let w = ModelWeights::load(&stem)?;
    let channels = channels(cli)?;
    if w.channels != channels {
        return Err(Error::Config(format!("weights were trained on {} but --channels is {channels}", w.channels)));
    }
    let fp = weights_fingerprint(&w);
    Ok((w, fp))
}

fn leg_features(model: &ModelWeights, fingerprint: &str, images: &[ScanImage], cache_key: &str) -> Result<Vec<crate::net::tensor::Tensor>> {
    let cache = FeatureCache::from_env(fingerprint);
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| cache.get_or_compute(&format!("{cache_key}/{i}"), || model.leg_forward(&image_to_input(img, &model.channels)?)))
        .collect()
}

const PREDICTION_FILE: &str = "predictions.csv";

#[derive(Serialize)]
struct PredictionRow {
    query: usize,
    #[serde(rename = "ref")]
    reference: usize,
    overlap: f64,
    yaw: u16,
    true_overlap: f64,
    true_yaw: Option<u16>,
}

fn cmd_infer(cli: &Cli) -> Result<Manifest> {
    let pre = read_manifest(cli, "preprocess", "infer")?;
    let lab = read_manifest(cli, "labels", "infer")?;
    let (model, fp) = load_weights(cli, "infer")?;
    let (mut m, done) = begin_stage(cli, "infer", &serde_json::json!({ "weights": fp }), &[&pre, &lab])?;
    if done {
        return Ok(m);
    }
    let images = load_images(cli, &pre)?;
    let features = leg_features(&model, &fp, &images, &pre.config_hash)?;
    let labels = read_labels_csv(stage_dir(cli, "labels").join(LABEL_FILE))?;
    let rows: Vec<PredictionRow> = labels
        .par_iter()
        .map(|l| {
            let p = model.predict_from_features(&features[l.query_id], &features[l.ref_id])?;
            Ok(PredictionRow { query: l.query_id, reference: l.ref_id, overlap: p.overlap, yaw: p.yaw, true_overlap: l.overlap, true_yaw: l.yaw_gt })
        })
        .collect::<Result<_>>()?;
    let path = stage_dir(cli, "infer").join(PREDICTION_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    m.outputs.push(PREDICTION_FILE.into());
    finish_stage(cli, m)
}

/// Ground-truth poses with a covariance that grows along the sequence as if
/// accumulated from noisy odometry increments.
pub fn odometry_history(poses: &[Pose], sigma_t: f64, sigma_r: f64) -> Result<Vec<PoseWithCov>> {
    let mut step = Cov6::zeros();
    for i in 0..3 {
        step[(i, i)] = sigma_t * sigma_t;
        step[(i + 3, i + 3)] = sigma_r * sigma_r;
    }
    let mut out: Vec<PoseWithCov> = Vec::with_capacity(poses.len());
    for (i, p) in poses.iter().enumerate() {
        let next = match out.last() {
            None => PoseWithCov::certain(*p),
            Some(prev) => {
                let inc = PoseWithCov::new(poses[i - 1].inverse() * *p, step)?;
                let composed = prev.compose(&inc);
                PoseWithCov { mean: *p, cov: composed.cov }
            }
        };
        out.push(next);
    }
    Ok(out)
}

const OUTCOME_FILE: &str = "outcomes.json";
const DETECTION_FILE: &str = "detections.jsonl";

#[derive(Serialize, Deserialize)]
struct DetectConfig<'a> {
    detection: DetectionConfig,
    #[serde(borrow)]
    weights: &'a str,
    odom_sigma_t: f64,
    odom_sigma_r: f64,
    verify_icp: bool,
}

/// One line of `detections.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
pub struct DetectionRecord {
    #[serde(flatten)]
    pub detection: LoopCandidate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub icp: Option<IcpResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub icp_error: Option<String>,
}

fn detection_config(cli: &Cli, a: &DetectArgs) -> Result<DetectionConfig> {
    let cfg = DetectionConfig { recent_exclusion: a.exclusion, tp_overlap_threshold: a.tp_threshold, gate: cli.gate, strategy: cli.strategy };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_detect(cli: &Cli, a: &DetectArgs) -> Result<Manifest> {
    let pre = read_manifest(cli, "preprocess", "detect")?;
    let (model, fp) = load_weights(cli, "detect")?;
    let cfg = detection_config(cli, a)?;
    let config = DetectConfig { detection: cfg, weights: &fp, odom_sigma_t: a.odom_sigma_t, odom_sigma_r: a.odom_sigma_r, verify_icp: a.verify_icp };
    let (mut m, done) = begin_stage(cli, "detect", &config, &[&pre])?;
    if done {
        return Ok(m);
    }
    let images = load_images(cli, &pre)?;
    let poses = load_sequence_poses(&sequence_paths(cli), images.len())?;
    let history = odometry_history(&poses, a.odom_sigma_t, a.odom_sigma_r)?;
    let features = leg_features(&model, &fp, &images, &pre.config_hash)?;
    let outcomes = run_detection(&model, &features, &history, &cfg)?;
    let dir = stage_dir(cli, "detect");
    write_json(&dir.join(OUTCOME_FILE), &outcomes)?;

    let icp_cfg = IcpConfig::default();
    let records: Vec<DetectionRecord> = outcomes
        .par_iter()
        .filter_map(|o| o.detection)
        .map(|d| {
            let (icp, icp_error) = if a.verify_icp {
                // candidate frame → query frame, seeded with the predicted yaw
                let init = Pose::from_yaw((d.yaw as f64).to_radians(), nalgebra::Vector3::zeros());
                match icp(&images[d.candidate], &images[d.query], &init, &icp_cfg) {
                    Ok(r) => (Some(r), None),
                    Err(e) => (None, Some(e.to_string())),
                }
            } else {
                (None, None)
            };
            DetectionRecord { detection: d, icp, icp_error }
        })
        .collect();
    let path = dir.join(DETECTION_FILE);
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    crate::pipeline::write_detections(std::io::BufWriter::new(file), &records)?;
    m.outputs.extend([OUTCOME_FILE.into(), DETECTION_FILE.into()]);
    log::info!("detect: {} detections over {} queries", records.len(), outcomes.len());
    finish_stage(cli, m)
}

pub const REPORT_FILE: &str = "report.json";
const PR_FILE: &str = "pr.csv";
const RECALL_FILE: &str = "recall_at_n.csv";

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<Manifest> {
    let pre = read_manifest(cli, "preprocess", "eval")?;
    let det = read_manifest(cli, "detect", "eval")?;
    let (mut m, done) = begin_stage(cli, "eval", a, &[&pre, &det])?;
    if done {
        return Ok(m);
    }
    let cfg: DetectionConfig = serde_json::from_value(det.config["detection"].clone())?;
    let mut outcomes: Vec<QueryOutcome> = read_json(&stage_dir(cli, "detect").join(OUTCOME_FILE))?;

    let paths = sequence_paths(cli);
    let clouds = load_clouds(&paths, false)?;
    let poses = load_sequence_poses(&paths, clouds.len())?;
    let images = load_images(cli, &pre)?;
    let label_cfg = LabelConfig::default();
    let truth = |q: usize, c: usize| -> Result<f64> {
        label_pair(&clouds[q], &poses[q], &images[c], &poses[c], (q, c), &label_cfg).map(|l: OverlapLabel| l.overlap)
    };

    if a.oracle {
        let history = odometry_history(&poses, 0.0, 0.0)?;
        outcomes = outcomes
            .into_par_iter()
            .map(|o| {
                let scored = o
                    .scored
                    .iter()
                    .map(|s| Ok(ScoredCandidate { overlap: truth(o.query, s.id)?, ..*s }))
                    .collect::<Result<Vec<_>>>()?;
                let detection = detect(o.query, &scored, &history, &DetectionConfig { strategy: Strategy::Best, ..cfg })?;
                Ok(QueryOutcome { query: o.query, scored, detection })
            })
            .collect::<Result<_>>()?;
    }

    let (detections, ranked) = attach_ground_truth(&outcomes, &cfg, truth)?;
    let report = evaluate(&detections, &cfg)?;
    let dir = stage_dir(cli, "eval");
    report.write_json(dir.join(REPORT_FILE))?;
    report.write_csv(dir.join(PR_FILE))?;
    let path = dir.join(RECALL_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["n", "recall"])?;
    for n in 1..=a.max_n.max(1) {
        w.write_record([n.to_string(), recall_at_n(&ranked, cfg.tp_overlap_threshold, n)?.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    m.outputs.extend([REPORT_FILE.into(), PR_FILE.into(), RECALL_FILE.into()]);
    log::info!("eval: F1 {:.3}  AUC {:.3}  ({} queries, {} with loops)", report.f1_max, report.auc, report.queries, report.positives);
    finish_stage(cli, m)
}

/// Loads a PCA model written by the preprocess stage.
pub fn load_pca(out: &Path) -> Result<PcaModel> {
    PcaModel::load_json(out.join("preprocess").join(PCA_FILE))
}
