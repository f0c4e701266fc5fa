//! Command-line front end. Every command writes its artifacts under `--out`
//! together with a `manifest.json` listing them and a hash of the config.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{log_mel, AudioTrack, MelConfig};
use crate::body::toy::toy_quadruped;
use crate::body::{load_model, pose_mesh, pose_state_keypoints, MeshModel, PoseState};
use crate::camera::{CameraPair, CROP_RES};
use crate::data::io::{read_pose_file, write_pose_file};
use crate::data::{
    apply_occluder, color_jitter, load_clips, load_sequence, save_sequence, synth_sequence, ClipRecord, Gait,
    OccluderSpec, SynthConfig,
};
use crate::diffopt::{fit_sequence, initialize_pose, FitConfig, FIT_LR, TRAIN_LR};
use crate::error::{Error, Result};
use crate::fusion::{
    predict, stitch_middle, stitched_pose, train, EncoderConfig, RegressorParams, TrainConfig, Variant, VisualMode,
};
use crate::gradsuite::{run_suite, OPS, RASTER_TOL, TOL};
use crate::losses::{write_trace_csv, LossReport, LossWeights};
use crate::metrics::{
    format_mean_std, format_pair, iou_masks, p_mpjpe, pck, ErrorSummary, MetricsReport, DEFAULT_CONF_THRESHOLD,
    DEFAULT_PCK_ALPHA,
};
use crate::render::rasterize_hard;

pub const MANIFEST: &str = "manifest.json";
pub const THREADS_ENV: &str = "QUADFIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "quadfit", version, about = "Audio-visual quadruped pose fitting and regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic gait sequences with ground truth.
    Synth(SynthArgs),
    /// Fit the body model to each sequence of a dataset.
    Fit(FitArgs),
    /// Train a regressor on the clips of a dataset.
    Train(TrainArgs),
    /// Run a trained regressor over sliding windows and stitch middle frames.
    Infer(InferArgs),
    /// Score a pose file against a sequence: P-MPJPE, PCK and IoU.
    Eval(EvalArgs),
    /// Log-mel spectrogram of a WAV file.
    Spectrogram(SpectrogramArgs),
    /// Write an occluded and/or color-jittered copy of a sequence.
    Occlude(OccludeArgs),
    /// Check analytic gradients of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Tabulate eval and training outputs as CSV and SVG.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum GaitArg {
    Walk,
    Trot,
    Canter,
    All,
}

impl GaitArg {
    fn gaits(self) -> Vec<Gait> {
        match self {
            GaitArg::Walk => vec![Gait::Walk],
            GaitArg::Trot => vec![Gait::Trot],
            GaitArg::Canter => vec![Gait::Canter],
            GaitArg::All => Gait::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum VariantArg {
    Image,
    Early,
    Model,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Image => Variant::ImageOnly,
            VariantArg::Early => Variant::EarlyFusion,
            VariantArg::Model => Variant::ModelFusion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum VisualArg {
    Oracle,
    Crops,
}

/// A dataset given either positionally or with `--dataset`.
#[derive(Debug, Clone, Args, Serialize)]
struct DatasetArg {
    /// Sequence directory, or a directory of sequence directories.
    #[arg(value_name = "DATASET")]
    path: Option<PathBuf>,
    #[arg(long = "dataset", value_name = "DIR", conflicts_with = "path")]
    dataset: Option<PathBuf>,
}

impl DatasetArg {
    fn resolve(&self) -> Result<&Path> {
        self.path
            .as_deref()
            .or(self.dataset.as_deref())
            .ok_or_else(|| Error::Config("a dataset directory is required".into()))
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "trot")]
    gait: GaitArg,
    /// Frames per sequence.
    #[arg(long, default_value_t = 40)]
    frames: usize,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sequences per gait; seeds run from `--seed` upwards.
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Skip rendering RGB crops.
    #[arg(long)]
    no_images: bool,
    #[arg(long)]
    no_audio: bool,
    #[arg(long, default_value = "toy")]
    model: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct FitArgs {
    #[command(flatten)]
    dataset: DatasetArg,
    #[arg(long, default_value = "toy")]
    model: String,
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long, default_value_t = FIT_LR)]
    lr: f64,
    /// Loss weight overrides, e.g. `w_sil=0,w_kp=0.002`.
    #[arg(long)]
    weights: Option<String>,
    /// Defaults to `<dataset>/fit`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    dataset: DatasetArg,
    #[arg(long, default_value = "toy")]
    model: String,
    #[arg(long, value_enum, default_value = "image")]
    variant: VariantArg,
    /// One seed, or a comma-separated list trained in parallel.
    #[arg(long, default_value = "0")]
    seed: String,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = TRAIN_LR)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Clip length.
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, value_enum, default_value = "oracle")]
    visual: VisualArg,
    #[arg(long)]
    group_norm: bool,
    /// Probability of hiding the legs from the network input per clip and epoch.
    #[arg(long, default_value_t = 0.0)]
    occlude_prob: f64,
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct InferArgs {
    #[command(flatten)]
    dataset: DatasetArg,
    /// Trained network file.
    #[arg(long)]
    net: PathBuf,
    #[arg(long, default_value = "toy")]
    model: String,
    /// Drop the audio track before inference.
    #[arg(long)]
    no_audio: bool,
    /// Occluder applied to the input, `kind:anchor:size[:seed]`.
    #[arg(long)]
    occlude: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    dataset: DatasetArg,
    /// Pose file to score; the sequence's own ground truth when omitted.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    model: String,
    /// Sequence frame of the prediction's first frame. Shorter predictions
    /// default to being centered, as written by `infer`.
    #[arg(long)]
    start: Option<usize>,
    /// Row label in reports; defaults to the sequence id.
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SpectrogramArgs {
    /// WAV file, or a sequence directory holding `audio.wav`.
    input: PathBuf,
    #[arg(long, default_value_t = 64)]
    n_mels: usize,
    #[arg(long, default_value_t = 1024)]
    n_fft: usize,
    #[arg(long, default_value_t = 441)]
    hop: usize,
    #[arg(long)]
    high_pass: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct OccludeArgs {
    #[command(flatten)]
    dataset: DatasetArg,
    #[arg(long, default_value = "toy")]
    model: String,
    /// `kind:anchor:size[:seed]` with kind `patch` or `human`.
    #[arg(long)]
    occlude: Option<String>,
    /// Color jitter strength in [0, 1].
    #[arg(long)]
    jitter: Option<f64>,
    /// Overrides the occluder seed and seeds the jitter.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct GradcheckArgs {
    /// Random configurations per operation.
    #[arg(long, default_value_t = 20)]
    configs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct ReportArgs {
    /// Output directories of `eval`, `fit` or `train`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// code: 0 on success, 2 on a usage error, 1 on any other error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match configure_threads().and_then(|()| execute(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Spectrogram(a) => cmd_spectrogram(&a),
        Command::Occlude(a) => cmd_occlude(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

/// `toy` for the bundled model, otherwise a model file.
fn mesh_model(spec: &str) -> Result<MeshModel> {
    if spec == "toy" {
        Ok(toy_quadruped())
    } else {
        load_model(spec)
    }
}

fn parse_weights(text: Option<&str>) -> Result<LossWeights> {
    let mut w = LossWeights::default();
    let Some(text) = text else { return Ok(w) };
    for item in text.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("weight override {item:?} is not key=value")))?;
        let v: f64 = v.parse().map_err(|_| Error::Config(format!("weight {k} has bad value {v:?}")))?;
        let slot = match k {
            "w_kp" => &mut w.w_kp,
            "w_sil" => &mut w.w_sil,
            "w_beta_prior" => &mut w.w_beta_prior,
            "w_theta_prior" => &mut w.w_theta_prior,
            "w_smooth_gamma" => &mut w.w_smooth_gamma,
            "w_smooth_global" => &mut w.w_smooth_global,
            "w_smooth_joints" => &mut w.w_smooth_joints,
            _ => return Err(Error::Config(format!("unknown loss weight {k:?}"))),
        };
        *slot = v;
    }
    w.validate()?;
    Ok(w)
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = text
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad seed {s:?}"))))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    Ok(seeds)
}

/// The sequence directories under `root`: `root` itself if it holds a
/// sequence, else its immediate subdirectories that do, sorted by name.
pub fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("meta.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = std::fs::read_dir(root).map_err(|e| Error::CorruptDataset(format!("{}: {e}", root.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::CorruptDataset(format!("{}: no sequences found", root.display())));
    }
    Ok(dirs)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub artifacts: Vec<Artifact>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn files_under(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files_under(root, &p, out)?;
        } else if p.strip_prefix(root).map_or(true, |r| r != Path::new(MANIFEST)) {
            out.push(p);
        }
    }
    Ok(())
}

/// Writes `out/manifest.json` listing every file under `out`.
fn write_manifest<C: Serialize>(out: &Path, command: &str, config: &C) -> Result<()> {
    let config = serde_json::to_value(config)?;
    let canonical = serde_json::to_string(&serde_json::json!({ "command": command, "config": config }))?;
    let mut files = Vec::new();
    files_under(out, out, &mut files)?;
    let artifacts = files
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p)?;
            Ok(Artifact {
                path: p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: hex(&Sha256::digest(&bytes)),
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        tool: "quadfit".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config,
        config_hash: hex(&Sha256::digest(canonical.as_bytes())),
        artifacts,
    };
    std::fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let model = mesh_model(&a.model)?;
    let gaits = a.gait.gaits();
    let single = gaits.len() == 1 && a.count == 1;
    std::fs::create_dir_all(&a.out)?;
    for gait in gaits {
        for i in 0..a.count {
            let cfg = SynthConfig {
                gait,
                n_frames: a.frames,
                fps: a.fps,
                seed: a.seed + i,
                render_images: !a.no_images,
                audio: !a.no_audio,
                ..Default::default()
            };
            let clip = synth_sequence(&model, &cfg)?;
            let dir = if single { a.out.clone() } else { a.out.join(&clip.id) };
            save_sequence(&clip, &dir)?;
            println!("{}: {} frames -> {}", clip.id, clip.len(), dir.display());
        }
    }
    write_manifest(&a.out, "synth", a)
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let root = a.dataset.resolve()?;
    let model = mesh_model(&a.model)?;
    let cfg = FitConfig { weights: parse_weights(a.weights.as_deref())?, iters: a.iters, lr: a.lr, ..Default::default() };
    let dirs = sequence_dirs(root)?;
    let out = a.out.clone().unwrap_or_else(|| root.join("fit"));
    std::fs::create_dir_all(&out)?;
    for dir in &dirs {
        let clip = load_sequence(dir)?;
        let init = initialize_pose(&clip, &model)?;
        let fit = fit_sequence(&clip, &model, &init, &cfg)?;
        let target = if dirs.len() == 1 { out.clone() } else { out.join(dir_name(dir)) };
        std::fs::create_dir_all(&target)?;
        write_pose_file(target.join("pose.json"), &fit.pose)?;
        write_trace_csv(target.join("loss.csv"), &fit.trace)?;
        println!(
            "{}: loss {:.6} -> {:.6} in {} steps",
            clip.id,
            fit.initial().total,
            fit.last().total,
            fit.trace.len() - 1
        );
    }
    write_manifest(&out, "fit", a)
}

#[derive(Serialize)]
struct TrainRun<'a> {
    args: &'a TrainArgs,
    seed: u64,
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let root = a.dataset.resolve()?;
    let model = mesh_model(&a.model)?;
    let mut clips = Vec::new();
    for dir in sequence_dirs(root)? {
        clips.extend(load_clips(&dir, a.window)?);
    }
    let encoder = EncoderConfig {
        n_frames: a.window,
        visual: match a.visual {
            VisualArg::Oracle => VisualMode::Oracle,
            VisualArg::Crops => VisualMode::Crops,
        },
        group_norm: a.group_norm,
        ..Default::default()
    };
    let weights = parse_weights(a.weights.as_deref())?;
    let seeds = parse_seeds(&a.seed)?;
    let runs: Vec<(u64, PathBuf)> = seeds
        .iter()
        .map(|&s| (s, if seeds.len() == 1 { a.out.clone() } else { a.out.join(format!("seed-{s}")) }))
        .collect();
    runs.par_iter()
        .map(|(seed, dir)| -> Result<()> {
            let cfg = TrainConfig {
                variant: a.variant.into(),
                encoder,
                epochs: a.epochs,
                seed: *seed,
                lr: a.lr,
                batch_size: a.batch,
                weights,
                occlusion_prob: a.occlude_prob,
                ..Default::default()
            };
            let result = train(&model, &clips, &cfg)?;
            std::fs::create_dir_all(dir)?;
            result.params.save(dir.join("net.json"))?;
            write_trace_csv(dir.join("loss.csv"), &result.trace)?;
            let (first, last) = (result.trace.first(), result.trace.last());
            println!(
                "{} seed {seed}: {} clips, loss {:.6} -> {:.6}",
                cfg.variant,
                clips.len(),
                first.map_or(f64::NAN, |r| r.total),
                last.map_or(f64::NAN, |r| r.total)
            );
            if dir != &a.out {
                write_manifest(dir, "train", &TrainRun { args: a, seed: *seed })?;
            }
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    write_manifest(&a.out, "train", a)
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let root = a.dataset.resolve()?;
    let model = mesh_model(&a.model)?;
    let params = RegressorParams::load(&a.net)?;
    let occluder = a.occlude.as_deref().map(OccluderSpec::parse).transpose()?;
    let dirs = sequence_dirs(root)?;
    std::fs::create_dir_all(&a.out)?;
    for dir in &dirs {
        let mut seq = load_sequence(dir)?;
        if let Some(spec) = &occluder {
            seq = apply_occluder(&seq, &model, spec)?;
        }
        if a.no_audio {
            seq = seq.without_audio();
        }
        let preds: Vec<PoseState> = seq
            .windows(params.config.n_frames)?
            .iter()
            .map(|c| predict(&params, c).map(|p| p.pose))
            .collect::<Result<_>>()?;
        let frames = stitch_middle(&preds, seq.len())?;
        let (first, pose) =
            stitched_pose(&frames).ok_or_else(|| Error::SequenceTooShort { len: seq.len() })?;
        let target = if dirs.len() == 1 { a.out.clone() } else { a.out.join(dir_name(dir)) };
        std::fs::create_dir_all(&target)?;
        write_pose_file(target.join("pose.json"), &pose)?;
        println!("{}: frames {first}..{} predicted", seq.id, first + pose.n_frames());
    }
    write_manifest(&a.out, "infer", a)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub label: String,
    pub n_frames: usize,
    pub p_mpjpe: Option<ErrorSummary>,
    pub pck: f64,
    pub iou: Option<f64>,
}

/// Scores `pose` (starting at sequence frame `start`) against `seq`.
pub fn evaluate(model: &MeshModel, seq: &ClipRecord, pose: &PoseState, start: usize, label: &str) -> Result<(EvalSummary, MetricsReport)> {
    let n = pose.n_frames();
    if n == 0 || start + n > seq.len() {
        return Err(Error::shape(format!("prediction frames {start}..{} outside {} frames", start + n, seq.len())));
    }
    pose.validate(model)?;
    let clip = seq.window(start, n)?;
    let mut report = MetricsReport::default();

    let p_mpjpe_summary = match &clip.gt {
        Some(gt) => {
            let s = p_mpjpe(&pose_state_keypoints(model, pose)?, &gt.keypoints3d, true)?;
            for (f, v) in s.per_frame.iter().enumerate() {
                report.push(&seq.id, start + f, "p_mpjpe", *v);
            }
            Some(report.summarize("p_mpjpe"))
        }
        None => None,
    };

    let cams = CameraPair::from_weak(&pose.cam, &clip.bboxes)?;
    let kp3 = pose_state_keypoints(model, pose)?;
    let mut pred2d = Vec::with_capacity(n);
    let mut ious = Vec::new();
    for f in 0..n {
        pred2d.push(cams.project_full(f, &kp3[f])?);
        if let (Some(mask), true) = (&clip.masks[f], clip.sil_valid[f]) {
            let verts = pose_mesh(model, &pose.beta, pose.theta_global[f], &pose.theta_joints[f])?;
            let sil = rasterize_hard(&verts, model.faces(), &cams, f, CROP_RES)?;
            let iou = iou_masks(&sil, mask, 0.5)?;
            report.push(&seq.id, start + f, "iou", iou);
            ious.push(iou);
        }
    }
    let norm: Vec<f64> = clip.bboxes.iter().map(|b| b.diagonal()).collect();
    let pck_value = pck(&pred2d, &clip.keypoints, &clip.conf, DEFAULT_PCK_ALPHA, &norm, DEFAULT_CONF_THRESHOLD)?;
    report.push(&seq.id, start, "pck", pck_value);
    let iou = (!ious.is_empty()).then(|| report.summarize("iou").mean);
    report.summarize("pck");
    let summary = EvalSummary { label: label.to_string(), n_frames: n, p_mpjpe: p_mpjpe_summary, pck: pck_value, iou };
    Ok((summary, report))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let root = a.dataset.resolve()?;
    let model = mesh_model(&a.model)?;
    let seq = load_sequence(root)?;
    let pose = match &a.pred {
        Some(p) => read_pose_file(p)?,
        None => {
            seq.gt.as_ref().ok_or_else(|| Error::Config(format!("{} has no ground truth", seq.id)))?.pose.clone()
        }
    };
    let start = a.start.unwrap_or(seq.len().saturating_sub(pose.n_frames()) / 2);
    let label = a.label.clone().unwrap_or_else(|| seq.id.clone());
    let (summary, report) = evaluate(&model, &seq, &pose, start, &label)?;
    std::fs::create_dir_all(&a.out)?;
    report.write_csv(a.out.join("metrics.csv"))?;
    std::fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    if let Some(s) = &summary.p_mpjpe {
        println!("p_mpjpe {}", format_mean_std(s.mean, s.std));
    }
    println!("pck {:.4}", summary.pck);
    if let Some(iou) = summary.iou {
        println!("iou {iou:.4}");
    }
    write_manifest(&a.out, "eval", a)
}

fn cmd_spectrogram(a: &SpectrogramArgs) -> Result<()> {
    let wav = if a.input.is_dir() { a.input.join("audio.wav") } else { a.input.clone() };
    let track = AudioTrack::read_wav(&wav)?;
    let cfg = MelConfig { n_mels: a.n_mels, n_fft: a.n_fft, hop: a.hop, high_pass_hz: a.high_pass, ..Default::default() };
    let spec = log_mel(&track, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    spec.write_csv(a.out.join("spectrogram.csv"))?;
    spec.write_raw(a.out.join("spectrogram.raw"))?;
    println!("{} mels x {} frames", spec.n_mels, spec.n_frames);
    write_manifest(&a.out, "spectrogram", a)
}

fn cmd_occlude(a: &OccludeArgs) -> Result<()> {
    let root = a.dataset.resolve()?;
    let model = mesh_model(&a.model)?;
    if a.occlude.is_none() && a.jitter.is_none() {
        return Err(Error::Config("nothing to do: give --occlude and/or --jitter".into()));
    }
    let mut seq = load_sequence(root)?;
    if let Some(text) = &a.occlude {
        let mut spec = OccluderSpec::parse(text)?;
        if text.split(':').count() == 3 {
            spec.seed = a.seed;
        }
        seq = apply_occluder(&seq, &model, &spec)?;
    }
    if let Some(strength) = a.jitter {
        seq = color_jitter(&seq, strength, a.seed)?;
    }
    save_sequence(&seq, &a.out)?;
    println!("{} -> {}", seq.id, a.out.display());
    write_manifest(&a.out, "occlude", a)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let suite = run_suite(a.configs, a.seed)?;
    let mut csv = String::from("op,configs,failed,kink_retries,max_rel_err,tol\n");
    for e in &suite {
        let status = if e.passed() { "ok" } else { "FAIL" };
        let retried = if e.kink_retries > 0 { format!("  ({} retried at a finer step)", e.kink_retries) } else { String::new() };
        println!("{:<20} {:>3} configs  max rel err {:.3e}  (tol {:.0e})  {status}{retried}", e.op, e.configs, e.max_rel_err, e.tol);
        let _ = writeln!(csv, "{},{},{},{},{:e},{:e}", e.op, e.configs, e.failed, e.kink_retries, e.max_rel_err, e.tol);
    }
    let smooth = suite.iter().filter(|e| e.tol == TOL).map(|e| e.max_rel_err).fold(0.0, f64::max);
    let raster = suite.iter().filter(|e| e.tol == RASTER_TOL).map(|e| e.max_rel_err).fold(0.0, f64::max);
    println!("max rel err {smooth:.3e} (tol {TOL:.0e}); rasterizer {raster:.3e} (tol {RASTER_TOL:.0e}); {} ops", OPS.len());
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("gradcheck.csv"), csv)?;
        write_manifest(out, "gradcheck", a)?;
    }
    let failed: Vec<&str> = suite.iter().filter(|e| !e.passed()).map(|e| e.op).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::NotDifferentiable(format!("gradient check failed for {}", failed.join(", "))))
    }
}

/// Reads the `command` and a label from a run directory's manifest.
fn run_label(dir: &Path) -> String {
    let manifest: Option<Manifest> =
        std::fs::read_to_string(dir.join(MANIFEST)).ok().and_then(|t| serde_json::from_str(&t).ok());
    match manifest {
        Some(m) if m.command == "train" => {
            let v = m.config.pointer("/variant").or_else(|| m.config.pointer("/args/variant"));
            v.and_then(|v| v.as_str()).map_or_else(|| dir_name(dir), str::to_string)
        }
        _ => dir_name(dir),
    }
}

fn read_trace(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != LossReport::CSV_HEADER {
        return Err(Error::CorruptDataset(format!("{}: unexpected header {header:?}", path.display())));
    }
    lines
        .map(|l| {
            l.rsplit(',')
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::CorruptDataset(format!("{}: bad row {l:?}", path.display())))
        })
        .collect()
}

#[derive(Default)]
struct Group {
    p_mpjpe: Vec<f64>,
    pck: Vec<f64>,
    iou: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let s = ErrorSummary::from_values(v.to_vec());
    (s.mean, s.std)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar chart of group means with one-standard-deviation whiskers.
pub fn bar_svg(title: &str, bars: &[(String, f64, f64)]) -> String {
    let (w, h, pad) = (120.0 + 90.0 * bars.len() as f64, 320.0, 50.0);
    let top = bars.iter().map(|b| b.1 + b.2).fold(0.0, f64::max).max(1e-12) * 1.1;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v / top;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        w / 2.0,
        svg_escape(title),
        h - pad,
        w - pad / 2.0,
        h - pad
    );
    for (i, (label, mean, std)) in bars.iter().enumerate() {
        let x = pad + 20.0 + 90.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{x}\" y=\"{:.2}\" width=\"60\" height=\"{:.2}\" fill=\"{}\"/>",
            y(*mean),
            (h - pad) - y(*mean),
            PALETTE[i % PALETTE.len()]
        );
        let cx = x + 30.0;
        let _ = writeln!(s, "<line x1=\"{cx}\" y1=\"{:.2}\" x2=\"{cx}\" y2=\"{:.2}\" stroke=\"black\"/>", y(mean - std), y(mean + std));
        let _ = writeln!(s, "<text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\">{}</text>", h - pad + 16.0, svg_escape(label));
        let _ = writeln!(s, "<text x=\"{cx}\" y=\"{:.2}\" text-anchor=\"middle\">{:.3}</text>", y(mean + std) - 4.0, mean);
    }
    s.push_str("</svg>\n");
    s
}

/// Line plot of loss curves on a log axis.
pub fn line_svg(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let (w, h, pad) = (640.0, 360.0, 50.0);
    let finite = series.iter().flat_map(|s| s.1.iter()).filter(|v| v.is_finite() && **v > 0.0);
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo.log10(), hi.log10().max(lo.log10() + 1e-9)) } else { (0.0, 1.0) };
    let n = series.iter().map(|s| s.1.len()).max().unwrap_or(1).max(2) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>\n\
         <rect x=\"{pad}\" y=\"{pad}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n\
         <text x=\"{pad}\" y=\"{}\">1e{lo:.1}</text><text x=\"{pad}\" y=\"{}\">1e{hi:.1}</text>\n",
        w / 2.0,
        svg_escape(title),
        w - 2.0 * pad,
        h - 2.0 * pad,
        h - pad + 16.0,
        pad - 4.0
    );
    for (i, (label, values)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite() && **v > 0.0)
            .map(|(k, v)| {
                let x = pad + (w - 2.0 * pad) * k as f64 / (n - 1.0);
                let y = h - pad - (h - 2.0 * pad) * (v.log10() - lo) / (hi - lo);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>", w - pad - 120.0, pad + 16.0 * (i + 1) as f64, svg_escape(label));
    }
    s.push_str("</svg>\n");
    s
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut groups: BTreeMap<String, Group> = BTreeMap::new();
    let mut curves = Vec::new();
    for dir in &a.runs {
        let summary = dir.join("summary.json");
        let trace = dir.join("loss.csv");
        if !summary.is_file() && !trace.is_file() {
            return Err(Error::Config(format!("{}: neither summary.json nor loss.csv", dir.display())));
        }
        if summary.is_file() {
            let s: EvalSummary = serde_json::from_str(&std::fs::read_to_string(&summary)?)?;
            let g = groups.entry(s.label.clone()).or_default();
            if let Some(p) = &s.p_mpjpe {
                g.p_mpjpe.push(p.mean);
            }
            g.pck.push(s.pck);
            g.iou.extend(s.iou);
        }
        if trace.is_file() {
            curves.push((run_label(dir), read_trace(&trace)?));
        }
    }
    std::fs::create_dir_all(&a.out)?;
    let mut csv = String::from("label,runs,p_mpjpe,pck,iou,iou / pck\n");
    let mut bars = Vec::new();
    for (label, g) in &groups {
        let (pm, ps) = mean_std(&g.p_mpjpe);
        let (km, ks) = mean_std(&g.pck);
        let (im, is) = mean_std(&g.iou);
        let cell = |v: &[f64], m: f64, s: f64| if v.is_empty() { String::new() } else { format_mean_std(m, s) };
        let pair = if g.iou.is_empty() { String::new() } else { format_pair(im, km) };
        let _ = writeln!(
            csv,
            "{label},{},{},{},{},{pair}",
            g.pck.len(),
            cell(&g.p_mpjpe, pm, ps),
            cell(&g.pck, km, ks),
            cell(&g.iou, im, is)
        );
        if !g.p_mpjpe.is_empty() {
            bars.push((label.clone(), pm, ps));
        }
    }
    std::fs::write(a.out.join("table.csv"), &csv)?;
    print!("{csv}");
    if !bars.is_empty() {
        std::fs::write(a.out.join("p_mpjpe.svg"), bar_svg("P-MPJPE (mean ± std)", &bars))?;
    }
    if !curves.is_empty() {
        std::fs::write(a.out.join("loss.svg"), line_svg("Total loss", &curves))?;
    }
    write_manifest(&a.out, "report", a)
}
