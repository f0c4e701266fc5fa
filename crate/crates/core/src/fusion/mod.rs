//! Regression networks that map a clip to body model parameters, with an
//! optional audio branch fused either before the pose head (early fusion) or
//! through a shared pose head (model fusion).
//!
//! Every variant shares one structure: a per-frame dense visual encoder
//! followed by a residual temporal convolution, a shape and camera head `psi`
//! and a joint-pose head `phi` iterated from mean parameters (iterative error
//! feedback), and a single fully connected layer for the root rotation.

pub(crate) mod net;
mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{MeshModel, PoseState};
use crate::camera::{bbox_info, CROP_RES};
use crate::data::ClipRecord;
use crate::error::{Error, Result};

pub use net::{encode_clip, ief_regress, predict, EncodedClip, Prediction};
pub use train::{
    clip_loss, clip_pmpjpe, evaluate_pmpjpe, stitch_middle, stitched_pose, train, FramePose, TrainConfig,
    TrainResult,
};

pub const NET_VERSION: &str = "quadfit-net/1";
/// Per-frame box information is zero-padded to this length.
pub const BBOX_INFO_LEN: usize = 32;
/// Side of the grayscale grid crops are averaged down to.
pub const CROP_GRID: usize = 16;
pub const GROUP_NORM_GROUPS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ImageOnly,
    EarlyFusion,
    ModelFusion,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::ImageOnly, Variant::EarlyFusion, Variant::ModelFusion];

    pub fn uses_audio(self) -> bool {
        self != Variant::ImageOnly
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Variant::ImageOnly => "image",
            Variant::EarlyFusion => "early",
            Variant::ModelFusion => "model",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" | "image_only" => Ok(Variant::ImageOnly),
            "early" | "early_fusion" => Ok(Variant::EarlyFusion),
            "model" | "model_fusion" => Ok(Variant::ModelFusion),
            _ => Err(Error::Config(format!("unknown variant {s:?} (expected image, early or model)"))),
        }
    }
}

/// What the visual encoder reads per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualMode {
    /// 2D keypoints in normalized crop coordinates weighted by confidence,
    /// followed by the confidences.
    Oracle,
    /// The crop averaged down to a grayscale grid.
    Crops,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Clip length `T`.
    pub n_frames: usize,
    pub visual: VisualMode,
    /// Width of the dense encoder layers.
    pub hidden: usize,
    /// Feature dimension `d`.
    pub d: usize,
    /// Hidden width of the regression heads.
    pub head_hidden: usize,
    pub n_iter: usize,
    /// Mel bands and spectrogram columns per video frame.
    pub n_mels: usize,
    pub audio_cols: usize,
    /// Group normalization inside the temporal block.
    pub group_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_frames: 5,
            visual: VisualMode::Oracle,
            hidden: 64,
            d: 64,
            head_hidden: 128,
            n_iter: 3,
            n_mels: 64,
            audio_cols: 4,
            group_norm: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_frames, self.hidden, self.d, self.head_hidden, self.n_mels, self.audio_cols];
        if dims.contains(&0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.group_norm && self.d % GROUP_NORM_GROUPS != 0 {
            return Err(Error::Config(format!(
                "group norm needs d divisible by {GROUP_NORM_GROUPS}, got {}",
                self.d
            )));
        }
        Ok(())
    }
}

/// Input and output sizes fixed by the body model and encoder settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub visual_in: usize,
    pub audio_in: usize,
    pub n_keypoints: usize,
    pub n_shape: usize,
    /// Joint rotation values excluding the root: `3 (J - 1)`.
    pub n_pose: usize,
}

impl Dims {
    pub fn new(model: &MeshModel, cfg: &EncoderConfig) -> Self {
        let k = model.n_keypoints();
        let visual_core = match cfg.visual {
            VisualMode::Oracle => 3 * k,
            VisualMode::Crops => CROP_GRID * CROP_GRID,
        };
        Self {
            visual_in: visual_core + BBOX_INFO_LEN,
            audio_in: cfg.n_mels * cfg.audio_cols,
            n_keypoints: k,
            n_shape: model.n_shape(),
            n_pose: 3 * (model.n_joints() - 1),
        }
    }
}

/// Starting point of the regression loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanParams {
    pub beta: Vec<f64>,
    /// `[log s, px, py]`.
    pub cam: [f64; 3],
    pub theta_global: [f64; 3],
    pub theta_joints: Vec<f64>,
}

impl MeanParams {
    /// Prior means for shape and pose with the given camera and root.
    pub fn from_model(model: &MeshModel, cam: [f64; 3], theta_global: [f64; 3]) -> Self {
        Self {
            beta: model.shape_prior_mean().to_vec(),
            cam,
            theta_global,
            theta_joints: model.pose_prior_mean().to_vec(),
        }
    }

    /// Prior-mean shape and pose with camera and root averaged over poses.
    pub fn from_poses<'a>(model: &MeshModel, poses: impl IntoIterator<Item = &'a PoseState>) -> Result<Self> {
        let mut cam = [0.0; 3];
        let mut root = [0.0; 3];
        let mut n = 0.0;
        for p in poses {
            for (c, g) in p.cam.iter().zip(&p.theta_global) {
                cam[0] += c.s.ln();
                cam[1] += c.px;
                cam[2] += c.py;
                for i in 0..3 {
                    root[i] += g[i];
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Err(Error::Config("no poses to average".into()));
        }
        Ok(Self::from_model(model, cam.map(|x| x / n), root.map(|x| x / n)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// All weights of one network plus everything needed to run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorParams {
    pub variant: Variant,
    pub config: EncoderConfig,
    pub dims: Dims,
    pub mean: MeanParams,
    pub tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct NetFile {
    version: String,
    #[serde(flatten)]
    params: RegressorParams,
}

/// Output layers start near zero so an untrained network predicts close to
/// the mean parameters.
const HEAD_INIT_SCALE: f64 = 0.01;
const HEADS: [&str; 3] = ["psi1", "phi1", "glob"];

fn layer_shapes(variant: Variant, cfg: &EncoderConfig, dims: &Dims) -> Vec<(String, usize, usize)> {
    let (h, d, hh) = (cfg.hidden, cfg.d, cfg.head_hidden);
    let mut layers: Vec<(String, usize, usize)> = Vec::new();
    let encoder = |prefix: &str, input: usize, layers: &mut Vec<(String, usize, usize)>| {
        layers.push((format!("{prefix}enc0"), input, h));
        layers.push((format!("{prefix}enc1"), h, h));
        layers.push((format!("{prefix}enc2"), h, d));
        layers.push((format!("{prefix}conv1"), 3 * d, d));
        layers.push((format!("{prefix}conv2"), 3 * d, d));
    };
    encoder("v", dims.visual_in, &mut layers);
    if variant.uses_audio() {
        encoder("a", dims.audio_in, &mut layers);
    }
    if variant == Variant::EarlyFusion {
        layers.push(("fuse0".into(), 2 * d, d));
        layers.push(("fuse1".into(), d, d));
    }
    let cam = dims.n_shape + 3;
    layers.push(("psi0".into(), d + cam, hh));
    layers.push(("psi1".into(), hh, cam));
    layers.push(("phi0".into(), d + dims.n_pose, hh));
    layers.push(("phi1".into(), hh, dims.n_pose));
    layers.push(("glob".into(), d, 3));
    layers
}

impl RegressorParams {
    /// Glorot-uniform weights, zero biases, and down-scaled output heads.
    pub fn init(variant: Variant, config: EncoderConfig, dims: Dims, mean: MeanParams, seed: u64) -> Result<Self> {
        config.validate()?;
        if mean.beta.len() != dims.n_shape || mean.theta_joints.len() != dims.n_pose {
            return Err(Error::Config("mean parameters do not match the model".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for (name, fan_in, fan_out) in layer_shapes(variant, &config, &dims) {
            let (rows, cols) = (fan_in, fan_out);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if HEADS.contains(&name.as_str()) { HEAD_INIT_SCALE } else { 1.0 };
            let data = (0..rows * cols).map(|_| scale * rng.random_range(-bound..bound)).collect();
            tensors.push(Tensor { name: format!("{name}.w"), rows, cols, data });
            tensors.push(Tensor { name: format!("{name}.b"), rows: 1, cols, data: vec![0.0; cols] });
        }
        if config.group_norm {
            let prefixes: &[&str] = if variant.uses_audio() { &["v", "a"] } else { &["v"] };
            for p in prefixes {
                for k in 1..=2 {
                    tensors.push(Tensor { name: format!("{p}gn{k}.g"), rows: 1, cols: config.d, data: vec![1.0; config.d] });
                    tensors.push(Tensor { name: format!("{p}gn{k}.b"), rows: 1, cols: config.d, data: vec![0.0; config.d] });
                }
            }
        }
        Ok(Self { variant, config, dims, mean, tensors })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Config(format!("expected {} parameters, got {}", self.n_params(), flat.len())));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Zeroes the output layers of the shape, pose and root heads.
    pub fn zero_heads(&mut self) {
        for t in &mut self.tensors {
            if HEADS.iter().any(|h| t.name.starts_with(&format!("{h}."))) {
                t.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = RegressorParams::init(self.variant, self.config, self.dims, self.mean.clone(), 0)?;
        if expected.tensors.len() != self.tensors.len() {
            return Err(Error::Config("network file has the wrong set of tensors".into()));
        }
        for (e, t) in expected.tensors.iter().zip(&self.tensors) {
            if e.name != t.name || e.rows != t.rows || e.cols != t.cols || t.data.len() != t.rows * t.cols {
                return Err(Error::Config(format!("tensor {} has the wrong shape", t.name)));
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("tensor {} holds non-finite values", t.name)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&NetFile { version: NET_VERSION.into(), params: self.clone() })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NetFile = serde_json::from_str(text)?;
        if file.version != NET_VERSION {
            return Err(Error::Config(format!("unsupported network version {:?}", file.version)));
        }
        file.params.validate()?;
        Ok(file.params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Network inputs for one clip, row-major with one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipInputs {
    pub n_frames: usize,
    pub visual: Vec<f64>,
    pub visual_dim: usize,
    pub audio: Option<Vec<f64>>,
    pub audio_dim: usize,
}

impl ClipInputs {
    pub fn from_clip(clip: &ClipRecord, cfg: &EncoderConfig, dims: &Dims) -> Result<Self> {
        clip.validate()?;
        let t = clip.len();
        if t != cfg.n_frames {
            return Err(Error::Config(format!("clip has {t} frames, the network expects {}", cfg.n_frames)));
        }
        if clip.n_keypoints() != dims.n_keypoints {
            return Err(Error::Config(format!(
                "clip has {} keypoints, the network expects {}",
                clip.n_keypoints(),
                dims.n_keypoints
            )));
        }
        let mut visual = Vec::with_capacity(t * dims.visual_in);
        for f in 0..t {
            let bbox = &clip.bboxes[f];
            match cfg.visual {
                VisualMode::Oracle => {
                    let half = CROP_RES as f64 / 2.0;
                    for (p, &c) in clip.keypoints[f].iter().zip(&clip.conf[f]) {
                        let uv = bbox.full_to_crop(p[0], p[1], CROP_RES as f64);
                        visual.push(c * (uv[0] - half) / half);
                        visual.push(c * (uv[1] - half) / half);
                    }
                    visual.extend_from_slice(&clip.conf[f]);
                }
                VisualMode::Crops => {
                    let img = clip.crops[f]
                        .as_ref()
                        .ok_or_else(|| Error::Config(format!("crop mode needs frame images, frame {f} has none")))?;
                    visual.extend(gray_grid(img, CROP_GRID));
                }
            }
            let info = bbox_info(bbox)?;
            visual.extend_from_slice(&info);
            visual.extend(std::iter::repeat_n(0.0, BBOX_INFO_LEN - info.len()));
        }
        debug_assert_eq!(visual.len(), t * dims.visual_in);

        let audio = match &clip.audio {
            None => None,
            Some(a) => {
                let (window, w) = a.window(clip.fps, t)?;
                let n_mels = a.spectrogram.n_mels;
                if n_mels != cfg.n_mels || w != cfg.audio_cols * t {
                    return Err(Error::Config(format!(
                        "audio window is {n_mels} x {w}, the network expects {} x {}",
                        cfg.n_mels,
                        cfg.audio_cols * t
                    )));
                }
                let floor = a.spectrogram.config.log_floor();
                let mut out = Vec::with_capacity(t * dims.audio_in);
                for f in 0..t {
                    for m in 0..n_mels {
                        for c in 0..cfg.audio_cols {
                            out.push((window[m * w + f * cfg.audio_cols + c] - floor) / -floor);
                        }
                    }
                }
                Some(out)
            }
        };
        Ok(Self { n_frames: t, visual, visual_dim: dims.visual_in, audio, audio_dim: dims.audio_in })
    }
}

/// Block-averaged luma in `[0, 1]` on a `grid x grid` lattice.
fn gray_grid(img: &RgbImage, grid: usize) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; grid * grid];
    let mut count = vec![0.0; grid * grid];
    for (x, y, p) in img.enumerate_pixels() {
        let gx = (x as usize * grid / w).min(grid - 1);
        let gy = (y as usize * grid / h).min(grid - 1);
        let luma = (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0;
        out[gy * grid + gx] += luma;
        count[gy * grid + gx] += 1.0;
    }
    out.iter().zip(&count).map(|(s, c)| if *c > 0.0 { s / c } else { 0.0 }).collect()
}
