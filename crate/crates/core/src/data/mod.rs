//! Clip records, bounding-box fusion, cropping, augmentation, the synthetic
//! gait generator and the on-disk dataset layout.

pub mod augment;
pub mod io;
pub mod synth;

use std::sync::Arc;

use image::{Rgb, RgbImage};

use crate::audio::{clip_window, AudioTrack, Spectrogram};
use crate::body::PoseState;
use crate::camera::BBox;
use crate::error::{Error, Result};
use crate::render::Mask;

pub use augment::{apply_occluder, color_jitter, keypoint_noise, OccluderKind, OccluderSpec};
pub use io::{load_clips, load_sequence, save_sequence};
pub use synth::{fit_pose_prior, synth_gait, synth_sequence, Gait, GaitMotion, SynthConfig};

/// Area-ratio threshold above which the keypoint box wins outright.
pub const BBOX_RATIO_GAMMA: f64 = 2.78;

/// Audio shared by all clips of a sequence, with the clip's start frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipAudio {
    pub track: Arc<AudioTrack>,
    pub spectrogram: Arc<Spectrogram>,
    /// Video frame index (relative to the track start) of the clip's first frame.
    pub t0: usize,
}

impl ClipAudio {
    /// Log-mel window for `n_frames` frames at `fps`: `n_mels x W` and `W`.
    pub fn window(&self, fps: f64, n_frames: usize) -> Result<(Vec<f64>, usize)> {
        clip_window(&self.spectrogram, fps, self.t0, n_frames)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub pose: PoseState,
    /// Posed joint locations per frame.
    pub joints3d: Vec<Vec<[f64; 3]>>,
    /// Posed model keypoints per frame.
    pub keypoints3d: Vec<Vec<[f64; 3]>>,
}

impl GroundTruth {
    fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            pose: self.pose.slice(start, len),
            joints3d: self.joints3d[start..start + len].to_vec(),
            keypoints3d: self.keypoints3d[start..start + len].to_vec(),
        }
    }
}

/// A run of consecutive frames. Whole sequences and the `T`-frame clips cut
/// from them share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    /// Index of the first frame within its sequence.
    pub start: usize,
    pub fps: f64,
    pub bboxes: Vec<BBox>,
    /// Full-frame pixel coordinates, `T x K`.
    pub keypoints: Vec<Vec<[f64; 2]>>,
    pub conf: Vec<Vec<f64>>,
    /// Crop-resolution silhouettes; `None` when missing.
    pub masks: Vec<Option<Arc<Mask>>>,
    pub sil_valid: Vec<bool>,
    /// Crop images, if rendered or loaded.
    pub crops: Vec<Option<Arc<RgbImage>>>,
    pub audio: Option<ClipAudio>,
    pub gt: Option<GroundTruth>,
}

impl ClipRecord {
    pub fn len(&self) -> usize {
        self.bboxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bboxes.is_empty()
    }

    pub fn n_keypoints(&self) -> usize {
        self.keypoints.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let lens = [self.keypoints.len(), self.conf.len(), self.masks.len(), self.sil_valid.len(), self.crops.len()];
        if lens.iter().any(|&l| l != t) {
            return Err(Error::shape(format!("clip {}: per-frame lists disagree in length", self.id)));
        }
        let k = self.n_keypoints();
        for (f, (kp, c)) in self.keypoints.iter().zip(&self.conf).enumerate() {
            if kp.len() != k || c.len() != k {
                return Err(Error::shape(format!("clip {} frame {f}: keypoint count", self.id)));
            }
            if c.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::Config(format!("clip {} frame {f}: confidence outside [0, 1]", self.id)));
            }
        }
        if let Some(gt) = &self.gt {
            if gt.pose.n_frames() != t || gt.joints3d.len() != t || gt.keypoints3d.len() != t {
                return Err(Error::shape(format!("clip {}: ground truth length", self.id)));
            }
        }
        Ok(())
    }

    /// Frames `start..start+len` as a new record.
    pub fn window(&self, start: usize, len: usize) -> Result<ClipRecord> {
        if len == 0 || start + len > self.len() {
            return Err(Error::shape(format!(
                "window {start}..{} outside {} frames",
                start + len,
                self.len()
            )));
        }
        let r = start..start + len;
        Ok(ClipRecord {
            id: format!("{}@{}", self.id, self.start + start),
            start: self.start + start,
            fps: self.fps,
            bboxes: self.bboxes[r.clone()].to_vec(),
            keypoints: self.keypoints[r.clone()].to_vec(),
            conf: self.conf[r.clone()].to_vec(),
            masks: self.masks[r.clone()].to_vec(),
            sil_valid: self.sil_valid[r.clone()].to_vec(),
            crops: self.crops[r].to_vec(),
            audio: self.audio.as_ref().map(|a| ClipAudio { t0: a.t0 + start, ..a.clone() }),
            gt: self.gt.as_ref().map(|g| g.slice(start, len)),
        })
    }

    /// All windows of length `t` with stride 1.
    pub fn windows(&self, t: usize) -> Result<Vec<ClipRecord>> {
        if t == 0 || t > self.len() {
            return Err(Error::SequenceTooShort { len: self.len() });
        }
        (0..=self.len() - t).map(|s| self.window(s, t)).collect()
    }

    /// Drops the audio, as at inference without a microphone.
    pub fn without_audio(&self) -> ClipRecord {
        ClipRecord { audio: None, ..self.clone() }
    }
}

/// Result of fusing the keypoint and silhouette boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedBox {
    pub bbox: BBox,
    /// Whether the silhouette box took part; silhouette supervision is only
    /// trusted in that case.
    pub uses_silhouette: bool,
}

fn overlap_area(a: &BBox, b: &BBox) -> f64 {
    let (p, q) = (a.corners(), b.corners());
    let w = (p[2].min(q[2]) - p[0].max(q[0])).max(0.0);
    let h = (p[3].min(q[3]) - p[1].max(q[1])).max(0.0);
    w * h
}

/// Three-case fusion: keypoint box if the boxes do not overlap or if the
/// keypoint box is more than [`BBOX_RATIO_GAMMA`] times larger, else the
/// (squared) union.
pub fn fuse_bbox(g_kp: &BBox, g_sil: &BBox) -> Result<FusedBox> {
    let (m_kp, m_sil) = (g_kp.area(), g_sil.area());
    if !(m_kp > 0.0) || !(m_sil > 0.0) {
        return Err(Error::DegenerateBbox);
    }
    let inter = overlap_area(g_kp, g_sil);
    let iou = inter / (m_kp + m_sil - inter);
    if iou == 0.0 || m_kp / m_sil > BBOX_RATIO_GAMMA {
        return Ok(FusedBox { bbox: *g_kp, uses_silhouette: false });
    }
    let (p, q) = (g_kp.corners(), g_sil.corners());
    let bbox = BBox::from_corners(
        p[0].min(q[0]),
        p[1].min(q[1]),
        p[2].max(q[2]),
        p[3].max(q[3]),
        g_kp.frame_w,
        g_kp.frame_h,
    )?;
    Ok(FusedBox { bbox, uses_silhouette: true })
}

/// A square crop and the affine maps between its pixels and the frame's.
#[derive(Debug, Clone)]
pub struct Crop {
    pub image: RgbImage,
    pub bbox: BBox,
    pub res: usize,
    /// Set when part of the box lies outside the frame (filled with zeros).
    pub clamped: bool,
}

impl Crop {
    pub fn to_full(&self, u: f64, v: f64) -> [f64; 2] {
        self.bbox.crop_to_full(u, v, self.res as f64)
    }

    pub fn to_crop(&self, x: f64, y: f64) -> [f64; 2] {
        self.bbox.full_to_crop(x, y, self.res as f64)
    }
}

fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    // pixel i has its center at i + 0.5
    let (fx, fy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (ax, ay) = (fx - x0, fy - y0);
    let mut out = [0.0; 3];
    for (dy, wy) in [(0.0, 1.0 - ay), (1.0, ay)] {
        for (dx, wx) in [(0.0, 1.0 - ax), (1.0, ax)] {
            let w = wx * wy;
            if w == 0.0 {
                continue;
            }
            let (px, py) = (x0 + dx, y0 + dy);
            if px < 0.0 || py < 0.0 || px >= img.width() as f64 || py >= img.height() as f64 {
                continue;
            }
            let p = img.get_pixel(px as u32, py as u32);
            for c in 0..3 {
                out[c] += w * p[c] as f64;
            }
        }
    }
    out
}

/// Resamples the box to an `r x r` crop with bilinear interpolation;
/// out-of-frame samples are black and flagged.
pub fn crop_resize(frame: &RgbImage, bbox: &BBox, r: usize) -> Result<Crop> {
    bbox.validate()?;
    if r == 0 {
        return Err(Error::Config("crop resolution must be positive".into()));
    }
    let c = bbox.corners();
    let clamped = c[0] < 0.0 || c[1] < 0.0 || c[2] > frame.width() as f64 || c[3] > frame.height() as f64;
    let mut image = RgbImage::new(r as u32, r as u32);
    for v in 0..r {
        for u in 0..r {
            let [x, y] = bbox.crop_to_full(u as f64 + 0.5, v as f64 + 0.5, r as f64);
            let s = sample_bilinear(frame, x, y);
            image.put_pixel(u as u32, v as u32, Rgb(s.map(|x| x.round().clamp(0.0, 255.0) as u8)));
        }
    }
    Ok(Crop { image, bbox: *bbox, res: r, clamped })
}

/// Bounding square of the confident keypoints of one frame.
pub fn keypoint_bbox(points: &[[f64; 2]], conf: &[f64], threshold: f64, frame_w: f64, frame_h: f64) -> Result<BBox> {
    let sel: Vec<&[f64; 2]> = points.iter().zip(conf).filter(|(_, c)| **c >= threshold).map(|(p, _)| p).collect();
    if sel.is_empty() {
        return Err(Error::NoSupervision);
    }
    let x0 = sel.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let x1 = sel.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let y0 = sel.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let y1 = sel.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    if x1 - x0 <= 0.0 && y1 - y0 <= 0.0 {
        return Err(Error::DegenerateBbox);
    }
    BBox::from_corners(x0, y0, x1, y1, frame_w, frame_h)
}
