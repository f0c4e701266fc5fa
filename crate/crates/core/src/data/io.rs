//! On-disk sequence layout.
//!
//! ```text
//! <root>/meta.json        fps, frame size, frame count, keypoint count
//! <root>/keypoints.csv    frame,k,x,y,conf        (full-frame pixels)
//! <root>/bboxes.csv       frame,cx,cy,b,sil       (sil: 1 if silhouette-derived)
//! <root>/masks/NNNNNN.pgm crop-resolution silhouettes (missing => invalid)
//! <root>/frames/NNNNNN.png crop images (optional)
//! <root>/audio.wav        optional
//! <root>/gt/pose.json     optional ground-truth pose (quadfit-pose/1)
//! <root>/gt/points.json   optional posed joints and keypoints
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ClipAudio, ClipRecord, GroundTruth};
use crate::audio::{log_mel, AudioTrack, MelConfig};
use crate::body::PoseState;
use crate::camera::BBox;
use crate::error::{Error, Result};
use crate::render::Mask;

pub const SEQUENCE_VERSION: &str = "quadfit-seq/1";
pub const POSE_VERSION: &str = "quadfit-pose/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub version: String,
    pub id: String,
    pub fps: f64,
    pub frame_w: f64,
    pub frame_h: f64,
    pub n_frames: usize,
    pub n_keypoints: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoseFile {
    version: String,
    pose: PoseState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PointsFile {
    joints3d: Vec<Vec<[f64; 3]>>,
    keypoints3d: Vec<Vec<[f64; 3]>>,
}

pub fn write_pose_file(path: impl AsRef<Path>, pose: &PoseState) -> Result<()> {
    let file = PoseFile { version: POSE_VERSION.into(), pose: pose.clone() };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn read_pose_file(path: impl AsRef<Path>) -> Result<PoseState> {
    let path = path.as_ref();
    let file: PoseFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.version != POSE_VERSION {
        return Err(Error::Config(format!("{}: unsupported pose version {:?}", path.display(), file.version)));
    }
    Ok(file.pose)
}

fn frame_name(f: usize, ext: &str) -> String {
    format!("{f:06}.{ext}")
}

/// Writes a whole sequence in the dataset layout.
pub fn save_sequence(clip: &ClipRecord, root: impl AsRef<Path>) -> Result<()> {
    clip.validate()?;
    let root = root.as_ref();
    std::fs::create_dir_all(root.join("masks"))?;
    let first = clip.bboxes.first().ok_or_else(|| Error::Config("cannot save an empty sequence".into()))?;
    let meta = SequenceMeta {
        version: SEQUENCE_VERSION.into(),
        id: clip.id.clone(),
        fps: clip.fps,
        frame_w: first.frame_w,
        frame_h: first.frame_h,
        n_frames: clip.len(),
        n_keypoints: clip.n_keypoints(),
    };
    std::fs::write(root.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;

    let mut kp = String::from("frame,k,x,y,conf\n");
    for (f, (pts, conf)) in clip.keypoints.iter().zip(&clip.conf).enumerate() {
        for (k, (p, c)) in pts.iter().zip(conf).enumerate() {
            kp.push_str(&format!("{f},{k},{},{},{}\n", p[0], p[1], c));
        }
    }
    std::fs::write(root.join("keypoints.csv"), kp)?;

    let mut bb = String::from("frame,cx,cy,b,sil\n");
    for (f, (b, v)) in clip.bboxes.iter().zip(&clip.sil_valid).enumerate() {
        bb.push_str(&format!("{f},{},{},{},{}\n", b.cx, b.cy, b.b, *v as u8));
    }
    std::fs::write(root.join("bboxes.csv"), bb)?;

    for (f, m) in clip.masks.iter().enumerate() {
        if let Some(m) = m {
            m.write_pgm(root.join("masks").join(frame_name(f, "pgm")))?;
        }
    }
    if clip.crops.iter().any(Option::is_some) {
        std::fs::create_dir_all(root.join("frames"))?;
        for (f, c) in clip.crops.iter().enumerate() {
            if let Some(img) = c {
                img.save(root.join("frames").join(frame_name(f, "png")))?;
            }
        }
    }
    if let Some(a) = &clip.audio {
        a.track.write_wav(root.join("audio.wav"))?;
    }
    if let Some(gt) = &clip.gt {
        std::fs::create_dir_all(root.join("gt"))?;
        write_pose_file(root.join("gt").join("pose.json"), &gt.pose)?;
        let points = PointsFile { joints3d: gt.joints3d.clone(), keypoints3d: gt.keypoints3d.clone() };
        std::fs::write(root.join("gt").join("points.json"), serde_json::to_string(&points)?)?;
    }
    Ok(())
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::CorruptDataset(format!("{}: {what}", path.display()))
}

fn read_csv(path: &Path, header: &str) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| corrupt(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(corrupt(path, format!("expected header {header:?}")));
    }
    let width = header.split(',').count();
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let row: Vec<f64> = l
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| corrupt(path, format!("line {}: {e}", i + 2)))?;
            if row.len() != width {
                return Err(corrupt(path, format!("line {}: {} fields, expected {width}", i + 2, row.len())));
            }
            Ok(row)
        })
        .collect()
}

/// Reads a whole sequence as one record.
pub fn load_sequence(root: impl AsRef<Path>) -> Result<ClipRecord> {
    let root: PathBuf = root.as_ref().to_path_buf();
    let meta_path = root.join("meta.json");
    let meta: SequenceMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path).map_err(|e| corrupt(&meta_path, e))?,
    )
    .map_err(|e| corrupt(&meta_path, e))?;
    if meta.version != SEQUENCE_VERSION {
        return Err(corrupt(&meta_path, format!("unsupported version {:?}", meta.version)));
    }
    let (n, k) = (meta.n_frames, meta.n_keypoints);
    if n == 0 {
        return Err(corrupt(&meta_path, "sequence has no frames"));
    }

    let kp_path = root.join("keypoints.csv");
    let rows = read_csv(&kp_path, "frame,k,x,y,conf")?;
    if rows.len() != n * k {
        return Err(corrupt(&kp_path, format!("{} rows, expected {}", rows.len(), n * k)));
    }
    let mut keypoints = vec![vec![[0.0; 2]; k]; n];
    let mut conf = vec![vec![0.0; k]; n];
    let mut seen = vec![false; n * k];
    for r in rows {
        let (f, kk) = (r[0] as usize, r[1] as usize);
        if r[0] < 0.0 || f >= n || kk >= k || r[0].fract() != 0.0 || r[1].fract() != 0.0 || seen[f * k + kk] {
            return Err(corrupt(&kp_path, format!("bad or duplicate index ({}, {})", r[0], r[1])));
        }
        seen[f * k + kk] = true;
        keypoints[f][kk] = [r[2], r[3]];
        if !(0.0..=1.0).contains(&r[4]) {
            return Err(corrupt(&kp_path, format!("confidence {} outside [0, 1]", r[4])));
        }
        conf[f][kk] = r[4];
    }

    let bb_path = root.join("bboxes.csv");
    let rows = read_csv(&bb_path, "frame,cx,cy,b,sil")?;
    if rows.len() != n {
        return Err(corrupt(&bb_path, format!("{} rows, expected {n}", rows.len())));
    }
    let mut bboxes = Vec::with_capacity(n);
    let mut sil_valid = Vec::with_capacity(n);
    for (i, r) in rows.iter().enumerate() {
        if r[0] as usize != i {
            return Err(corrupt(&bb_path, format!("row {i} has frame {}", r[0])));
        }
        bboxes.push(BBox::new(r[1], r[2], r[3], meta.frame_w, meta.frame_h).map_err(|e| corrupt(&bb_path, e))?);
        sil_valid.push(r[4] != 0.0);
    }

    let mut masks = Vec::with_capacity(n);
    for (f, valid) in sil_valid.iter_mut().enumerate() {
        let p = root.join("masks").join(frame_name(f, "pgm"));
        if p.exists() {
            masks.push(Some(Arc::new(Mask::read_pgm(&p).map_err(|e| corrupt(&p, e))?)));
        } else {
            masks.push(None);
            *valid = false;
        }
    }

    let mut crops = Vec::with_capacity(n);
    for f in 0..n {
        let p = root.join("frames").join(frame_name(f, "png"));
        if p.exists() {
            crops.push(Some(Arc::new(image::open(&p).map_err(|e| corrupt(&p, e))?.to_rgb8())));
        } else {
            crops.push(None);
        }
    }

    let wav = root.join("audio.wav");
    let audio = if wav.exists() {
        let track = AudioTrack::read_wav(&wav).map_err(|e| corrupt(&wav, e))?;
        let spectrogram = log_mel(&track, &MelConfig::default()).map_err(|e| corrupt(&wav, e))?;
        Some(ClipAudio { track: Arc::new(track), spectrogram: Arc::new(spectrogram), t0: 0 })
    } else {
        None
    };

    let pose_path = root.join("gt").join("pose.json");
    let gt = if pose_path.exists() {
        let pose = read_pose_file(&pose_path).map_err(|e| corrupt(&pose_path, e))?;
        let pts_path = root.join("gt").join("points.json");
        let pts: PointsFile = serde_json::from_str(&std::fs::read_to_string(&pts_path).map_err(|e| corrupt(&pts_path, e))?)
            .map_err(|e| corrupt(&pts_path, e))?;
        Some(GroundTruth { pose, joints3d: pts.joints3d, keypoints3d: pts.keypoints3d })
    } else {
        None
    };

    let clip = ClipRecord {
        id: meta.id,
        start: 0,
        fps: meta.fps,
        bboxes,
        keypoints,
        conf,
        masks,
        sil_valid,
        crops,
        audio,
        gt,
    };
    clip.validate().map_err(|e| corrupt(&root, e))?;
    Ok(clip)
}

/// Sliding-window clips of length `t` with stride 1.
pub fn load_clips(root: impl AsRef<Path>, t: usize) -> Result<Vec<ClipRecord>> {
    load_sequence(root)?.windows(t)
}
