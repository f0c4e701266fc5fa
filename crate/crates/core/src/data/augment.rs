//! Synthetic occluders and color jitter.

use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ClipRecord;
use crate::body::MeshModel;
use crate::camera::CROP_RES;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccluderKind {
    /// A patch copied from elsewhere in the crop.
    Patch,
    /// A standing-person-shaped colored box.
    HumanBox,
}

/// Rectangle that covers the keypoints of a body region.
///
/// `anchor` is a keypoint region tag (`head`, `body`, `leg_fl`, ...), `legs`
/// for all leg regions, or `bbox` for the whole box. The rectangle is the
/// anchor keypoints' bounding box, grown about its center until its area is at
/// least `size` times the bbox area (for `bbox`, the box scaled to `size` of
/// its area).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccluderSpec {
    pub kind: OccluderKind,
    pub anchor: String,
    pub size: f64,
    pub seed: u64,
}

impl OccluderSpec {
    pub fn legs(seed: u64) -> Self {
        Self { kind: OccluderKind::Patch, anchor: "legs".into(), size: 0.15, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.size > 0.0 && self.size <= 1.0) {
            return Err(Error::Config(format!("occluder size {} outside (0, 1]", self.size)));
        }
        Ok(())
    }

    fn matches(&self, region: &str) -> bool {
        match self.anchor.as_str() {
            "bbox" => true,
            "legs" => region.starts_with("leg"),
            a => a == region,
        }
    }

    /// Parses `kind:anchor:size[:seed]`, e.g. `patch:legs:0.15:3`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(Error::Config(format!("occluder spec {text:?} is not kind:anchor:size[:seed]")));
        }
        let kind = match parts[0] {
            "patch" => OccluderKind::Patch,
            "human" => OccluderKind::HumanBox,
            k => return Err(Error::Config(format!("unknown occluder kind {k:?}"))),
        };
        let size = parts[2].parse().map_err(|_| Error::Config(format!("bad occluder size {:?}", parts[2])))?;
        let seed = match parts.get(3) {
            Some(s) => s.parse().map_err(|_| Error::Config(format!("bad occluder seed {s:?}")))?,
            None => 0,
        };
        let spec = Self { kind, anchor: parts[1].to_string(), size, seed };
        spec.validate()?;
        Ok(spec)
    }
}

/// Occluder rectangle `[x0, y0, x1, y1]` in full-frame pixels for frame `f`.
pub fn occluder_rect(clip: &ClipRecord, model: &MeshModel, spec: &OccluderSpec, f: usize) -> [f64; 4] {
    let bbox = &clip.bboxes[f];
    let target = spec.size * bbox.area();
    if spec.anchor == "bbox" {
        let h = 0.5 * target.sqrt();
        return [bbox.cx - h, bbox.cy - h, bbox.cx + h, bbox.cy + h];
    }
    let pts: Vec<[f64; 2]> = model
        .keypoints()
        .iter()
        .zip(&clip.keypoints[f])
        .filter(|(k, _)| spec.matches(&k.region))
        .map(|(_, p)| *p)
        .collect();
    if pts.is_empty() {
        return [bbox.cx, bbox.cy, bbox.cx, bbox.cy];
    }
    let margin = 0.02 * bbox.b;
    let mut r = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for p in &pts {
        r = [r[0].min(p[0]), r[1].min(p[1]), r[2].max(p[0]), r[3].max(p[1])];
    }
    r = [r[0] - margin, r[1] - margin, r[2] + margin, r[3] + margin];
    let area = (r[2] - r[0]) * (r[3] - r[1]);
    if area < target {
        let k = (target / area).sqrt();
        let (cx, cy) = (0.5 * (r[0] + r[2]), 0.5 * (r[1] + r[3]));
        let (hw, hh) = (0.5 * (r[2] - r[0]) * k, 0.5 * (r[3] - r[1]) * k);
        r = [cx - hw, cy - hh, cx + hw, cy + hh];
    }
    r
}

fn paint_crop(img: &RgbImage, rect_crop: [f64; 4], kind: OccluderKind, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut out = img.clone();
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = rect_crop[0].floor().max(0.0) as i64;
    let y0 = rect_crop[1].floor().max(0.0) as i64;
    let x1 = (rect_crop[2].ceil() as i64).min(w);
    let y1 = (rect_crop[3].ceil() as i64).min(h);
    if x0 >= x1 || y0 >= y1 {
        return out;
    }
    let (sx, sy) = (rng.random_range(-w..w), rng.random_range(-h..h));
    let shirt = [rng.random_range(0..255u8), rng.random_range(0..255u8), rng.random_range(0..255u8)];
    for y in y0..y1 {
        for x in x0..x1 {
            let px = match kind {
                OccluderKind::Patch => {
                    let (u, v) = ((x + sx).rem_euclid(w), (y + sy).rem_euclid(h));
                    *img.get_pixel(u as u32, v as u32)
                }
                OccluderKind::HumanBox => {
                    let frac = (y - y0) as f64 / (y1 - y0) as f64;
                    if frac < 0.15 {
                        Rgb([224, 172, 140])
                    } else if frac < 0.55 {
                        Rgb(shirt)
                    } else {
                        Rgb([40, 45, 70])
                    }
                }
            };
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    out
}

/// Replaces pixels under the occluder and zeroes the confidence of every
/// keypoint it covers. Silhouettes and ground truth are left untouched.
pub fn apply_occluder(clip: &ClipRecord, model: &MeshModel, spec: &OccluderSpec) -> Result<ClipRecord> {
    spec.validate()?;
    let mut out = clip.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for f in 0..clip.len() {
        let r = occluder_rect(clip, model, spec, f);
        for (k, p) in clip.keypoints[f].iter().enumerate() {
            if p[0] >= r[0] && p[0] <= r[2] && p[1] >= r[1] && p[1] <= r[3] {
                out.conf[f][k] = 0.0;
            }
        }
        if let Some(img) = &clip.crops[f] {
            let bbox = &clip.bboxes[f];
            let res = CROP_RES as f64;
            let a = bbox.full_to_crop(r[0], r[1], res);
            let b = bbox.full_to_crop(r[2], r[3], res);
            out.crops[f] = Some(Arc::new(paint_crop(img, [a[0], a[1], b[0], b[1]], spec.kind, &mut rng)));
        }
    }
    Ok(out)
}

/// Per-clip photometric jitter parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Additive, in 8-bit levels.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation in radians.
    pub hue: f64,
}

impl Jitter {
    pub fn sample(strength: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut u = || rng.random_range(-1.0..1.0);
        Self {
            brightness: 40.0 * strength * u(),
            contrast: 1.0 + 0.4 * strength * u(),
            saturation: 1.0 + 0.4 * strength * u(),
            hue: 0.3 * strength * u(),
        }
    }
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Hue rotation about the gray axis in YIQ space; grays are fixed points.
pub fn rotate_hue(p: [f64; 3], angle: f64) -> [f64; 3] {
    let y = luma(p);
    let i = 0.596 * p[0] - 0.274 * p[1] - 0.322 * p[2];
    let q = 0.211 * p[0] - 0.523 * p[1] + 0.312 * p[2];
    let (s, c) = angle.sin_cos();
    let (i2, q2) = (c * i - s * q, s * i + c * q);
    [
        y + 0.956 * i2 + 0.621 * q2,
        y - 0.272 * i2 - 0.647 * q2,
        y - 1.106 * i2 + 1.703 * q2,
    ]
}

/// Applies hue, saturation, contrast then brightness; values are rounded and
/// clipped to 8 bits once at the end.
pub fn jitter_image(img: &RgbImage, j: &Jitter) -> RgbImage {
    let px: Vec<[f64; 3]> = img.pixels().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
    let mean_luma = px.iter().map(|&p| luma(p)).sum::<f64>() / px.len().max(1) as f64;
    let mut out = RgbImage::new(img.width(), img.height());
    for (o, &p) in out.pixels_mut().zip(&px) {
        let mut v = if j.hue != 0.0 { rotate_hue(p, j.hue) } else { p };
        let g = luma(v);
        v = v.map(|c| g + j.saturation * (c - g));
        v = v.map(|c| mean_luma + j.contrast * (c - mean_luma) + j.brightness);
        *o = Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8));
    }
    out
}

/// One random jitter per clip applied to every crop; labels are untouched.
pub fn color_jitter(clip: &ClipRecord, strength: f64, seed: u64) -> Result<ClipRecord> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Config(format!("jitter strength {strength} outside [0, 1]")));
    }
    if strength == 0.0 {
        return Ok(clip.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = Jitter::sample(strength, &mut rng);
    let mut out = clip.clone();
    for c in out.crops.iter_mut().flatten() {
        *c = Arc::new(jitter_image(c, &j));
    }
    Ok(out)
}

/// Adds isotropic Gaussian noise of `sigma` crop pixels to every keypoint,
/// mimicking a 2D detector. Confidences are unchanged.
pub fn keypoint_noise(clip: &ClipRecord, sigma: f64, seed: u64) -> Result<ClipRecord> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("keypoint noise {sigma} must be finite and non-negative")));
    }
    let mut out = clip.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("checked sigma");
    for (pts, bbox) in out.keypoints.iter_mut().zip(&clip.bboxes) {
        let px = bbox.b / CROP_RES as f64;
        for p in pts.iter_mut() {
            p[0] += px * normal.sample(&mut rng);
            p[1] += px * normal.sample(&mut rng);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::toy::toy_quadruped;
    use crate::data::synth::{synth_gait, Gait};

    #[test]
    fn full_box_occluder_hides_everything() {
        let model = toy_quadruped();
        let clip = synth_gait(&model, Gait::Trot, 5, 25.0, 1).unwrap();
        let spec = OccluderSpec { kind: OccluderKind::Patch, anchor: "bbox".into(), size: 1.0, seed: 0 };
        let occ = apply_occluder(&clip, &model, &spec).unwrap();
        assert!(occ.conf.iter().flatten().all(|&c| c == 0.0));
        assert_eq!(occ.masks, clip.masks);
        assert_eq!(occ.gt, clip.gt);
    }

    #[test]
    fn head_occluder_hits_exactly_head_keypoints() {
        let model = toy_quadruped();
        let clip = synth_gait(&model, Gait::Walk, 5, 25.0, 4).unwrap();
        let spec = OccluderSpec { kind: OccluderKind::HumanBox, anchor: "head".into(), size: 0.01, seed: 2 };
        let occ = apply_occluder(&clip, &model, &spec).unwrap();
        for f in 0..5 {
            for (k, kp) in model.keypoints().iter().enumerate() {
                assert_eq!(occ.conf[f][k] == 0.0, kp.region == "head", "{}", kp.name);
            }
        }
    }

    #[test]
    fn legs_occluder_hits_only_legs() {
        let model = toy_quadruped();
        let clip = synth_gait(&model, Gait::Canter, 5, 25.0, 8).unwrap();
        let occ = apply_occluder(&clip, &model, &OccluderSpec::legs(1)).unwrap();
        for f in 0..5 {
            for (k, kp) in model.keypoints().iter().enumerate() {
                assert_eq!(occ.conf[f][k] == 0.0, kp.is_leg(), "{}", kp.name);
            }
        }
        assert_ne!(occ.crops, clip.crops);
    }

    #[test]
    fn occluder_is_deterministic() {
        let model = toy_quadruped();
        let clip = synth_gait(&model, Gait::Trot, 5, 25.0, 1).unwrap();
        let a = apply_occluder(&clip, &model, &OccluderSpec::legs(5)).unwrap();
        let b = apply_occluder(&clip, &model, &OccluderSpec::legs(5)).unwrap();
        for (x, y) in a.crops.iter().zip(&b.crops) {
            assert_eq!(x.as_ref().unwrap().as_raw(), y.as_ref().unwrap().as_raw());
        }
    }

    #[test]
    fn jitter_identity_and_gray_hue() {
        let model = toy_quadruped();
        let clip = synth_gait(&model, Gait::Trot, 5, 25.0, 1).unwrap();
        assert_eq!(color_jitter(&clip, 0.0, 9).unwrap(), clip);
        let jit = color_jitter(&clip, 0.8, 9).unwrap();
        assert_eq!(jit.keypoints, clip.keypoints);
        assert_eq!(jit.gt, clip.gt);

        let gray = RgbImage::from_fn(8, 8, |x, y| {
            let v = (x * 30 + y) as u8;
            Rgb([v, v, v])
        });
        let j = Jitter { brightness: 0.0, contrast: 1.0, saturation: 1.0, hue: 1.1 };
        assert_eq!(jitter_image(&gray, &j), gray);
    }

    #[test]
    fn brightness_shifts_channel_means() {
        let img = RgbImage::from_fn(10, 10, |x, y| Rgb([(50 + x * 5) as u8, (80 + y * 3) as u8, 120]));
        let b = 17.0;
        let j = Jitter { brightness: b, contrast: 1.0, saturation: 1.0, hue: 0.0 };
        let out = jitter_image(&img, &j);
        for c in 0..3 {
            let mean = |im: &RgbImage| im.pixels().map(|p| p[c] as f64).sum::<f64>() / 100.0;
            assert!((mean(&out) - mean(&img) - b).abs() < 0.51);
        }
    }

    #[test]
    fn parse_spec() {
        let s = OccluderSpec::parse("human:head:0.2:7").unwrap();
        assert_eq!(s, OccluderSpec { kind: OccluderKind::HumanBox, anchor: "head".into(), size: 0.2, seed: 7 });
        assert!(OccluderSpec::parse("patch:legs:1.5").is_err());
        assert!(OccluderSpec::parse("cloud:legs:0.5").is_err());
    }

    #[test]
    fn keypoint_noise_scales_with_the_box() {
        let model = toy_quadruped();
        let clip = synth_gait(&model, Gait::Walk, 40, 25.0, 2).unwrap();
        assert_eq!(keypoint_noise(&clip, 0.0, 1).unwrap(), clip);
        let noisy = keypoint_noise(&clip, 2.0, 1).unwrap();
        assert_eq!(noisy, keypoint_noise(&clip, 2.0, 1).unwrap());
        let mut acc = 0.0;
        let mut n = 0.0;
        for (f, (a, b)) in noisy.keypoints.iter().zip(&clip.keypoints).enumerate() {
            let px = clip.bboxes[f].b / CROP_RES as f64;
            for (p, q) in a.iter().zip(b) {
                acc += ((p[0] - q[0]) / px).powi(2) + ((p[1] - q[1]) / px).powi(2);
                n += 2.0;
            }
        }
        let sd = (acc / n).sqrt();
        assert!((sd - 2.0).abs() < 0.15, "{sd}");
        assert!(keypoint_noise(&clip, -1.0, 1).is_err());
    }
}
