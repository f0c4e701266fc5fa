//! Bounding-box-conditioned cameras.
//!
//! The regressors predict a weak-perspective camera `(s, px, py)` for the
//! 224-pixel crop. It is lifted to a perspective crop camera with focal length
//! [`F_CROP`] and to the full-frame camera with focal length
//! `sqrt(w^2 + h^2)`; both translations are exact closed forms.
//!
//! Full-frame translations are computed from absolute bbox centers, so the
//! full-frame camera's principal point is the image origin. The crop camera's
//! principal point is the crop center. With these conventions a point on the
//! model's `z = 0` plane lands on the same full-frame pixel whether it is
//! projected with the full camera directly or with the crop camera followed by
//! the crop-to-frame affine map.

use serde::{Deserialize, Serialize};

use crate::body::WeakCam;
use crate::diffopt::{Tape, Var};
use crate::error::{Error, Result};

/// Focal length of the crop camera, pixels.
pub const F_CROP: f64 = 5000.0;
/// Crop side length, pixels.
pub const CROP_RES: usize = 224;

/// Square box in full-frame pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub b: f64,
    pub frame_w: f64,
    pub frame_h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, b: f64, frame_w: f64, frame_h: f64) -> Result<Self> {
        let bbox = Self { cx, cy, b, frame_w, frame_h };
        bbox.validate()?;
        Ok(bbox)
    }

    /// Squares an axis-aligned box by padding its short side about the center.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64, frame_w: f64, frame_h: f64) -> Result<Self> {
        let side = (x1 - x0).max(y1 - y0);
        Self::new(0.5 * (x0 + x1), 0.5 * (y0 + y1), side, frame_w, frame_h)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.b, self.frame_w, self.frame_h].iter().all(|x| x.is_finite());
        if !finite || !(self.b > 0.0) {
            return Err(Error::InvalidBbox(format!("size {} must be positive", self.b)));
        }
        if !(self.frame_w > 0.0 && self.frame_h > 0.0) {
            return Err(Error::InvalidFrame { width: self.frame_w, height: self.frame_h });
        }
        if !(0.0..=self.frame_w).contains(&self.cx) || !(0.0..=self.frame_h).contains(&self.cy) {
            return Err(Error::InvalidBbox(format!("center ({}, {}) outside frame", self.cx, self.cy)));
        }
        Ok(())
    }

    pub fn corners(&self) -> [f64; 4] {
        let h = 0.5 * self.b;
        [self.cx - h, self.cy - h, self.cx + h, self.cy + h]
    }

    pub fn area(&self) -> f64 {
        self.b * self.b
    }

    pub fn diagonal(&self) -> f64 {
        self.b * std::f64::consts::SQRT_2
    }

    /// Crop pixel to full-frame pixel for a crop of side `res`.
    pub fn crop_to_full(&self, u: f64, v: f64, res: f64) -> [f64; 2] {
        let k = self.b / res;
        [self.cx + (u - 0.5 * res) * k, self.cy + (v - 0.5 * res) * k]
    }

    /// Full-frame pixel to crop pixel for a crop of side `res`.
    pub fn full_to_crop(&self, x: f64, y: f64, res: f64) -> [f64; 2] {
        let k = res / self.b;
        [0.5 * res + (x - self.cx) * k, 0.5 * res + (y - self.cy) * k]
    }
}

pub fn focal_full(frame_w: f64, frame_h: f64) -> Result<f64> {
    if !(frame_w > 0.0 && frame_h > 0.0) {
        return Err(Error::InvalidFrame { width: frame_w, height: frame_h });
    }
    Ok(frame_w.hypot(frame_h))
}

/// `[cx, cy, b] / f_full`.
pub fn bbox_info(bbox: &BBox) -> Result<[f64; 3]> {
    bbox.validate()?;
    let f = focal_full(bbox.frame_w, bbox.frame_h)?;
    Ok([bbox.cx / f, bbox.cy / f, bbox.b / f])
}

/// `[px, py, 2 f_crop / (r s)]`.
pub fn crop_translation(s: f64, px: f64, py: f64) -> Result<[f64; 3]> {
    if !(s > 0.0) {
        return Err(Error::InvalidScale(s));
    }
    Ok([px, py, 2.0 * F_CROP / (CROP_RES as f64 * s)])
}

/// `[px + 2 cx / (b s), py + 2 cy / (b s), 2 f_full / (b s)]`.
pub fn full_translation(s: f64, px: f64, py: f64, bbox: &BBox) -> Result<[f64; 3]> {
    if !(s > 0.0) {
        return Err(Error::InvalidScale(s));
    }
    bbox.validate()?;
    let f = focal_full(bbox.frame_w, bbox.frame_h)?;
    let bs = bbox.b * s;
    Ok([px + 2.0 * bbox.cx / bs, py + 2.0 * bbox.cy / bs, 2.0 * f / bs])
}

/// Principal point of the crop camera.
pub fn crop_principal() -> [f64; 2] {
    let c = 0.5 * CROP_RES as f64;
    [c, c]
}

/// Principal point of the full-frame camera (see module docs).
pub const FULL_PRINCIPAL: [f64; 2] = [0.0, 0.0];

/// Pinhole projection `u = f (x + tx) / (z + tz) + cx`.
pub fn project_points(
    points: &[[f64; 3]],
    focal: f64,
    translation: [f64; 3],
    principal: [f64; 2],
) -> Result<Vec<[f64; 2]>> {
    points
        .iter()
        .map(|p| {
            let z = p[2] + translation[2];
            if !(z > 0.0) {
                return Err(Error::BehindCamera { depth: z });
            }
            Ok([
                focal * (p[0] + translation[0]) / z + principal[0],
                focal * (p[1] + translation[1]) / z + principal[1],
            ])
        })
        .collect()
}

/// Differentiable projection of `N x 3` points with a `1 x 3` translation.
pub fn project_points_tape<'t>(points: Var<'t>, focal: f64, translation: Var<'t>, principal: [f64; 2]) -> Result<Var<'t>> {
    let tape = points.tape();
    let cam = points.add_row(translation);
    let z = cam.col(2);
    if let Some(depth) = z.value().into_iter().find(|d| !(*d > 0.0)) {
        return Err(Error::BehindCamera { depth });
    }
    let xy = cam.slice_cols(0, 2);
    let inv_z = z.powf(-1.0);
    let pp = tape.constant(principal.to_vec(), 1, 2);
    Ok(xy.mul_col(inv_z).scale(focal).add_row(pp))
}

/// Crop and full-frame cameras for a sequence of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPair {
    pub f_crop: f64,
    pub r: usize,
    pub f_full: f64,
    pub gamma_crop: Vec<[f64; 3]>,
    pub gamma_full: Vec<[f64; 3]>,
}

impl CameraPair {
    pub fn from_weak(cams: &[WeakCam], bboxes: &[BBox]) -> Result<Self> {
        if cams.len() != bboxes.len() || cams.is_empty() {
            return Err(Error::shape("one weak camera per bbox required"));
        }
        let f_full = focal_full(bboxes[0].frame_w, bboxes[0].frame_h)?;
        let mut gamma_crop = Vec::with_capacity(cams.len());
        let mut gamma_full = Vec::with_capacity(cams.len());
        for (c, b) in cams.iter().zip(bboxes) {
            gamma_crop.push(crop_translation(c.s, c.px, c.py)?);
            gamma_full.push(full_translation(c.s, c.px, c.py, b)?);
        }
        Ok(Self { f_crop: F_CROP, r: CROP_RES, f_full, gamma_crop, gamma_full })
    }

    pub fn project_crop(&self, t: usize, points: &[[f64; 3]]) -> Result<Vec<[f64; 2]>> {
        project_points(points, self.f_crop, self.gamma_crop[t], crop_principal())
    }

    pub fn project_full(&self, t: usize, points: &[[f64; 3]]) -> Result<Vec<[f64; 2]>> {
        project_points(points, self.f_full, self.gamma_full[t], FULL_PRINCIPAL)
    }
}

/// Tape versions of the crop/full translations for a weak camera whose scale
/// is parameterized as `log s` (keeps `s > 0` during optimization).
pub(crate) fn translations_tape<'t>(
    tape: &'t Tape,
    log_s: Var<'t>,
    pxy: Var<'t>,
    bbox: &BBox,
) -> Result<(Var<'t>, Var<'t>)> {
    let f_full = focal_full(bbox.frame_w, bbox.frame_h)?;
    let inv_s = (-log_s).exp();
    let zero = tape.scalar(0.0);
    let shift = tape.concat_cols(&[pxy, zero]);
    let crop_k = tape.constant(vec![0.0, 0.0, 2.0 * F_CROP / CROP_RES as f64], 1, 3);
    let full_k = tape.constant(vec![2.0 * bbox.cx / bbox.b, 2.0 * bbox.cy / bbox.b, 2.0 * f_full / bbox.b], 1, 3);
    Ok((shift + crop_k.mul_scalar(inv_s), shift + full_k.mul_scalar(inv_s)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_of_4k_frame() {
        assert!((focal_full(3840.0, 2160.0).unwrap() - 4405.81).abs() < 0.01);
        assert_eq!(focal_full(3.0, 4.0).unwrap(), 5.0);
        assert_eq!(focal_full(1280.0, 720.0).unwrap(), focal_full(720.0, 1280.0).unwrap());
        assert!(focal_full(0.0, 10.0).unwrap_err().to_string().starts_with("invalid frame"));
    }

    #[test]
    fn bbox_info_values() {
        let b = BBox::new(1000.0, 500.0, 400.0, 3840.0, 2160.0).unwrap();
        let info = bbox_info(&b).unwrap();
        let expected = [0.22698, 0.11349, 0.09079];
        for i in 0..3 {
            assert!((info[i] - expected[i]).abs() < 1e-4, "{info:?}");
        }
        let f = focal_full(3840.0, 2160.0).unwrap();
        let at_origin = bbox_info(&BBox::new(0.0, 0.0, f, 3840.0, 2160.0).unwrap()).unwrap();
        assert_eq!(at_origin, [0.0, 0.0, 1.0]);
        let doubled = bbox_info(&BBox::new(2000.0, 1000.0, 800.0, 3840.0, 2160.0).unwrap()).unwrap();
        for i in 0..3 {
            assert!((doubled[i] - 2.0 * info[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn crop_translation_values() {
        let g = crop_translation(1.0, 0.0, 0.0).unwrap();
        assert_eq!(g[..2], [0.0, 0.0]);
        assert!((g[2] - 44.642857).abs() < 1e-5);
        let g2 = crop_translation(2.0, 0.0, 0.0).unwrap();
        assert!((g2[2] - 0.5 * g[2]).abs() < 1e-12);
        let g3 = crop_translation(1.0, 0.3, -0.2).unwrap();
        assert_eq!(g3[..2], [0.3, -0.2]);
        assert!(crop_translation(0.0, 0.0, 0.0).unwrap_err().to_string().starts_with("invalid scale"));
    }

    #[test]
    fn full_translation_values() {
        let b = BBox::new(1000.0, 500.0, 400.0, 3840.0, 2160.0).unwrap();
        let g = full_translation(0.8, 0.1, -0.05, &b).unwrap();
        let expected = [6.35, 3.075, 27.536];
        for i in 0..3 {
            assert!((g[i] - expected[i]).abs() < 1e-3, "{g:?}");
        }
        let origin = BBox::new(0.0, 0.0, 400.0, 3840.0, 2160.0).unwrap();
        let g0 = full_translation(0.8, 0.1, -0.05, &origin).unwrap();
        assert!((g0[0] - 0.1).abs() < 1e-15 && (g0[1] + 0.05).abs() < 1e-15);
        let same_bs = BBox::new(1000.0, 500.0, 200.0, 3840.0, 2160.0).unwrap();
        let g1 = full_translation(1.6, 0.1, -0.05, &same_bs).unwrap();
        assert!((g1[2] - g[2]).abs() < 1e-12);
        assert!(full_translation(-1.0, 0.0, 0.0, &b).unwrap_err().to_string().starts_with("invalid scale"));
    }

    #[test]
    fn projection_values() {
        let p = project_points(&[[0.0, 0.0, 0.0]], 5000.0, [0.0, 0.0, 10.0], [112.0, 112.0]).unwrap();
        assert_eq!(p, vec![[112.0, 112.0]]);
        let p = project_points(&[[1.0, 0.0, 0.0]], 5000.0, [0.0, 0.0, 10.0], [0.0, 0.0]).unwrap();
        assert_eq!(p, vec![[500.0, 0.0]]);
        let far = project_points(&[[1.0, 0.0, 0.0]], 5000.0, [0.0, 0.0, 20.0], [0.0, 0.0]).unwrap();
        assert_eq!(far[0][0], 250.0);
        let err = project_points(&[[0.0, 0.0, -10.0]], 5000.0, [0.0, 0.0, 10.0], [0.0, 0.0]).unwrap_err();
        assert!(err.to_string().starts_with("behind camera"));
    }

    #[test]
    fn tape_projection_matches_plain() {
        let pts = [[0.3, -0.2, 0.5], [1.0, 0.4, -0.3]];
        let t = [0.1, 0.2, 12.0];
        let plain = project_points(&pts, 900.0, t, [10.0, 20.0]).unwrap();
        let tape = Tape::new();
        let p = tape.constant(pts.iter().flatten().copied().collect(), 2, 3);
        let tr = tape.constant(t.to_vec(), 1, 3);
        let v = project_points_tape(p, 900.0, tr, [10.0, 20.0]).unwrap().value();
        for (a, b) in v.iter().zip(plain.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_translations_match_plain() {
        let bbox = BBox::new(700.0, 300.0, 350.0, 1920.0, 1080.0).unwrap();
        let tape = Tape::new();
        let ls = tape.constant(vec![0.7f64.ln()], 1, 1);
        let pxy = tape.constant(vec![0.2, -0.4], 1, 2);
        let (c, f) = translations_tape(&tape, ls, pxy, &bbox).unwrap();
        let pc = crop_translation(0.7, 0.2, -0.4).unwrap();
        let pf = full_translation(0.7, 0.2, -0.4, &bbox).unwrap();
        for i in 0..3 {
            assert!((c.value()[i] - pc[i]).abs() < 1e-9);
            assert!((f.value()[i] - pf[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn crop_maps_invert() {
        let bbox = BBox::new(640.0, 380.0, 448.0, 1280.0, 720.0).unwrap();
        let c = bbox.full_to_crop(700.25, 401.5, 224.0);
        let back = bbox.crop_to_full(c[0], c[1], 224.0);
        assert!((back[0] - 700.25).abs() < 1e-9 && (back[1] - 401.5).abs() < 1e-9);
    }
}
