//! Silhouette rasterization in the crop camera.
//!
//! The soft renderer treats occupancy as a union over faces:
//! `m(p) = 1 - prod_i (1 - sigmoid(d_i(p) / sigma))`, where `d_i` is the signed
//! distance in pixels from the pixel center to projected triangle `i`
//! (positive inside). It is evaluated in log space,
//! `log(1 - sigmoid(x)) = -softplus(x)`, so saturated faces do not lose
//! precision, and faces further than [`SOFT_CUTOFF`]`* sigma` from a pixel are
//! skipped.

use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;
use std::sync::Arc;

use crate::camera::{CameraPair, CROP_RES};
use crate::diffopt::{sigmoid, CustomOp, Tape, Var};
use crate::error::{Error, Result};

/// Faces contribute nothing beyond this many `sigma` outside their edges.
pub const SOFT_CUTOFF: f64 = 30.0;

/// Default softness relative to the render resolution.
pub const DEFAULT_SIGMA_SCALE: f64 = 1e-4;

pub fn default_sigma(res: usize) -> f64 {
    DEFAULT_SIGMA_SCALE * res as f64
}

/// Per-pixel occupancy in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![0.0; width * height] }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!("{} values for a {width}x{height} mask", values.len())));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, values })
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn threshold(&self, level: f32) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| if v > level { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Writes an 8-bit binary PGM; values are scaled to `0..=255`.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let data: Vec<u8> = self.values.iter().map(|&v| (v * 255.0).round() as u8).collect();
        image::save_buffer_with_format(
            path,
            &data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
            image::ImageFormat::Pnm,
        )?;
        Ok(())
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let values = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Ok(Self { width: w as usize, height: h as usize, values })
    }

    /// Writes `QFMASK f32 <width> <height>\n` followed by little-endian `f32`s.
    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "QFMASK f32 {} {}", self.width, self.height)?;
        for v in &self.values {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_raw(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Config("raw mask header missing".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::Config(e.to_string()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (w, h) = match fields.as_slice() {
            ["QFMASK", "f32", w, h] => (
                w.parse::<usize>().map_err(|e| Error::Config(e.to_string()))?,
                h.parse::<usize>().map_err(|e| Error::Config(e.to_string()))?,
            ),
            _ => return Err(Error::Config(format!("bad raw mask header {header:?}"))),
        };
        let body = &bytes[nl + 1..];
        if body.len() != w * h * 4 {
            return Err(Error::Config("raw mask payload size mismatch".into()));
        }
        let values = body.chunks(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Mask::from_values(w, h, values)
    }
}

/// Signed distance from `p` to triangle `tri` (positive inside) and the
/// gradient of that distance with respect to the three vertices.
fn signed_distance(p: [f64; 2], tri: [[f64; 2]; 3]) -> (f64, [[f64; 2]; 3]) {
    let mut best = f64::INFINITY;
    let mut best_grad = [[0.0; 2]; 3];
    for e in 0..3 {
        let (i0, i1) = (e, (e + 1) % 3);
        let (a, b) = (tri[i0], tri[i1]);
        let ab = [b[0] - a[0], b[1] - a[1]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let t = if len2 > 0.0 {
            (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
        let diff = [p[0] - q[0], p[1] - q[1]];
        let dist = (diff[0] * diff[0] + diff[1] * diff[1]).sqrt();
        if dist < best {
            best = dist;
            let n = if dist > 0.0 { [diff[0] / dist, diff[1] / dist] } else { [0.0, 0.0] };
            best_grad = [[0.0; 2]; 3];
            best_grad[i0] = [-(1.0 - t) * n[0], -(1.0 - t) * n[1]];
            best_grad[i1] = [-t * n[0], -t * n[1]];
        }
    }
    if inside(p, tri) {
        (best, best_grad)
    } else {
        (-best, best_grad.map(|g| [-g[0], -g[1]]))
    }
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn inside(p: [f64; 2], tri: [[f64; 2]; 3]) -> bool {
    let area = edge(tri[0], tri[1], tri[2]);
    if area == 0.0 {
        return false;
    }
    let s = area.signum();
    (0..3).all(|e| s * edge(tri[e], tri[(e + 1) % 3], p) >= 0.0)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn face_pixels(tri: &[[f64; 2]; 3], margin: f64, res: usize) -> Option<(usize, usize, usize, usize)> {
    let xs = tri.iter().map(|p| p[0]);
    let ys = tri.iter().map(|p| p[1]);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    let clamp = |v: f64| v.max(0.0).min(res as f64);
    // pixel k covers center k + 0.5
    let px0 = clamp((x0 - margin - 0.5).ceil()) as usize;
    let px1 = clamp((x1 + margin - 0.5).floor() + 1.0) as usize;
    let py0 = clamp((y0 - margin - 0.5).ceil()) as usize;
    let py1 = clamp((y1 + margin - 0.5).floor() + 1.0) as usize;
    (px0 < px1 && py0 < py1).then_some((px0, px1, py0, py1))
}

fn triangle(verts: &[f64], f: &[usize; 3]) -> [[f64; 2]; 3] {
    f.map(|i| [verts[2 * i], verts[2 * i + 1]])
}

/// Soft silhouette from projected pixel coordinates (`V x 2`, flattened).
pub fn rasterize_soft_2d(verts2d: &[f64], faces: &[[usize; 3]], res: usize, sigma: f64) -> Mask {
    let mut log_empty = vec![0.0f64; res * res];
    let margin = SOFT_CUTOFF * sigma;
    for f in faces {
        let tri = triangle(verts2d, f);
        let Some((x0, x1, y0, y1)) = face_pixels(&tri, margin, res) else { continue };
        for y in y0..y1 {
            for x in x0..x1 {
                let (d, _) = signed_distance([x as f64 + 0.5, y as f64 + 0.5], tri);
                if d > -margin {
                    log_empty[y * res + x] -= softplus(d / sigma);
                }
            }
        }
    }
    Mask {
        width: res,
        height: res,
        values: log_empty.into_iter().map(|l| (1.0 - l.exp()) as f32).collect(),
    }
}

fn soft_values_2d(verts2d: &[f64], faces: &[[usize; 3]], res: usize, sigma: f64) -> Vec<f64> {
    let mut log_empty = vec![0.0f64; res * res];
    let margin = SOFT_CUTOFF * sigma;
    for f in faces {
        let tri = triangle(verts2d, f);
        let Some((x0, x1, y0, y1)) = face_pixels(&tri, margin, res) else { continue };
        for y in y0..y1 {
            for x in x0..x1 {
                let (d, _) = signed_distance([x as f64 + 0.5, y as f64 + 0.5], tri);
                if d > -margin {
                    log_empty[y * res + x] -= softplus(d / sigma);
                }
            }
        }
    }
    log_empty.into_iter().map(|l| 1.0 - l.exp()).collect()
}

struct SoftRaster {
    faces: Arc<Vec<[usize; 3]>>,
    res: usize,
    sigma: f64,
}

impl CustomOp for SoftRaster {
    fn name(&self) -> &str {
        "soft_silhouette"
    }

    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_output: &[f64]) -> Option<Vec<Vec<f64>>> {
        let verts = inputs[0];
        let mut grad = vec![0.0; verts.len()];
        let margin = SOFT_CUTOFF * self.sigma;
        for f in self.faces.iter() {
            let tri = triangle(verts, f);
            let Some((x0, x1, y0, y1)) = face_pixels(&tri, margin, self.res) else { continue };
            for y in y0..y1 {
                for x in x0..x1 {
                    let pix = y * self.res + x;
                    let g = grad_output[pix];
                    if g == 0.0 {
                        continue;
                    }
                    let (d, dd) = signed_distance([x as f64 + 0.5, y as f64 + 0.5], tri);
                    if d <= -margin {
                        continue;
                    }
                    let empty = 1.0 - output[pix];
                    let dm_dd = empty * sigmoid(d / self.sigma) / self.sigma;
                    for (k, &vi) in f.iter().enumerate() {
                        grad[2 * vi] += g * dm_dd * dd[k][0];
                        grad[2 * vi + 1] += g * dm_dd * dd[k][1];
                    }
                }
            }
        }
        Some(vec![grad])
    }
}

/// Differentiable soft silhouette of `V x 2` pixel coordinates; returns a
/// `1 x res*res` row.
pub fn rasterize_soft_tape<'t>(verts2d: Var<'t>, faces: Arc<Vec<[usize; 3]>>, res: usize, sigma: f64) -> Var<'t> {
    let tape: &'t Tape = verts2d.tape();
    let values = soft_values_2d(&verts2d.value(), &faces, res, sigma);
    tape.custom(&[verts2d], values, 1, res * res, Rc::new(SoftRaster { faces, res, sigma }))
}

/// Crop-camera pixel coordinates rescaled to a `res`-pixel render.
fn crop_pixels(vertices: &[[f64; 3]], cam: &CameraPair, t: usize, res: usize) -> Result<Vec<f64>> {
    if t >= cam.gamma_crop.len() {
        return Err(Error::shape(format!("frame {t} out of range")));
    }
    let k = res as f64 / CROP_RES as f64;
    Ok(cam
        .project_crop(t, vertices)?
        .into_iter()
        .flat_map(|p| [p[0] * k, p[1] * k])
        .collect())
}

/// Soft silhouette of a posed mesh in frame `t`'s crop camera.
pub fn rasterize_soft(
    vertices: &[[f64; 3]],
    faces: &[[usize; 3]],
    cam: &CameraPair,
    t: usize,
    res: usize,
    sigma: f64,
) -> Result<Mask> {
    let px = crop_pixels(vertices, cam, t, res)?;
    Ok(rasterize_soft_2d(&px, faces, res, sigma))
}

/// Binary silhouette from projected pixel coordinates: a pixel is set when its
/// center lies in any triangle.
pub fn rasterize_hard_2d(verts2d: &[f64], faces: &[[usize; 3]], width: usize, height: usize) -> Mask {
    let mut mask = Mask::zeros(width, height);
    for f in faces {
        let tri = triangle(verts2d, f);
        let xs = tri.iter().map(|p| p[0]);
        let ys = tri.iter().map(|p| p[1]);
        let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
        let px0 = (x0 - 0.5).ceil().max(0.0) as usize;
        let px1 = ((x1 - 0.5).floor() + 1.0).clamp(0.0, width as f64) as usize;
        let py0 = (y0 - 0.5).ceil().max(0.0) as usize;
        let py1 = ((y1 - 0.5).floor() + 1.0).clamp(0.0, height as f64) as usize;
        for y in py0..py1 {
            for x in px0..px1 {
                if inside([x as f64 + 0.5, y as f64 + 0.5], tri) {
                    mask.values[y * width + x] = 1.0;
                }
            }
        }
    }
    mask
}

/// Binary silhouette of a posed mesh in frame `t`'s crop camera.
pub fn rasterize_hard(
    vertices: &[[f64; 3]],
    faces: &[[usize; 3]],
    cam: &CameraPair,
    t: usize,
    res: usize,
) -> Result<Mask> {
    let px = crop_pixels(vertices, cam, t, res)?;
    Ok(rasterize_hard_2d(&px, faces, res, res))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::WeakCam;
    use crate::camera::BBox;

    fn square(x0: f64, y0: f64, side: f64) -> (Vec<f64>, Vec<[usize; 3]>) {
        let v = vec![x0, y0, x0 + side, y0, x0 + side, y0 + side, x0, y0 + side];
        (v, vec![[0, 1, 2], [0, 2, 3]])
    }

    #[test]
    fn large_triangle_saturates_interior() {
        let verts = vec![-100.0, -100.0, 400.0, -100.0, -100.0, 400.0];
        let m = rasterize_soft_2d(&verts, &[[0, 1, 2]], 64, 0.01);
        assert!(m.values.iter().all(|&v| v > 0.99));
    }

    #[test]
    fn empty_mesh_renders_nothing() {
        let m = rasterize_soft_2d(&[], &[], 32, 0.5);
        assert!(m.values.iter().all(|&v| v == 0.0));
        let h = rasterize_hard_2d(&[], &[], 32, 32);
        assert!(h.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_area_soft_and_hard() {
        let res = 224;
        let (v, f) = square(50.3, 60.7, 80.0);
        let soft = rasterize_soft_2d(&v, &f, res, default_sigma(res));
        assert!((soft.sum() - 6400.0).abs() < 0.05 * 6400.0, "{}", soft.sum());
        let hard = rasterize_hard_2d(&v, &f, res, res);
        // One-pixel boundary band: perimeter-sized slack.
        assert!((hard.sum() - 6400.0).abs() <= 4.0 * 81.0, "{}", hard.sum());
        assert_eq!(hard.sum(), 80.0 * 80.0);
    }

    #[test]
    fn hard_equals_thresholded_soft_for_small_sigma() {
        let res = 64;
        let verts = vec![5.2, 7.9, 50.1, 12.3, 20.7, 55.4, 60.2, 40.3];
        let faces = vec![[0, 1, 2], [1, 3, 2]];
        let soft = rasterize_soft_2d(&verts, &faces, res, 1e-4);
        let hard = rasterize_hard_2d(&verts, &faces, res, res);
        assert_eq!(soft.threshold(0.5), hard);
    }

    #[test]
    fn mesh_outside_view_is_empty() {
        let cam = CameraPair::from_weak(
            &[WeakCam { s: 1.0, px: 0.0, py: 0.0 }],
            &[BBox::new(100.0, 100.0, 100.0, 200.0, 200.0).unwrap()],
        )
        .unwrap();
        let verts = [[50.0, 50.0, 0.0], [51.0, 50.0, 0.0], [50.0, 51.0, 0.0]];
        let m = rasterize_hard(&verts, &[[0, 1, 2]], &cam, 0, 224).unwrap();
        assert_eq!(m.sum(), 0.0);
        let s = rasterize_soft(&verts, &[[0, 1, 2]], &cam, 0, 224, 0.5).unwrap();
        assert_eq!(s.sum(), 0.0);
    }

    #[test]
    fn behind_camera_propagates() {
        let cam = CameraPair::from_weak(
            &[WeakCam { s: 1.0, px: 0.0, py: 0.0 }],
            &[BBox::new(100.0, 100.0, 100.0, 200.0, 200.0).unwrap()],
        )
        .unwrap();
        let verts = [[0.0, 0.0, -100.0], [1.0, 0.0, -100.0], [0.0, 1.0, -100.0]];
        let err = rasterize_soft(&verts, &[[0, 1, 2]], &cam, 0, 224, 0.5).unwrap_err();
        assert!(err.to_string().starts_with("behind camera"));
    }

    #[test]
    fn signed_distance_gradient_matches_differences() {
        let tri = [[1.0, 2.0], [9.0, 3.0], [4.0, 8.0]];
        for p in [[4.0, 4.0], [0.0, 0.0], [10.0, 5.0], [5.0, 2.1]] {
            let (_, g) = signed_distance(p, tri);
            for k in 0..3 {
                for c in 0..2 {
                    let mut tp = tri;
                    let mut tm = tri;
                    tp[k][c] += 1e-6;
                    tm[k][c] -= 1e-6;
                    let num = (signed_distance(p, tp).0 - signed_distance(p, tm).0) / 2e-6;
                    assert!((num - g[k][c]).abs() < 1e-6, "p={p:?} k={k} c={c}: {num} vs {}", g[k][c]);
                }
            }
        }
    }

    #[test]
    fn mask_io_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::from_values(3, 2, vec![0.0, 1.0, 0.25, 0.5, 1.0, 0.0]).unwrap();
        m.write_raw(dir.path().join("m.raw")).unwrap();
        assert_eq!(Mask::read_raw(dir.path().join("m.raw")).unwrap(), m);
        let hard = m.threshold(0.5);
        hard.write_pgm(dir.path().join("m.pgm")).unwrap();
        assert_eq!(Mask::read_pgm(dir.path().join("m.pgm")).unwrap(), hard);
    }
}
