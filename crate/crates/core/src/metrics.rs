//! Evaluation metrics: Procrustes-aligned joint error, PCK, mask IoU and the
//! Wilcoxon signed-rank test.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::Mask;

/// Largest sample size for which the exact null distribution is used.
pub const WILCOXON_EXACT_MAX: usize = 12;
pub const WILCOXON_MIN_SAMPLES: usize = 5;
pub const DEFAULT_PCK_ALPHA: f64 = 0.1;
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Procrustes {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub aligned: Vec<[f64; 3]>,
}

fn centroid(p: &[Vector3<f64>]) -> Vector3<f64> {
    p.iter().sum::<Vector3<f64>>() / p.len() as f64
}

/// Similarity (or rigid, with `with_scale = false`) transform minimizing
/// `|s R x + t - y|` over corresponding rows.
pub fn procrustes_align(x: &[[f64; 3]], y: &[[f64; 3]], with_scale: bool) -> Result<Procrustes> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("{} source vs {} target points", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::RankDeficient);
    }
    let xs: Vec<Vector3<f64>> = x.iter().map(|p| Vector3::from(*p)).collect();
    let ys: Vec<Vector3<f64>> = y.iter().map(|p| Vector3::from(*p)).collect();
    let (mx, my) = (centroid(&xs), centroid(&ys));
    let mut cross = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    let mut var_x = 0.0;
    for (a, b) in xs.iter().zip(&ys) {
        let (ac, bc) = (a - mx, b - my);
        cross += bc * ac.transpose();
        scatter += ac * ac.transpose();
        var_x += ac.norm_squared();
    }
    let sv = scatter.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::RankDeficient);
    }
    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let d = if (u * v_t).determinant() < 0.0 { -1.0 } else { 1.0 };
    let dm = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * dm * v_t;
    let scale = if with_scale {
        let s = svd.singular_values;
        (s[0] + s[1] + d * s[2]) / var_x
    } else {
        1.0
    };
    let translation = my - scale * rotation * mx;
    let aligned = xs.iter().map(|p| (scale * rotation * p + translation).into()).collect();
    Ok(Procrustes { scale, rotation, translation, aligned })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub per_frame: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl ErrorSummary {
    pub fn from_values(per_frame: Vec<f64>) -> Self {
        let n = per_frame.len().max(1) as f64;
        let mean = per_frame.iter().sum::<f64>() / n;
        let std = (per_frame.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { per_frame, mean, std }
    }
}

/// Per-frame mean joint error after Procrustes alignment of `pred` onto `gt`.
pub fn p_mpjpe(pred: &[Vec<[f64; 3]>], gt: &[Vec<[f64; 3]>], with_scale: bool) -> Result<ErrorSummary> {
    if pred.len() != gt.len() {
        return Err(Error::shape("prediction and ground truth differ in frame count"));
    }
    let mut per_frame = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        let fit = procrustes_align(p, g, with_scale)?;
        let err = fit
            .aligned
            .iter()
            .zip(g)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
            .sum::<f64>()
            / g.len() as f64;
        per_frame.push(err);
    }
    Ok(ErrorSummary::from_values(per_frame))
}

/// Fraction of confident keypoints whose error is strictly below
/// `alpha * norm[t]`.
pub fn pck(
    pred: &[Vec<[f64; 2]>],
    gt: &[Vec<[f64; 2]>],
    conf: &[Vec<f64>],
    alpha: f64,
    norm: &[f64],
    conf_threshold: f64,
) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != conf.len() || pred.len() != norm.len() {
        return Err(Error::shape("pck inputs differ in frame count"));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for t in 0..pred.len() {
        if !(norm[t] > 0.0) {
            return Err(Error::Config(format!("frame {t}: pck normalizer must be positive")));
        }
        for k in 0..gt[t].len() {
            if conf[t][k] < conf_threshold {
                continue;
            }
            total += 1;
            let d = ((pred[t][k][0] - gt[t][k][0]).powi(2) + (pred[t][k][1] - gt[t][k][1]).powi(2)).sqrt();
            if d < alpha * norm[t] {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::NoSupervision);
    }
    Ok(hit as f64 / total as f64)
}

/// Intersection over union of thresholded masks; two empty masks give 1.
pub fn iou_masks(a: &Mask, b: &Mask, threshold: f32) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(format!("{}x{} vs {}x{} masks", a.width, a.height, b.width, b.height)));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (p, q) = (x > threshold, y > threshold);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Sum of ranks of positive differences `a - b`.
    pub statistic: f64,
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
}

/// Average ranks of `|d|`, doubled so ties stay integral.
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..abs.len()).collect();
    idx.sort_by(|&i, &j| abs[i].total_cmp(&abs[j]));
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && abs[idx[j + 1]] == abs[idx[i]] {
            j += 1;
        }
        // positions i..=j hold ranks i+1..=j+1; doubled mean is i+j+2
        for &k in &idx[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided signed-rank test on paired samples. Zero differences are
/// dropped; ties get average ranks.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(Error::shape("paired samples differ in length"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.is_empty() {
        return Err(Error::IdenticalSamples);
    }
    let n = d.len();
    if n < WILCOXON_MIN_SAMPLES {
        return Err(Error::TooFewSamples { n, min: WILCOXON_MIN_SAMPLES });
    }
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let w2: u64 = ranks.iter().zip(&d).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let statistic = w2 as f64 / 2.0;

    if n <= WILCOXON_EXACT_MAX {
        let total: u64 = ranks.iter().sum();
        // counts[s] = number of sign patterns whose doubled positive-rank sum is s
        let mut counts = vec![0u64; total as usize + 1];
        counts[0] = 1;
        for &r in &ranks {
            for s in (r as usize..=total as usize).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        let all = (1u64 << n) as f64;
        let lower: u64 = counts[..=w2 as usize].iter().sum();
        let upper: u64 = counts[w2 as usize..].iter().sum();
        let p = (2.0 * lower.min(upper) as f64 / all).min(1.0);
        return Ok(Wilcoxon { statistic, n, p_value: p, exact: true });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    for g in sorted.chunk_by(|x, y| x == y) {
        let t = g.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let diff = statistic - mean;
    let corrected = (diff.abs() - 0.5).max(0.0);
    let z = corrected / var.sqrt();
    let p = libm::erfc(z / std::f64::consts::SQRT_2).min(1.0);
    Ok(Wilcoxon { statistic, n, p_value: p, exact: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub clip: String,
    pub frame: usize,
    pub metric: String,
    pub value: f64,
}

/// Long-format metric rows plus a summary block.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub summary: Vec<(String, String)>,
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

/// Clean-versus-occluded pair, e.g. `0.81 / 0.64`.
pub fn format_pair(a: f64, b: f64) -> String {
    format!("{a:.2} / {b:.2}")
}

impl MetricsReport {
    pub fn push(&mut self, clip: &str, frame: usize, metric: &str, value: f64) {
        self.rows.push(MetricRow { clip: clip.to_string(), frame, metric: metric.to_string(), value });
    }

    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.metric == metric).map(|r| r.value).collect()
    }

    /// Adds `name: mean ± std` of all rows of `metric`.
    pub fn summarize(&mut self, metric: &str) -> ErrorSummary {
        let s = ErrorSummary::from_values(self.values(metric));
        self.summary.push((metric.to_string(), format_mean_std(s.mean, s.std)));
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip,frame,metric,value\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.clip, r.frame, r.metric, r.value));
        }
        if !self.summary.is_empty() {
            out.push_str("\n# summary\n");
            for (k, v) in &self.summary {
                out.push_str(&format!("# {k},{v}\n"));
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffopt::rodrigues;

    fn rot(w: [f64; 3]) -> Matrix3<f64> {
        Matrix3::from_row_slice(&rodrigues(w))
    }

    fn apply(s: f64, r: &Matrix3<f64>, t: [f64; 3], x: &[[f64; 3]]) -> Vec<[f64; 3]> {
        x.iter().map(|p| (s * r * Vector3::from(*p) + Vector3::from(t)).into()).collect()
    }

    fn cloud() -> Vec<[f64; 3]> {
        vec![[0.0, 0.0, 0.0], [1.0, 0.2, -0.3], [0.4, 1.5, 0.1], [-0.7, 0.3, 0.9], [0.2, -0.8, 0.5]]
    }

    #[test]
    fn identity_alignment() {
        let x = cloud();
        let p = procrustes_align(&x, &x, true).unwrap();
        assert!((p.scale - 1.0).abs() < 1e-12);
        assert!((p.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(p.translation.norm() < 1e-12);
    }

    #[test]
    fn recovers_similarity() {
        let x = cloud();
        let r0 = rot([0.3, -1.1, 2.0]);
        let y = apply(2.0, &r0, [1.0, -2.0, 0.5], &x);
        let p = procrustes_align(&x, &y, true).unwrap();
        assert!((p.scale - 2.0).abs() < 1e-8);
        assert!((p.rotation - r0).abs().max() < 1e-8);
        assert!((p.translation - Vector3::new(1.0, -2.0, 0.5)).norm() < 1e-8);
        assert!((p.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reflection_is_corrected() {
        let x = cloud();
        let y: Vec<[f64; 3]> = x.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        let p = procrustes_align(&x, &y, true).unwrap();
        assert!((p.rotation.determinant() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn degenerate_input_is_rank_deficient() {
        let line: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        assert!(matches!(procrustes_align(&line, &line, true), Err(Error::RankDeficient)));
        let same = vec![[1.0, 1.0, 1.0]; 4];
        assert!(matches!(procrustes_align(&same, &cloud()[..4], true), Err(Error::RankDeficient)));
    }

    #[test]
    fn analytic_beats_rotation_grid() {
        let x = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.3, 1.0]];
        let r0 = rot([0.4, 0.2, -0.6]);
        let mut y = apply(1.0, &r0, [0.1, 0.2, 0.3], &x);
        let noise = [[0.02, -0.01, 0.0], [-0.03, 0.01, 0.02], [0.0, 0.02, -0.02], [0.01, 0.0, 0.03]];
        for (p, n) in y.iter_mut().zip(noise) {
            for c in 0..3 {
                p[c] += n[c];
            }
        }
        let residual = |al: &[[f64; 3]]| -> f64 {
            al.iter().zip(&y).map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>()).sum()
        };
        let analytic = residual(&procrustes_align(&x, &y, false).unwrap().aligned);
        let (xs, ys): (Vec<_>, Vec<_>) = (
            x.iter().map(|p| Vector3::from(*p)).collect::<Vec<_>>(),
            y.iter().map(|p| Vector3::from(*p)).collect::<Vec<_>>(),
        );
        let (mx, my) = (centroid(&xs), centroid(&ys));
        let step = 5f64.to_radians();
        let mut best = f64::INFINITY;
        let n = (std::f64::consts::TAU / step) as i32;
        for a in 0..n {
            for b in 0..n / 2 {
                for c in 0..n {
                    let r = nalgebra::Rotation3::from_euler_angles(a as f64 * step, b as f64 * step - 1.6, c as f64 * step);
                    let al: Vec<[f64; 3]> = xs.iter().map(|p| (r * (p - mx) + my).into()).collect();
                    best = best.min(residual(&al));
                }
            }
        }
        assert!(analytic <= best + 1e-12, "{analytic} vs grid {best}");
    }

    #[test]
    fn p_mpjpe_examples() {
        let gt = vec![cloud(), cloud()];
        let s = p_mpjpe(&gt, &gt, true).unwrap();
        assert!(s.mean.abs() < 1e-12 && s.std.abs() < 1e-12);

        let r0 = rot([1.0, 0.5, -0.2]);
        let moved: Vec<Vec<[f64; 3]>> = gt.iter().map(|f| apply(0.7, &r0, [3.0, 0.0, -1.0], f)).collect();
        assert!(p_mpjpe(&moved, &gt, true).unwrap().mean < 1e-8);

        let mut one = cloud();
        let d = 0.5;
        one[2][1] += d;
        let e = p_mpjpe(&[one], &[cloud()], true).unwrap();
        // least squares spreads the error: the RMS over points is at most d / sqrt(n)
        assert!(e.mean <= d / (cloud().len() as f64).sqrt() + 1e-12);
    }

    #[test]
    fn pck_examples() {
        let gt = vec![vec![[0.0, 0.0], [10.0, 10.0]]];
        let conf = vec![vec![1.0, 1.0]];
        assert_eq!(pck(&gt, &gt, &conf, 0.1, &[100.0], 0.5).unwrap(), 1.0);
        let edge = vec![vec![[10.0, 0.0], [10.0, 20.0]]];
        assert_eq!(pck(&edge, &gt, &conf, 0.1, &[100.0], 0.5).unwrap(), 0.0);
        let half = vec![vec![[1.0, 0.0], [40.0, 10.0]]];
        assert_eq!(pck(&half, &gt, &conf, 0.1, &[100.0], 0.5).unwrap(), 0.5);
        assert!(matches!(pck(&gt, &gt, &[vec![0.0, 0.2]], 0.1, &[100.0], 0.5), Err(Error::NoSupervision)));
    }

    fn block(w: usize, x0: usize, x1: usize) -> Mask {
        let mut m = Mask::zeros(w, 1);
        for x in x0..x1 {
            m.values[x] = 1.0;
        }
        m
    }

    #[test]
    fn iou_examples() {
        let a = block(8, 0, 4);
        assert_eq!(iou_masks(&a, &a, 0.5).unwrap(), 1.0);
        assert_eq!(iou_masks(&a, &block(8, 4, 8), 0.5).unwrap(), 0.0);
        assert_eq!(iou_masks(&a, &block(8, 2, 6), 0.5).unwrap(), 1.0 / 3.0);
        assert_eq!(iou_masks(&Mask::zeros(3, 3), &Mask::zeros(3, 3), 0.5).unwrap(), 1.0);
        assert!(iou_masks(&a, &Mask::zeros(3, 3), 0.5).is_err());
    }

    fn enumerate_p(d: &[f64]) -> (f64, f64) {
        let d: Vec<f64> = d.iter().copied().filter(|x| *x != 0.0).collect();
        let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
        // plain average ranks by counting, independent of the sort-based helper
        let ranks: Vec<f64> = abs
            .iter()
            .map(|a| {
                let less = abs.iter().filter(|b| *b < a).count() as f64;
                let equal = abs.iter().filter(|b| *b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect();
        let observed: f64 = ranks.iter().zip(&d).filter(|(_, x)| **x > 0.0).map(|(r, _)| r).sum();
        let n = d.len();
        let (mut lo, mut hi) = (0u64, 0u64);
        for mask in 0u64..(1 << n) {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            lo += (w <= observed + 1e-9) as u64;
            hi += (w >= observed - 1e-9) as u64;
        }
        (observed, (2.0 * lo.min(hi) as f64 / (1u64 << n) as f64).min(1.0))
    }

    #[test]
    fn wilcoxon_constant_shift() {
        let a: Vec<f64> = (0..8).map(|i| i as f64 * 1.3).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.5).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 0.0078125).abs() < 1e-15);
        let s = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(s.p_value, r.p_value);
        assert_eq!(s.statistic, 36.0);
    }

    #[test]
    fn wilcoxon_matches_enumeration_with_ties() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0];
        let b = [1.5, 1.0, 3.5, 3.0, 6.0, 5.5, 7.5, 9.0, 8.0, 12.0, 11.0];
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        let (w, p) = enumerate_p(&d);
        assert!(r.exact);
        assert_eq!(r.statistic, w);
        assert!((r.p_value - p).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_errors_and_normal_branch() {
        assert!(matches!(wilcoxon_signed_rank(&[1.0; 6], &[1.0; 6]), Err(Error::IdenticalSamples)));
        assert!(matches!(
            wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[0.0; 3]),
            Err(Error::TooFewSamples { n: 3, min: 5 })
        ));
        let a: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin() + 0.05 * ((i * 7 % 11) as f64 - 3.0)).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(!r.exact && r.p_value > 0.0 && r.p_value <= 1.0);
    }

    #[test]
    fn report_csv_layout() {
        let mut rep = MetricsReport::default();
        rep.push("c0", 0, "p_mpjpe", 1.0);
        rep.push("c0", 1, "p_mpjpe", 3.0);
        let s = rep.summarize("p_mpjpe");
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        let csv = rep.to_csv();
        assert!(csv.starts_with("clip,frame,metric,value\nc0,0,p_mpjpe,1\n"));
        assert!(csv.contains("# p_mpjpe,2.00 ± 1.00"));
        assert_eq!(format_pair(0.812, 0.64), "0.81 / 0.64");
    }
}
