//! Fitting and training losses.
//!
//! Each term has a plain `f64` implementation and a tape implementation; the
//! plain ones are written independently so tests can cross-check the two.

use serde::{Deserialize, Serialize};

use crate::body::MeshModel;
use crate::diffopt::{smooth_l1, Tape, Var};
use crate::error::{Error, Result};
use crate::render::Mask;

/// Geman-McClure scale in full-frame pixels.
pub const DEFAULT_SIGMA_GM: f64 = 50.0;

/// Transition point of the smooth-L1 silhouette penalty.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_kp: f64,
    pub w_sil: f64,
    pub w_beta_prior: f64,
    pub w_theta_prior: f64,
    pub w_smooth_gamma: f64,
    pub w_smooth_global: f64,
    pub w_smooth_joints: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_kp: 0.001,
            w_sil: 1e-4,
            w_beta_prior: 50.0,
            w_theta_prior: 0.01,
            w_smooth_gamma: 0.1,
            w_smooth_global: 0.2,
            w_smooth_joints: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("w_kp", self.w_kp),
            ("w_sil", self.w_sil),
            ("w_beta_prior", self.w_beta_prior),
            ("w_theta_prior", self.w_theta_prior),
            ("w_smooth_gamma", self.w_smooth_gamma),
            ("w_smooth_global", self.w_smooth_global),
            ("w_smooth_joints", self.w_smooth_joints),
        ];
        for (name, w) in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }

    /// Keypoint weight only; everything else off.
    pub fn keypoints_only() -> Self {
        Self {
            w_kp: 0.001,
            w_sil: 0.0,
            w_beta_prior: 0.0,
            w_theta_prior: 0.0,
            w_smooth_gamma: 0.0,
            w_smooth_global: 0.0,
            w_smooth_joints: 0.0,
        }
    }
}

/// Unweighted loss terms, as produced by the individual loss functions with
/// `w = 1`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub kp: f64,
    pub sil: f64,
    pub smooth_gamma: f64,
    pub smooth_global: f64,
    pub smooth_joints: f64,
    pub prior_beta: f64,
    pub prior_theta: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_kp: f64,
    pub l_sil: f64,
    pub l_smooth: f64,
    pub l_prior: f64,
    pub total: f64,
    /// Frames whose silhouette term was skipped.
    pub skipped_sil: usize,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_kp,l_sil,l_smooth,l_prior,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!("{step},{:e},{:e},{:e},{:e},{:e}", self.l_kp, self.l_sil, self.l_smooth, self.l_prior, self.total)
    }
}

/// Writes one CSV row per step.
pub fn write_trace_csv(path: impl AsRef<std::path::Path>, trace: &[LossReport]) -> Result<()> {
    let mut out = String::from(LossReport::CSV_HEADER);
    out.push('\n');
    for (i, r) in trace.iter().enumerate() {
        out.push_str(&r.csv_row(i));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// `rho(x) = sigma^2 x^2 / (sigma^2 + x^2)`.
pub fn geman_mcclure(x: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    s2 * x * x / (s2 + x * x)
}

/// Confidence-weighted robust keypoint loss.
///
/// `pred`, `gt`: per frame, per keypoint pixel coordinates. `conf`: per frame,
/// per keypoint in `[0, 1]`; the squared confidence weights each residual.
pub fn keypoint_loss(pred: &[Vec<[f64; 2]>], gt: &[Vec<[f64; 2]>], conf: &[Vec<f64>], sigma: f64, w: f64) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != conf.len() {
        return Err(Error::shape("keypoint sequences differ in length"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for t in 0..pred.len() {
        if pred[t].len() != gt[t].len() || pred[t].len() != conf[t].len() {
            return Err(Error::shape(format!("frame {t}: keypoint counts differ")));
        }
        for k in 0..pred[t].len() {
            let l2 = conf[t][k] * conf[t][k];
            let dx = pred[t][k][0] - gt[t][k][0];
            let dy = pred[t][k][1] - gt[t][k][1];
            num += l2 * geman_mcclure((dx * dx + dy * dy).sqrt(), sigma);
            den += l2;
        }
    }
    if den <= 0.0 {
        return Err(Error::NoSupervision);
    }
    Ok(w * num / den)
}

/// Sum over valid frames of the per-pixel mean smooth-L1 mask difference.
/// Returns the loss and the number of skipped frames.
pub fn silhouette_loss(pred: &[Mask], gt: &[Mask], valid: &[bool], w: f64) -> Result<(f64, usize)> {
    if pred.len() != gt.len() || pred.len() != valid.len() {
        return Err(Error::shape("silhouette sequences differ in length"));
    }
    let mut total = 0.0;
    let mut skipped = 0;
    for t in 0..pred.len() {
        if !valid[t] {
            skipped += 1;
            continue;
        }
        let (a, b) = (&pred[t], &gt[t]);
        if a.width != b.width || a.height != b.height {
            return Err(Error::shape(format!(
                "frame {t}: mask resolution {}x{} vs {}x{}",
                a.width, a.height, b.width, b.height
            )));
        }
        let sum: f64 = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(&p, &g)| smooth_l1(p as f64 - g as f64, SMOOTH_L1_BETA))
            .sum();
        total += sum / a.values.len().max(1) as f64;
    }
    Ok((w * total, skipped))
}

/// `w / (n (T-2)) * sum_t |chi_t - 2 chi_{t-1} + chi_{t-2}|^2`.
pub fn smoothness_loss(chi: &[Vec<f64>], n: usize, w: f64) -> Result<f64> {
    let t = chi.len();
    if t < 3 {
        return Err(Error::SequenceTooShort { len: t });
    }
    let d = chi[0].len();
    if chi.iter().any(|c| c.len() != d) {
        return Err(Error::shape("ragged smoothness sequence"));
    }
    let mut acc = 0.0;
    for i in 2..t {
        for k in 0..d {
            let dd = chi[i][k] - 2.0 * chi[i - 1][k] + chi[i - 2][k];
            acc += dd * dd;
        }
    }
    Ok(w * acc / (n as f64 * (t - 2) as f64))
}

fn mahalanobis_sq(x: &[f64], mean: &[f64], precision: &[f64]) -> f64 {
    let n = x.len();
    let d: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += d[i] * precision[i * n + j] * d[j];
        }
    }
    acc
}

/// Shape and pose Gaussian priors of the body model.
pub fn prior_loss(beta: &[f64], theta_joints: &[[f64; 3]], model: &MeshModel, w_beta: f64, w_theta: f64) -> Result<f64> {
    model.check_beta(beta)?;
    model.check_joints(theta_joints)?;
    let sp = model
        .shape_precision()
        .ok_or_else(|| Error::InvalidPrior("shape covariance is not positive definite".into()))?;
    let pp = model
        .pose_precision()
        .ok_or_else(|| Error::InvalidPrior("pose covariance is not positive definite".into()))?;
    let theta: Vec<f64> = theta_joints.iter().flatten().copied().collect();
    Ok(w_beta * mahalanobis_sq(beta, model.shape_prior_mean(), sp)
        + w_theta * mahalanobis_sq(&theta, model.pose_prior_mean(), pp))
}

/// Weighted sum of the individual terms.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> LossReport {
    let l_kp = weights.w_kp * terms.kp;
    let l_sil = weights.w_sil * terms.sil;
    let l_smooth = weights.w_smooth_gamma * terms.smooth_gamma
        + weights.w_smooth_global * terms.smooth_global
        + weights.w_smooth_joints * terms.smooth_joints;
    let l_prior = weights.w_beta_prior * terms.prior_beta + weights.w_theta_prior * terms.prior_theta;
    LossReport { l_kp, l_sil, l_smooth, l_prior, total: l_kp + l_sil + l_smooth + l_prior, skipped_sil: 0 }
}

/// Tape keypoint loss with unit weight. `pred` is `N x 2`; `gt` and `conf`
/// are flat with `N` rows.
pub fn keypoint_loss_tape<'t>(pred: Var<'t>, gt: &[f64], conf: &[f64], sigma: f64) -> Result<Var<'t>> {
    let n = pred.rows();
    if pred.cols() != 2 || gt.len() != 2 * n || conf.len() != n {
        return Err(Error::shape("keypoint tape inputs disagree"));
    }
    let l2: Vec<f64> = conf.iter().map(|c| c * c).collect();
    let den: f64 = l2.iter().sum();
    if den <= 0.0 {
        return Err(Error::NoSupervision);
    }
    let tape = pred.tape();
    let diff = pred - tape.constant(gt.to_vec(), n, 2);
    let rho = diff.square().sum_cols().geman_mcclure_sq(sigma);
    Ok(rho.mul_col(tape.constant(l2, n, 1)).sum().scale(1.0 / den))
}

/// Tape silhouette term for one frame: mean smooth-L1 over pixels.
pub fn silhouette_loss_tape<'t>(pred: Var<'t>, gt: &Mask) -> Result<Var<'t>> {
    let (r, c) = pred.shape();
    if r * c != gt.values.len() {
        return Err(Error::shape(format!("rendered {} pixels, mask has {}", r * c, gt.values.len())));
    }
    let g = pred.tape().constant(gt.values.iter().map(|&v| v as f64).collect(), r, c);
    Ok((pred - g).smooth_l1(SMOOTH_L1_BETA).mean())
}

/// Tape smoothness term with unit weight over a `T x D` sequence.
pub fn smoothness_loss_tape<'t>(chi: Var<'t>, n: usize) -> Result<Var<'t>> {
    let t = chi.rows();
    if t < 3 {
        return Err(Error::SequenceTooShort { len: t });
    }
    let mut op = vec![0.0; (t - 2) * t];
    for i in 0..t - 2 {
        op[i * t + i] = 1.0;
        op[i * t + i + 1] = -2.0;
        op[i * t + i + 2] = 1.0;
    }
    let second = chi.tape().constant(op, t - 2, t).matmul(chi);
    Ok(second.square().sum().scale(1.0 / (n as f64 * (t - 2) as f64)))
}

/// Squared Mahalanobis distance of a `1 x n` row.
pub fn mahalanobis_tape<'t>(x: Var<'t>, mean: &[f64], precision: &[f64]) -> Result<Var<'t>> {
    let n = mean.len();
    if x.shape() != (1, n) || precision.len() != n * n {
        return Err(Error::shape("mahalanobis dimensions"));
    }
    let tape: &'t Tape = x.tape();
    let d = x - tape.constant(mean.to_vec(), 1, n);
    Ok(d.matmul(tape.constant(precision.to_vec(), n, n)).matmul(d.t()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffopt::{check_gradient, grad};

    fn frames(v: &[[f64; 2]]) -> Vec<Vec<[f64; 2]>> {
        vec![v.to_vec()]
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!(
            [w.w_kp, w.w_sil, w.w_beta_prior, w.w_theta_prior, w.w_smooth_gamma, w.w_smooth_global, w.w_smooth_joints],
            [0.001, 1e-4, 50.0, 0.01, 0.1, 0.2, 10.0]
        );
        w.validate().unwrap();
        assert!(LossWeights { w_kp: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn keypoint_examples() {
        let gt = frames(&[[10.0, 20.0]]);
        assert_eq!(keypoint_loss(&gt, &gt, &[vec![1.0]], 50.0, 0.001).unwrap(), 0.0);

        let sigma = 50.0;
        let pred = frames(&[[10.0 + 30.0, 20.0 + 40.0]]);
        let l = keypoint_loss(&pred, &gt, &[vec![1.0]], sigma, 0.001).unwrap();
        assert!((l - 0.001 * sigma * sigma / 2.0).abs() < 1e-12);

        let far = frames(&[[1e9, 0.0]]);
        let l = keypoint_loss(&far, &gt, &[vec![1.0]], sigma, 0.001).unwrap();
        assert!((l - 0.001 * sigma * sigma).abs() < 1e-6);

        let err = keypoint_loss(&pred, &gt, &[vec![0.0]], sigma, 1.0).unwrap_err();
        assert_eq!(err.to_string(), "no supervision");
    }

    #[test]
    fn keypoint_permutation_invariant() {
        let pred = frames(&[[1.0, 2.0], [30.0, -4.0], [7.0, 7.0]]);
        let gt = frames(&[[0.0, 0.0], [10.0, 10.0], [7.5, 6.0]]);
        let conf = vec![vec![0.2, 1.0, 0.7]];
        let a = keypoint_loss(&pred, &gt, &conf, 20.0, 1.0).unwrap();
        let perm = [2, 0, 1];
        let p2 = vec![perm.iter().map(|&i| pred[0][i]).collect()];
        let g2 = vec![perm.iter().map(|&i| gt[0][i]).collect()];
        let c2 = vec![perm.iter().map(|&i| conf[0][i]).collect()];
        let b = keypoint_loss(&p2, &g2, &c2, 20.0, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn silhouette_examples() {
        let a = Mask::from_values(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (l, skipped) = silhouette_loss(&[a.clone(), a.clone()], &[a.clone(), a.clone()], &[true, true], 1.0).unwrap();
        assert_eq!((l, skipped), (0.0, 0));

        let (l, skipped) = silhouette_loss(&[a.clone(), a.clone()], &[a.clone(), a.clone()], &[false, false], 1.0).unwrap();
        assert_eq!((l, skipped), (0.0, 2));

        let lo = Mask::from_values(2, 2, vec![0.25; 4]).unwrap();
        let hi = Mask::from_values(2, 2, vec![0.75; 4]).unwrap();
        let t = 3;
        let w = 1e-4;
        let (l, _) = silhouette_loss(&vec![lo; t], &vec![hi; t], &vec![true; t], w).unwrap();
        assert!((l - w * t as f64 * 0.125).abs() < 1e-15);

        let big = Mask::zeros(3, 3);
        let err = silhouette_loss(&[big], &[a], &[true], 1.0).unwrap_err();
        assert!(err.to_string().starts_with("shape error"));
    }

    #[test]
    fn smoothness_examples() {
        let constant = vec![vec![1.0, 2.0]; 6];
        assert_eq!(smoothness_loss(&constant, 6, 1.0).unwrap(), 0.0);
        let linear: Vec<Vec<f64>> = (0..6).map(|t| vec![0.5 * t as f64, -2.0 * t as f64]).collect();
        assert!(smoothness_loss(&linear, 6, 1.0).unwrap().abs() < 1e-24);
        let l = smoothness_loss(&[vec![0.0], vec![0.0], vec![1.0]], 3, 1.0).unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            smoothness_loss(&[vec![0.0], vec![0.0]], 2, 1.0).unwrap_err().to_string(),
            "sequence too short: 2 frames, need at least 3"
        );
    }

    fn unit_prior_model(cov_scale: f64) -> MeshModel {
        let base = crate::body::toy::toy_quadruped();
        let s = base.n_shape();
        let mut parts = base.parts().clone();
        parts.shape_prior_mean = vec![0.0; s];
        parts.shape_prior_cov = (0..s * s).map(|i| if i % (s + 1) == 0 { cov_scale } else { 0.0 }).collect();
        MeshModel::new(parts).unwrap()
    }

    #[test]
    fn prior_examples() {
        let model = unit_prior_model(1.0);
        let beta = vec![0.0; model.n_shape()];
        let mean: Vec<[f64; 3]> = model.pose_prior_mean().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        assert!(prior_loss(&beta, &mean, &model, 50.0, 0.01).unwrap().abs() < 1e-20);

        let mut b1 = beta.clone();
        b1[1] = 1.0;
        assert!((prior_loss(&b1, &mean, &model, 50.0, 0.0).unwrap() - 50.0).abs() < 1e-9);

        let wide = unit_prior_model(4.0);
        assert!((prior_loss(&b1, &mean, &wide, 50.0, 0.0).unwrap() - 12.5).abs() < 1e-9);

        let mut parts = model.parts().clone();
        parts.shape_prior_cov = vec![0.0; model.n_shape() * model.n_shape()];
        let singular = MeshModel::new(parts).unwrap();
        assert!(prior_loss(&b1, &mean, &singular, 1.0, 1.0).unwrap_err().to_string().starts_with("invalid prior"));
    }

    #[test]
    fn total_is_weighted_resummation() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossTerms::default(), &w).total, 0.0);
        let one = LossTerms { smooth_global: 2.0, ..Default::default() };
        let r = total_loss(&one, &w);
        assert_eq!(r.total, r.l_smooth);
        assert_eq!(r.total, 0.4);

        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let t = LossTerms {
                kp: next(),
                sil: next(),
                smooth_gamma: next(),
                smooth_global: next(),
                smooth_joints: next(),
                prior_beta: next(),
                prior_theta: next(),
            };
            let r = total_loss(&t, &w);
            let oracle = [
                t.prior_theta * w.w_theta_prior,
                t.prior_beta * w.w_beta_prior,
                t.smooth_joints * w.w_smooth_joints,
                t.smooth_global * w.w_smooth_global,
                t.smooth_gamma * w.w_smooth_gamma,
                t.sil * w.w_sil,
                t.kp * w.w_kp,
            ]
            .iter()
            .sum::<f64>();
            assert!((r.total - oracle).abs() < 1e-12);
            assert!((r.total - (r.l_kp + r.l_sil + r.l_smooth + r.l_prior)).abs() < 1e-9);
        }
    }

    #[test]
    fn tape_losses_match_plain() {
        let pred = [[1.0, 2.0], [30.0, -4.0], [7.0, 7.0], [100.0, 3.0]];
        let gt = [[0.0, 0.0], [10.0, 10.0], [7.5, 6.0], [-50.0, 0.0]];
        let conf = [0.2, 1.0, 0.7, 0.9];
        let plain = keypoint_loss(&[pred.to_vec()], &[gt.to_vec()], &[conf.to_vec()], 25.0, 1.0).unwrap();
        let flat_p: Vec<f64> = pred.iter().flatten().copied().collect();
        let flat_g: Vec<f64> = gt.iter().flatten().copied().collect();
        let tape = Tape::new();
        let x = tape.param(flat_p.clone(), 4, 2);
        let l = keypoint_loss_tape(x, &flat_g, &conf, 25.0).unwrap();
        assert!((l.item() - plain).abs() < 1e-12);

        let chi: Vec<Vec<f64>> = (0..5).map(|t| vec![(t as f64).sin(), (t * t) as f64 * 0.1]).collect();
        let plain = smoothness_loss(&chi, 5, 1.0).unwrap();
        let tape = Tape::new();
        let c = tape.param(chi.iter().flatten().copied().collect(), 5, 2);
        assert!((smoothness_loss_tape(c, 5).unwrap().item() - plain).abs() < 1e-12);

        let a = Mask::from_values(2, 2, vec![0.1, 0.9, 0.4, 0.0]).unwrap();
        let b = Mask::from_values(2, 2, vec![1.0, 0.0, 0.5, 0.0]).unwrap();
        let (plain, _) = silhouette_loss(&[a.clone()], &[b.clone()], &[true], 1.0).unwrap();
        let tape = Tape::new();
        let p = tape.param(a.values.iter().map(|&v| v as f64).collect(), 1, 4);
        assert!((silhouette_loss_tape(p, &b).unwrap().item() - plain).abs() < 1e-7);
    }

    #[test]
    fn tape_loss_gradients_match_differences() {
        let gt = vec![0.0, 0.0, 10.0, 10.0, 7.5, 6.0];
        let conf = vec![0.3, 1.0, 0.8];
        let f = |p: &[f64]| grad(p, |_, x| keypoint_loss_tape(x.reshape(3, 2), &gt, &conf, 20.0));
        let r = check_gradient(f, &[1.0, 2.0, 30.0, -4.0, 7.0, 9.0], 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");

        let f = |p: &[f64]| grad(p, |_, x| smoothness_loss_tape(x.reshape(4, 2), 4));
        let r = check_gradient(f, &[0.1, 0.5, -0.3, 0.2, 0.9, 1.1, 0.0, -2.0], 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");

        let prec = vec![2.0, 0.5, 0.5, 1.0];
        let f = |p: &[f64]| grad(p, |_, x| mahalanobis_tape(x.reshape(1, 2), &[0.3, -0.1], &prec));
        let r = check_gradient(f, &[1.0, 2.0], 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
