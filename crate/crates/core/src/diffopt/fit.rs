//! Direct per-clip fitting of body model parameters to 2D evidence.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Adam, Tape, Var, FIT_LR};
use crate::body::{pose_keypoints_tape, pose_mesh_tape, KeypointSubset};
use crate::body::{pose_state_keypoints, MeshModel, PoseState, WeakCam};
use crate::camera::{
    crop_principal, focal_full, project_points_tape, translations_tape, CameraPair, CROP_RES, F_CROP, FULL_PRINCIPAL,
};
use crate::data::ClipRecord;
use crate::error::{Error, Result};
use crate::losses::{
    keypoint_loss, keypoint_loss_tape, mahalanobis_tape, silhouette_loss_tape, smoothness_loss_tape, LossReport,
    LossWeights, DEFAULT_SIGMA_GM,
};
use crate::render::{default_sigma, rasterize_soft_tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub weights: LossWeights,
    pub iters: usize,
    pub lr: f64,
    /// Geman-McClure scale in full-frame pixels.
    pub sigma_gm: f64,
    /// Soft rasterizer sharpness; `None` uses the resolution default.
    pub sil_sigma: Option<f64>,
    /// Stop once every gradient coordinate is below this magnitude. Adam
    /// normalizes step sizes, so without a stopping rule it keeps taking
    /// `lr`-sized steps around an exact optimum.
    pub grad_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default(), iters: 300, lr: FIT_LR, sigma_gm: DEFAULT_SIGMA_GM, sil_sigma: None, grad_tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub pose: PoseState,
    /// One report per evaluated parameter vector, the first at the
    /// initialization and the last at the returned pose. Holds `iters + 1`
    /// entries unless the gradient tolerance stopped the loop early.
    pub trace: Vec<LossReport>,
}

impl FitResult {
    pub fn initial(&self) -> &LossReport {
        &self.trace[0]
    }

    pub fn last(&self) -> &LossReport {
        self.trace.last().expect("trace is never empty")
    }
}

/// Flat parameter layout: `beta`, then per frame the root rotation, joint
/// rotations, `log s`, `px`, `py`.
struct Layout {
    n_shape: usize,
    n_joints: usize,
    n_frames: usize,
}

impl Layout {
    fn per_frame(&self) -> usize {
        3 * self.n_joints + 3
    }

    fn len(&self) -> usize {
        self.n_shape + self.n_frames * self.per_frame()
    }

    fn frame(&self, t: usize) -> usize {
        self.n_shape + t * self.per_frame()
    }

    fn pack(&self, pose: &PoseState) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.len());
        p.extend_from_slice(&pose.beta);
        for t in 0..self.n_frames {
            p.extend_from_slice(&pose.theta_global[t]);
            p.extend(pose.theta_joints[t].iter().flatten());
            let c = pose.cam[t];
            p.extend_from_slice(&[c.s.ln(), c.px, c.py]);
        }
        p
    }

    fn unpack(&self, p: &[f64]) -> PoseState {
        let mut pose = PoseState {
            beta: p[..self.n_shape].to_vec(),
            theta_global: Vec::with_capacity(self.n_frames),
            theta_joints: Vec::with_capacity(self.n_frames),
            cam: Vec::with_capacity(self.n_frames),
        };
        for t in 0..self.n_frames {
            let f = &p[self.frame(t)..self.frame(t) + self.per_frame()];
            pose.theta_global.push([f[0], f[1], f[2]]);
            pose.theta_joints.push(f[3..3 * self.n_joints].chunks(3).map(|c| [c[0], c[1], c[2]]).collect());
            let c = &f[3 * self.n_joints..];
            pose.cam.push(WeakCam { s: c[0].exp(), px: c[1], py: c[2] });
        }
        pose
    }
}

/// Per-frame tape inputs of the clip objective.
#[derive(Clone, Copy)]
pub(crate) struct FrameVars<'t> {
    /// `J x 3`, root first.
    pub rot: Var<'t>,
    /// `1 x 1`.
    pub log_s: Var<'t>,
    /// `1 x 2`.
    pub pxy: Var<'t>,
}

/// Everything about a clip that stays fixed during fitting.
pub(crate) struct Problem<'a> {
    clip: &'a ClipRecord,
    model: &'a MeshModel,
    cfg: FitConfig,
    layout: Layout,
    subset: KeypointSubset,
    faces: Arc<Vec<[usize; 3]>>,
    gt_kp: Vec<f64>,
    conf: Vec<f64>,
    has_kp: bool,
    sil_frames: Vec<usize>,
}

impl<'a> Problem<'a> {
    pub(crate) fn new(clip: &'a ClipRecord, model: &'a MeshModel, cfg: FitConfig) -> Result<Self> {
        clip.validate()?;
        cfg.weights.validate()?;
        if clip.len() < 3 {
            return Err(Error::SequenceTooShort { len: clip.len() });
        }
        if clip.n_keypoints() != model.n_keypoints() {
            return Err(Error::shape(format!(
                "clip has {} keypoints, model defines {}",
                clip.n_keypoints(),
                model.n_keypoints()
            )));
        }
        let gt_kp: Vec<f64> = clip.keypoints.iter().flatten().flatten().copied().collect();
        let conf: Vec<f64> = clip.conf.iter().flatten().copied().collect();
        let has_kp = conf.iter().any(|&c| c > 0.0);
        let sil_frames: Vec<usize> =
            (0..clip.len()).filter(|&t| clip.sil_valid[t] && clip.masks[t].is_some()).collect();
        if !has_kp && sil_frames.is_empty() {
            return Err(Error::NoSupervision);
        }
        Ok(Self {
            clip,
            model,
            cfg,
            layout: Layout { n_shape: model.n_shape(), n_joints: model.n_joints(), n_frames: clip.len() },
            subset: KeypointSubset::new(model),
            faces: Arc::new(model.faces().to_vec()),
            gt_kp,
            conf,
            has_kp,
            sil_frames,
        })
    }

    /// Records the weighted total on `tape` and returns it with its breakdown.
    fn loss<'t>(&self, tape: &'t Tape, p: Var<'t>) -> Result<(Var<'t>, LossReport)> {
        let j = self.layout.n_joints;
        let beta = p.rows_range(0, self.layout.n_shape);
        let frames: Vec<FrameVars<'t>> = (0..self.layout.n_frames)
            .map(|t| {
                let off = self.layout.frame(t);
                let cam = p.rows_range(off + 3 * j, 3);
                FrameVars {
                    rot: p.rows_range(off, 3 * j).reshape(j, 3),
                    log_s: cam.row(0),
                    pxy: cam.rows_range(1, 2).reshape(1, 2),
                }
            })
            .collect();
        self.loss_from_vars(tape, beta, &frames)
    }

    /// Total loss of an `S x 1` shape and per-frame rotations and cameras.
    pub(crate) fn loss_from_vars<'t>(
        &self,
        tape: &'t Tape,
        beta: Var<'t>,
        frames: &[FrameVars<'t>],
    ) -> Result<(Var<'t>, LossReport)> {
        let w = &self.cfg.weights;
        let (s, j, n) = (self.layout.n_shape, self.layout.n_joints, self.layout.n_frames);
        if frames.len() != n || beta.shape() != (s, 1) {
            return Err(Error::shape("objective inputs disagree with the clip"));
        }
        let mut report = LossReport { skipped_sil: n - self.sil_frames.len(), ..Default::default() };
        let rots: Vec<Var<'t>> = frames.iter().map(|f| f.rot).collect();
        let mut crops = Vec::with_capacity(n);
        let mut fulls = Vec::with_capacity(n);
        for (t, f) in frames.iter().enumerate() {
            let (crop, full) = translations_tape(tape, f.log_s, f.pxy, &self.clip.bboxes[t])?;
            crops.push(crop);
            fulls.push(full);
        }

        let mut total = tape.scalar(0.0);
        if self.has_kp && w.w_kp > 0.0 {
            let mut proj = Vec::with_capacity(n);
            for t in 0..n {
                let bbox = &self.clip.bboxes[t];
                let kp3 = pose_keypoints_tape(self.model, &self.subset, tape, beta, rots[t]);
                let f = focal_full(bbox.frame_w, bbox.frame_h)?;
                proj.push(project_points_tape(kp3, f, fulls[t], FULL_PRINCIPAL)?);
            }
            let all = tape.concat_rows(&proj);
            let l = keypoint_loss_tape(all, &self.gt_kp, &self.conf, self.cfg.sigma_gm)?.scale(w.w_kp);
            report.l_kp = l.item();
            total = total + l;
        }

        if w.w_sil > 0.0 && !self.sil_frames.is_empty() {
            let mut l_sil = tape.scalar(0.0);
            for &t in &self.sil_frames {
                let mask = self.clip.masks[t].as_ref().expect("frame filtered on mask presence");
                let res = mask.width;
                if mask.height != res {
                    return Err(Error::shape(format!("silhouette must be square, got {}x{}", res, mask.height)));
                }
                let sigma = self.cfg.sil_sigma.unwrap_or_else(|| default_sigma(res));
                let verts = pose_mesh_tape(self.model, tape, beta, rots[t], None);
                let px = project_points_tape(verts, F_CROP, crops[t], crop_principal())?.scale(res as f64 / CROP_RES as f64);
                let soft = rasterize_soft_tape(px, self.faces.clone(), res, sigma);
                l_sil = l_sil + silhouette_loss_tape(soft, mask)?;
            }
            let l = l_sil.scale(w.w_sil);
            report.l_sil = l.item();
            total = total + l;
        }

        let mut l_smooth = tape.scalar(0.0);
        if w.w_smooth_gamma > 0.0 {
            l_smooth = l_smooth + smoothness_loss_tape(tape.concat_rows(&fulls), n)?.scale(w.w_smooth_gamma);
        }
        if w.w_smooth_global > 0.0 {
            let roots: Vec<Var> = rots.iter().map(|r| r.row(0)).collect();
            let chi = tape.concat_rows(&roots).rodrigues();
            l_smooth = l_smooth + smoothness_loss_tape(chi, n)?.scale(w.w_smooth_global);
        }
        if w.w_smooth_joints > 0.0 && j > 1 {
            let rows: Vec<Var> =
                rots.iter().map(|r| r.rows_range(1, j - 1).rodrigues().reshape(1, 9 * (j - 1))).collect();
            l_smooth = l_smooth + smoothness_loss_tape(tape.concat_rows(&rows), n)?.scale(w.w_smooth_joints);
        }
        report.l_smooth = l_smooth.item();
        total = total + l_smooth;

        let mut l_prior = tape.scalar(0.0);
        if w.w_beta_prior > 0.0 && s > 0 {
            let prec = self
                .model
                .shape_precision()
                .ok_or_else(|| Error::InvalidPrior("shape covariance is not positive definite".into()))?;
            let m = mahalanobis_tape(beta.t(), self.model.shape_prior_mean(), prec)?;
            l_prior = l_prior + m.scale(w.w_beta_prior);
        }
        if w.w_theta_prior > 0.0 && j > 1 {
            let prec = self
                .model
                .pose_precision()
                .ok_or_else(|| Error::InvalidPrior("pose covariance is not positive definite".into()))?;
            let mut acc = tape.scalar(0.0);
            for r in &rots {
                let x = r.rows_range(1, j - 1).reshape(1, 3 * (j - 1));
                acc = acc + mahalanobis_tape(x, self.model.pose_prior_mean(), prec)?;
            }
            l_prior = l_prior + acc.scale(w.w_theta_prior / n as f64);
        }
        report.l_prior = l_prior.item();
        total = total + l_prior;
        report.total = total.item();
        Ok((total, report))
    }

    pub(crate) fn pack(&self, pose: &PoseState) -> Vec<f64> {
        self.layout.pack(pose)
    }

    pub(crate) fn eval(&self, params: &[f64], with_grad: bool) -> Result<(LossReport, Option<Vec<f64>>)> {
        let tape = Tape::new();
        let p = tape.param(params.to_vec(), params.len(), 1);
        let (total, report) = self.loss(&tape, p)?;
        let grad = if with_grad { Some(tape.backward(total)?.wrt(p)) } else { None };
        Ok((report, grad))
    }
}

/// Minimizes the weighted loss over all clip parameters with Adam.
pub fn fit_sequence(clip: &ClipRecord, model: &MeshModel, init: &PoseState, cfg: &FitConfig) -> Result<FitResult> {
    init.validate(model)?;
    if init.n_frames() != clip.len() {
        return Err(Error::shape(format!("init has {} frames, clip has {}", init.n_frames(), clip.len())));
    }
    let problem = Problem::new(clip, model, *cfg)?;
    let mut params = problem.layout.pack(init);
    let mut opt = Adam::new(params.len(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.iters + 1);
    for it in 0..=cfg.iters {
        let last = it == cfg.iters;
        let (report, grad) = problem.eval(&params, !last)?;
        let grad_ok = grad.as_ref().map_or(true, |g| g.iter().all(|x| x.is_finite()));
        if !report.total.is_finite() || !grad_ok {
            return Err(Error::Diverged { iteration: it });
        }
        trace.push(report);
        if let Some(g) = grad {
            if g.iter().all(|x| x.abs() < cfg.grad_tol) {
                break;
            }
            opt.step(&mut params, &g);
        }
    }
    let mut pose = problem.layout.unpack(&params);
    pose.canonicalize();
    Ok(FitResult { pose, trace })
}

/// Loss breakdown of a pose without optimizing.
pub fn evaluate_pose(clip: &ClipRecord, model: &MeshModel, pose: &PoseState, cfg: &FitConfig) -> Result<LossReport> {
    pose.validate(model)?;
    let problem = Problem::new(clip, model, *cfg)?;
    Ok(problem.eval(&problem.layout.pack(pose), false)?.0)
}

/// Deterministic starting point: prior-mean shape and joints, a shared root
/// yaw picked from four candidates, and per-frame weak cameras solved in
/// closed form against the crop-space keypoints.
pub fn initialize_pose(clip: &ClipRecord, model: &MeshModel) -> Result<PoseState> {
    clip.validate()?;
    if !clip.conf.iter().flatten().any(|&c| c > 0.0) {
        return Err(Error::NoSupervision);
    }
    let n = clip.len();
    let mut best: Option<(f64, PoseState)> = None;
    for q in 0..4 {
        let yaw = q as f64 * std::f64::consts::FRAC_PI_2;
        let mut pose = PoseState::mean(model, n, WeakCam { s: 1.0, px: 0.0, py: 0.0 });
        pose.theta_global = vec![[0.0, yaw, 0.0]; n];
        pose.canonicalize();
        let kp3 = pose_state_keypoints(model, &pose)?;
        let mut ok = true;
        for t in 0..n {
            match solve_weak_cam(&kp3[t], &clip.keypoints[t], &clip.conf[t], &clip.bboxes[t]) {
                Some(c) => pose.cam[t] = c,
                None => ok = false,
            }
        }
        if !ok {
            continue;
        }
        let cams = CameraPair::from_weak(&pose.cam, &clip.bboxes)?;
        let mut pred = Vec::with_capacity(n);
        let mut feasible = true;
        for (t, pts) in kp3.iter().enumerate() {
            match cams.project_full(t, pts) {
                Ok(p) => pred.push(p),
                Err(_) => feasible = false,
            }
        }
        if !feasible {
            continue;
        }
        let loss = keypoint_loss(&pred, &clip.keypoints, &clip.conf, DEFAULT_SIGMA_GM, 1.0)?;
        if best.as_ref().map_or(true, |(l, _)| loss < *l) {
            best = Some((loss, pose));
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| Error::Config("no yaw candidate admits a camera in front of the body".into()))
}

/// Least squares for `u - c = a (X + px)` in crop pixels with `a = r s / 2`.
fn solve_weak_cam(
    points: &[[f64; 3]],
    observed: &[[f64; 2]],
    conf: &[f64],
    bbox: &crate::camera::BBox,
) -> Option<WeakCam> {
    let c = crop_principal();
    let r = CROP_RES as f64;
    // Normal equations in (a, a px, a py).
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = nalgebra::Vector3::<f64>::zeros();
    for ((x, o), &w) in points.iter().zip(observed).zip(conf) {
        if w <= 0.0 {
            continue;
        }
        let uv = bbox.full_to_crop(o[0], o[1], r);
        let w2 = w * w;
        for (axis, target) in [(0usize, uv[0] - c[0]), (1, uv[1] - c[1])] {
            let row = if axis == 0 { [x[0], 1.0, 0.0] } else { [x[1], 0.0, 1.0] };
            let a = nalgebra::Vector3::from(row);
            ata += w2 * a * a.transpose();
            atb += w2 * target * a;
        }
    }
    let sol = ata.lu().solve(&atb)?;
    let a = sol[0];
    if !(a > 1e-9) || !a.is_finite() {
        return None;
    }
    Some(WeakCam { s: 2.0 * a / r, px: sol[1] / a, py: sol[2] / a })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::toy::toy_quadruped;
    use crate::data::synth::{synth_sequence, Gait, SynthConfig};
    use crate::diffopt::check_gradient;
    use crate::metrics::p_mpjpe;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn clip(seed: u64, n: usize) -> ClipRecord {
        let model = toy_quadruped();
        let cfg = SynthConfig { gait: Gait::Trot, n_frames: n, seed, render_images: false, audio: false, ..Default::default() };
        synth_sequence(&model, &cfg).unwrap()
    }

    #[test]
    fn layout_round_trip() {
        let model = toy_quadruped();
        let c = clip(3, 5);
        let gt = c.gt.as_ref().unwrap().pose.clone();
        let layout = Layout { n_shape: model.n_shape(), n_joints: model.n_joints(), n_frames: 5 };
        let back = layout.unpack(&layout.pack(&gt));
        assert_eq!(back.theta_joints, gt.theta_joints);
        for (a, b) in back.cam.iter().zip(&gt.cam) {
            assert!((a.s - b.s).abs() < 1e-12 * b.s);
        }
    }

    #[test]
    fn ground_truth_is_stationary_under_keypoint_loss() {
        let model = toy_quadruped();
        let c = clip(5, 5);
        let gt = c.gt.as_ref().unwrap().pose.clone();
        let cfg = FitConfig { weights: LossWeights::keypoints_only(), iters: 50, ..Default::default() };
        let fit = fit_sequence(&c, &model, &gt, &cfg).unwrap();
        assert!((fit.last().total - fit.initial().total).abs() < 1e-6, "{:?}", fit.last());
        let layout = Layout { n_shape: model.n_shape(), n_joints: model.n_joints(), n_frames: 5 };
        let moved = layout
            .pack(&fit.pose)
            .iter()
            .zip(layout.pack(&gt))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(moved < 1e-3, "moved {moved}");
    }

    #[test]
    fn full_loss_gradient_matches_differences() {
        let model = toy_quadruped();
        let c = clip(8, 3);
        let mut pose = c.gt.as_ref().unwrap().pose.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 0.1).unwrap();
        for w in pose.theta_joints.iter_mut().flatten() {
            for x in w.iter_mut() {
                *x += noise.sample(&mut rng);
            }
        }
        let problem = Problem::new(&c, &model, FitConfig::default()).unwrap();
        let params = problem.layout.pack(&pose);
        // Keypoints, smoothness and priors only: the silhouette is checked on
        // its own with a wider tolerance.
        let cfg_no_sil = FitConfig { weights: LossWeights { w_sil: 0.0, ..Default::default() }, ..Default::default() };
        let smooth = Problem::new(&c, &model, cfg_no_sil).unwrap();
        let g = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (r, g) = smooth.eval(x, true)?;
            Ok((r.total, g.unwrap()))
        };
        let rep = check_gradient(g, &params, 1e-5, 1e-4).unwrap();
        assert!(rep.passed, "{rep:?}");
        let (r, _) = problem.eval(&params, false).unwrap();
        assert!(r.l_sil > 0.0);
    }

    #[test]
    fn perturbed_fit_recovers_pose() {
        let model = toy_quadruped();
        let c = clip(11, 5);
        let gt = c.gt.as_ref().unwrap();
        let mut init = gt.pose.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0, 0.2).unwrap();
        for w in init.theta_joints.iter_mut().flatten() {
            for x in w.iter_mut() {
                *x += noise.sample(&mut rng);
            }
        }
        let fit = fit_sequence(&c, &model, &init, &FitConfig::default()).unwrap();
        assert!(fit.last().total < fit.initial().total);
        let pred = pose_state_keypoints(&model, &fit.pose).unwrap();
        let err = p_mpjpe(&pred, &gt.keypoints3d, true).unwrap();
        assert!(err.mean < 0.1 * model.body_length(), "{} vs {}", err.mean, model.body_length());
    }

    #[test]
    fn no_supervision_is_reported() {
        let model = toy_quadruped();
        let mut c = clip(4, 3);
        for row in c.conf.iter_mut() {
            row.iter_mut().for_each(|x| *x = 0.0);
        }
        c.sil_valid.iter_mut().for_each(|v| *v = false);
        let init = c.gt.as_ref().unwrap().pose.clone();
        let err = fit_sequence(&c, &model, &init, &FitConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "no supervision");
    }

    #[test]
    fn fitting_is_reproducible() {
        let model = toy_quadruped();
        let c = clip(6, 4);
        let init = initialize_pose(&c, &model).unwrap();
        let cfg = FitConfig { iters: 20, ..Default::default() };
        let a = fit_sequence(&c, &model, &init, &cfg).unwrap();
        let b = fit_sequence(&c, &model, &init, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn yaw_grid_prefers_the_true_facing() {
        let model = toy_quadruped();
        let c = clip(9, 3);
        let init = initialize_pose(&c, &model).unwrap();
        let yaw = init.theta_global[0][1];
        assert!(yaw.abs() < 1e-12, "picked yaw {yaw}");
        assert!(init.cam.iter().all(|c| c.s > 0.0));
    }
}
