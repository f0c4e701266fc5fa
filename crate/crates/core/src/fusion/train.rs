//! End-to-end training through the loss stack, evaluation and stitching.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{forward_tape, NetVars, Regressed};
use super::{predict, ClipInputs, Dims, EncoderConfig, MeanParams, RegressorParams, Variant};
use crate::body::{pose_state_keypoints, MeshModel, PoseState, WeakCam};
use crate::data::{apply_occluder, ClipRecord, OccluderSpec};
use crate::diffopt::fit::{FrameVars, Problem};
use crate::diffopt::{initialize_pose, Adam, FitConfig, Tape, Var, TRAIN_LR};
use crate::error::{Error, Result};
use crate::losses::{LossReport, LossWeights, DEFAULT_SIGMA_GM};
use crate::metrics::p_mpjpe;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub sigma_gm: f64,
    /// Probability of hiding the legs from the network input for one clip in
    /// one epoch. Supervision always uses the clip's own keypoints.
    pub occlusion_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::ImageOnly,
            encoder: EncoderConfig::default(),
            epochs: 200,
            seed: 0,
            lr: TRAIN_LR,
            batch_size: 8,
            weights: LossWeights { w_sil: 0.0, ..LossWeights::default() },
            sigma_gm: DEFAULT_SIGMA_GM,
            occlusion_prob: 0.0,
        }
    }
}

impl TrainConfig {
    fn fit_config(&self) -> FitConfig {
        FitConfig { weights: self.weights, sigma_gm: self.sigma_gm, ..FitConfig::default() }
    }

    fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config("batch size, learning rate or occlusion probability out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub params: RegressorParams,
    /// Mean per-clip loss of each epoch, measured before each update.
    pub trace: Vec<LossReport>,
}

fn add_reports(a: &mut LossReport, b: &LossReport) {
    a.l_kp += b.l_kp;
    a.l_sil += b.l_sil;
    a.l_smooth += b.l_smooth;
    a.l_prior += b.l_prior;
    a.total += b.total;
    a.skipped_sil += b.skipped_sil;
}

fn frame_vars<'t>(tape: &'t Tape, r: &Regressed<'t>, joints: Var<'t>, n_joints: usize) -> (Var<'t>, Vec<FrameVars<'t>>) {
    let t = joints.rows();
    let beta = tape.constant(vec![1.0 / t as f64; t], 1, t).matmul(r.beta_rows).t();
    let frames = (0..t)
        .map(|f| {
            let cam = r.cam.row(f);
            FrameVars {
                rot: tape.concat_rows(&[r.theta_global.row(f), joints.row(f).reshape(n_joints - 1, 3)]),
                log_s: cam.slice_cols(0, 1),
                pxy: cam.slice_cols(1, 2),
            }
        })
        .collect();
    (beta, frames)
}

/// Loss of one clip on a tape: the pose losses of the evaluated path, plus
/// the same losses on the audio path for model fusion (equal weight).
fn clip_loss_tape<'t>(
    tape: &'t Tape,
    v: &NetVars<'t>,
    params: &RegressorParams,
    inputs: &ClipInputs,
    problem: &Problem<'_>,
    n_joints: usize,
    audio_branch: bool,
) -> Result<(Var<'t>, LossReport)> {
    let r = forward_tape(tape, v, params, inputs)?;
    let (beta, frames) = frame_vars(tape, &r, r.joints, n_joints);
    let (mut total, mut report) = problem.loss_from_vars(tape, beta, &frames)?;
    if let (true, Some(ja)) = (audio_branch, r.joints_audio) {
        let (beta, frames) = frame_vars(tape, &r, ja, n_joints);
        let (l, rep) = problem.loss_from_vars(tape, beta, &frames)?;
        total = total + l;
        add_reports(&mut report, &rep);
    }
    Ok((total, report))
}

/// Training loss of one clip without updating anything. With
/// `audio_branch = false` the audio-path term of model fusion is left out.
pub fn clip_loss(
    params: &RegressorParams,
    model: &MeshModel,
    clip: &ClipRecord,
    cfg: &TrainConfig,
    audio_branch: bool,
) -> Result<LossReport> {
    let inputs = ClipInputs::from_clip(clip, &params.config, &params.dims)?;
    let problem = Problem::new(clip, model, cfg.fit_config())?;
    let tape = Tape::new();
    let v = NetVars::new(params, &tape, false);
    Ok(clip_loss_tape(&tape, &v, params, &inputs, &problem, model.n_joints(), audio_branch)?.1)
}

/// Mean parameters from label-free initial fits of the training clips.
fn dataset_mean(model: &MeshModel, clips: &[ClipRecord]) -> Result<MeanParams> {
    let inits: Vec<PoseState> = clips.iter().map(|c| initialize_pose(c, model)).collect::<Result<_>>()?;
    MeanParams::from_poses(model, &inits)
}

/// Trains one network with Adam on mini-batches of clips.
pub fn train(model: &MeshModel, clips: &[ClipRecord], cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::Config("training needs at least one clip".into()));
    }
    if cfg.variant.uses_audio() && clips.iter().any(|c| c.audio.is_none()) {
        return Err(Error::AudioRequired);
    }
    let dims = Dims::new(model, &cfg.encoder);
    let mean = dataset_mean(model, clips)?;
    let mut params = RegressorParams::init(cfg.variant, cfg.encoder, dims, mean, cfg.seed)?;
    let fit_cfg = cfg.fit_config();

    let mut clean = Vec::with_capacity(clips.len());
    let mut occluded = Vec::with_capacity(clips.len());
    let mut problems = Vec::with_capacity(clips.len());
    for (i, c) in clips.iter().enumerate() {
        clean.push(ClipInputs::from_clip(c, &cfg.encoder, &dims)?);
        if cfg.occlusion_prob > 0.0 {
            let hidden = apply_occluder(c, model, &OccluderSpec::legs(cfg.seed ^ i as u64))?;
            occluded.push(ClipInputs::from_clip(&hidden, &cfg.encoder, &dims)?);
        }
        problems.push(Problem::new(c, model, fit_cfg)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7a11));
    let mut flat = params.flat();
    let mut opt = Adam::new(flat.len(), cfg.lr);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch = LossReport::default();
        for batch in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let v = NetVars::new(&params, &tape, true);
            let mut total = tape.scalar(0.0);
            for &i in batch {
                let hide = cfg.occlusion_prob > 0.0 && rng.random::<f64>() < cfg.occlusion_prob;
                let inputs = if hide { &occluded[i] } else { &clean[i] };
                let (l, rep) = clip_loss_tape(&tape, &v, &params, inputs, &problems[i], model.n_joints(), true)?;
                total = total + l;
                add_reports(&mut epoch, &rep);
            }
            let total = total.scale(1.0 / batch.len() as f64);
            let iteration = opt.steps() as usize;
            if !total.item().is_finite() {
                return Err(Error::Diverged { iteration });
            }
            let grads = tape.backward(total)?;
            let g: Vec<f64> = v.all().iter().flat_map(|&x| grads.wrt(x)).collect();
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged { iteration });
            }
            opt.step(&mut flat, &g);
            params.set_flat(&flat)?;
        }
        let n = clips.len() as f64;
        trace.push(LossReport {
            l_kp: epoch.l_kp / n,
            l_sil: epoch.l_sil / n,
            l_smooth: epoch.l_smooth / n,
            l_prior: epoch.l_prior / n,
            total: epoch.total / n,
            skipped_sil: epoch.skipped_sil,
        });
    }
    Ok(TrainResult { params, trace })
}

/// Mean P-MPJPE over frames between predicted and ground-truth 3D keypoints.
pub fn clip_pmpjpe(model: &MeshModel, pred: &PoseState, gt_keypoints3d: &[Vec<[f64; 3]>]) -> Result<f64> {
    let kp = pose_state_keypoints(model, pred)?;
    Ok(p_mpjpe(&kp, gt_keypoints3d, true)?.mean)
}

/// Per-clip P-MPJPE of the evaluated (visual) pose.
pub fn evaluate_pmpjpe(params: &RegressorParams, model: &MeshModel, clips: &[ClipRecord]) -> Result<Vec<f64>> {
    clips
        .iter()
        .map(|c| {
            let gt = c.gt.as_ref().ok_or_else(|| Error::Config(format!("clip {} has no ground truth", c.id)))?;
            clip_pmpjpe(model, &predict(params, c)?.pose, &gt.keypoints3d)
        })
        .collect()
}

/// Parameters of a single frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePose {
    pub beta: Vec<f64>,
    pub theta_global: [f64; 3],
    pub theta_joints: Vec<[f64; 3]>,
    pub cam: WeakCam,
}

/// Middle-frame stitching of stride-1 clip predictions over a sequence of
/// `seq_len` frames: frame `f` takes the middle frame of the clip starting at
/// `f - T/2`. The first and last `T/2` frames have no prediction.
pub fn stitch_middle(preds: &[PoseState], seq_len: usize) -> Result<Vec<Option<FramePose>>> {
    let t = preds.first().map(PoseState::n_frames).ok_or_else(|| Error::Config("nothing to stitch".into()))?;
    if preds.iter().any(|p| p.n_frames() != t) || seq_len < t || preds.len() != seq_len - t + 1 {
        return Err(Error::Config(format!(
            "{} clips of {t} frames cannot tile {seq_len} frames with stride 1",
            preds.len()
        )));
    }
    let mid = t / 2;
    let mut out = vec![None; seq_len];
    for (start, p) in preds.iter().enumerate() {
        out[start + mid] = Some(FramePose {
            beta: p.beta.clone(),
            theta_global: p.theta_global[mid],
            theta_joints: p.theta_joints[mid].clone(),
            cam: p.cam[mid],
        });
    }
    Ok(out)
}

/// Stitched per-frame poses back into a sequence state, for the frames that
/// have one. Shape is averaged over frames.
pub fn stitched_pose(frames: &[Option<FramePose>]) -> Option<(usize, PoseState)> {
    let first = frames.iter().position(Option::is_some)?;
    let got: Vec<&FramePose> = frames.iter().flatten().collect();
    let s = got[0].beta.len();
    let beta = (0..s).map(|i| got.iter().map(|f| f.beta[i]).sum::<f64>() / got.len() as f64).collect();
    Some((
        first,
        PoseState {
            beta,
            theta_global: got.iter().map(|f| f.theta_global).collect(),
            theta_joints: got.iter().map(|f| f.theta_joints.clone()).collect(),
            cam: got.iter().map(|f| f.cam).collect(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::toy::toy_quadruped;
    use crate::data::synth::{synth_gait, Gait};

    fn clips(n: usize, seed: u64) -> Vec<ClipRecord> {
        let model = toy_quadruped();
        (0..n).map(|i| synth_gait(&model, Gait::ALL[i % 3], 5, 25.0, seed + i as u64).unwrap()).collect()
    }

    #[test]
    fn same_seed_same_params() {
        let model = toy_quadruped();
        let data = clips(3, 1);
        let cfg = TrainConfig { variant: Variant::ModelFusion, epochs: 3, batch_size: 2, seed: 4, ..Default::default() };
        let a = train(&model, &data, &cfg).unwrap();
        let b = train(&model, &data, &cfg).unwrap();
        assert_eq!(a, b);
        let c = train(&model, &data, &TrainConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn model_fusion_loss_has_both_branches() {
        let model = toy_quadruped();
        let data = clips(2, 3);
        let cfg = TrainConfig { variant: Variant::ModelFusion, epochs: 1, ..Default::default() };
        let r = train(&model, &data, &cfg).unwrap();
        let both = clip_loss(&r.params, &model, &data[0], &cfg, true).unwrap();
        let visual = clip_loss(&r.params, &model, &data[0], &cfg, false).unwrap();
        assert!(both.total > visual.total);
        assert_ne!(both.l_kp, visual.l_kp);
    }

    #[test]
    fn audio_variants_need_audio() {
        let model = toy_quadruped();
        let data: Vec<ClipRecord> = clips(2, 5).iter().map(ClipRecord::without_audio).collect();
        let cfg = TrainConfig { variant: Variant::EarlyFusion, epochs: 1, ..Default::default() };
        assert_eq!(train(&model, &data, &cfg).unwrap_err().to_string(), Error::AudioRequired.to_string());
        assert!(train(&model, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn stitching_keeps_middle_frames() {
        let model = toy_quadruped();
        let seq = synth_gait(&model, Gait::Walk, 9, 25.0, 2).unwrap();
        let windows = seq.windows(5).unwrap();
        let preds: Vec<PoseState> = windows.iter().map(|w| w.gt.as_ref().unwrap().pose.clone()).collect();
        let st = stitch_middle(&preds, 9).unwrap();
        assert_eq!(st.iter().filter(|f| f.is_none()).count(), 4);
        assert!(st[..2].iter().all(Option::is_none) && st[7..].iter().all(Option::is_none));
        let gt = &seq.gt.as_ref().unwrap().pose;
        for f in 2..7 {
            assert_eq!(st[f].as_ref().unwrap().theta_joints, gt.theta_joints[f]);
        }
        let (first, pose) = stitched_pose(&st).unwrap();
        assert_eq!((first, pose.n_frames()), (2, 5));
        assert!(stitch_middle(&preds[1..], 9).is_err());
    }
}
