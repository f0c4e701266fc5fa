//! Tape forward pass shared by training and inference.

use std::collections::HashMap;

use super::{ClipInputs, RegressorParams, Variant, GROUP_NORM_GROUPS};
use crate::body::{PoseState, WeakCam};
use crate::data::ClipRecord;
use crate::diffopt::{Tape, Var};
use crate::error::{Error, Result};

/// Tensors of one network recorded on a tape.
pub(crate) struct NetVars<'t> {
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> NetVars<'t> {
    pub(crate) fn new(params: &RegressorParams, tape: &'t Tape, trainable: bool) -> Self {
        let mut vars = Vec::with_capacity(params.tensors.len());
        let mut index = HashMap::new();
        for (i, t) in params.tensors.iter().enumerate() {
            let v = if trainable {
                tape.param(t.data.clone(), t.rows, t.cols)
            } else {
                tape.constant(t.data.clone(), t.rows, t.cols)
            };
            vars.push(v);
            index.insert(t.name.clone(), i);
        }
        Self { vars, index }
    }

    fn get(&self, name: &str) -> Var<'t> {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("network has no tensor {name}"))]
    }

    pub(crate) fn all(&self) -> &[Var<'t>] {
        &self.vars
    }

    fn dense(&self, layer: &str, x: Var<'t>) -> Var<'t> {
        x.matmul(self.get(&format!("{layer}.w"))).add_row(self.get(&format!("{layer}.b")))
    }

    /// Kernel-3 convolution over the frame axis with zero padding.
    fn temporal_conv(&self, layer: &str, x: Var<'t>) -> Var<'t> {
        let (t, d) = x.shape();
        let tape = x.tape();
        let w = self.get(&format!("{layer}.w"));
        let shift = |lag: isize| {
            let mut m = vec![0.0; t * t];
            for r in 0..t {
                let c = r as isize + lag;
                if c >= 0 && (c as usize) < t {
                    m[r * t + c as usize] = 1.0;
                }
            }
            tape.constant(m, t, t)
        };
        let prev = shift(-1).matmul(x).matmul(w.rows_range(0, d));
        let here = x.matmul(w.rows_range(d, d));
        let next = shift(1).matmul(x).matmul(w.rows_range(2 * d, d));
        (prev + here + next).add_row(self.get(&format!("{layer}.b")))
    }

    /// Group normalization over (channels in group) x frames.
    fn group_norm(&self, layer: &str, x: Var<'t>) -> Var<'t> {
        let (t, d) = x.shape();
        let tape = x.tape();
        let size = d / GROUP_NORM_GROUPS;
        let mut avg = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                if i / size == j / size {
                    avg[i * d + j] = 1.0 / (size * t) as f64;
                }
            }
        }
        let avg = tape.constant(avg, d, d);
        let ones_row = tape.constant(vec![1.0; t], 1, t);
        let ones_col = tape.constant(vec![1.0; t], t, 1);
        let mean = ones_row.matmul(x).matmul(avg);
        let centered = x - ones_col.matmul(mean);
        let var = ones_row.matmul(centered.square()).matmul(avg);
        let inv = var.offset(1e-5).powf(-0.5);
        let gamma = self.get(&format!("{layer}.g"));
        (centered * ones_col.matmul(inv * gamma)).add_row(self.get(&format!("{layer}.b")))
    }

    /// Per-frame dense encoder followed by the residual temporal block.
    fn encoder(&self, prefix: &str, x: Var<'t>, group_norm: bool) -> Var<'t> {
        let mut h = x;
        for k in 0..3 {
            h = self.dense(&format!("{prefix}enc{k}"), h).relu();
        }
        let mut y = self.temporal_conv(&format!("{prefix}conv1"), h);
        if group_norm {
            y = self.group_norm(&format!("{prefix}gn1"), y);
        }
        y = self.temporal_conv(&format!("{prefix}conv2"), y.relu());
        if group_norm {
            y = self.group_norm(&format!("{prefix}gn2"), y);
        }
        (h + y).relu()
    }

    fn psi(&self, feat: Var<'t>, beta: Var<'t>, cam: Var<'t>) -> (Var<'t>, Var<'t>) {
        let s = beta.cols();
        let tape = feat.tape();
        let out = self.dense("psi1", self.dense("psi0", tape.concat_cols(&[feat, beta, cam])).relu());
        (out.slice_cols(0, s), out.slice_cols(s, 3))
    }

    fn phi(&self, feat: Var<'t>, theta: Var<'t>) -> Var<'t> {
        let tape = feat.tape();
        self.dense("phi1", self.dense("phi0", tape.concat_cols(&[feat, theta])).relu())
    }
}

fn repeat_rows<'t>(tape: &'t Tape, row: &[f64], t: usize) -> Var<'t> {
    let data: Vec<f64> = (0..t).flat_map(|_| row.iter().copied()).collect();
    tape.constant(data, t, row.len())
}

/// Tape outputs of one forward pass, one row per frame.
pub(crate) struct Regressed<'t> {
    pub beta_rows: Var<'t>,
    /// `[log s, px, py]` per frame.
    pub cam: Var<'t>,
    pub theta_global: Var<'t>,
    pub joints: Var<'t>,
    /// Pose from the audio features through the shared pose head.
    pub joints_audio: Option<Var<'t>>,
}

/// Shape/camera loop on `shape_feat` and pose loop on `pose_feat`.
fn ief<'t>(
    v: &NetVars<'t>,
    params: &RegressorParams,
    shape_feat: Var<'t>,
    pose_feat: Var<'t>,
    n_iter: usize,
) -> (Var<'t>, Var<'t>, Var<'t>) {
    let tape = shape_feat.tape();
    let t = shape_feat.rows();
    let mut beta = repeat_rows(tape, &params.mean.beta, t);
    let mut cam = repeat_rows(tape, &params.mean.cam, t);
    let mut theta = repeat_rows(tape, &params.mean.theta_joints, t);
    for _ in 0..n_iter {
        let (db, dc) = v.psi(shape_feat, beta, cam);
        let dt = v.phi(pose_feat, theta);
        beta = beta + db;
        cam = cam + dc;
        theta = theta + dt;
    }
    (beta, cam, theta)
}

fn pose_loop<'t>(v: &NetVars<'t>, params: &RegressorParams, feat: Var<'t>, n_iter: usize) -> Var<'t> {
    let mut theta = repeat_rows(feat.tape(), &params.mean.theta_joints, feat.rows());
    for _ in 0..n_iter {
        theta = theta + v.phi(feat, theta);
    }
    theta
}

/// Encoded per-frame features on a tape: visual, then audio when the
/// network has an audio encoder and the clip has audio.
fn encode_tape<'t>(
    tape: &'t Tape,
    v: &NetVars<'t>,
    params: &RegressorParams,
    inputs: &ClipInputs,
) -> Result<(Var<'t>, Option<Var<'t>>)> {
    let cfg = &params.config;
    if inputs.n_frames != cfg.n_frames || inputs.visual_dim != params.dims.visual_in {
        return Err(Error::Config(format!(
            "inputs are {} x {}, the network expects {} x {}",
            inputs.n_frames, inputs.visual_dim, cfg.n_frames, params.dims.visual_in
        )));
    }
    let t = inputs.n_frames;
    let visual = v.encoder("v", tape.constant(inputs.visual.clone(), t, inputs.visual_dim), cfg.group_norm);
    let audio = match (&inputs.audio, params.variant.uses_audio()) {
        (Some(a), true) => {
            if inputs.audio_dim != params.dims.audio_in {
                return Err(Error::Config(format!(
                    "audio inputs have {} values per frame, the network expects {}",
                    inputs.audio_dim, params.dims.audio_in
                )));
            }
            Some(v.encoder("a", tape.constant(a.clone(), t, inputs.audio_dim), cfg.group_norm))
        }
        _ => None,
    };
    Ok((visual, audio))
}

pub(crate) fn forward_tape<'t>(
    tape: &'t Tape,
    v: &NetVars<'t>,
    params: &RegressorParams,
    inputs: &ClipInputs,
) -> Result<Regressed<'t>> {
    let n_iter = params.config.n_iter;
    let (visual, audio) = encode_tape(tape, v, params, inputs)?;
    let pose_feat = match params.variant {
        Variant::ImageOnly | Variant::ModelFusion => visual,
        Variant::EarlyFusion => {
            let a = audio.ok_or(Error::AudioRequired)?;
            let h = v.dense("fuse0", tape.concat_cols(&[visual, a])).relu();
            v.dense("fuse1", h).relu()
        }
    };
    let (beta_rows, cam, joints) = ief(v, params, visual, pose_feat, n_iter);
    let theta_global = v.dense("glob", visual).add_row(tape.constant(params.mean.theta_global.to_vec(), 1, 3));
    let joints_audio = match (params.variant, audio) {
        (Variant::ModelFusion, Some(a)) => Some(pose_loop(v, params, a, n_iter)),
        _ => None,
    };
    Ok(Regressed { beta_rows, cam, theta_global, joints, joints_audio })
}

fn rows3(flat: &[f64]) -> Vec<[f64; 3]> {
    flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Clip pose from per-frame rows; the clip shape is the frame average.
pub(crate) fn to_pose(beta_rows: &[f64], cam: &[f64], theta_global: &[f64], joints: &[f64], t: usize) -> PoseState {
    let s = beta_rows.len() / t;
    let beta = (0..s).map(|i| (0..t).map(|f| beta_rows[f * s + i]).sum::<f64>() / t as f64).collect();
    let p = joints.len() / t;
    PoseState {
        beta,
        theta_global: rows3(theta_global),
        theta_joints: (0..t).map(|f| rows3(&joints[f * p..(f + 1) * p])).collect(),
        cam: cam.chunks(3).map(|c| WeakCam { s: c[0].exp(), px: c[1], py: c[2] }).collect(),
    }
}

/// Per-frame encoder outputs, `T x d` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedClip {
    pub n_frames: usize,
    pub d: usize,
    pub visual: Vec<f64>,
    pub audio: Option<Vec<f64>>,
}

/// Visual and (for audio variants with audio present) audio features.
pub fn encode_clip(params: &RegressorParams, clip: &ClipRecord) -> Result<EncodedClip> {
    let inputs = ClipInputs::from_clip(clip, &params.config, &params.dims)?;
    let tape = Tape::new();
    let v = NetVars::new(params, &tape, false);
    let (visual, audio) = encode_tape(&tape, &v, params, &inputs)?;
    Ok(EncodedClip { n_frames: inputs.n_frames, d: params.config.d, visual: visual.value(), audio: audio.map(|a| a.value()) })
}

/// Runs the regression loop on precomputed `T x d` features.
///
/// `shape_feat` drives the shape/camera head and the root rotation layer,
/// `pose_feat` drives the joint-pose head. The root rotation is a single
/// layer outside the loop, so it is unaffected by `n_iter`.
pub fn ief_regress(
    params: &RegressorParams,
    shape_feat: &[f64],
    pose_feat: &[f64],
    n_frames: usize,
    n_iter: usize,
) -> Result<PoseState> {
    let d = params.config.d;
    if shape_feat.len() != n_frames * d || pose_feat.len() != n_frames * d {
        return Err(Error::Config(format!("features must be {n_frames} x {d}")));
    }
    let tape = Tape::new();
    let v = NetVars::new(params, &tape, false);
    let sf = tape.constant(shape_feat.to_vec(), n_frames, d);
    let pf = tape.constant(pose_feat.to_vec(), n_frames, d);
    let (beta, cam, joints) = ief(&v, params, sf, pf, n_iter);
    let root = v.dense("glob", sf).add_row(tape.constant(params.mean.theta_global.to_vec(), 1, 3));
    Ok(to_pose(&beta.value(), &cam.value(), &root.value(), &joints.value(), n_frames))
}

impl RegressorParams {
    /// One application of the shape/camera head: residuals for `T x S`
    /// shapes and `T x 3` cameras.
    pub fn psi_step(&self, feat: &[f64], beta_rows: &[f64], cam: &[f64], n_frames: usize) -> (Vec<f64>, Vec<f64>) {
        let tape = Tape::new();
        let v = NetVars::new(self, &tape, false);
        let (d, s) = (self.config.d, self.dims.n_shape);
        let (db, dc) = v.psi(
            tape.constant(feat.to_vec(), n_frames, d),
            tape.constant(beta_rows.to_vec(), n_frames, s),
            tape.constant(cam.to_vec(), n_frames, 3),
        );
        (db.value(), dc.value())
    }

    /// One application of the pose head: residual for `T x P` joint values.
    pub fn phi_step(&self, feat: &[f64], theta: &[f64], n_frames: usize) -> Vec<f64> {
        let tape = Tape::new();
        let v = NetVars::new(self, &tape, false);
        v.phi(
            tape.constant(feat.to_vec(), n_frames, self.config.d),
            tape.constant(theta.to_vec(), n_frames, self.dims.n_pose),
        )
        .value()
    }
}

/// Network output for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// The evaluated pose: joints from the visual (or fused) path.
    pub pose: PoseState,
    /// Model fusion only, when audio was present: joints from the audio path.
    pub audio_joints: Option<Vec<Vec<[f64; 3]>>>,
}

pub fn predict(params: &RegressorParams, clip: &ClipRecord) -> Result<Prediction> {
    let inputs = ClipInputs::from_clip(clip, &params.config, &params.dims)?;
    let tape = Tape::new();
    let v = NetVars::new(params, &tape, false);
    let r = forward_tape(&tape, &v, params, &inputs)?;
    let t = inputs.n_frames;
    let (beta, cam, root) = (r.beta_rows.value(), r.cam.value(), r.theta_global.value());
    let pose = to_pose(&beta, &cam, &root, &r.joints.value(), t);
    let audio_joints = r.joints_audio.map(|a| to_pose(&beta, &cam, &root, &a.value(), t).theta_joints);
    Ok(Prediction { pose, audio_joints })
}
