//! Synthetic audio-visual gait sequences with full ground truth.
//!
//! Each leg follows a phase `psi = 2 pi f t + phi_leg + phi_0`. The upper limb
//! swings about the lateral axis as `-A_u cos(psi)`; the lower limb flexes by
//! `A_l max(0, -sin psi)^2`, so the leg is straight during stance
//! (`sin psi > 0`) and folds during swing. The hoof is lowest at
//! `psi = pi/2` (mid-stance), which is where the hoof-impact sound is placed.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClipAudio, ClipRecord, GroundTruth};
use crate::audio::{log_mel, AudioTrack, MelConfig};
use crate::body::toy::LEGS;
use crate::body::{pose_mesh, posed_joints, regress_keypoints3d, MeshModel, PoseState, WeakCam};
use crate::camera::{BBox, CameraPair, CROP_RES};
use crate::error::{Error, Result};
use crate::render::{rasterize_hard, Mask};

/// Diagonal variance added to the fitted pose covariance.
pub const POSE_PRIOR_FLOOR: f64 = 0.05 * 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gait {
    Walk,
    Trot,
    Canter,
}

impl Gait {
    pub const ALL: [Gait; 3] = [Gait::Walk, Gait::Trot, Gait::Canter];

    /// Leg phase offsets in FL, FR, BL, BR order.
    pub fn phase_offsets(self) -> [f64; 4] {
        match self {
            Gait::Walk => [PI / 2.0, 3.0 * PI / 2.0, 0.0, PI],
            Gait::Trot => [0.0, PI, PI, 0.0],
            Gait::Canter => [2.0 * PI / 3.0, 4.0 * PI / 3.0, 0.0, 2.0 * PI / 3.0],
        }
    }

    /// Stride frequency (Hz), upper swing and lower flexion amplitudes (rad).
    fn nominal(self) -> (f64, f64, f64) {
        match self {
            Gait::Walk => (0.9, 0.35, 0.6),
            Gait::Trot => (1.4, 0.45, 0.9),
            Gait::Canter => (1.8, 0.55, 1.0),
        }
    }
}

impl fmt::Display for Gait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gait::Walk => "walk",
            Gait::Trot => "trot",
            Gait::Canter => "canter",
        })
    }
}

impl FromStr for Gait {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "walk" => Ok(Gait::Walk),
            "trot" => Ok(Gait::Trot),
            "canter" => Ok(Gait::Canter),
            other => Err(Error::Config(format!("unknown gait {other:?} (walk, trot, canter)"))),
        }
    }
}

/// Randomized periodic motion of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitMotion {
    pub gait: Gait,
    pub freq: f64,
    pub amp_upper: f64,
    pub amp_lower: f64,
    pub phase0: f64,
    abduction: [f64; 4],
    neck_base: f64,
    yaw: f64,
    roll: f64,
}

impl GaitMotion {
    pub fn sample(gait: Gait, rng: &mut ChaCha8Rng) -> Self {
        let (f, au, al) = gait.nominal();
        let mut jitter = |k: f64| 1.0 + rng.random_range(-k..k);
        let freq = f * jitter(0.1);
        let amp_upper = au * jitter(0.15);
        let amp_lower = al * jitter(0.15);
        Self {
            gait,
            freq,
            amp_upper,
            amp_lower,
            phase0: rng.random_range(0.0..TAU),
            abduction: [0; 4].map(|_| rng.random_range(-0.04..0.04)),
            neck_base: rng.random_range(-0.15..0.15),
            yaw: rng.random_range(-0.35..0.35),
            roll: rng.random_range(-0.05..0.05),
        }
    }

    pub fn leg_phase(&self, leg: usize, t: f64) -> f64 {
        TAU * self.freq * t + self.gait.phase_offsets()[leg] + self.phase0
    }

    fn body_phase(&self, t: f64) -> f64 {
        TAU * self.freq * t + self.phase0
    }

    /// Rotations of the non-root joints, in joint order.
    pub fn joints_at(&self, t: f64) -> Vec<[f64; 3]> {
        let mut j = vec![[0.0; 3]; 15];
        let b = self.body_phase(t);
        j[0] = [0.0, 0.0, 0.04 * (2.0 * b).sin()];
        j[1] = [0.0, 0.0, self.neck_base + 0.08 * (2.0 * b + 0.5).sin()];
        j[2] = [0.0, 0.0, 0.06 * (2.0 * b + 1.0).sin()];
        for (leg, chain) in LEGS.iter().enumerate() {
            let psi = self.leg_phase(leg, t);
            let flex = self.amp_lower * (-psi.sin()).max(0.0).powi(2);
            let front = leg < 2;
            j[chain[0] - 1] = [self.abduction[leg], 0.0, -self.amp_upper * psi.cos()];
            j[chain[1] - 1] = [0.0, 0.0, if front { flex } else { -0.8 * flex }];
            j[chain[2] - 1] = [0.0, 0.0, 0.5 * flex - 0.15 * psi.sin().max(0.0)];
        }
        j
    }

    pub fn global_at(&self, t: f64) -> [f64; 3] {
        let b = self.body_phase(t);
        [self.roll, self.yaw + 0.05 * (TAU * 0.2 * t).sin(), 0.02 * (2.0 * b).sin()]
    }

    /// Hoof contact times in `[t0, t1)` as `(time, leg)`, sorted by time.
    pub fn contacts(&self, t0: f64, t1: f64) -> Vec<(f64, usize)> {
        let mut out = Vec::new();
        for leg in 0..4 {
            // psi(t) = pi/2 + 2 pi k
            let offset = self.gait.phase_offsets()[leg] + self.phase0;
            let k0 = ((TAU * self.freq * t0 + offset - PI / 2.0) / TAU).ceil() as i64;
            let mut k = k0;
            loop {
                let t = (PI / 2.0 + TAU * k as f64 - offset) / (TAU * self.freq);
                if t >= t1 {
                    break;
                }
                if t >= t0 {
                    out.push((t, leg));
                }
                k += 1;
            }
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }
}

/// Gaussian fit of the generator's joint rotations over all gaits, with a
/// diagonal floor of [`POSE_PRIOR_FLOOR`].
pub fn fit_pose_prior(model: &MeshModel) -> (Vec<f64>, Vec<f64>) {
    let p = (model.n_joints() - 1) * 3;
    assert_eq!(p, 45, "the gait generator drives the 16-joint toy skeleton");
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_9a17);
    let mut samples: Vec<Vec<f64>> = Vec::new();
    for gait in Gait::ALL {
        for _ in 0..60 {
            let m = GaitMotion::sample(gait, &mut rng);
            for _ in 0..20 {
                let t = rng.random_range(0.0..4.0);
                samples.push(m.joints_at(t).iter().flatten().copied().collect());
            }
        }
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; p];
    for s in &samples {
        for i in 0..p {
            mean[i] += s[i] / n;
        }
    }
    let mut cov = vec![0.0; p * p];
    for s in &samples {
        for i in 0..p {
            for j in 0..p {
                cov[i * p + j] += (s[i] - mean[i]) * (s[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    for i in 0..p {
        cov[i * p + i] += POSE_PRIOR_FLOOR;
    }
    (mean, cov)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub gait: Gait,
    pub n_frames: usize,
    pub fps: f64,
    pub seed: u64,
    pub frame_w: usize,
    pub frame_h: usize,
    pub sample_rate: u32,
    /// Render RGB crops (needed by image-feature encoders and occluder pixels).
    pub render_images: bool,
    pub audio: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            gait: Gait::Trot,
            n_frames: 5,
            fps: 25.0,
            seed: 0,
            frame_w: 1920,
            frame_h: 1080,
            sample_rate: 44100,
            render_images: true,
            audio: true,
        }
    }
}

fn template_bounds(model: &MeshModel) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in model.template() {
        for c in 0..3 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    (lo, hi)
}

/// RBJ band-pass biquad (constant 0 dB peak gain).
struct BandPass {
    b: [f64; 3],
    a: [f64; 2],
    x: [f64; 2],
    y: [f64; 2],
}

impl BandPass {
    fn new(center: f64, q: f64, sample_rate: f64) -> Self {
        let w0 = TAU * center / sample_rate;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [-2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
            x: [0.0; 2],
            y: [0.0; 2],
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.b[1] * self.x[0] + self.b[2] * self.x[1] - self.a[0] * self.y[0] - self.a[1] * self.y[1];
        self.x = [x, self.x[0]];
        self.y = [y, self.y[0]];
        y
    }
}

/// Hoof-impact sound: a decaying band-limited noise burst at every contact,
/// lower and longer for the hind legs, over faint background noise.
fn synth_audio(motion: &GaitMotion, n_samples: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let sr = sample_rate as f64;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<f64> = (0..n_samples).map(|_| 0.003 * noise.sample(rng)).collect();
    let duration = n_samples as f64 / sr;
    for (tc, leg) in motion.contacts(-0.2, duration) {
        let front = leg < 2;
        let (center, tau) = if front { (520.0, 0.018) } else { (260.0, 0.028) };
        let amp = 0.35 * rng.random_range(0.8..1.2);
        let mut filt = BandPass::new(center, 2.0, sr);
        let start = (tc * sr).round() as i64;
        let len = (6.0 * tau * sr) as i64;
        for i in 0..len {
            let s = start + i;
            let excitation = noise.sample(rng);
            let y = filt.step(excitation);
            if s >= 0 && (s as usize) < n_samples {
                out[s as usize] += amp * (-(i as f64) / (tau * sr)).exp() * y * 3.0;
            }
        }
    }
    out.into_iter().map(|x| x.clamp(-1.0, 1.0) as f32).collect()
}

fn leg_faces(model: &MeshModel) -> Vec<[usize; 3]> {
    let j = model.n_joints();
    let w = model.skin_weights();
    let is_leg = |v: usize| {
        let row = &w[v * j..(v + 1) * j];
        let leg: f64 = LEGS.iter().flatten().map(|&jj| row[jj]).sum();
        leg > 0.5
    };
    model.faces().iter().copied().filter(|f| f.iter().all(|&v| is_leg(v))).collect()
}

/// Background gradient with a ground band, the body in a per-sequence coat
/// color and the legs darker.
fn render_crop(body: &Mask, legs: &Mask, coat: [f64; 3], sky: [f64; 3], texture_seed: u64) -> RgbImage {
    let r = body.width as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed);
    RgbImage::from_fn(r, r, |x, y| {
        let i = (y * r + x) as usize;
        let v = y as f64 / r as f64;
        let grain = rng.random_range(-6.0..6.0);
        let bg = if v > 0.8 {
            [90.0 + 20.0 * v, 110.0, 60.0]
        } else {
            [sky[0] * (1.0 - 0.3 * v), sky[1] * (1.0 - 0.2 * v), sky[2]]
        };
        let m = body.values[i] as f64;
        let l = legs.values[i] as f64;
        let fg = [0, 1, 2].map(|c| coat[c] * (1.0 - 0.45 * l));
        Rgb([0, 1, 2].map(|c| (bg[c] * (1.0 - m) + fg[c] * m + grain).round().clamp(0.0, 255.0) as u8))
    })
}

/// Generates a full sequence of `cfg.n_frames` frames.
pub fn synth_sequence(model: &MeshModel, cfg: &SynthConfig) -> Result<ClipRecord> {
    if cfg.n_frames == 0 || !(cfg.fps > 0.0) {
        return Err(Error::Config("synthetic sequences need frames and a positive fps".into()));
    }
    if model.n_joints() != 16 {
        return Err(Error::Config("the gait generator drives the 16-joint toy skeleton".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let motion = GaitMotion::sample(cfg.gait, &mut rng);
    let normal = Normal::new(0.0, 0.5).expect("valid normal");
    let beta: Vec<f64> = (0..model.n_shape()).map(|_| Distribution::<f64>::sample(&normal, &mut rng).clamp(-1.5, 1.5)).collect();

    let (lo, hi) = template_bounds(model);
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let s0 = 1.5 / extent * rng.random_range(0.9..1.05);
    let (px0, py0) = (-0.5 * (lo[0] + hi[0]), -0.5 * (lo[1] + hi[1]));
    let (fw, fh) = (cfg.frame_w as f64, cfg.frame_h as f64);
    let b0 = rng.random_range(0.42..0.6) * fh;
    let cam_phase: [f64; 4] = [0; 4].map(|_| rng.random_range(0.0..TAU));
    let drift = rng.random_range(0.1..0.25) * fw;
    let coat = [rng.random_range(90.0..170.0), rng.random_range(50.0..100.0), rng.random_range(20.0..60.0)];
    let sky = [rng.random_range(150.0..200.0), rng.random_range(170.0..210.0), rng.random_range(200.0..240.0)];
    let texture_seed: u64 = rng.random();

    let n = cfg.n_frames;
    let mut pose = PoseState { beta: beta.clone(), theta_global: vec![], theta_joints: vec![], cam: vec![] };
    let mut bboxes = Vec::with_capacity(n);
    for f in 0..n {
        let t = f as f64 / cfg.fps;
        pose.theta_global.push(motion.global_at(t));
        pose.theta_joints.push(motion.joints_at(t));
        pose.cam.push(WeakCam {
            s: s0 * (1.0 + 0.03 * (TAU * 0.3 * t + cam_phase[0]).sin()),
            px: px0 + 0.03 * (TAU * 0.4 * t + cam_phase[1]).sin(),
            py: py0 + 0.03 * (TAU * 0.5 * t + cam_phase[2]).sin(),
        });
        bboxes.push(BBox::new(
            0.5 * fw + drift * (TAU * 0.05 * t + cam_phase[3]).sin(),
            0.5 * fh + 0.04 * fh * (TAU * 0.07 * t + cam_phase[3]).cos(),
            b0 * (1.0 + 0.05 * (TAU * 0.11 * t + cam_phase[0]).sin()),
            fw,
            fh,
        )?);
    }
    pose.validate(model)?;
    let cams = CameraPair::from_weak(&pose.cam, &bboxes)?;
    let legs = leg_faces(model);

    let mut keypoints = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut crops = Vec::with_capacity(n);
    let mut joints3d = Vec::with_capacity(n);
    let mut keypoints3d = Vec::with_capacity(n);
    for f in 0..n {
        let verts = pose_mesh(model, &beta, pose.theta_global[f], &pose.theta_joints[f])?;
        let kp3 = regress_keypoints3d(&verts, model)?;
        keypoints.push(cams.project_full(f, &kp3)?);
        joints3d.push(posed_joints(model, &beta, pose.theta_global[f], &pose.theta_joints[f])?);
        keypoints3d.push(kp3);
        let body = rasterize_hard(&verts, model.faces(), &cams, f, CROP_RES)?;
        if cfg.render_images {
            let leg_mask = rasterize_hard(&verts, &legs, &cams, f, CROP_RES)?;
            crops.push(Some(Arc::new(render_crop(&body, &leg_mask, coat, sky, texture_seed.wrapping_add(f as u64)))));
        } else {
            crops.push(None);
        }
        masks.push(Some(Arc::new(body)));
    }

    let audio = if cfg.audio {
        let mel = MelConfig::default();
        let n_samples = (n as f64 / cfg.fps * cfg.sample_rate as f64).ceil() as usize + mel.n_fft;
        let samples = synth_audio(&motion, n_samples, cfg.sample_rate, &mut rng);
        let track = AudioTrack::new(samples, cfg.sample_rate)?;
        let spectrogram = log_mel(&track, &mel)?;
        Some(ClipAudio { track: Arc::new(track), spectrogram: Arc::new(spectrogram), t0: 0 })
    } else {
        None
    };

    let k = model.n_keypoints();
    let clip = ClipRecord {
        id: format!("{}-s{}", cfg.gait, cfg.seed),
        start: 0,
        fps: cfg.fps,
        bboxes,
        keypoints,
        conf: vec![vec![1.0; k]; n],
        masks,
        sil_valid: vec![true; n],
        crops,
        audio,
        gt: Some(GroundTruth { pose, joints3d, keypoints3d }),
    };
    clip.validate()?;
    Ok(clip)
}

/// A `t`-frame synthetic clip with audio and rendered crops.
pub fn synth_gait(model: &MeshModel, gait: Gait, t: usize, fps: f64, seed: u64) -> Result<ClipRecord> {
    synth_sequence(model, &SynthConfig { gait, n_frames: t, fps, seed, ..Default::default() })
}

/// The motion used by [`synth_sequence`] for this configuration.
pub fn motion_for(cfg: &SynthConfig) -> GaitMotion {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    GaitMotion::sample(cfg.gait, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::stft_power;
    use crate::body::toy::toy_quadruped;
    use crate::body::pose_state_keypoints;

    #[test]
    fn trot_pairs_diagonal_legs() {
        let off = Gait::Trot.phase_offsets();
        assert_eq!(off[0], off[3]);
        assert_eq!(off[1], off[2]);
        let m = motion_for(&SynthConfig { gait: Gait::Trot, seed: 3, ..Default::default() });
        let c = m.contacts(0.0, 3.0);
        let times = |leg| c.iter().filter(|x| x.1 == leg).map(|x| x.0).collect::<Vec<_>>();
        assert_eq!(times(0), times(3));
        assert_eq!(times(1), times(2));
        for (a, b) in times(0).iter().zip(times(1).iter()) {
            let half = 0.5 / m.freq;
            assert!(((b - a).abs() - half).abs() < 1e-9);
        }
    }

    #[test]
    fn stored_keypoints_match_reprojection() {
        let model = toy_quadruped();
        let clip = synth_gait(&model, Gait::Walk, 5, 25.0, 11).unwrap();
        let gt = clip.gt.as_ref().unwrap();
        let cams = CameraPair::from_weak(&gt.pose.cam, &clip.bboxes).unwrap();
        let kp3 = pose_state_keypoints(&model, &gt.pose).unwrap();
        for f in 0..5 {
            let proj = cams.project_full(f, &kp3[f]).unwrap();
            for (a, b) in proj.iter().zip(&clip.keypoints[f]) {
                assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn body_is_inside_crop_and_frame() {
        let model = toy_quadruped();
        for gait in Gait::ALL {
            let clip = synth_sequence(&model, &SynthConfig { gait, n_frames: 30, seed: 5, render_images: false, ..Default::default() }).unwrap();
            for (f, kps) in clip.keypoints.iter().enumerate() {
                let bb = clip.bboxes[f].corners();
                for p in kps {
                    assert!(p[0] > bb[0] && p[0] < bb[2] && p[1] > bb[1] && p[1] < bb[3], "{gait} frame {f}: {p:?} {bb:?}");
                }
                let m = clip.masks[f].as_ref().unwrap();
                let edge: f64 = (0..224).map(|i| m.get(i, 0) + m.get(0, i) + m.get(i, 223) + m.get(223, i)).map(f64::from).sum();
                assert_eq!(edge, 0.0);
                assert!(m.sum() > 2000.0);
            }
        }
    }

    #[test]
    fn contacts_are_hoof_height_minima() {
        let model = toy_quadruped();
        let cfg = SynthConfig { gait: Gait::Canter, seed: 9, ..Default::default() };
        let m = motion_for(&cfg);
        let hoof = model.keypoints().iter().position(|k| k.name == "fl_hoof").unwrap();
        let height = |t: f64| {
            let v = pose_mesh(&model, &[0.0; 4], [0.0; 3], &m.joints_at(t)).unwrap();
            regress_keypoints3d(&v, &model).unwrap()[hoof][1]
        };
        for (tc, leg) in m.contacts(0.1, 2.0) {
            if leg != 0 {
                continue;
            }
            // y points down: the lowest hoof has the largest y
            let lowest = (-100..=100)
                .map(|i| tc + i as f64 * 1e-3)
                .max_by(|a, b| height(*a).total_cmp(&height(*b)))
                .unwrap();
            // body sway shifts the minimum slightly; allow 3% of a stride
            assert!((lowest - tc).abs() <= 0.03 / m.freq, "contact at {tc}, lowest at {lowest}");
        }
    }

    #[test]
    fn audio_onsets_follow_contacts() {
        let model = toy_quadruped();
        let cfg = SynthConfig { gait: Gait::Walk, n_frames: 50, seed: 2, render_images: false, ..Default::default() };
        let clip = synth_sequence(&model, &cfg).unwrap();
        let audio = clip.audio.as_ref().unwrap();
        let x: Vec<f64> = audio.track.samples.iter().map(|&s| s as f64).collect();
        let hop = 441;
        let energy: Vec<f64> = stft_power(&x, 441, hop).iter().map(|r| r.iter().sum()).collect();
        let m = motion_for(&cfg);
        let duration = cfg.n_frames as f64 / cfg.fps;
        for (tc, _) in m.contacts(0.05, duration - 0.1) {
            let frame = (tc * 44100.0 / hop as f64).floor() as usize;
            // the analysis window starting one hop later is fully inside the burst
            assert!(energy[frame + 1] > 20.0 * energy[frame - 2], "contact at {tc}");
        }
    }

    #[test]
    fn same_seed_same_clip() {
        let model = toy_quadruped();
        let a = synth_gait(&model, Gait::Trot, 5, 25.0, 77).unwrap();
        let b = synth_gait(&model, Gait::Trot, 5, 25.0, 77).unwrap();
        assert_eq!(a, b);
        let c = synth_gait(&model, Gait::Trot, 5, 25.0, 78).unwrap();
        assert_ne!(a.keypoints, c.keypoints);
    }

    #[test]
    fn pose_prior_is_positive_definite() {
        let model = toy_quadruped();
        assert!(model.pose_precision().is_some());
        assert_eq!(model.pose_prior_mean().len(), 45);
    }
}
