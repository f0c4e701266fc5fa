//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{Rotation3, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use quadfit::audio::{log_mel, AudioTrack, MelConfig};
use quadfit::body::toy::toy_quadruped;
use quadfit::body::{pose_state_keypoints, MeshModel, WeakCam};
use quadfit::camera::{crop_translation, focal_full, BBox, CameraPair, CROP_RES};
use quadfit::cli::Manifest;
use quadfit::data::{apply_occluder, fuse_bbox, keypoint_noise, synth_gait, ClipRecord, Gait, OccluderSpec};
use quadfit::diffopt::{fit_sequence, FitConfig};
use quadfit::fusion::{evaluate_pmpjpe, train, TrainConfig, Variant};
use quadfit::gradsuite;
use quadfit::metrics::{iou_masks, p_mpjpe, procrustes_align, wilcoxon_signed_rank};
use quadfit::render::Mask;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn run(id: usize, name: &str, limit: Duration, check: impl Fn() -> Outcome) -> bool {
    let start = Instant::now();
    let o = check();
    let took = start.elapsed();
    let in_time = took <= limit;
    let ok = o.passed && in_time;
    let timing = if in_time { format!("{took:.2?}") } else { format!("{took:.2?}, over the {limit:?} limit") };
    println!("[{}] {id}. {name}: {} ({timing})", if ok { "PASS" } else { "FAIL" }, o.detail);
    ok
}

fn gradient_suite() -> Outcome {
    let entries = match gradsuite::run_suite(20, 0) {
        Ok(e) => e,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.op).collect();
    let worst = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    let configs = entries.iter().map(|e| e.configs).min().unwrap_or(0);
    let retries: usize = entries.iter().map(|e| e.kink_retries).sum();
    outcome(
        failed.is_empty() && configs >= 20,
        format!(
            "{} ops x {configs} configs, max rel err {worst:.2e}, {retries} kink retries, failing {failed:?}",
            entries.len()
        ),
    )
}

fn camera_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut off_plane) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let b = BBox::new(
            rng.random_range(200.0..1700.0),
            rng.random_range(150.0..900.0),
            rng.random_range(50.0..600.0),
            1920.0,
            1080.0,
        )
        .unwrap();
        let cam = WeakCam { s: rng.random_range(0.5..2.0), px: rng.random_range(-1.0..1.0), py: rng.random_range(-1.0..1.0) };
        let cams = CameraPair::from_weak(&[cam], &[b]).unwrap();
        let (x, y) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let z: f64 = rng.random_range(-0.5..0.5);
        for (pt, acc) in [([x, y, 0.0], &mut worst), ([x, y, z], &mut off_plane)] {
            let c = cams.project_crop(0, &[pt]).unwrap()[0];
            let via = b.crop_to_full(c[0], c[1], CROP_RES as f64);
            let direct = cams.project_full(0, &[pt]).unwrap()[0];
            *acc = acc.max((via[0] - direct[0]).hypot(via[1] - direct[1]));
        }
    }
    outcome(
        worst < 1e-3,
        format!("max gap {worst:.2e} px on the model plane (off-plane points up to {off_plane:.2} px)"),
    )
}

fn spot_values() -> Outcome {
    let f = focal_full(3840.0, 2160.0).unwrap();
    let t = crop_translation(1.0, 0.0, 0.0).unwrap();
    let focal_ok = (f - 4405.81).abs() <= 0.01;
    let trans_ok = t[0] == 0.0 && t[1] == 0.0 && (t[2] - 44.642857).abs() <= 1e-5;

    let sq = |cx, cy, b| BBox::new(cx, cy, b, 1920.0, 1080.0).unwrap();
    // disjoint: keypoint box
    let disjoint = fuse_bbox(&sq(300.0, 300.0, 100.0), &sq(900.0, 300.0, 100.0)).unwrap();
    let disjoint_ok = !disjoint.uses_silhouette && disjoint.bbox == sq(300.0, 300.0, 100.0);
    // overlapping, keypoint box three times larger than the silhouette box
    let kp = sq(500.0, 500.0, 300.0_f64.sqrt() * 10.0);
    let large = fuse_bbox(&kp, &sq(500.0, 500.0, 100.0)).unwrap();
    let large_ok = !large.uses_silhouette && large.bbox == kp;
    // nested boxes with area ratio 1 and below the threshold: union
    let inner = sq(500.0, 500.0, 100.0);
    let outer = sq(510.0, 495.0, 160.0);
    let same = fuse_bbox(&inner, &inner).unwrap();
    let nested = fuse_bbox(&inner, &outer).unwrap();
    let below = fuse_bbox(&outer, &inner).unwrap();
    let close = |a: &BBox, b: &BBox| a.corners().iter().zip(b.corners()).all(|(p, q)| (p - q).abs() < 1e-9);
    let union_ok = [(same, inner), (nested, outer), (below, outer)]
        .iter()
        .all(|(f, want)| f.uses_silhouette && close(&f.bbox, want));
    outcome(
        focal_ok && trans_ok && disjoint_ok && large_ok && union_ok,
        format!(
            "focal {f:.4}, crop depth {:.6}, fuse disjoint/ratio 3/union {disjoint_ok}/{large_ok}/{union_ok}",
            t[2]
        ),
    )
}

/// Two-sided p by listing every sign assignment of the (average) ranks.
fn wilcoxon_by_enumeration(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = d.len();
    let ranks: Vec<f64> = d
        .iter()
        .map(|x| {
            let below = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let tied = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect();
    let w: f64 = ranks.iter().zip(&d).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let (mut lo, mut hi) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s <= w + 1e-9 {
            lo += 1;
        }
        if s >= w - 1e-9 {
            hi += 1;
        }
    }
    (w, (2.0 * lo.min(hi) as f64 / (1u64 << n) as f64).min(1.0))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut procrustes_err = 0.0f64;
    for _ in 0..200 {
        let x: Vec<[f64; 3]> = (0..10).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect();
        let axis = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let r = Rotation3::new(axis);
        let s = rng.random_range(0.2..5.0);
        let t = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let y: Vec<[f64; 3]> = x.iter().map(|p| (s * (r * Vector3::from(*p)) + t).into()).collect();
        let fit = procrustes_align(&x, &y, true).unwrap();
        let mut e = (fit.scale - s).abs() + (fit.rotation - r.matrix()).abs().max() + (fit.translation - t).abs().max();
        for (p, q) in fit.aligned.iter().zip(&y) {
            e = e.max((0..3).map(|k| (p[k] - q[k]).abs()).fold(0.0, f64::max));
        }
        procrustes_err = procrustes_err.max(e);
    }

    let mut wilcoxon_err = 0.0f64;
    for trial in 0..300 {
        let n = 5 + trial % 8;
        // integer-valued samples in every other trial to exercise tied ranks
        let draw = |rng: &mut ChaCha8Rng| {
            let v: f64 = rng.random_range(-5.0..5.0);
            if trial % 2 == 0 { v.round() } else { v }
        };
        let a: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let b: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let Ok(got) = wilcoxon_signed_rank(&a, &b) else { continue };
        if !got.exact {
            wilcoxon_err = f64::INFINITY;
            continue;
        }
        let (w, p) = wilcoxon_by_enumeration(&a, &b);
        wilcoxon_err = wilcoxon_err.max((got.p_value - p).abs()).max((got.statistic - w).abs());
    }

    let cols = |lo: usize, hi: usize| {
        Mask::from_values(6, 6, (0..36).map(|i| if (lo..hi).contains(&(i % 6)) { 1.0 } else { 0.0 }).collect()).unwrap()
    };
    let ious = [
        iou_masks(&cols(0, 4), &cols(0, 4), 0.5).unwrap(),
        iou_masks(&cols(0, 3), &cols(3, 6), 0.5).unwrap(),
        iou_masks(&cols(0, 4), &cols(2, 6), 0.5).unwrap(),
    ];
    let iou_ok = ious == [1.0, 0.0, 1.0 / 3.0];
    outcome(
        procrustes_err < 1e-8 && wilcoxon_err < 1e-12 && iou_ok,
        format!("procrustes err {procrustes_err:.1e}, wilcoxon vs enumeration {wilcoxon_err:.1e}, iou {ious:?}"),
    )
}

fn fitting_recovery(model: &MeshModel) -> Outcome {
    let limit = 0.1 * model.body_length();
    let errors: Vec<f64> = (0..20u64)
        .map(|i| {
            let clip = synth_gait(model, Gait::ALL[i as usize % 3], 5, 25.0, 100 + i).unwrap();
            let gt = clip.gt.as_ref().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(900 + i);
            let (joint, global, cam) =
                (Normal::<f64>::new(0.0, 0.2).unwrap(), Normal::<f64>::new(0.0, 0.1).unwrap(), Normal::<f64>::new(0.0, 0.05).unwrap());
            let mut init = gt.pose.clone();
            init.beta.iter_mut().for_each(|b| *b = 0.0);
            for frame in &mut init.theta_joints {
                frame.iter_mut().flatten().for_each(|w| *w += joint.sample(&mut rng));
            }
            init.theta_global.iter_mut().flatten().for_each(|w| *w += global.sample(&mut rng));
            for c in &mut init.cam {
                c.s *= (2.0 * cam.sample(&mut rng) as f64).exp();
                c.px += cam.sample(&mut rng);
                c.py += cam.sample(&mut rng);
            }
            let fit = fit_sequence(&clip, model, &init, &FitConfig::default()).unwrap();
            let pred = pose_state_keypoints(model, &fit.pose).unwrap();
            p_mpjpe(&pred, &gt.keypoints3d, true).unwrap().mean
        })
        .collect();
    let good = errors.iter().filter(|e| **e < limit).count();
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    outcome(good >= 18, format!("{good}/20 clips under {limit:.4}, worst {worst:.4}"))
}

fn fusion_ordering(model: &MeshModel) -> Outcome {
    let make = |seed: u64| -> ClipRecord {
        let clip = synth_gait(model, Gait::ALL[(seed % 3) as usize], 5, 25.0, seed).unwrap();
        keypoint_noise(&clip, 2.0, seed ^ 0xabc).unwrap()
    };
    let train_clips: Vec<ClipRecord> = (0..30).map(|i| make(1000 + i)).collect();
    let clean: Vec<ClipRecord> = (0..20).map(|i| make(5000 + i)).collect();
    let occluded: Vec<ClipRecord> = clean
        .iter()
        .enumerate()
        .map(|(i, c)| apply_occluder(c, model, &OccluderSpec::legs(77 + i as u64)).unwrap())
        .collect();
    let jobs: Vec<(Variant, u64)> = Variant::ALL.iter().flat_map(|&v| (0..5).map(move |s| (v, s))).collect();
    let results: Vec<(Variant, Vec<f64>, Vec<f64>)> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let cfg = TrainConfig { variant, seed, epochs: 300, lr: 1e-3, occlusion_prob: 0.5, ..Default::default() };
            let params = train(model, &train_clips, &cfg).unwrap().params;
            let c = evaluate_pmpjpe(&params, model, &clean).unwrap();
            let o = evaluate_pmpjpe(&params, model, &occluded).unwrap();
            (variant, c, o)
        })
        .collect();
    let pooled = |v: Variant, occ: bool| -> Vec<f64> {
        results.iter().filter(|r| r.0 == v).flat_map(|r| if occ { r.2.clone() } else { r.1.clone() }).collect()
    };
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let (img_occ, model_occ) = (pooled(Variant::ImageOnly, true), pooled(Variant::ModelFusion, true));
    let p = wilcoxon_signed_rank(&model_occ, &img_occ).map_or(1.0, |w| w.p_value);
    let clean_means: Vec<f64> = Variant::ALL.iter().map(|&v| mean(&pooled(v, false))).collect();
    let spread = clean_means.iter().cloned().fold(0.0, f64::max) / clean_means.iter().cloned().fold(f64::MAX, f64::min);
    let ordered = mean(&model_occ) < mean(&img_occ);
    outcome(
        ordered && p < 0.05 && spread <= 1.2,
        format!(
            "occluded image {:.4} vs model {:.4} (p = {p:.3}); clean {:.4}/{:.4}/{:.4}, max/min {spread:.3}",
            mean(&img_occ),
            mean(&model_occ),
            clean_means[0],
            clean_means[1],
            clean_means[2]
        ),
    )
}

/// Slaney mel scale written out independently of the library.
fn slaney_band_centers(cfg: &MelConfig) -> Vec<f64> {
    let to_mel = |f: f64| if f < 1000.0 { 3.0 * f / 200.0 } else { 15.0 + 27.0 * (f / 1000.0).ln() / 6.4f64.ln() };
    let to_hz = |m: f64| if m < 15.0 { 200.0 * m / 3.0 } else { 1000.0 * (6.4f64.ln() * (m - 15.0) / 27.0).exp() };
    let (lo, hi) = (to_mel(cfg.fmin), to_mel(cfg.fmax));
    (1..=cfg.n_mels).map(|i| to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64)).collect()
}

fn audio_invariants() -> Outcome {
    let sr = 44_100u32;
    let cfg = MelConfig::default();
    let silence = log_mel(&AudioTrack::silence(sr as usize, sr), &cfg).unwrap();
    let floor = cfg.log_floor();
    let silence_ok = silence.values.iter().all(|v| *v == floor);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let base: Vec<f32> = (0..sr as usize).map(|_| rng.random_range(-0.2f32..0.2)).collect();
    let reference = log_mel(&AudioTrack::new(base.clone(), sr).unwrap(), &cfg).unwrap();
    let mut shift_err = 0.0f64;
    for a in [0.25f32, 0.5, 3.0, 4.0] {
        let scaled = AudioTrack::new(base.iter().map(|s| s * a).collect(), sr).unwrap();
        let spec = log_mel(&scaled, &cfg).unwrap();
        for (v, r) in spec.values.iter().zip(&reference.values) {
            if r.min(*v) > floor + 16.0 {
                shift_err = shift_err.max((v - r - 2.0 * (a as f64).ln()).abs());
            }
        }
    }

    let centers = slaney_band_centers(&cfg);
    let mut misplaced = Vec::new();
    for band in 20..60 {
        let f = centers[band];
        let tone: Vec<f32> =
            (0..sr as usize / 2).map(|i| (0.5 * (2.0 * std::f64::consts::PI * f * i as f64 / sr as f64).sin()) as f32).collect();
        let spec = log_mel(&AudioTrack::new(tone, sr).unwrap(), &cfg).unwrap();
        let col = spec.column(spec.n_frames / 2);
        let peak = (0..col.len()).max_by(|&i, &j| col[i].total_cmp(&col[j])).unwrap();
        if peak != band {
            misplaced.push((band, peak));
        }
    }
    outcome(
        silence_ok && shift_err < 1e-5 && misplaced.is_empty(),
        format!("silence at floor {silence_ok}, max shift err {shift_err:.1e}, tones misplaced {misplaced:?}"),
    )
}

fn quadfit(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_quadfit"))
        .args(args)
        .env("QUADFIT_THREADS", "2")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn manifest_artifacts(dir: &Path) -> Vec<(String, String)> {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    let m: Manifest = serde_json::from_str(&text).unwrap();
    // nested manifests record output paths, which differ between the two runs
    m.artifacts.into_iter().filter(|a| !a.path.ends_with("manifest.json")).map(|a| (a.path, a.sha256)).collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let runs: Result<Vec<[Vec<(String, String)>; 3]>, String> = ["a", "b"]
        .iter()
        .map(|run| {
            let data = root.join(run).join("data");
            let (d, fit, net) = (data.to_str().unwrap(), root.join(run).join("fit"), root.join(run).join("net"));
            quadfit(&["synth", "--gait", "walk", "--frames", "12", "--seed", "5", "--out", d])?;
            quadfit(&["fit", d, "--iters", "25", "--out", fit.to_str().unwrap()])?;
            quadfit(&["train", d, "--variant", "model", "--seed", "0,1", "--epochs", "4", "--out", net.to_str().unwrap()])?;
            Ok([manifest_artifacts(&data), manifest_artifacts(&fit), manifest_artifacts(&net)])
        })
        .collect();
    match runs {
        Err(e) => outcome(false, e),
        Ok(r) => {
            let same: Vec<bool> = (0..3).map(|k| !r[0][k].is_empty() && r[0][k] == r[1][k]).collect();
            let files: usize = r[0].iter().map(Vec::len).sum();
            outcome(same.iter().all(|s| *s), format!("synth/fit/train identical {same:?} over {files} files"))
        }
    }
}

fn main() {
    // optional criterion numbers after `--` restrict the run
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| only.is_empty() || only.contains(&id);
    let model = toy_quadruped();
    let minute = Duration::from_secs(60);
    let checks: [(&str, Duration, Box<dyn Fn() -> Outcome + '_>); 8] = [
        ("gradient suite", 2 * minute, Box::new(gradient_suite)),
        ("camera identity", Duration::from_secs(1), Box::new(camera_identity)),
        ("formula spot values", minute, Box::new(spot_values)),
        ("metric oracles", minute, Box::new(metric_oracles)),
        ("fitting recovery", 10 * minute, Box::new(|| fitting_recovery(&model))),
        ("fusion ordering under occlusion", 30 * minute, Box::new(|| fusion_ordering(&model))),
        ("audio invariants", minute, Box::new(audio_invariants)),
        ("determinism", 10 * minute, Box::new(determinism)),
    ];
    let results: Vec<bool> = checks
        .iter()
        .enumerate()
        .filter(|(i, _)| wanted(i + 1))
        .map(|(i, (name, limit, check))| run(i + 1, name, *limit, check))
        .collect();
    let passed = results.iter().filter(|r| **r).count();
    println!("{passed}/{} acceptance criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
