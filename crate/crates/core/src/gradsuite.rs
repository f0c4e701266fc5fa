//! Central-difference checks over every differentiable operation, on seeded
//! random configurations. Shared by the `gradcheck` command and the tests.

use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::body::toy::toy_quadruped;
use crate::body::{pose_mesh_tape, MeshModel};
use crate::camera::project_points_tape;
use crate::data::{synth_gait, Gait};
use crate::diffopt::fit::{FitConfig, Problem};
use crate::diffopt::{check_gradient, grad, Tape, Var};
use crate::error::Result;
use crate::fusion::net::{forward_tape, NetVars};
use crate::fusion::{ClipInputs, Dims, EncoderConfig, MeanParams, RegressorParams, Variant};
use crate::losses::{keypoint_loss_tape, mahalanobis_tape, silhouette_loss_tape, smoothness_loss_tape, LossWeights};
use crate::render::rasterize_soft_tape;

/// Relative tolerance for smooth operations.
pub const TOL: f64 = 1e-4;
/// Relative tolerance for the soft rasterizer.
pub const RASTER_TOL: f64 = 1e-3;
const STEP: f64 = 1e-5;
/// Fallback step for configurations that fail at [`STEP`]. ReLU and
/// smooth-L1 kinks lying within one step of the evaluation point spoil the
/// central difference; such errors shrink with the step, true gradient bugs
/// do not.
const KINK_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub op: &'static str,
    pub configs: usize,
    pub failed: usize,
    /// Largest relative error over the accepted checks.
    pub max_rel_err: f64,
    pub tol: f64,
    /// Configurations that failed at the default step and passed at the
    /// smaller one.
    pub kink_retries: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.failed == 0
    }
}

fn normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    Distribution::<f64>::sample(&Normal::new(0.0, sd).expect("valid sd"), rng)
}

fn randn(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| normal(rng, sd)).collect()
}

/// Weighted sum `<w, x>` reducing any tape value to a scalar.
fn project<'t>(x: Var<'t>, w: &[f64]) -> Var<'t> {
    let (r, c) = x.shape();
    (x * x.tape().constant(w.to_vec(), r, c)).sum()
}

type Program = Box<dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)>>;

/// One random configuration: the program and the point to check it at.
type Case = (Program, Vec<f64>);

fn case_pose_mesh(model: &MeshModel, rng: &mut ChaCha8Rng) -> Case {
    let (s, j) = (model.n_shape(), model.n_joints());
    let mut x = randn(rng, s, 0.5);
    x.extend(randn(rng, 3 * j, 0.4));
    let w = randn(rng, 3 * model.n_vertices(), 1.0);
    let m = model.clone();
    let f = move |p: &[f64]| {
        grad(p, |tape, v| {
            let beta = v.rows_range(0, s);
            let rot = v.rows_range(s, 3 * j).reshape(j, 3);
            Ok(project(pose_mesh_tape(&m, tape, beta, rot, None), &w))
        })
    };
    (Box::new(f), x)
}

fn case_project(rng: &mut ChaCha8Rng) -> Case {
    let n = 5;
    let mut x = randn(rng, 3 * n, 1.0);
    x.extend([normal(rng, 0.3), normal(rng, 0.3), rng.random_range(20.0..60.0)]);
    let focal = rng.random_range(500.0..5000.0);
    let principal = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
    let w = randn(rng, 2 * n, 1.0);
    let f = move |p: &[f64]| {
        grad(p, |_, v| {
            let pts = v.rows_range(0, 3 * n).reshape(n, 3);
            let t = v.rows_range(3 * n, 3).reshape(1, 3);
            Ok(project(project_points_tape(pts, focal, t, principal)?, &w))
        })
    };
    (Box::new(f), x)
}

fn case_keypoint(rng: &mut ChaCha8Rng) -> Case {
    let k = 17;
    let gt: Vec<f64> = (0..2 * k).map(|_| rng.random_range(0.0..224.0)).collect();
    let x: Vec<f64> = gt.iter().map(|g| g + normal(rng, 30.0)).collect();
    let conf: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
    let sigma = rng.random_range(20.0..80.0);
    let f = move |p: &[f64]| grad(p, |_, v| keypoint_loss_tape(v.reshape(k, 2), &gt, &conf, sigma));
    (Box::new(f), x)
}

fn case_silhouette(rng: &mut ChaCha8Rng) -> Case {
    let res = 8;
    let gt: Vec<f32> = (0..res * res).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
    let mask = crate::render::Mask::from_values(res, res, gt).expect("square mask");
    let x: Vec<f64> = (0..res * res).map(|_| rng.random_range(0.05..0.95)).collect();
    let f = move |p: &[f64]| grad(p, |_, v| silhouette_loss_tape(v.reshape(1, res * res), &mask));
    (Box::new(f), x)
}

fn case_smoothness(rng: &mut ChaCha8Rng) -> Case {
    let (t, d) = (rng.random_range(3..8usize), rng.random_range(1..7usize));
    let x = randn(rng, t * d, 1.0);
    let f = move |p: &[f64]| grad(p, |_, v| smoothness_loss_tape(v.reshape(t, d), t));
    (Box::new(f), x)
}

fn case_prior(model: &MeshModel, rng: &mut ChaCha8Rng) -> Case {
    let (s, p) = (model.n_shape(), 3 * (model.n_joints() - 1));
    let mut x = randn(rng, s, 1.0);
    x.extend(model.pose_prior_mean().iter().map(|m| m + normal(rng, 0.2)));
    let (wb, wt) = (rng.random_range(1.0..100.0), rng.random_range(0.001..0.1));
    let sp = model.shape_precision().expect("toy shape prior").to_vec();
    let pp = model.pose_precision().expect("toy pose prior").to_vec();
    let (sm, pm) = (model.shape_prior_mean().to_vec(), model.pose_prior_mean().to_vec());
    let f = move |q: &[f64]| {
        grad(q, |_, v| {
            let b = mahalanobis_tape(v.rows_range(0, s).t(), &sm, &sp)?;
            let t = mahalanobis_tape(v.rows_range(s, p).t(), &pm, &pp)?;
            Ok(b.scale(wb) + t.scale(wt))
        })
    };
    (Box::new(f), x)
}

fn case_raster(rng: &mut ChaCha8Rng) -> Case {
    let res = 16;
    let faces = Arc::new(vec![[0, 1, 2], [1, 3, 2]]);
    let c = [rng.random_range(5.0..11.0), rng.random_range(5.0..11.0)];
    let mut x = Vec::new();
    for corner in [[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]] {
        x.push(c[0] + 4.0 * corner[0] + normal(rng, 1.0));
        x.push(c[1] + 4.0 * corner[1] + normal(rng, 1.0));
    }
    let sigma = rng.random_range(0.5..2.0);
    let w = randn(rng, res * res, 1.0);
    let f = move |p: &[f64]| grad(p, |_, v| Ok(project(rasterize_soft_tape(v.reshape(4, 2), faces.clone(), res, sigma), &w)));
    (Box::new(f), x)
}

/// The whole network output (encoders, fusion layers and the regression loop)
/// as a function of all weights.
fn case_network(model: &MeshModel, rng: &mut ChaCha8Rng, variant: Variant, group_norm: bool) -> Case {
    let cfg = EncoderConfig { hidden: 32, d: 32, head_hidden: 32, group_norm, ..Default::default() };
    let dims = Dims::new(model, &cfg);
    let seed: u64 = rng.random();
    let clip = synth_gait(model, Gait::ALL[(seed % 3) as usize], cfg.n_frames, 25.0, seed % 1000).expect("synthetic clip");
    let inputs = ClipInputs::from_clip(&clip, &cfg, &dims).expect("clip matches encoder");
    let mean = MeanParams::from_model(model, [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]);
    let mut params = RegressorParams::init(variant, cfg, dims, mean, seed).expect("valid network");
    // Heads start near zero; scale them up so every layer carries gradient.
    for name in ["psi1.w", "phi1.w", "glob.w"] {
        if let Some(t) = params.tensor_mut(name) {
            t.data.iter_mut().for_each(|x| *x *= 30.0);
        }
    }
    let x = params.flat();
    let w = randn(rng, 4096, 1.0);
    let f = move |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut params = params.clone();
        params.set_flat(p)?;
        let tape = Tape::new();
        let v = NetVars::new(&params, &tape, true);
        let r = forward_tape(&tape, &v, &params, &inputs)?;
        let mut outs = vec![r.beta_rows, r.cam, r.theta_global, r.joints];
        outs.extend(r.joints_audio);
        let mut total = tape.scalar(0.0);
        let mut off = 0;
        for o in outs {
            let n = o.rows() * o.cols();
            total = total + project(o, &w[off..off + n]);
            off += n;
        }
        let g = tape.backward(total)?;
        Ok((total.item(), v.all().iter().flat_map(|&x| g.wrt(x)).collect()))
    };
    (Box::new(f), x)
}

fn case_fit_objective(model: &MeshModel, rng: &mut ChaCha8Rng) -> Case {
    let seed: u64 = rng.random_range(0..1000);
    let clip = synth_gait(model, Gait::ALL[(seed % 3) as usize], 5, 25.0, seed).expect("synthetic clip");
    let mut pose = clip.gt.as_ref().expect("synthetic ground truth").pose.clone();
    for w in pose.theta_joints.iter_mut().flatten() {
        for x in w.iter_mut() {
            *x += normal(rng, 0.1);
        }
    }
    let cfg = FitConfig { weights: LossWeights { w_sil: 0.0, ..Default::default() }, ..Default::default() };
    let (m, c) = (model.clone(), clip.clone());
    let x = Problem::new(&c, &m, cfg).expect("valid problem").pack(&pose);
    let f = move |p: &[f64]| {
        let problem = Problem::new(&c, &m, cfg)?;
        let (r, g) = problem.eval(p, true)?;
        Ok((r.total, g.expect("gradient requested")))
    };
    (Box::new(f), x)
}

/// Operations checked by [`run_suite`], in report order.
pub const OPS: [&str; 12] = [
    "pose_mesh",
    "project_points",
    "keypoint_loss",
    "silhouette_loss",
    "smoothness_loss",
    "prior_loss",
    "soft_rasterizer",
    "network_image",
    "network_early",
    "network_model",
    "network_group_norm",
    "fit_objective",
];

/// Checks each of [`OPS`] on `n_configs` random configurations.
pub fn run_suite(n_configs: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let model = toy_quadruped();
    let mut out = Vec::with_capacity(OPS.len());
    for (i, &op) in OPS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64));
        let tol = if op == "soft_rasterizer" { RASTER_TOL } else { TOL };
        let mut entry = SuiteEntry { op, configs: n_configs, failed: 0, max_rel_err: 0.0, tol, kink_retries: 0 };
        for _ in 0..n_configs {
            let (f, x) = match op {
                "pose_mesh" => case_pose_mesh(&model, &mut rng),
                "project_points" => case_project(&mut rng),
                "keypoint_loss" => case_keypoint(&mut rng),
                "silhouette_loss" => case_silhouette(&mut rng),
                "smoothness_loss" => case_smoothness(&mut rng),
                "prior_loss" => case_prior(&model, &mut rng),
                "soft_rasterizer" => case_raster(&mut rng),
                "network_image" => case_network(&model, &mut rng, Variant::ImageOnly, false),
                "network_early" => case_network(&model, &mut rng, Variant::EarlyFusion, false),
                "network_model" => case_network(&model, &mut rng, Variant::ModelFusion, false),
                "network_group_norm" => case_network(&model, &mut rng, Variant::ModelFusion, true),
                _ => case_fit_objective(&model, &mut rng),
            };
            let mut rep = check_gradient(&f, &x, STEP, tol)?;
            if !rep.passed {
                let retry = check_gradient(&f, &x, KINK_STEP, tol)?;
                if retry.passed {
                    entry.kink_retries += 1;
                    rep = retry;
                } else {
                    entry.failed += 1;
                }
            }
            entry.max_rel_err = entry.max_rel_err.max(rep.max_rel_err);
        }
        out.push(entry);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operation_passes_on_a_few_configurations() {
        let suite = run_suite(2, 7).unwrap();
        assert_eq!(suite.len(), OPS.len());
        for e in &suite {
            assert!(e.passed(), "{e:?}");
        }
    }
}
