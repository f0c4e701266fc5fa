//! Each loss term on a synthetic clip, at ground truth and after a perturbation.

use quadfit::body::toy::toy_quadruped;
use quadfit::data::{synth_gait, Gait};
use quadfit::diffopt::{evaluate_pose, FitConfig};
use quadfit::losses::{geman_mcclure, keypoint_loss, smoothness_loss, DEFAULT_SIGMA_GM};

fn main() -> quadfit::Result<()> {
    for x in [1.0, 10.0, 50.0, 500.0] {
        println!("rho({x}) = {:.2} with sigma {DEFAULT_SIGMA_GM}", geman_mcclure(x, DEFAULT_SIGMA_GM));
    }

    let gt = vec![vec![[10.0, 10.0], [20.0, 5.0]]];
    let pred = vec![vec![[13.0, 14.0], [20.0, 5.0]]];
    let conf = vec![vec![1.0, 0.5]];
    println!("keypoint loss {:.4}", keypoint_loss(&pred, &gt, &conf, DEFAULT_SIGMA_GM, 1.0)?);
    let line: Vec<Vec<f64>> = (0..5).map(|t| vec![t as f64, 2.0 * t as f64]).collect();
    println!("smoothness of a straight line {:.1}", smoothness_loss(&line, 5, 1.0)?);

    let model = toy_quadruped();
    let clip = synth_gait(&model, Gait::Walk, 5, 25.0, 4)?;
    let mut pose = clip.gt.as_ref().expect("ground truth").pose.clone();
    let cfg = FitConfig::default();
    println!("at ground truth: {:?}", evaluate_pose(&clip, &model, &pose, &cfg)?);
    for w in pose.theta_joints.iter_mut().flatten() {
        w[2] += 0.1;
    }
    println!("perturbed:       {:?}", evaluate_pose(&clip, &model, &pose, &cfg)?);
    Ok(())
}
