//! Fit the body model to a synthetic clip from the yaw-grid initialization.

use quadfit::body::pose_state_keypoints;
use quadfit::body::toy::toy_quadruped;
use quadfit::data::{synth_gait, Gait};
use quadfit::diffopt::{fit_sequence, initialize_pose, FitConfig};
use quadfit::metrics::p_mpjpe;

fn main() -> quadfit::Result<()> {
    let model = toy_quadruped();
    let clip = synth_gait(&model, Gait::Trot, 5, 25.0, 12)?;
    let gt = clip.gt.as_ref().expect("ground truth");
    let init = initialize_pose(&clip, &model)?;
    let fit = fit_sequence(&clip, &model, &init, &FitConfig::default())?;
    println!("loss {:.5} -> {:.5} in {} steps", fit.initial().total, fit.last().total, fit.trace.len() - 1);
    let err = |pose| -> quadfit::Result<f64> {
        Ok(p_mpjpe(&pose_state_keypoints(&model, pose)?, &gt.keypoints3d, true)?.mean / model.body_length())
    };
    println!("P-MPJPE / body length: init {:.3}, fitted {:.3}", err(&init)?, err(&fit.pose)?);
    Ok(())
}
