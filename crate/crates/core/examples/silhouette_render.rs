//! Soft and hard silhouettes of the posed toy mesh, written as PGM images.

use quadfit::body::toy::toy_quadruped;
use quadfit::body::pose_mesh;
use quadfit::camera::{CameraPair, CROP_RES};
use quadfit::data::{synth_gait, Gait};
use quadfit::metrics::iou_masks;
use quadfit::render::{default_sigma, rasterize_hard, rasterize_soft};

fn main() -> quadfit::Result<()> {
    let model = toy_quadruped();
    let clip = synth_gait(&model, Gait::Canter, 3, 25.0, 1)?;
    let gt = clip.gt.as_ref().expect("synthetic clips carry ground truth");
    let cams = CameraPair::from_weak(&gt.pose.cam, &clip.bboxes)?;
    let verts = pose_mesh(&model, &gt.pose.beta, gt.pose.theta_global[0], &gt.pose.theta_joints[0])?;

    let hard = rasterize_hard(&verts, model.faces(), &cams, 0, CROP_RES)?;
    let soft = rasterize_soft(&verts, model.faces(), &cams, 0, CROP_RES, default_sigma(CROP_RES))?;
    let dir = std::env::temp_dir().join("quadfit-example-render");
    std::fs::create_dir_all(&dir)?;
    hard.write_pgm(dir.join("hard.pgm"))?;
    soft.write_pgm(dir.join("soft.pgm"))?;
    println!(
        "hard area {:.0} px, soft mass {:.1}, IoU(soft > 0.5, hard) {:.4}; written to {}",
        hard.sum(),
        soft.sum(),
        iou_masks(&soft, &hard, 0.5)?,
        dir.display()
    );
    Ok(())
}
