//! Build the bundled toy quadruped, pose it, and round-trip it through a file.

use quadfit::body::toy::toy_quadruped;
use quadfit::body::{load_model, pose_mesh, posed_joints, regress_keypoints3d, save_model};

fn main() -> quadfit::Result<()> {
    let model = toy_quadruped();
    println!(
        "{} vertices, {} faces, {} joints, {} shape coefficients, {} keypoints, body length {:.3}",
        model.n_vertices(),
        model.n_faces(),
        model.n_joints(),
        model.n_shape(),
        model.n_keypoints(),
        model.body_length()
    );

    let beta = vec![0.5, -0.3, 0.0, 0.2];
    let mut joints = vec![[0.0; 3]; model.n_joints() - 1];
    let knee = model.joint_index("fl_lower").expect("toy joint") - 1;
    joints[knee] = [0.0, 0.0, 0.8];
    let verts = pose_mesh(&model, &beta, [0.0, 0.3, 0.0], &joints)?;
    let kp = regress_keypoints3d(&verts, &model)?;
    let posed = posed_joints(&model, &beta, [0.0, 0.3, 0.0], &joints)?;
    println!("first keypoint {:?}, root joint {:?}", kp[0], posed[0]);

    let dir = std::env::temp_dir().join("quadfit-example-model");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("toy.json");
    save_model(&model, &path)?;
    let back = load_model(&path)?;
    assert_eq!(back.n_vertices(), model.n_vertices());
    println!("saved and reloaded {}", path.display());
    Ok(())
}
