use crate::diffopt::{Tape, Var};

use super::MeshModel;

struct Kinematics<'t> {
    /// `J x 12` skinning transforms stored as `[R - I | t]`.
    transforms: Var<'t>,
    /// `J x 3` posed joint locations.
    joints: Var<'t>,
}

/// Rest joints as a `J x 3` tape value, linear in `beta` (`S x 1`).
fn rest_joints<'t>(model: &MeshModel, tape: &'t Tape, beta: Var<'t>) -> Var<'t> {
    let (tmpl, dirs) = model.rest_joint_tables();
    let j = model.n_joints();
    let base = tape.constant(tmpl.to_vec(), j, 3);
    let d = tape.constant(dirs.to_vec(), j * 3, model.n_shape());
    base + d.matmul(beta).reshape(j, 3)
}

fn kinematics<'t>(model: &MeshModel, tape: &'t Tape, beta: Var<'t>, rot: Var<'t>) -> Kinematics<'t> {
    let j = model.n_joints();
    assert_eq!(rot.shape(), (j, 3), "rotations must be J x 3 (root first)");
    let rest = rest_joints(model, tape, beta);
    let local = rot.rodrigues();
    let parents = model.parents();

    // Global affine maps `x -> R x + t` composed from local maps that rotate
    // about each joint's rest position. At zero rotation every translation is
    // exactly zero.
    let eye = tape.constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3, 3);
    let mut g_rot: Vec<Option<Var<'t>>> = vec![None; j];
    let mut g_t: Vec<Option<Var<'t>>> = vec![None; j];
    let mut rest_rows: Vec<Option<Var<'t>>> = vec![None; j];
    for &jj in model.kinematic_order() {
        let r = local.row(jj).reshape(3, 3);
        let pos = rest.row(jj);
        rest_rows[jj] = Some(pos);
        let local_t = pos - r.matmul(pos.t()).t();
        if parents[jj] < 0 {
            g_rot[jj] = Some(r);
            g_t[jj] = Some(local_t);
        } else {
            let p = parents[jj] as usize;
            let (pr, pt) = (g_rot[p].unwrap(), g_t[p].unwrap());
            g_rot[jj] = Some(pr.matmul(r));
            g_t[jj] = Some(pr.matmul(local_t.t()).t() + pt);
        }
    }

    // Rows hold `R - I` and `t` so skinning adds a displacement to the rest
    // point; blending weights that sum to one only up to rounding then leave
    // the identity pose untouched.
    let rows: Vec<Var<'t>> = (0..j)
        .map(|jj| tape.concat_cols(&[(g_rot[jj].unwrap() - eye).reshape(1, 9), g_t[jj].unwrap()]))
        .collect();
    let transforms = tape.concat_rows(&rows);
    let rest_all = tape.concat_rows(&rest_rows.into_iter().map(Option::unwrap).collect::<Vec<_>>());
    let joints = rest_all + transforms.row_affine(rest_all);
    Kinematics { transforms, joints }
}

fn skin_points<'t>(
    tape: &'t Tape,
    kin: &Kinematics<'t>,
    beta: Var<'t>,
    template: &[f64],
    dirs: &[f64],
    skin: &[f64],
    n_shape: usize,
    n_joints: usize,
) -> Var<'t> {
    let n = template.len() / 3;
    let base = tape.constant(template.to_vec(), n, 3);
    let shaped = if n_shape > 0 {
        let d = tape.constant(dirs.to_vec(), n * 3, n_shape);
        base + d.matmul(beta).reshape(n, 3)
    } else {
        base
    };
    let w = tape.constant(skin.to_vec(), n, n_joints);
    shaped + w.matmul(kin.transforms).row_affine(shaped)
}

/// Posed vertices (`V x 3`) on a tape.
///
/// `beta` is `S x 1`; `rot` is `J x 3` with the root (global) rotation in row
/// 0 and the remaining joints in index order. With `vertices = Some(idx)` only
/// those rows are skinned, in the given order.
pub fn pose_mesh_tape<'t>(
    model: &MeshModel,
    tape: &'t Tape,
    beta: Var<'t>,
    rot: Var<'t>,
    vertices: Option<&[usize]>,
) -> Var<'t> {
    let kin = kinematics(model, tape, beta, rot);
    let parts = model.parts();
    let (s, j) = (model.n_shape(), model.n_joints());
    match vertices {
        None => {
            let flat: Vec<f64> = parts.template.iter().flatten().copied().collect();
            skin_points(tape, &kin, beta, &flat, &parts.shape_dirs, &parts.skin_weights, s, j)
        }
        Some(idx) => {
            let (t, d, w) = gather_vertex_tables(model, idx);
            skin_points(tape, &kin, beta, &t, &d, &w, s, j)
        }
    }
}

/// Posed joint locations (`J x 3`) on a tape.
pub fn posed_joints_tape<'t>(model: &MeshModel, tape: &'t Tape, beta: Var<'t>, rot: Var<'t>) -> Var<'t> {
    kinematics(model, tape, beta, rot).joints
}

fn gather_vertex_tables(model: &MeshModel, idx: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let parts = model.parts();
    let (s, j) = (model.n_shape(), model.n_joints());
    let mut t = Vec::with_capacity(idx.len() * 3);
    let mut d = Vec::with_capacity(idx.len() * 3 * s);
    let mut w = Vec::with_capacity(idx.len() * j);
    for &vi in idx {
        t.extend_from_slice(&parts.template[vi]);
        d.extend_from_slice(&parts.shape_dirs[vi * 3 * s..(vi + 1) * 3 * s]);
        w.extend_from_slice(&parts.skin_weights[vi * j..(vi + 1) * j]);
    }
    (t, d, w)
}

/// Precomputed tables for skinning only the vertices that keypoints read.
#[derive(Debug, Clone)]
pub struct KeypointSubset {
    pub vertices: Vec<usize>,
    template: Vec<f64>,
    dirs: Vec<f64>,
    skin: Vec<f64>,
    /// `K x |vertices|`
    regressor: Vec<f64>,
}

impl KeypointSubset {
    pub fn new(model: &MeshModel) -> Self {
        let mut vertices: Vec<usize> = model.keypoints().iter().flat_map(|k| k.vertices.iter().copied()).collect();
        vertices.sort_unstable();
        vertices.dedup();
        let (template, dirs, skin) = gather_vertex_tables(model, &vertices);
        let n = vertices.len();
        let mut regressor = vec![0.0; model.n_keypoints() * n];
        for (k, kp) in model.keypoints().iter().enumerate() {
            for (&vi, &w) in kp.vertices.iter().zip(&kp.weights) {
                let col = vertices.binary_search(&vi).expect("vertex in subset");
                regressor[k * n + col] += w;
            }
        }
        Self { vertices, template, dirs, skin, regressor }
    }
}

/// Posed 3D keypoints (`K x 3`) on a tape, skinning only the needed vertices.
pub fn pose_keypoints_tape<'t>(
    model: &MeshModel,
    subset: &KeypointSubset,
    tape: &'t Tape,
    beta: Var<'t>,
    rot: Var<'t>,
) -> Var<'t> {
    let kin = kinematics(model, tape, beta, rot);
    let pts = skin_points(
        tape,
        &kin,
        beta,
        &subset.template,
        &subset.dirs,
        &subset.skin,
        model.n_shape(),
        model.n_joints(),
    );
    let reg = tape.constant(subset.regressor.clone(), model.n_keypoints(), subset.vertices.len());
    reg.matmul(pts)
}
