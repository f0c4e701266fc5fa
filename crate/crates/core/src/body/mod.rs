//! Parametric quadruped mesh: PCA shape space, forward kinematics, linear
//! blend skinning and keypoint regression.
//!
//! A [`MeshModel`] maps shape coefficients `beta` and per-joint axis-angle
//! rotations to posed vertices:
//!
//! 1. shape blend: `v = template + shape_dirs * beta`
//! 2. rest joints: `J = joint_regressor * v`
//! 3. forward kinematics down the kinematic tree, root rotation pivoting about
//!    the root's rest position
//! 4. skinning: `v'_i = sum_j w_ij * A_j * v_i`
//!
//! Keypoints are fixed sparse interpolations of vertices.

mod io;
mod skinning;
pub mod toy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_model, save_model, MODEL_VERSION};
pub use skinning::{pose_keypoints_tape, pose_mesh_tape, posed_joints_tape, KeypointSubset};

/// One 3D keypoint as a sparse interpolation of model vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointDef {
    pub name: String,
    /// Body-region tag, e.g. `head`, `body`, `leg_fl`.
    pub region: String,
    pub vertices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl KeypointDef {
    pub fn is_leg(&self) -> bool {
        self.region.starts_with("leg")
    }
}

/// Raw model arrays before validation. All matrices are row-major.
#[derive(Debug, Clone)]
pub struct ModelParts {
    /// `V x 3`
    pub template: Vec<[f64; 3]>,
    /// `(V*3) x S`; row `3*i + c` is the displacement of coordinate `c` of vertex `i`.
    pub shape_dirs: Vec<f64>,
    pub n_shape: usize,
    pub shape_prior_mean: Vec<f64>,
    /// `S x S`
    pub shape_prior_cov: Vec<f64>,
    /// `J x V`
    pub joint_regressor: Vec<f64>,
    pub parents: Vec<i64>,
    pub joint_names: Vec<String>,
    /// `V x J`
    pub skin_weights: Vec<f64>,
    pub keypoints: Vec<KeypointDef>,
    /// `(J-1)*3`, non-root joints in index order.
    pub pose_prior_mean: Vec<f64>,
    /// `(J-1)*3` square.
    pub pose_prior_cov: Vec<f64>,
    pub faces: Vec<[usize; 3]>,
}

/// Validated, immutable body model. Safe to share across threads.
#[derive(Debug, Clone)]
pub struct MeshModel {
    parts: ModelParts,
    order: Vec<usize>,
    rest_joint_template: Vec<f64>,
    rest_joint_dirs: Vec<f64>,
    shape_precision: Option<Vec<f64>>,
    pose_precision: Option<Vec<f64>>,
}

const SUM_TOL: f64 = 1e-6;

impl MeshModel {
    /// Checks every structural invariant and precomputes derived tables.
    pub fn new(parts: ModelParts) -> Result<Self> {
        let v = parts.template.len();
        let j = parts.parents.len();
        let s = parts.n_shape;
        let malformed = |what: &str| Err(Error::MalformedModel(what.to_string()));
        if v == 0 || j == 0 {
            return malformed("empty template or kinematic tree");
        }
        if parts.shape_dirs.len() != v * 3 * s {
            return malformed("shape_dirs dimensions");
        }
        if parts.shape_prior_mean.len() != s || parts.shape_prior_cov.len() != s * s {
            return malformed("shape prior dimensions");
        }
        if parts.joint_regressor.len() != j * v {
            return malformed("joint_regressor dimensions");
        }
        if parts.joint_names.len() != j {
            return malformed("joint_names length");
        }
        if parts.skin_weights.len() != v * j {
            return malformed("skin_weights dimensions");
        }
        let p = (j - 1) * 3;
        if parts.pose_prior_mean.len() != p || parts.pose_prior_cov.len() != p * p {
            return malformed("pose prior dimensions");
        }
        if parts.faces.iter().flatten().any(|&i| i >= v) {
            return malformed("face index out of range");
        }
        let all_finite = parts.template.iter().flatten().all(|x| x.is_finite())
            && parts.shape_dirs.iter().all(|x| x.is_finite())
            && parts.joint_regressor.iter().all(|x| x.is_finite());
        if !all_finite {
            return malformed("non-finite geometry");
        }

        for (i, row) in parts.skin_weights.chunks(j).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&w| w < 0.0 || !w.is_finite()) || (sum - 1.0).abs() > SUM_TOL {
                return Err(Error::InvalidModel {
                    field: "skin_weights",
                    detail: format!("row {i} sums to {sum}"),
                });
            }
        }

        let order = tree_order(&parts.parents)?;

        for kp in &parts.keypoints {
            let sum: f64 = kp.weights.iter().sum();
            if kp.vertices.len() != kp.weights.len()
                || kp.vertices.is_empty()
                || kp.vertices.iter().any(|&i| i >= v)
                || (sum - 1.0).abs() > SUM_TOL
            {
                return Err(Error::InvalidModel {
                    field: "keypoint_defs",
                    detail: format!("keypoint {} weights sum to {sum}", kp.name),
                });
            }
        }

        // Rest joints are linear in beta: J = R*template + (R*dirs)*beta.
        let mut rest_joint_template = vec![0.0; j * 3];
        let mut rest_joint_dirs = vec![0.0; j * 3 * s];
        for jj in 0..j {
            for vi in 0..v {
                let w = parts.joint_regressor[jj * v + vi];
                if w == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    rest_joint_template[jj * 3 + c] += w * parts.template[vi][c];
                    for k in 0..s {
                        rest_joint_dirs[(jj * 3 + c) * s + k] += w * parts.shape_dirs[(vi * 3 + c) * s + k];
                    }
                }
            }
        }

        let shape_precision = invert_spd(&parts.shape_prior_cov, s);
        let pose_precision = invert_spd(&parts.pose_prior_cov, p);
        Ok(Self {
            parts,
            order,
            rest_joint_template,
            rest_joint_dirs,
            shape_precision,
            pose_precision,
        })
    }

    pub fn parts(&self) -> &ModelParts {
        &self.parts
    }

    pub fn n_vertices(&self) -> usize {
        self.parts.template.len()
    }

    pub fn n_joints(&self) -> usize {
        self.parts.parents.len()
    }

    pub fn n_shape(&self) -> usize {
        self.parts.n_shape
    }

    pub fn n_keypoints(&self) -> usize {
        self.parts.keypoints.len()
    }

    pub fn n_faces(&self) -> usize {
        self.parts.faces.len()
    }

    pub fn template(&self) -> &[[f64; 3]] {
        &self.parts.template
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.parts.faces
    }

    pub fn parents(&self) -> &[i64] {
        &self.parts.parents
    }

    pub fn joint_names(&self) -> &[String] {
        &self.parts.joint_names
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.parts.joint_names.iter().position(|n| n == name)
    }

    pub fn keypoints(&self) -> &[KeypointDef] {
        &self.parts.keypoints
    }

    pub fn skin_weights(&self) -> &[f64] {
        &self.parts.skin_weights
    }

    /// Joints in parent-before-child order, starting at the root.
    pub fn kinematic_order(&self) -> &[usize] {
        &self.order
    }

    pub fn shape_prior_mean(&self) -> &[f64] {
        &self.parts.shape_prior_mean
    }

    pub fn pose_prior_mean(&self) -> &[f64] {
        &self.parts.pose_prior_mean
    }

    pub(crate) fn shape_precision(&self) -> Option<&[f64]> {
        self.shape_precision.as_deref()
    }

    pub(crate) fn pose_precision(&self) -> Option<&[f64]> {
        self.pose_precision.as_deref()
    }

    /// Rest-pose joint locations for the given shape.
    pub fn rest_joints(&self, beta: &[f64]) -> Result<Vec<[f64; 3]>> {
        self.check_beta(beta)?;
        let s = self.n_shape();
        Ok((0..self.n_joints())
            .map(|j| {
                let mut p = [0.0; 3];
                for (c, pc) in p.iter_mut().enumerate() {
                    let row = j * 3 + c;
                    *pc = self.rest_joint_template[row]
                        + (0..s).map(|k| self.rest_joint_dirs[row * s + k] * beta[k]).sum::<f64>();
                }
                p
            })
            .collect())
    }

    pub(crate) fn rest_joint_tables(&self) -> (&[f64], &[f64]) {
        (&self.rest_joint_template, &self.rest_joint_dirs)
    }

    /// Longest axis-aligned extent of the template; the reference length for
    /// relative error thresholds.
    pub fn body_length(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.parts.template {
            for c in 0..3 {
                lo[c] = lo[c].min(v[c]);
                hi[c] = hi[c].max(v[c]);
            }
        }
        (0..3).map(|c| hi[c] - lo[c]).fold(0.0, f64::max)
    }

    pub(crate) fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.n_shape() {
            return Err(Error::shape(format!(
                "beta has {} coefficients, model expects {}",
                beta.len(),
                self.n_shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_joints(&self, theta_joints: &[[f64; 3]]) -> Result<()> {
        if theta_joints.len() + 1 != self.n_joints() {
            return Err(Error::shape(format!(
                "{} joint rotations, model expects {}",
                theta_joints.len(),
                self.n_joints() - 1
            )));
        }
        Ok(())
    }

    /// Returns a copy with replaced pose prior (used when fitting the prior
    /// to generated motion).
    pub fn with_pose_prior(&self, mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let mut parts = self.parts.clone();
        parts.pose_prior_mean = mean;
        parts.pose_prior_cov = cov;
        Self::new(parts)
    }
}

fn tree_order(parents: &[i64]) -> Result<Vec<usize>> {
    let bad = |detail: String| Error::InvalidModel { field: "kinematic_tree", detail };
    let n = parents.len();
    let roots: Vec<usize> = (0..n).filter(|&i| parents[i] < 0).collect();
    if roots != [0] {
        return Err(bad(format!("expected joint 0 as the only root, found roots {roots:?}")));
    }
    if parents.iter().any(|&p| p >= n as i64 || p < -1) {
        return Err(bad("parent index out of range".into()));
    }
    let mut children = vec![Vec::new(); n];
    for (i, &p) in parents.iter().enumerate().skip(1) {
        children[p as usize].push(i);
    }
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![0];
    while let Some(j) = stack.pop() {
        order.push(j);
        stack.extend(children[j].iter().rev());
    }
    if order.len() != n {
        return Err(bad(format!("{} joints unreachable from the root (cycle)", n - order.len())));
    }
    Ok(order)
}

fn invert_spd(cov: &[f64], n: usize) -> Option<Vec<f64>> {
    if n == 0 {
        return Some(Vec::new());
    }
    let m = nalgebra::DMatrix::from_row_slice(n, n, cov);
    if (&m - m.transpose()).abs().max() > 1e-9 * m.abs().max().max(1.0) {
        return None;
    }
    let chol = nalgebra::Cholesky::new(m)?;
    let inv = chol.inverse();
    Some((0..n * n).map(|k| inv[(k / n, k % n)]).collect())
}

/// Weak-perspective camera of one frame: scale and in-crop translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakCam {
    pub s: f64,
    pub px: f64,
    pub py: f64,
}

/// Per-clip shape with per-frame rotations and weak-perspective cameras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseState {
    pub beta: Vec<f64>,
    pub theta_global: Vec<[f64; 3]>,
    pub theta_joints: Vec<Vec<[f64; 3]>>,
    pub cam: Vec<WeakCam>,
}

impl PoseState {
    pub fn n_frames(&self) -> usize {
        self.theta_global.len()
    }

    /// Mean pose for `n_frames`: zero shape, prior-mean joints, identity root.
    pub fn mean(model: &MeshModel, n_frames: usize, cam: WeakCam) -> Self {
        let joints: Vec<[f64; 3]> = model
            .pose_prior_mean()
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Self {
            beta: model.shape_prior_mean().to_vec(),
            theta_global: vec![[0.0; 3]; n_frames],
            theta_joints: vec![joints; n_frames],
            cam: vec![cam; n_frames],
        }
    }

    pub fn validate(&self, model: &MeshModel) -> Result<()> {
        let t = self.n_frames();
        if self.theta_joints.len() != t || self.cam.len() != t {
            return Err(Error::shape("pose state frame counts disagree"));
        }
        model.check_beta(&self.beta)?;
        for joints in &self.theta_joints {
            model.check_joints(joints)?;
        }
        let limit = std::f64::consts::PI + 1e-6;
        let all_rot = self.theta_global.iter().chain(self.theta_joints.iter().flatten());
        for w in all_rot {
            let n = norm3(w);
            if n >= limit {
                return Err(Error::Config(format!("rotation magnitude {n} is not canonical")));
            }
        }
        if let Some(c) = self.cam.iter().find(|c| !(c.s > 0.0)) {
            return Err(Error::InvalidScale(c.s));
        }
        Ok(())
    }

    /// Wraps every rotation vector into the canonical `|w| <= pi` range.
    pub fn canonicalize(&mut self) {
        for w in self.theta_global.iter_mut().chain(self.theta_joints.iter_mut().flatten()) {
            *w = canonical_axis_angle(*w);
        }
    }

    /// Frames `start..start+len` as a new state sharing `beta`.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            beta: self.beta.clone(),
            theta_global: self.theta_global[start..start + len].to_vec(),
            theta_joints: self.theta_joints[start..start + len].to_vec(),
            cam: self.cam[start..start + len].to_vec(),
        }
    }
}

pub fn canonical_axis_angle(w: [f64; 3]) -> [f64; 3] {
    use std::f64::consts::PI;
    let n = norm3(&w);
    if n <= PI {
        return w;
    }
    let wrapped = n.rem_euclid(2.0 * PI);
    let target = if wrapped > PI { wrapped - 2.0 * PI } else { wrapped };
    let k = target / n;
    [w[0] * k, w[1] * k, w[2] * k]
}

pub(crate) fn norm3(w: &[f64; 3]) -> f64 {
    (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt()
}

/// Posed vertices for one frame.
pub fn pose_mesh(
    model: &MeshModel,
    beta: &[f64],
    theta_global: [f64; 3],
    theta_joints: &[[f64; 3]],
) -> Result<Vec<[f64; 3]>> {
    model.check_beta(beta)?;
    model.check_joints(theta_joints)?;
    let tape = crate::diffopt::Tape::new();
    let b = tape.constant(beta.to_vec(), beta.len(), 1);
    let rot = tape.constant(rotation_rows(theta_global, theta_joints), model.n_joints(), 3);
    let v = pose_mesh_tape(model, &tape, b, rot, None);
    Ok(to_points(&v.value()))
}

/// Posed joint locations for one frame.
pub fn posed_joints(
    model: &MeshModel,
    beta: &[f64],
    theta_global: [f64; 3],
    theta_joints: &[[f64; 3]],
) -> Result<Vec<[f64; 3]>> {
    model.check_beta(beta)?;
    model.check_joints(theta_joints)?;
    let tape = crate::diffopt::Tape::new();
    let b = tape.constant(beta.to_vec(), beta.len(), 1);
    let rot = tape.constant(rotation_rows(theta_global, theta_joints), model.n_joints(), 3);
    Ok(to_points(&posed_joints_tape(model, &tape, b, rot).value()))
}

/// `kappa_k = sum_i w_ki v_i` for every keypoint.
pub fn regress_keypoints3d(vertices: &[[f64; 3]], model: &MeshModel) -> Result<Vec<[f64; 3]>> {
    if vertices.len() != model.n_vertices() {
        return Err(Error::shape(format!(
            "{} vertices, model has {}",
            vertices.len(),
            model.n_vertices()
        )));
    }
    Ok(model
        .keypoints()
        .iter()
        .map(|kp| {
            let mut p = [0.0; 3];
            for (&vi, &w) in kp.vertices.iter().zip(&kp.weights) {
                for c in 0..3 {
                    p[c] += w * vertices[vi][c];
                }
            }
            p
        })
        .collect())
}

/// Keypoints of a whole pose state, one `K x 3` set per frame.
pub fn pose_state_keypoints(model: &MeshModel, pose: &PoseState) -> Result<Vec<Vec<[f64; 3]>>> {
    pose.validate(model)?;
    (0..pose.n_frames())
        .map(|t| {
            let tape = crate::diffopt::Tape::new();
            let b = tape.constant(pose.beta.clone(), pose.beta.len(), 1);
            let rot = tape.constant(
                rotation_rows(pose.theta_global[t], &pose.theta_joints[t]),
                model.n_joints(),
                3,
            );
            let subset = KeypointSubset::new(model);
            Ok(to_points(&pose_keypoints_tape(model, &subset, &tape, b, rot).value()))
        })
        .collect()
}

/// Stacks root and joint rotations into `J x 3` rows.
pub fn rotation_rows(theta_global: [f64; 3], theta_joints: &[[f64; 3]]) -> Vec<f64> {
    let mut rows = Vec::with_capacity((theta_joints.len() + 1) * 3);
    rows.extend_from_slice(&theta_global);
    for w in theta_joints {
        rows.extend_from_slice(w);
    }
    rows
}

pub(crate) fn to_points(flat: &[f64]) -> Vec<[f64; 3]> {
    flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}
