//! `quadfit-model/1` JSON model files.
//!
//! Every numeric array is stored as `{"shape": [..], "data": [..]}` in
//! row-major order so readers in other languages can check dimensions without
//! knowing the layout in advance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KeypointDef, MeshModel, ModelParts};
use crate::error::{Error, Result};

pub const MODEL_VERSION: &str = "quadfit-model/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct NdArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn expect(self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        if self.shape != shape || self.data.len() != shape.iter().product::<usize>() {
            return Err(Error::MalformedModel(format!(
                "{name}: expected shape {shape:?}, got {:?} with {} values",
                self.shape,
                self.data.len()
            )));
        }
        Ok(self.data)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Dims {
    vertices: usize,
    joints: usize,
    shape: usize,
    keypoints: usize,
    faces: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Gaussian {
    mean: NdArray,
    cov: NdArray,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    version: String,
    dims: Dims,
    template: NdArray,
    shape_dirs: NdArray,
    shape_prior: Gaussian,
    joint_regressor: NdArray,
    parents: Vec<i64>,
    joint_names: Vec<String>,
    skin_weights: NdArray,
    keypoints: Vec<KeypointDef>,
    pose_prior: Gaussian,
    faces: NdArray,
}

pub(crate) fn model_from_json(text: &str) -> Result<MeshModel> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::MalformedModel(e.to_string()))?;
    if file.version != MODEL_VERSION {
        return Err(Error::MalformedModel(format!(
            "unsupported version {:?}, expected {MODEL_VERSION:?}",
            file.version
        )));
    }
    let Dims { vertices: v, joints: j, shape: s, keypoints: k, faces: f } = file.dims;
    if j == 0 {
        return Err(Error::MalformedModel("model has no joints".into()));
    }
    let p = (j - 1) * 3;
    let template = file.template.expect("template", &[v, 3])?;
    let faces = file.faces.expect("faces", &[f, 3])?;
    if faces.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
        return Err(Error::MalformedModel("faces must hold non-negative integers".into()));
    }
    if file.keypoints.len() != k {
        return Err(Error::MalformedModel(format!(
            "dims.keypoints = {k} but {} keypoints listed",
            file.keypoints.len()
        )));
    }
    if file.parents.len() != j {
        return Err(Error::MalformedModel("parents length does not match dims.joints".into()));
    }
    let parts = ModelParts {
        template: template.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        shape_dirs: file.shape_dirs.expect("shape_dirs", &[v, 3, s])?,
        n_shape: s,
        shape_prior_mean: file.shape_prior.mean.expect("shape_prior.mean", &[s])?,
        shape_prior_cov: file.shape_prior.cov.expect("shape_prior.cov", &[s, s])?,
        joint_regressor: file.joint_regressor.expect("joint_regressor", &[j, v])?,
        parents: file.parents,
        joint_names: file.joint_names,
        skin_weights: file.skin_weights.expect("skin_weights", &[v, j])?,
        keypoints: file.keypoints,
        pose_prior_mean: file.pose_prior.mean.expect("pose_prior.mean", &[j - 1, 3])?,
        pose_prior_cov: file.pose_prior.cov.expect("pose_prior.cov", &[p, p])?,
        faces: faces.chunks(3).map(|c| [c[0] as usize, c[1] as usize, c[2] as usize]).collect(),
    };
    MeshModel::new(parts)
}

pub(crate) fn model_to_json(model: &MeshModel) -> Result<String> {
    let p = model.parts();
    let (v, j, s) = (model.n_vertices(), model.n_joints(), model.n_shape());
    let file = ModelFile {
        version: MODEL_VERSION.to_string(),
        dims: Dims { vertices: v, joints: j, shape: s, keypoints: model.n_keypoints(), faces: model.n_faces() },
        template: NdArray::new(vec![v, 3], p.template.iter().flatten().copied().collect()),
        shape_dirs: NdArray::new(vec![v, 3, s], p.shape_dirs.clone()),
        shape_prior: Gaussian {
            mean: NdArray::new(vec![s], p.shape_prior_mean.clone()),
            cov: NdArray::new(vec![s, s], p.shape_prior_cov.clone()),
        },
        joint_regressor: NdArray::new(vec![j, v], p.joint_regressor.clone()),
        parents: p.parents.clone(),
        joint_names: p.joint_names.clone(),
        skin_weights: NdArray::new(vec![v, j], p.skin_weights.clone()),
        keypoints: p.keypoints.clone(),
        pose_prior: Gaussian {
            mean: NdArray::new(vec![j - 1, 3], p.pose_prior_mean.clone()),
            cov: NdArray::new(vec![(j - 1) * 3, (j - 1) * 3], p.pose_prior_cov.clone()),
        },
        faces: NdArray::new(vec![model.n_faces(), 3], p.faces.iter().flatten().map(|&i| i as f64).collect()),
    };
    Ok(serde_json::to_string(&file)?)
}

/// Reads and validates a model file.
pub fn load_model(path: impl AsRef<Path>) -> Result<MeshModel> {
    let text = std::fs::read_to_string(path)?;
    model_from_json(&text)
}

pub fn save_model(model: &MeshModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model_to_json(model)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_model_round_trips_through_json() {
        let model = crate::body::toy::toy_quadruped();
        let text = model_to_json(&model).unwrap();
        let back = model_from_json(&text).unwrap();
        assert_eq!(back.parts().template, model.parts().template);
        assert_eq!(back.parts().faces, model.parts().faces);
        assert_eq!(back.parts().pose_prior_cov, model.parts().pose_prior_cov);
    }

    #[test]
    fn wrong_version_is_malformed() {
        let model = crate::body::toy::toy_quadruped();
        let text = model_to_json(&model).unwrap().replace(MODEL_VERSION, "quadfit-model/0");
        let err = model_from_json(&text).unwrap_err();
        assert!(err.to_string().starts_with("malformed model"), "{err}");
    }

    #[test]
    fn truncated_array_is_malformed() {
        let err = model_from_json(r#"{"version":"quadfit-model/1"}"#).unwrap_err();
        assert!(err.to_string().starts_with("malformed model"), "{err}");

        let model = crate::body::toy::toy_quadruped();
        let mut value: serde_json::Value = serde_json::from_str(&model_to_json(&model).unwrap()).unwrap();
        value["skin_weights"]["data"].as_array_mut().unwrap().pop();
        let err = model_from_json(&value.to_string()).unwrap_err();
        assert!(err.to_string().contains("skin_weights"), "{err}");
        assert!(err.to_string().starts_with("malformed model"), "{err}");
    }

    #[test]
    fn skin_row_violation_in_file_is_invalid() {
        let model = crate::body::toy::toy_quadruped();
        let mut value: serde_json::Value = serde_json::from_str(&model_to_json(&model).unwrap()).unwrap();
        let j = model.n_joints();
        let row = &mut value["skin_weights"]["data"].as_array_mut().unwrap()[..j];
        let total: f64 = row.iter().map(|x| x.as_f64().unwrap()).sum();
        for x in row.iter_mut() {
            *x = serde_json::json!(x.as_f64().unwrap() * 0.9 / total);
        }
        let err = model_from_json(&value.to_string()).unwrap_err();
        assert!(err.to_string().starts_with("invalid model: skin_weights"), "{err}");
    }
}
