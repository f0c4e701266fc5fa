//! Procedurally generated box-limb quadruped.
//!
//! Axes: `x` forward, `y` down (ground plane at `y = 0`), `z` to the animal's
//! left. Every body part is a square tube of 4-vertex rings; the layout gives
//! 240 vertices, 16 joints, 4 shape components and 17 keypoints.

use std::sync::OnceLock;

use super::{KeypointDef, MeshModel, ModelParts};

pub const JOINT_NAMES: [&str; 16] = [
    "root",
    "chest",
    "neck",
    "head",
    "fl_upper",
    "fl_lower",
    "fl_pastern",
    "fr_upper",
    "fr_lower",
    "fr_pastern",
    "bl_upper",
    "bl_lower",
    "bl_pastern",
    "br_upper",
    "br_lower",
    "br_pastern",
];

const PARENTS: [i64; 16] = [-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14];

/// Leg chains (upper, lower, pastern) in FL, FR, BL, BR order.
pub const LEGS: [[usize; 3]; 4] = [[4, 5, 6], [7, 8, 9], [10, 11, 12], [13, 14, 15]];
pub const LEG_TAGS: [&str; 4] = ["leg_fl", "leg_fr", "leg_bl", "leg_br"];

struct Tube {
    start: [f64; 3],
    end: [f64; 3],
    rings: usize,
    radius: (f64, f64),
    bone: usize,
    /// Parent bone blended in near the tube start.
    blend: Option<usize>,
}

struct Ring {
    first_vertex: usize,
    u: f64,
}

struct Builder {
    vertices: Vec<[f64; 3]>,
    skin: Vec<[f64; 16]>,
    faces: Vec<[usize; 3]>,
    /// Ring center per vertex, for radial shape directions.
    vertex_ring_center: Vec<[f64; 3]>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Builder {
    fn tube(&mut self, t: &Tube, weight: impl Fn(f64) -> [f64; 16]) -> Vec<Ring> {
        let dir = normalize(sub(t.end, t.start));
        let reference = if dir[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
        let e1 = normalize(cross(dir, reference));
        let e2 = cross(dir, e1);
        let mut rings = Vec::with_capacity(t.rings);
        for i in 0..t.rings {
            let u = i as f64 / (t.rings - 1) as f64;
            let center = [0, 1, 2].map(|c| t.start[c] + u * (t.end[c] - t.start[c]));
            let r = t.radius.0 + u * (t.radius.1 - t.radius.0);
            let first_vertex = self.vertices.len();
            for k in 0..4 {
                let phi = std::f64::consts::FRAC_PI_4 + k as f64 * std::f64::consts::FRAC_PI_2;
                let (s, c) = phi.sin_cos();
                self.vertices.push([0, 1, 2].map(|a| center[a] + r * (c * e1[a] + s * e2[a])));
                self.skin.push(weight(u));
                self.vertex_ring_center.push(center);
            }
            rings.push(Ring { first_vertex, u });
        }
        for w in rings.windows(2) {
            let (a0, b0) = (w[0].first_vertex, w[1].first_vertex);
            for k in 0..4 {
                let k1 = (k + 1) % 4;
                self.faces.push([a0 + k, a0 + k1, b0 + k1]);
                self.faces.push([a0 + k, b0 + k1, b0 + k]);
            }
        }
        let first = rings[0].first_vertex;
        let last = rings[rings.len() - 1].first_vertex;
        self.faces.push([first, first + 2, first + 1]);
        self.faces.push([first, first + 3, first + 2]);
        self.faces.push([last, last + 1, last + 2]);
        self.faces.push([last, last + 2, last + 3]);
        rings
    }

    fn simple_tube(&mut self, t: &Tube) -> Vec<Ring> {
        let (bone, blend) = (t.bone, t.blend);
        self.tube(t, move |u| {
            let mut w = [0.0; 16];
            match blend {
                Some(p) => {
                    let wp = (0.5 - 1.5 * u).max(0.0);
                    w[p] = wp;
                    w[bone] = 1.0 - wp;
                }
                None => w[bone] = 1.0,
            }
            w
        })
    }
}

fn ring_average(ring: &Ring) -> (Vec<usize>, Vec<f64>) {
    ((ring.first_vertex..ring.first_vertex + 4).collect(), vec![0.25; 4])
}

/// The two ring vertices with the smallest `y` (the top of the ring).
fn ring_top(b: &Builder, ring: &Ring) -> (Vec<usize>, Vec<f64>) {
    let mut idx: Vec<usize> = (ring.first_vertex..ring.first_vertex + 4).collect();
    idx.sort_by(|&a, &c| b.vertices[a][1].total_cmp(&b.vertices[c][1]));
    idx.truncate(2);
    idx.sort_unstable();
    (idx, vec![0.5, 0.5])
}

fn kp(name: &str, region: &str, (vertices, weights): (Vec<usize>, Vec<f64>)) -> KeypointDef {
    KeypointDef { name: name.into(), region: region.into(), vertices, weights }
}

/// Geometry, skinning and keypoints with an isotropic placeholder pose prior.
fn build_geometry() -> ModelParts {
    let mut b = Builder { vertices: Vec::new(), skin: Vec::new(), faces: Vec::new(), vertex_ring_center: Vec::new() };
    let mut joint_rings: Vec<Option<(Vec<usize>, Vec<f64>)>> = vec![None; 16];

    // Torso: root and chest blended along x.
    let torso = Tube { start: [-0.85, -1.2, 0.0], end: [0.85, -1.2, 0.0], rings: 10, radius: (0.3, 0.32), bone: 0, blend: None };
    let torso_rings = b.tube(&torso, |u| {
        let mut w = [0.0; 16];
        let c = ((u - 1.0 / 9.0) / (7.0 / 9.0)).clamp(0.0, 1.0);
        w[1] = c;
        w[0] = 1.0 - c;
        w
    });
    joint_rings[0] = Some(ring_average(&torso_rings[1]));
    joint_rings[1] = Some(ring_average(&torso_rings[8]));

    let neck = Tube { start: [0.75, -1.3, 0.0], end: [1.05, -1.8, 0.0], rings: 5, radius: (0.14, 0.1), bone: 2, blend: Some(1) };
    let neck_rings = b.simple_tube(&neck);
    joint_rings[2] = Some(ring_average(&neck_rings[0]));

    let head = Tube { start: [1.05, -1.8, 0.0], end: [1.45, -1.5, 0.0], rings: 5, radius: (0.11, 0.07), bone: 3, blend: Some(2) };
    let head_rings = b.simple_tube(&head);
    joint_rings[3] = Some(ring_average(&head_rings[0]));

    let tail = Tube { start: [-0.85, -1.3, 0.0], end: [-1.15, -0.85, 0.0], rings: 4, radius: (0.06, 0.03), bone: 0, blend: None };
    let tail_rings = b.simple_tube(&tail);

    let legs = [
        // (side z, front?, chain)
        (0.17, true, LEGS[0]),
        (-0.17, true, LEGS[1]),
        (0.17, false, LEGS[2]),
        (-0.17, false, LEGS[3]),
    ];
    let mut leg_rings = Vec::new();
    for (z, front, chain) in legs {
        let (top, knee, fetlock, hoof) = if front {
            ([0.6, -1.0, z], [0.62, -0.55, z], [0.6, -0.15, z], [0.62, 0.0, z])
        } else {
            ([-0.6, -1.0, z], [-0.68, -0.5, z], [-0.62, -0.15, z], [-0.62, 0.0, z])
        };
        let parent = if front { 1 } else { 0 };
        let upper = b.simple_tube(&Tube { start: top, end: knee, rings: 3, radius: (0.09, 0.06), bone: chain[0], blend: Some(parent) });
        let lower = b.simple_tube(&Tube { start: knee, end: fetlock, rings: 3, radius: (0.05, 0.045), bone: chain[1], blend: Some(chain[0]) });
        let pastern = b.simple_tube(&Tube { start: fetlock, end: hoof, rings: 3, radius: (0.045, 0.055), bone: chain[2], blend: Some(chain[1]) });
        joint_rings[chain[0]] = Some(ring_average(&upper[0]));
        joint_rings[chain[1]] = Some(ring_average(&lower[0]));
        joint_rings[chain[2]] = Some(ring_average(&pastern[0]));
        leg_rings.push((upper, lower, pastern));
    }

    let v = b.vertices.len();
    let j = JOINT_NAMES.len();

    let mut joint_regressor = vec![0.0; j * v];
    for (jj, ring) in joint_rings.iter().enumerate() {
        let (idx, w) = ring.as_ref().expect("every joint has a ring");
        for (&vi, &wi) in idx.iter().zip(w) {
            joint_regressor[jj * v + vi] = wi;
        }
    }

    let last_head = head_rings.last().unwrap().first_vertex;
    let mut keypoints = vec![
        kp("nose", "head", (vec![last_head, last_head + 1, last_head + 2], vec![0.2, 0.3, 0.5])),
        kp("poll", "head", ring_top(&b, &head_rings[1])),
        kp("withers", "body", ring_top(&b, &torso_rings[8])),
        kp("croup", "body", ring_top(&b, &torso_rings[1])),
        kp("tail_root", "body", ring_average(&tail_rings[0])),
    ];
    let leg_names = ["fl", "fr", "bl", "br"];
    for (i, (_, lower, pastern)) in leg_rings.iter().enumerate() {
        let tag = LEG_TAGS[i];
        let n = leg_names[i];
        keypoints.push(kp(&format!("{n}_knee"), tag, ring_average(&lower[0])));
        keypoints.push(kp(&format!("{n}_fetlock"), tag, ring_average(&pastern[0])));
        keypoints.push(kp(&format!("{n}_hoof"), tag, ring_average(pastern.last().unwrap())));
    }

    // Shape directions: overall size, leg length, girth, neck length.
    let s = 4;
    let neck_dir = normalize(sub(neck.end, neck.start));
    let neck_first = neck_rings[0].first_vertex;
    let head_first = head_rings[0].first_vertex;
    let head_end = head_rings.last().unwrap().first_vertex + 4;
    let torso_end = torso_rings.last().unwrap().first_vertex + 4;
    let mut shape_dirs = vec![0.0; v * 3 * s];
    for (i, p) in b.vertices.iter().enumerate() {
        let mut set = |c: usize, k: usize, val: f64| shape_dirs[(i * 3 + c) * s + k] = val;
        for c in 0..3 {
            set(c, 0, 0.1 * p[c]);
        }
        set(1, 1, if p[1] >= -1.0 { 0.1 * p[1] } else { -0.1 });
        if i < torso_end || (neck_first..neck_first + 20).contains(&i) {
            let center = b.vertex_ring_center[i];
            for c in 0..3 {
                set(c, 2, 0.15 * (p[c] - center[c]));
            }
        }
        if (neck_first..head_end).contains(&i) {
            let along = if i < head_first {
                let ring = (i - neck_first) / 4;
                neck_rings[ring].u
            } else {
                1.0
            };
            for c in 0..3 {
                set(c, 3, 0.15 * along * neck_dir[c]);
            }
        }
    }

    let p = (j - 1) * 3;
    let mut pose_prior_cov = vec![0.0; p * p];
    for i in 0..p {
        pose_prior_cov[i * p + i] = 1.0;
    }
    let mut shape_prior_cov = vec![0.0; s * s];
    for i in 0..s {
        shape_prior_cov[i * s + i] = 1.0;
    }

    ModelParts {
        template: b.vertices,
        shape_dirs,
        n_shape: s,
        shape_prior_mean: vec![0.0; s],
        shape_prior_cov,
        joint_regressor,
        parents: PARENTS.to_vec(),
        joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        skin_weights: b.skin.iter().flatten().copied().collect(),
        keypoints,
        pose_prior_mean: vec![0.0; p],
        pose_prior_cov,
        faces: b.faces,
    }
}

/// The bundled toy quadruped, with its pose prior fitted to the synthetic
/// gait generator. Built once per process.
pub fn toy_quadruped() -> MeshModel {
    static MODEL: OnceLock<MeshModel> = OnceLock::new();
    MODEL
        .get_or_init(|| {
            let geometry = MeshModel::new(build_geometry()).expect("toy geometry is valid");
            let (mean, cov) = crate::data::synth::fit_pose_prior(&geometry);
            geometry.with_pose_prior(mean, cov).expect("fitted prior is valid")
        })
        .clone()
}
