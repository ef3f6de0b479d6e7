//! Deterministic synthetic multi-view dynamic dataset generator.
//!
//! An oracle Gaussian scene with scripted motion is rendered through the
//! production renderer, so the ground truth is exactly representable by
//! some Gaussian set. The generator emits per-timestep per-view RGB frames,
//! analytic optical flow, label maps, cameras, and the oracle checkpoints.

use crate::error::CoreError;
use crate::gaussians::{inverse_sigmoid, GaussianPrimitive, GaussianSet};
use crate::geometry::{quat_mul, Camera, Quat};
use crate::io::{self, Image};
use crate::par;
use crate::render::{render, RenderOptions};
use crate::rng::{stream_rng, Stage};
use crate::Result;
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

const SH_C0: f64 = 0.28209479177387814;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Static,
    /// Constant velocity in scene units per timestep.
    Linear { velocity: [f64; 3] },
    /// Rotation about a vertical axis through `center`, radians/timestep.
    Orbit { center: [f64; 3], angular_velocity: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub label: u8,
    pub count: usize,
    pub aabb_min: [f64; 3],
    pub aabb_max: [f64; 3],
    pub motion: Motion,
    /// First timestep at which the object exists.
    pub appear_at: u32,
    pub base_color: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneScript {
    pub seed: u64,
    pub timesteps: u32,
    pub width: u32,
    pub height: u32,
    pub camera_count: usize,
    pub camera_radius: f64,
    pub camera_height: f64,
    pub focal: f64,
    pub objects: Vec<ObjectSpec>,
}

impl SceneScript {
    pub fn validate(&self) -> Result<()> {
        let mut labels: Vec<u8> = self.objects.iter().map(|o| o.label).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.objects.len() {
            return Err(CoreError::Config("object labels must be unique".into()));
        }
        if self.objects.iter().any(|o| o.label == 0) {
            return Err(CoreError::Config("label 0 is reserved for empty space".into()));
        }
        if self.objects.iter().any(|o| o.appear_at >= self.timesteps) {
            return Err(CoreError::Config("appear_at must precede the last timestep".into()));
        }
        let any_static = self.objects.iter().any(|o| matches!(o.motion, Motion::Static));
        let any_moving = self.objects.iter().any(|o| !matches!(o.motion, Motion::Static));
        if !any_static || !any_moving {
            return Err(CoreError::Config("need at least one static and one moving object".into()));
        }
        if self.camera_count < 2 {
            return Err(CoreError::Config("need a held-out camera plus training cameras".into()));
        }
        Ok(())
    }

    /// Cameras on a ring, all looking at the scene center. Camera 0 is the
    /// evaluation hold-out by convention.
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let mut cams = Vec::with_capacity(self.camera_count);
        for v in 0..self.camera_count {
            let theta = v as f64 / self.camera_count as f64 * std::f64::consts::TAU;
            let eye = Vector3::new(self.camera_radius * theta.cos(), self.camera_radius * theta.sin(), self.camera_height);
            cams.push(Camera::look_at(
                self.width,
                self.height,
                self.focal,
                self.focal,
                eye,
                Vector3::new(0.0, 0.0, 0.1),
                Vector3::z(),
                0.1,
                30.0,
            )?);
        }
        Ok(cams)
    }

    pub fn max_label(&self) -> u8 {
        self.objects.iter().map(|o| o.label).max().unwrap_or(0)
    }
}

/// The standard verification scene: a static floor slab, a linearly moving
/// blob, and a blob that pops into existence at timestep 8. Camera 0 is
/// held out, the remaining 8 train.
pub fn default_script() -> SceneScript {
    SceneScript {
        seed: 42,
        timesteps: 20,
        width: 128,
        height: 128,
        camera_count: 9,
        camera_radius: 3.6,
        camera_height: 2.4,
        focal: 135.0,
        objects: vec![
            ObjectSpec {
                label: 1,
                count: 1200,
                aabb_min: [-1.1, -1.1, -0.12],
                aabb_max: [1.1, 1.1, 0.02],
                motion: Motion::Static,
                appear_at: 0,
                base_color: [0.45, 0.5, 0.55],
            },
            ObjectSpec {
                label: 2,
                count: 500,
                aabb_min: [-0.8, -0.25, 0.08],
                aabb_max: [-0.3, 0.25, 0.58],
                motion: Motion::Linear { velocity: [0.055, 0.01, 0.0] },
                appear_at: 0,
                base_color: [0.75, 0.45, 0.2],
            },
            ObjectSpec {
                label: 3,
                count: 300,
                aabb_min: [0.33, -0.57, 0.06],
                aabb_max: [0.77, -0.13, 0.5],
                motion: Motion::Static,
                appear_at: 8,
                base_color: [0.2, 0.65, 0.65],
            },
        ],
    }
}

/// Oracle scene at timestep 0 plus per-Gaussian object membership.
pub struct OracleScene {
    /// Rest-pose primitives, object-major.
    pub rest: GaussianSet,
    /// Object index (into script.objects) per primitive.
    pub object_of: Vec<usize>,
}

/// K_id used for oracle identity encodings; comfortably covers the labels
/// of the default script.
pub const ORACLE_K_ID: u32 = 8;

/// Sample the oracle Gaussians for every object (rest pose, timestep 0).
pub fn build_oracle(script: &SceneScript) -> Result<OracleScene> {
    script.validate()?;
    let mut rng = stream_rng(script.seed, 0, Stage::SceneGen);
    let mut rest = GaussianSet::new(0, ORACLE_K_ID);
    let mut object_of = Vec::new();
    for (oi, obj) in script.objects.iter().enumerate() {
        let lo = Vector3::from(obj.aabb_min);
        let hi = Vector3::from(obj.aabb_max);
        let ext = hi - lo;
        // per-axis spacing from the object's own density
        let n_axis = (obj.count as f64).cbrt();
        let scale = ext.map(|e| (e / n_axis * 0.9).max(0.008));
        for _ in 0..obj.count {
            let position = Vector3::new(
                rng.gen_range(lo.x..hi.x),
                rng.gen_range(lo.y..hi.y),
                rng.gen_range(lo.z..hi.z),
            );
            let mut sh = Vec::with_capacity(3);
            for ch in 0..3 {
                let c = (obj.base_color[ch] + rng.gen_range(-0.15..0.15)).clamp(0.08, 0.92);
                sh.push((c - 0.5) / SH_C0);
            }
            let mut identity = vec![0.0; ORACLE_K_ID as usize];
            identity[obj.label as usize] = 1.0;
            rest.base.push(GaussianPrimitive {
                position,
                rotation: Quat::IDENTITY,
                log_scale: scale.map(f64::ln),
                logit_opacity: inverse_sigmoid(rng.gen_range(0.6..0.95)),
                sh,
                identity,
                dynamic_flag: !matches!(obj.motion, Motion::Static),
            });
            object_of.push(oi);
        }
    }
    Ok(OracleScene { rest, object_of })
}

/// Rigid-motion position of a rest-pose point at timestep t.
fn advect(motion: &Motion, p: Vector3<f64>, t: u32) -> Vector3<f64> {
    match motion {
        Motion::Static => p,
        Motion::Linear { velocity } => p + Vector3::from(*velocity) * t as f64,
        Motion::Orbit { center, angular_velocity } => {
            let c = Vector3::from(*center);
            let a = angular_velocity * t as f64;
            let d = p - c;
            c + Vector3::new(d.x * a.cos() - d.y * a.sin(), d.x * a.sin() + d.y * a.cos(), d.z)
        }
    }
}

fn motion_rotation(motion: &Motion, t: u32) -> Quat {
    match motion {
        Motion::Orbit { angular_velocity, .. } => Quat::from_axis_angle(Vector3::z(), angular_velocity * t as f64),
        _ => Quat::IDENTITY,
    }
}

/// Oracle set at timestep t: objects advected, not-yet-appeared objects
/// omitted. Returns the set plus per-primitive object indices.
pub fn oracle_at(script: &SceneScript, oracle: &OracleScene, t: u32) -> (GaussianSet, Vec<usize>) {
    let mut set = GaussianSet::new(0, ORACLE_K_ID);
    set.timestep = t;
    let mut object_of = Vec::new();
    for (gi, g) in oracle.rest.base.iter().enumerate() {
        let oi = oracle.object_of[gi];
        let obj = &script.objects[oi];
        if obj.appear_at > t {
            continue;
        }
        let steps = t - obj.appear_at;
        let mut moved = g.clone();
        moved.position = advect(&obj.motion, g.position, steps);
        moved.rotation = quat_mul(motion_rotation(&obj.motion, steps), g.rotation);
        set.base.push(moved);
        object_of.push(oi);
    }
    (set, object_of)
}

/// Label map per the argmax-α rule: pixels with accumulated alpha > 0.5
/// take the label of their strongest contribution, the rest stay 0.
fn label_map(out: &crate::render::RenderOutput, object_of: &[usize], script: &SceneScript) -> Vec<u8> {
    let npix = out.rgb.h * out.rgb.w;
    let mut labels = vec![0u8; npix];
    for pix in 0..npix {
        if out.alpha.data[pix] <= 0.5 {
            continue;
        }
        let s = out.contrib_offsets[pix] as usize;
        let e = out.contrib_offsets[pix + 1] as usize;
        let mut best_alpha = -1.0;
        let mut best_gaussian = 0usize;
        for entry in &out.contrib[s..e] {
            if entry.alpha > best_alpha {
                best_alpha = entry.alpha;
                best_gaussian = entry.gaussian as usize;
            }
        }
        labels[pix] = script.objects[object_of[best_gaussian]].label;
    }
    labels
}

/// Analytic flow t−1 → t: each pixel takes the projected displacement of
/// its dominant (argmax-α) Gaussian; uncovered pixels get zero flow.
fn analytic_flow(
    cam: &Camera,
    prev_out: &crate::render::RenderOutput,
    prev_set: &GaussianSet,
    cur_positions: &[Vector3<f64>],
) -> Image {
    let (h, w) = (prev_out.rgb.h, prev_out.rgb.w);
    let mut flow = Image::zeros(h, w, 2);
    for pix in 0..h * w {
        let s = prev_out.contrib_offsets[pix] as usize;
        let e = prev_out.contrib_offsets[pix + 1] as usize;
        if s == e {
            continue;
        }
        let mut best_alpha = -1.0;
        let mut gi = 0usize;
        for entry in &prev_out.contrib[s..e] {
            if entry.alpha > best_alpha {
                best_alpha = entry.alpha;
                gi = entry.gaussian as usize;
            }
        }
        let p_prev = cam.world_to_camera_point(prev_set.base[gi].position);
        let p_cur = cam.world_to_camera_point(cur_positions[gi]);
        if p_prev.z <= cam.near || p_cur.z <= cam.near {
            continue;
        }
        let (u0, v0) = cam.pinhole_pixel(p_prev);
        let (u1, v1) = cam.pinhole_pixel(p_cur);
        *flow.at_mut(pix / w, pix % w, 0) = u1 - u0;
        *flow.at_mut(pix / w, pix % w, 1) = v1 - v0;
    }
    flow
}

/// Dataset handle: directory layout plus the script that produced it.
#[derive(Debug, Clone)]
pub struct StreamDataset {
    pub dir: PathBuf,
    pub script: SceneScript,
}

impl StreamDataset {
    pub fn open(dir: &Path) -> Result<StreamDataset> {
        let raw = std::fs::read_to_string(io::paths::script(dir))
            .map_err(|e| CoreError::Data(format!("{}: {e}", dir.display())))?;
        let script: SceneScript =
            serde_json::from_str(&raw).map_err(|e| CoreError::Data(format!("script.json: {e}")))?;
        Ok(StreamDataset { dir: dir.to_path_buf(), script })
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        (0..self.script.camera_count).map(|v| io::read_camera_json(&io::paths::cam_json(&self.dir, v))).collect()
    }

    pub fn load_rgb(&self, view: usize, t: u32) -> Result<Image> {
        io::decode_ppm(&std::fs::read(io::paths::rgb(&self.dir, view, t))?)
    }

    pub fn load_flow(&self, view: usize, t: u32) -> Result<Image> {
        io::decode_flow(&std::fs::read(io::paths::flow(&self.dir, view, t))?)
    }

    pub fn load_label(&self, view: usize, t: u32) -> Result<(Vec<u8>, usize, usize)> {
        io::decode_pgm(&std::fs::read(io::paths::label(&self.dir, view, t))?)
    }

    pub fn load_oracle(&self, t: u32) -> Result<GaussianSet> {
        GaussianSet::restore(&std::fs::read(io::paths::oracle(&self.dir, t))?)
    }
}

/// Generate the full dataset under `out_dir`.
pub fn generate(script: &SceneScript, out_dir: &Path) -> Result<StreamDataset> {
    script.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let cams = script.cameras()?;
    for (v, cam) in cams.iter().enumerate() {
        io::write_camera_json(&io::paths::cam_json(out_dir, v), cam)?;
    }
    std::fs::write(
        io::paths::script(out_dir),
        serde_json::to_string_pretty(script).map_err(|e| CoreError::Data(e.to_string()))?,
    )?;

    let oracle = build_oracle(script)?;
    let mut prev: Option<(GaussianSet, Vec<crate::render::RenderOutput>, Vec<usize>)> = None;
    for t in 0..script.timesteps {
        let (set, object_of) = oracle_at(script, &oracle, t);
        std::fs::write(io::paths::oracle(out_dir, t), set.snapshot())?;

        // renders are independent per view
        let outs: Vec<Result<crate::render::RenderOutput>> =
            par::map_indexed(cams.len(), |v| render(&cams[v], &set, None, RenderOptions::default()));
        let mut outs_ok = Vec::with_capacity(cams.len());
        for o in outs {
            outs_ok.push(o?);
        }

        for (v, out) in outs_ok.iter().enumerate() {
            std::fs::write(io::paths::rgb(out_dir, v, t), io::encode_ppm(&out.rgb)?)?;
            let labels = label_map(out, &object_of, script);
            std::fs::write(
                io::paths::label(out_dir, v, t),
                io::encode_pgm(&labels, out.rgb.h, out.rgb.w)?,
            )?;
        }

        if let Some((prev_set, prev_outs, prev_objects)) = &prev {
            // flow uses the previous timestep's visibility; objects that
            // appear at t have no previous dominant Gaussian and thus no
            // flow. Both motion kinds are time-homogeneous, so advecting
            // the t−1 pose by a single step lands exactly on the t pose.
            let cur_positions: Vec<Vector3<f64>> = prev_set
                .base
                .iter()
                .zip(prev_objects)
                .map(|(g, &oi)| advect(&script.objects[oi].motion, g.position, 1))
                .collect();
            for (v, prev_out) in prev_outs.iter().enumerate() {
                let flow = analytic_flow(&cams[v], prev_out, prev_set, &cur_positions);
                std::fs::write(io::paths::flow(out_dir, v, t), io::encode_flow(&flow)?)?;
            }
        }
        prev = Some((set, outs_ok, object_of));
    }
    Ok(StreamDataset { dir: out_dir.to_path_buf(), script: script.clone() })
}
