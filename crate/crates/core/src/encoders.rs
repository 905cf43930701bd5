//! Trainable 2D raster encoder and 3D point encoder.

use geode_tensor::{ParamStore, Real, Tape, Tensor, TensorError, Var};
use rand::Rng;

use crate::dataset::SceneData;
use crate::nn::{self, Dims};
use crate::render::{CameraPose, Frame, PointCloud};
use crate::scene::Category;
use crate::{GeodeError, Result};

/// Per-cell features: category one-hot with a leading "empty" slot, then depth.
pub const CELL_FEATURES: usize = Category::COUNT + 2;
/// Per-point features: position, category one-hot, position in the first camera.
pub const POINT_FEATURES: usize = 3 + Category::COUNT + 3;
/// Pose summary: mean position and mean heading as (cos, sin).
pub const POSE_FEATURES: usize = 5;

const DEPTH_SCALE: f64 = 10.0;
const POSITION_SCALE: f64 = 5.0;

/// Flattened patch features of a frame sequence, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchInputs {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub frame_idx: Vec<usize>,
    pub pos_idx: Vec<usize>,
}

pub fn patch_inputs(frames: &[Frame], categories: &[Category], patch: usize) -> Result<PatchInputs> {
    let g = frames
        .first()
        .ok_or_else(|| GeodeError::Tensor(TensorError::Contract("no frames".into())))?
        .grid;
    for f in frames {
        if f.grid != g {
            return Err(TensorError::Shape {
                op: "encode_2d",
                lhs: vec![g, g],
                rhs: vec![f.grid, f.grid],
            }
            .into());
        }
    }
    if patch == 0 || g % patch != 0 {
        return Err(TensorError::Contract(format!("patch {patch} does not divide grid {g}")).into());
    }
    let per_side = g / patch;
    let cols = patch * patch * CELL_FEATURES;
    let rows = frames.len() * per_side * per_side;
    let mut data = vec![0.0; rows * cols];
    let mut frame_idx = Vec::with_capacity(rows);
    let mut pos_idx = Vec::with_capacity(rows);
    let mut row = 0;
    for (fi, f) in frames.iter().enumerate() {
        for pr in 0..per_side {
            for pc in 0..per_side {
                let out = &mut data[row * cols..(row + 1) * cols];
                for dr in 0..patch {
                    for dc in 0..patch {
                        let (r, c) = (pr * patch + dr, pc * patch + dc);
                        let cell = &mut out[(dr * patch + dc) * CELL_FEATURES..][..CELL_FEATURES];
                        let id = f.id_at(r, c);
                        let slot = if id < 0 {
                            0
                        } else {
                            let cat = categories.get(id as usize).ok_or_else(|| {
                                GeodeError::Dataset(format!("object id {id} has no category"))
                            })?;
                            1 + cat.index()
                        };
                        cell[slot] = 1.0;
                        cell[CELL_FEATURES - 1] = f.depth_at(r, c) / DEPTH_SCALE;
                    }
                }
                frame_idx.push(fi);
                pos_idx.push(pr * per_side + pc);
                row += 1;
            }
        }
    }
    Ok(PatchInputs {
        rows,
        cols,
        data,
        frame_idx,
        pos_idx,
    })
}

/// Per-point features and the pose summary of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct PointInputs {
    pub rows: usize,
    pub data: Vec<f64>,
    pub pose: [f64; POSE_FEATURES],
}

pub fn point_inputs(cloud: &PointCloud, categories: &[Category], poses: &[CameraPose]) -> Result<PointInputs> {
    if cloud.is_empty() {
        return Err(TensorError::Contract("encode_3d of an empty cloud".into()).into());
    }
    let cam = poses
        .first()
        .ok_or_else(|| GeodeError::Tensor(TensorError::Contract("encode_3d needs a pose".into())))?;
    let (right, up, fwd) = (cam.right(), cam.up(), cam.forward());
    let mut data = Vec::with_capacity(cloud.len() * POINT_FEATURES);
    for (p, &id) in cloud.points.iter().zip(&cloud.ids) {
        let cat = categories
            .get(id)
            .ok_or_else(|| GeodeError::Dataset(format!("point of unknown object {id}")))?;
        data.extend(p.iter().map(|v| v / POSITION_SCALE));
        let mut one_hot = [0.0; Category::COUNT];
        one_hot[cat.index()] = 1.0;
        data.extend(one_hot);
        let d = [p[0] - cam.position[0], p[1] - cam.position[1], p[2] - cam.position[2]];
        for axis in [right, up, fwd] {
            data.push((d[0] * axis[0] + d[1] * axis[1] + d[2] * axis[2]) / POSITION_SCALE);
        }
    }
    let n = poses.len() as f64;
    let mean = |f: &dyn Fn(&CameraPose) -> f64| poses.iter().map(f).sum::<f64>() / n;
    let pose = [
        mean(&|p| p.position[0]) / POSITION_SCALE,
        mean(&|p| p.position[1]) / POSITION_SCALE,
        mean(&|p| p.position[2]) / POSITION_SCALE,
        mean(&|p| p.yaw.cos()),
        mean(&|p| p.yaw.sin()),
    ];
    Ok(PointInputs {
        rows: cloud.len(),
        data,
        pose,
    })
}

/// Both encoder inputs of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInputs {
    pub patches: PatchInputs,
    pub points: PointInputs,
}

impl SceneInputs {
    pub fn new(scene: &SceneData, patch: usize) -> Result<Self> {
        Ok(Self {
            patches: patch_inputs(&scene.frames, &scene.categories, patch)?,
            points: point_inputs(&scene.cloud, &scene.categories, &scene.poses())?,
        })
    }

    pub fn frames(&self) -> usize {
        self.patches.frame_idx.last().map_or(0, |f| f + 1)
    }
}

pub fn init_enc2d(store: &mut ParamStore, dims: &Dims, rng: &mut impl Rng) {
    let d = dims.d;
    nn::init_linear(store, "enc2d.patch", dims.patch * dims.patch * CELL_FEATURES, d, true, rng);
    store.insert("enc2d.pos", nn::normal(&[dims.patches(), d], 0.1, rng));
    store.insert("enc2d.frame", nn::normal(&[dims.max_frames, d], 0.1, rng));
    let gain = 1.0 / (2.0 * dims.enc2d_blocks.max(1) as f64).sqrt();
    for b in 0..dims.enc2d_blocks {
        nn::init_block(store, &format!("enc2d.blk{b}"), d, 2 * d, gain, rng);
    }
}

/// `[T × d]` tokens, `T = frames · patches`.
pub fn encode_2d<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, inputs: &PatchInputs, dims: &Dims) -> Result<Var> {
    if let Some(&f) = inputs.frame_idx.iter().max() {
        if f >= dims.max_frames {
            return Err(TensorError::Index {
                op: "encode_2d",
                index: f,
                size: dims.max_frames,
            }
            .into());
        }
    }
    let x = nn::constant(tape, inputs.rows, inputs.cols, &inputs.data)?;
    let x = nn::linear(tape, store, x, "enc2d.patch")?;
    let pos = tape.param(store, "enc2d.pos")?;
    let pos = tape.embedding(pos, &inputs.pos_idx)?;
    let fr = tape.param(store, "enc2d.frame")?;
    let fr = tape.embedding(fr, &inputs.frame_idx)?;
    let x = tape.add(x, pos)?;
    let mut x = tape.add(x, fr)?;
    for b in 0..dims.enc2d_blocks {
        x = nn::block(tape, store, x, &format!("enc2d.blk{b}"), dims.enc_heads, false)?;
    }
    Ok(x)
}

pub fn init_enc3d(store: &mut ParamStore, dims: &Dims, rng: &mut impl Rng) {
    let h = dims.point_hidden;
    nn::init_linear(store, "enc3d.fc1", POINT_FEATURES, h, true, rng);
    nn::init_linear(store, "enc3d.fc2", h, h, true, rng);
    store.insert("enc3d.query", nn::normal(&[dims.k, h], 1.0, rng));
    nn::init_linear(store, "enc3d.out", h + POSE_FEATURES, dims.d3, true, rng);
}

/// Per-point perceptron features `[P × hidden]`.
pub fn point_features<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, inputs: &PointInputs) -> Result<Var> {
    let x = nn::constant(tape, inputs.rows, POINT_FEATURES, &inputs.data)?;
    let h = nn::linear(tape, store, x, "enc3d.fc1")?;
    let h = tape.gelu(h)?;
    nn::linear(tape, store, h, "enc3d.fc2")
}

/// `[K × d_3d]` context tokens via attention pooling with K learned queries.
pub fn encode_3d<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, inputs: &PointInputs, dims: &Dims) -> Result<Var> {
    let h = point_features(tape, store, inputs)?;
    let hidden = tape.value(h).cols();
    let q = tape.param(store, "enc3d.query")?;
    let s = tape.matmul_t(q, h)?;
    let s = tape.scale(s, 1.0 / (hidden as f64).sqrt())?;
    let a = tape.softmax(s)?;
    let pooled = tape.matmul(a, h)?;
    let k = dims.k;
    let pose = nn::constant(tape, 1, POSE_FEATURES, &inputs.pose)?;
    let pose = tape.repeat_rows(pose, k)?;
    let x = tape.concat_cols(&[pooled, pose])?;
    nn::linear(tape, store, x, "enc3d.out")
}

/// Tokens equal to `pos[patch] + frame[frame]`, the 2D encoder's additive embedding.
pub fn positional_rows(store: &ParamStore, inputs: &PatchInputs) -> Result<Tensor> {
    let pos = store.get("enc2d.pos")?;
    let fr = store.get("enc2d.frame")?;
    let d = pos.cols();
    let mut out = Vec::with_capacity(inputs.rows * d);
    for (&p, &f) in inputs.pos_idx.iter().zip(&inputs.frame_idx) {
        out.extend(pos.row(p).iter().zip(fr.row(f)).map(|(a, b)| a + b));
    }
    Ok(Tensor::new([inputs.rows, d], out)?)
}
