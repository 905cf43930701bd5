//! Dataset generation, JSONL emission and binary sidecars.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use geode_tensor::{checkpoint, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, SceneConfig};
use crate::qa::{make_qa, QaSample, TaskKind};
use crate::render::{render_frames, sample_pointcloud, CameraPose, Frame, PointCloud};
use crate::scene::{generate_scene, Category, Scene};
use crate::{derive_seed, GeodeError, Result};

/// One JSONL line: the sample plus references to its scene sidecars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    #[serde(flatten)]
    pub sample: QaSample,
    pub frames_file: String,
    pub cloud_file: String,
}

/// Model inputs of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneData {
    pub scene_id: u64,
    /// Category of each object id.
    pub categories: Vec<Category>,
    pub frames: Vec<Frame>,
    pub cloud: PointCloud,
}

impl SceneData {
    pub fn poses(&self) -> Vec<CameraPose> {
        self.frames.iter().map(|f| f.pose).collect()
    }

    pub fn category_of(&self, id: i32) -> Option<Category> {
        usize::try_from(id).ok().and_then(|i| self.categories.get(i).copied())
    }
}

/// Per-task divisors mapping numeric targets to roughly unit range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    pub count: f64,
    pub distance: f64,
    pub area: f64,
    pub size: f64,
    /// (cx, cy, cz, w, d, h, yaw)
    pub bbox: [f64; 7],
}

impl Scales {
    pub fn from_config(scene: &SceneConfig) -> Self {
        let (r, h) = (scene.room_max, scene.room_height);
        Self {
            count: scene.max_objects as f64,
            distance: (2.0 * r * r + h * h).sqrt(),
            area: r * r,
            size: Category::max_extent(),
            bbox: [r, r, h, r, r, h, PI],
        }
    }

    pub fn scalar(&self, task: TaskKind) -> Result<f64> {
        match task {
            TaskKind::ObjCount => Ok(self.count),
            TaskKind::AbsDist => Ok(self.distance),
            TaskKind::RoomSize => Ok(self.area),
            TaskKind::ObjSize => Ok(self.size),
            _ => Err(GeodeError::Dataset(format!("task {} has no scalar target", task.name()))),
        }
    }

    pub fn normalize(&self, task: TaskKind, y: f64) -> Result<f64> {
        Ok(y / self.scalar(task)?)
    }

    pub fn denormalize(&self, task: TaskKind, y: f64) -> Result<f64> {
        Ok(y * self.scalar(task)?)
    }

    pub fn normalize_box(&self, b: &[f64; 7]) -> [f64; 7] {
        std::array::from_fn(|i| b[i] / self.bbox[i])
    }

    pub fn denormalize_box(&self, b: &[f64; 7]) -> [f64; 7] {
        std::array::from_fn(|i| b[i] * self.bbox[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: String,
    pub samples: usize,
    pub scenes: usize,
    pub counts: BTreeMap<String, usize>,
    pub scales: Scales,
    pub frames: usize,
    pub grid: usize,
}

impl Manifest {
    pub fn path(dir: &Path, split: &str) -> PathBuf {
        dir.join(format!("{split}.manifest.json"))
    }

    pub fn load(dir: &Path, split: &str) -> Result<Self> {
        let path = Self::path(dir, split);
        let text = fs::read_to_string(&path).map_err(|e| GeodeError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|source| GeodeError::Json { path, source })
    }
}

pub fn task_counts<'a>(samples: impl IntoIterator<Item = &'a QaSample>) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> =
        TaskKind::ALL.iter().map(|t| (t.name().to_string(), 0)).collect();
    for s in samples {
        *counts.get_mut(s.task.name()).expect("all tasks listed") += 1;
    }
    counts
}

fn f32s(values: impl IntoIterator<Item = f64>) -> Vec<f32> {
    values.into_iter().map(|v| v as f32).collect()
}

fn frames_store(scene: &SceneData) -> Result<ParamStore> {
    let n = scene.frames.len();
    let g = scene.frames.first().map_or(0, |f| f.grid);
    let mut grid = Vec::with_capacity(n * g * g * 2);
    for f in &scene.frames {
        for (id, d) in f.ids.iter().zip(&f.depth) {
            grid.push(*id as f32);
            grid.push(*d as f32);
        }
    }
    let poses = scene
        .frames
        .iter()
        .flat_map(|f| [f.pose.position[0], f.pose.position[1], f.pose.position[2], f.pose.yaw, f.pose.pitch]);
    let mut s = ParamStore::new();
    s.insert("grid", Tensor::new([n, g, g, 2], grid)?);
    s.insert("poses", Tensor::new([n, 5], f32s(poses))?);
    s.insert(
        "categories",
        Tensor::vector(scene.categories.iter().map(|c| c.index() as f32).collect()),
    );
    Ok(s)
}

fn cloud_store(cloud: &PointCloud) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    s.insert(
        "xyz",
        Tensor::new([cloud.len(), 3], f32s(cloud.points.iter().flatten().copied()))?,
    );
    s.insert("ids", Tensor::vector(cloud.ids.iter().map(|&i| i as f32).collect()));
    Ok(s)
}

fn bad_sidecar(path: &Path, what: &str) -> GeodeError {
    GeodeError::Dataset(format!("{}: {what}", path.display()))
}

pub fn load_scene(dir: &Path, frames_file: &str, cloud_file: &str, scene_id: u64) -> Result<SceneData> {
    let fp = dir.join(frames_file);
    let fs_ = checkpoint::load::<f32>(&fp)?;
    let grid = fs_.get("grid")?;
    let poses = fs_.get("poses")?;
    let cats = fs_.get("categories")?;
    let [n, g, g2, two] = grid.shape() else {
        return Err(bad_sidecar(&fp, "grid must be [N, G, G, 2]"));
    };
    if g != g2 || *two != 2 || poses.shape() != [*n, 5] {
        return Err(bad_sidecar(&fp, "inconsistent grid/pose shapes"));
    }
    let categories = cats
        .data()
        .iter()
        .map(|&c| Category::from_index(c as usize).ok_or_else(|| bad_sidecar(&fp, "bad category")))
        .collect::<Result<Vec<_>>>()?;
    let frames = (0..*n)
        .map(|i| {
            let cells = &grid.data()[i * g * g * 2..(i + 1) * g * g * 2];
            let p = poses.row(i);
            Frame {
                pose: CameraPose {
                    position: [p[0] as f64, p[1] as f64, p[2] as f64],
                    yaw: p[3] as f64,
                    pitch: p[4] as f64,
                },
                grid: *g,
                ids: cells.iter().step_by(2).map(|&v| v as i32).collect(),
                depth: cells.iter().skip(1).step_by(2).map(|&v| v as f64).collect(),
            }
        })
        .collect();
    let cp = dir.join(cloud_file);
    let cs = checkpoint::load::<f32>(&cp)?;
    let xyz = cs.get("xyz")?;
    let ids = cs.get("ids")?;
    if xyz.cols() != 3 || ids.numel() != xyz.rows() {
        return Err(bad_sidecar(&cp, "inconsistent cloud shapes"));
    }
    let cloud = PointCloud {
        points: (0..xyz.rows())
            .map(|r| {
                let p = xyz.row(r);
                [p[0] as f64, p[1] as f64, p[2] as f64]
            })
            .collect(),
        ids: ids.data().iter().map(|&v| v as usize).collect(),
    };
    Ok(SceneData {
        scene_id,
        categories,
        frames,
        cloud,
    })
}

fn sidecar_names(split: &str, scene_id: u64) -> (String, String) {
    (
        format!("scenes/{split}_{scene_id}_frames.geod"),
        format!("scenes/{split}_{scene_id}_cloud.geod"),
    )
}

/// Writes `{split}.jsonl`, one frames and one cloud sidecar per scene, and
/// `{split}.manifest.json`. Every sample's scene must be among `scenes`.
pub fn emit_dataset(
    dir: &Path,
    split: &str,
    samples: &[QaSample],
    scenes: &[SceneData],
    scales: &Scales,
) -> Result<Manifest> {
    fs::create_dir_all(dir.join("scenes")).map_err(|e| GeodeError::io(dir.join("scenes"), e))?;
    let by_id: BTreeMap<u64, &SceneData> = scenes.iter().map(|s| (s.scene_id, s)).collect();
    for s in scenes {
        let (ff, cf) = sidecar_names(split, s.scene_id);
        checkpoint::save(dir.join(ff), &frames_store(s)?)?;
        checkpoint::save(dir.join(cf), &cloud_store(&s.cloud)?)?;
    }
    let path = dir.join(format!("{split}.jsonl"));
    let file = File::create(&path).map_err(|e| GeodeError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for sample in samples {
        if !by_id.contains_key(&sample.scene_id) {
            return Err(GeodeError::Dataset(format!(
                "sample references unknown scene {}",
                sample.scene_id
            )));
        }
        let (frames_file, cloud_file) = sidecar_names(split, sample.scene_id);
        let rec = Record {
            sample: sample.clone(),
            frames_file,
            cloud_file,
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| GeodeError::io(&path, e))?;
    }
    w.flush().map_err(|e| GeodeError::io(&path, e))?;
    let first = scenes.first().and_then(|s| s.frames.first());
    let manifest = Manifest {
        split: split.to_string(),
        samples: samples.len(),
        scenes: scenes.len(),
        counts: task_counts(samples),
        scales: scales.clone(),
        frames: scenes.first().map_or(0, |s| s.frames.len()),
        grid: first.map_or(0, |f| f.grid),
    };
    let mpath = Manifest::path(dir, split);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(|e| GeodeError::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_records(dir: &Path, split: &str) -> Result<Vec<Record>> {
    let path = dir.join(format!("{split}.jsonl"));
    let file = File::open(&path).map_err(|e| GeodeError::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GeodeError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| {
            GeodeError::Dataset(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        rec.sample.check()?;
        out.push(rec);
    }
    Ok(out)
}

/// A loaded split: records plus the scenes they reference.
pub struct Split {
    pub records: Vec<Record>,
    pub scenes: BTreeMap<u64, SceneData>,
    pub manifest: Manifest,
}

impl Split {
    pub fn load(dir: &Path, split: &str) -> Result<Self> {
        let manifest = Manifest::load(dir, split)?;
        let records = read_records(dir, split)?;
        let mut scenes = BTreeMap::new();
        for r in &records {
            if let std::collections::btree_map::Entry::Vacant(e) = scenes.entry(r.sample.scene_id) {
                let s = load_scene(dir, &r.frames_file, &r.cloud_file, r.sample.scene_id)?;
                e.insert(s);
            }
        }
        Ok(Self {
            records,
            scenes,
            manifest,
        })
    }

    pub fn scene(&self, id: u64) -> &SceneData {
        &self.scenes[&id]
    }
}

/// Scene, rendered frames, point cloud and QA samples for one scene seed.
pub fn build_scene(
    seed: u64,
    scene_cfg: &SceneConfig,
    data: &DataConfig,
    first_sample: usize,
) -> Result<(Scene, SceneData, Vec<QaSample>)> {
    let scene = generate_scene(seed, scene_cfg)?;
    let frames = render_frames(&scene, derive_seed(seed, 1), data.frames, data.grid)?;
    let cloud = sample_pointcloud(&scene, &frames, data.points, derive_seed(seed, 2))?;
    let tasks: Vec<TaskKind> = data
        .tasks
        .iter()
        .map(|t| TaskKind::from_name(t).ok_or_else(|| GeodeError::config("data.tasks", format!("unknown task `{t}`"))))
        .collect::<Result<_>>()?;
    let mut samples = Vec::with_capacity(data.samples_per_scene);
    for k in 0..data.samples_per_scene {
        let qa_seed = derive_seed(seed, 100 + k as u64);
        // rotate through tasks; skip ones this scene cannot support or that
        // would repeat an earlier question
        for j in 0..tasks.len() {
            let task = tasks[(first_sample + k + j) % tasks.len()];
            match make_qa(&scene, &frames, task, qa_seed) {
                Ok(s) if samples.iter().any(|p: &QaSample| p.question == s.question) => continue,
                Ok(s) => {
                    samples.push(s);
                    break;
                }
                Err(GeodeError::Task { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    let data = SceneData {
        scene_id: scene.id,
        categories: scene.categories(),
        frames,
        cloud,
    };
    Ok((scene, data, samples))
}

/// Generates one split over the given scene seeds. Scenes whose generation
/// fails or that show no object are skipped with a warning.
pub fn build_split(
    seeds: impl IntoIterator<Item = u64>,
    scene_cfg: &SceneConfig,
    data: &DataConfig,
) -> Result<(Vec<QaSample>, Vec<SceneData>)> {
    let mut samples = Vec::new();
    let mut scenes = Vec::new();
    for (i, seed) in seeds.into_iter().enumerate() {
        match build_scene(seed, scene_cfg, data, i * data.samples_per_scene) {
            Ok((_, sd, qa)) => {
                samples.extend(qa);
                scenes.push(sd);
            }
            Err(e @ (GeodeError::Generation(_) | GeodeError::EmptyCloud(_))) => {
                log::warn!("skipping scene seed {seed}: {e}");
            }
            Err(e) => return Err(e),
        }
    }
    Ok((samples, scenes))
}

pub fn train_seeds(data: &DataConfig) -> impl Iterator<Item = u64> {
    0..data.train_scenes as u64
}

pub fn eval_seeds(data: &DataConfig) -> impl Iterator<Item = u64> {
    let off = data.eval_seed_offset;
    (0..data.eval_scenes as u64).map(move |i| off + i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_round_trip() {
        let s = Scales::from_config(&SceneConfig::default());
        for t in [TaskKind::ObjCount, TaskKind::AbsDist, TaskKind::RoomSize, TaskKind::ObjSize] {
            let y = 3.217;
            let back = s.denormalize(t, s.normalize(t, y).unwrap()).unwrap();
            assert!((back - y).abs() < 1e-12);
        }
        let b = [1.0, 2.0, 0.3, 0.5, 0.6, 0.7, -2.0];
        let back = s.denormalize_box(&s.normalize_box(&b));
        assert!(b.iter().zip(back).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(s.scalar(TaskKind::RelDir).is_err());
    }
}
