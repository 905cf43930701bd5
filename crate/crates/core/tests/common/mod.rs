//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use geode_core::config::{DataConfig, SceneConfig};
use geode_core::dataset::{build_scene, read_records, SceneData, Split};
use geode_core::drh::{self, ControlKind};
use geode_core::encoders::{self, SceneInputs};
use geode_core::nn::{self, Dims};
use geode_core::qa::{numbers_in, QaSample, TaskKind};
use geode_core::scene::{generate_scene, Category, Scene};
use geode_core::vocab::Vocab;
use geode_core::{drm, lm, LabConfig};
use geode_tensor::gradcheck::{check_param_gradients_with, Stencil};
use geode_tensor::{ParamStore, Result as TResult, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn load_config(name: &str) -> LabConfig {
    LabConfig::load(workspace_root().join("configs").join(name)).expect("bundled config loads")
}

pub fn tiny_config() -> LabConfig {
    load_config("tiny.json")
}

/// Smallest model sizes used by the finite-difference checks.
pub fn gradcheck_config() -> LabConfig {
    let mut c = LabConfig::default();
    c.data.frames = 2;
    c.data.grid = 8;
    c.data.patch = 4;
    c.data.points = 256;
    c.model.d_model = 8;
    c.model.d_3d = 6;
    c.model.k_tokens = 3;
    c.model.m_tokens = 2;
    c.model.enc_heads = 2;
    c.model.point_hidden = 6;
    c.model.scan_width = 5;
    c.model.lm_layers = 1;
    c.model.lm_heads = 2;
    c.model.lm_mlp_ratio = 2;
    c.model.context = 96;
    c.model.drh_hidden = 6;
    c.model.max_frames = 4;
    c
}

/// First scene at or after `seed` that generates and renders.
pub fn scene_at(seed: u64, scene: &SceneConfig, data: &DataConfig) -> (Scene, SceneData, Vec<QaSample>) {
    (seed..seed + 100)
        .find_map(|s| build_scene(s, scene, data, 0).ok())
        .expect("a scene generates within 100 seeds")
}

/// Every module with all parameters trainable, at 64-bit, jittered away from
/// the initialization so attention is not uniform.
pub fn full_store(cfg: &LabConfig, seed: u64) -> ParamStore<f64> {
    let dims = Dims::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    lm::init_lm(&mut s, &dims, Vocab::extended().len(), &mut rng);
    encoders::init_enc2d(&mut s, &dims, &mut rng);
    encoders::init_enc3d(&mut s, &dims, &mut rng);
    drm::init_drm(&mut s, &dims, &mut rng);
    nn::init_linear(&mut s, "proj2d", dims.d, dims.d, true, &mut rng);
    drh::init_drh(&mut s, &dims, &mut rng);
    s.apply_freeze_mask(&[""]);
    let mut s: ParamStore<f64> = s.cast();
    let names: Vec<String> = s.names().map(str::to_string).collect();
    for n in names {
        for x in s.get_mut(&n).unwrap().data_mut() {
            *x += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    s
}

/// Attention query/key gradients can be tiny next to the loss value, so the
/// module checks use a wide step with the fourth-order stencil.
pub const MODULE_STEP: f64 = 1e-3;

pub const MODULES: [&str; 7] = ["enc2d", "enc3d", "drm", "lm", "stage1", "drh_reg", "drh_box"];

fn weighted(tape: &mut Tape<f64>, x: Var, seed: u64) -> TResult<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let shape = tape.shape(x).to_vec();
    let n = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn lift<T>(r: geode_core::Result<T>) -> TResult<T> {
    r.map_err(|e| geode_tensor::TensorError::Contract(e.to_string()))
}

/// Largest relative error of one random instance of `module`, checking two
/// of its parameter tensors chosen by rotation.
pub fn module_error(module: &str, instance: u64) -> f64 {
    module_errors(module, instance, MODULE_STEP).1.into_iter().fold(0.0, f64::max)
}

/// Checked parameter names and their relative errors at finite-difference `step`.
pub fn module_errors(module: &str, instance: u64, step: f64) -> (Vec<String>, Vec<f64>) {
    let cfg = gradcheck_config();
    let dims = Dims::from_config(&cfg);
    let store = full_store(&cfg, 1000 + instance);
    let (_, scene, samples) = scene_at(instance * 7, &cfg.scene, &cfg.data);
    let inputs = SceneInputs::new(&scene, cfg.data.patch).expect("inputs build");
    let vocab = Vocab::extended();
    let rationale = {
        let mut ids = vec![vocab.bos()];
        ids.extend(vocab.tokenize(&samples[0].rationale).unwrap());
        ids.truncate(24);
        ids
    };
    let prefix = match module {
        "stage1" => "",
        "drh_reg" => "drh.reg",
        "drh_box" => "drh.box",
        other => other,
    };
    let names: Vec<String> = store
        .names()
        .filter(|n| match module {
            "stage1" => n.starts_with("drm.") || n.starts_with("enc"),
            _ => n.starts_with(prefix),
        })
        .map(str::to_string)
        .collect();
    assert!(!names.is_empty(), "no parameters for {module}");
    let pick: Vec<&str> = (0..2)
        .map(|j| names[(2 * instance as usize + j) % names.len()].as_str())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(instance);
    let hidden = Tensor::new([1, dims.d], (0..dims.d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let box_target: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let prefix_rows = Tensor::new([2, dims.d], (0..2 * dims.d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let build = |t: &mut Tape<f64>, s: &ParamStore<f64>| -> TResult<Var> {
        match module {
            "enc2d" => {
                let y = lift(encoders::encode_2d(t, s, &inputs.patches, &dims))?;
                weighted(t, y, instance)
            }
            "enc3d" => {
                let y = lift(encoders::encode_3d(t, s, &inputs.points, &dims))?;
                weighted(t, y, instance)
            }
            "drm" => {
                let y = lift(drm::rationale_tokens(t, s, &inputs, &dims))?;
                weighted(t, y, instance)
            }
            "lm" => {
                let p = t.constant(prefix_rows.clone());
                lift(lm::text_loss(t, s, Some(p), &rationale, &dims))
            }
            "stage1" => {
                let tokens = lift(drm::rationale_tokens(t, s, &inputs, &dims))?;
                lift(drm::stage1_loss(t, s, Some(tokens), &rationale, &dims))
            }
            "drh_reg" => {
                let h = t.constant(hidden.clone());
                let y = lift(drh::regress(t, s, h, ControlKind::Reg, TaskKind::AbsDist, &dims))?;
                let target = t.constant(Tensor::new([1, 1], vec![0.7]).unwrap());
                t.mse(y, target)
            }
            "drh_box" => {
                let h = t.constant(hidden.clone());
                let y = lift(drh::regress(t, s, h, ControlKind::Bbox, TaskKind::Locate, &dims))?;
                let target = t.constant(Tensor::new([1, 7], box_target.clone()).unwrap());
                t.mse(y, target)
            }
            other => panic!("unknown module {other}"),
        }
    };
    let errors = check_param_gradients_with(&store, &pick, build, step, Stencil::Central4)
        .unwrap_or_else(|e| panic!("{module} instance {instance}: {e}"))
        .errors;
    (pick.iter().map(|s| s.to_string()).collect(), errors)
}

/// One disagreement between a stored sample and the geometric recomputation.
#[derive(Debug)]
pub struct Mismatch {
    pub sample: usize,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct OracleSummary {
    pub numeric_checked: usize,
    pub choices_checked: usize,
    pub rationales_checked: usize,
    pub mismatches: Vec<Mismatch>,
}

fn category_after(question: &str, marker: &str) -> Option<Category> {
    let rest = question.split(marker).nth(1)?;
    Category::from_name(rest.split_whitespace().next()?)
}

fn object_of(scene: &Scene, cat: Category) -> Option<&geode_core::scene::Object> {
    let mut it = scene.objects.iter().filter(|o| o.category == cat);
    let first = it.next()?;
    it.next().is_none().then_some(first)
}

fn euclid(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Recomputes every target of a split from regenerated scene geometry and the
/// stored frames, and checks the last numbers stated by each rationale.
pub fn oracle_check(dir: &Path, split: &str, scene_cfg: &SceneConfig) -> OracleSummary {
    let records = read_records(dir, split).expect("records load");
    let loaded = Split::load(dir, split).expect("split loads");
    let mut out = OracleSummary::default();
    for (i, r) in records.iter().enumerate() {
        let s = &r.sample;
        let scene = generate_scene(s.scene_id, scene_cfg).expect("scene regenerates");
        let frames = &loaded.scene(s.scene_id).frames;
        let mut bad = |reason: String| out.mismatches.push(Mismatch { sample: i, reason });
        let q = s.question.as_str();
        let expect_scalar = match s.task {
            TaskKind::ObjCount => category_after(q, "how many ").map(|c| scene.objects.iter().filter(|o| o.category == c).count() as f64),
            TaskKind::AbsDist => {
                let a = category_after(q, "between the ").and_then(|c| object_of(&scene, c));
                let b = category_after(q, " and the ").and_then(|c| object_of(&scene, c));
                a.zip(b).map(|(a, b)| euclid(a.center, b.center))
            }
            TaskKind::ObjSize => category_after(q, "dimension of the ")
                .and_then(|c| object_of(&scene, c))
                .map(|o| o.size[0].max(o.size[1]).max(o.size[2])),
            TaskKind::RoomSize => Some(scene.room.width * scene.room.depth),
            _ => None,
        };
        if let Some(e) = expect_scalar {
            out.numeric_checked += 1;
            let got = s.target_scalar.unwrap_or(f64::NAN);
            if !((got - e).abs() <= 1e-6) {
                bad(format!("{}: target {got} vs recomputed {e}", s.task.name()));
            }
        } else if s.task.is_numeric() && s.task != TaskKind::Locate {
            bad(format!("{}: question not understood: {q}", s.task.name()));
        }
        if s.task == TaskKind::Locate {
            out.numeric_checked += 1;
            match category_after(q, "where is the ").and_then(|c| object_of(&scene, c)) {
                Some(o) => {
                    let expect = [o.center[0], o.center[1], o.size[2] / 2.0, o.size[0], o.size[1], o.size[2], o.yaw];
                    let got = s.target_box.unwrap_or([f64::NAN; 7]);
                    if !got.iter().zip(expect).all(|(g, e)| (g - e).abs() <= 1e-6) {
                        bad(format!("locate: box {got:?} vs {expect:?}"));
                    }
                }
                None => bad(format!("locate: question not understood: {q}")),
            }
        }
        if let (Some(choices), Some(idx)) = (&s.choices, s.answer_index()) {
            let answer = choices[idx].as_str();
            let expect: Option<String> = match s.task {
                TaskKind::RelDist => {
                    let anchor = category_after(q, "closer to the ").and_then(|c| object_of(&scene, c));
                    anchor.and_then(|a| {
                        choices
                            .iter()
                            .filter_map(|c| Category::from_name(c).and_then(|c| object_of(&scene, c)))
                            .min_by(|x, y| euclid(a.center, x.center).total_cmp(&euclid(a.center, y.center)))
                            .map(|o| o.category.name().to_string())
                    })
                }
                TaskKind::RelDir => {
                    let target = category_after(q, "where is the ").and_then(|c| object_of(&scene, c));
                    let anchor = category_after(q, "relative to the ").and_then(|c| object_of(&scene, c));
                    target.zip(anchor).map(|(t, a)| {
                        let yaw = frames[0].pose.yaw;
                        let (vx, vy) = (t.center[0] - a.center[0], t.center[1] - a.center[1]);
                        let right = vx * yaw.sin() - vy * yaw.cos();
                        let ahead = vx * yaw.cos() + vy * yaw.sin();
                        let dir = if right.abs() > ahead.abs() {
                            if right > 0.0 { "right" } else { "left" }
                        } else if ahead > 0.0 {
                            "front"
                        } else {
                            "behind"
                        };
                        dir.to_string()
                    })
                }
                TaskKind::AppearOrder => choices
                    .iter()
                    .filter_map(|c| {
                        let o = Category::from_name(c).and_then(|c| object_of(&scene, c))?;
                        let first = frames.iter().position(|f| {
                            (0..f.grid).any(|r| (0..f.grid).any(|c| f.id_at(r, c) == o.id as i32))
                        })?;
                        Some((first, c.clone()))
                    })
                    .min_by_key(|(f, _)| *f)
                    .map(|(_, c)| c),
                _ => None,
            };
            out.choices_checked += 1;
            if expect.as_deref() != Some(answer) {
                bad(format!("{}: answer {answer} vs recomputed {expect:?}", s.task.name()));
            }
        }
        let stated = numbers_in(&s.rationale);
        let ok = match (s.target_scalar, s.target_box) {
            (Some(t), _) => stated.last().is_some_and(|v| (v - t).abs() <= 0.005),
            (_, Some(b)) => stated.len() >= 7 && stated[stated.len() - 7..].iter().zip(b).all(|(v, t)| (v - t).abs() <= 0.005),
            _ => true,
        };
        if s.target_scalar.is_some() || s.target_box.is_some() {
            out.rationales_checked += 1;
            if !ok {
                bad(format!("{}: rationale numbers {:?} disagree with target", s.task.name(), stated.last()));
            }
        }
    }
    out
}
