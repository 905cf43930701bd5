//! Template question answering over synthetic scenes.

use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::registry::Registry;
use crate::render::{first_appearance, Frame};
use crate::scene::{Category, Object, Scene};
use crate::{GeodeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ObjCount,
    AbsDist,
    ObjSize,
    RoomSize,
    RelDist,
    RelDir,
    Locate,
    AppearOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerKind {
    Text,
    Mca,
    Scalar,
    Box7,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::ObjCount,
        TaskKind::AbsDist,
        TaskKind::ObjSize,
        TaskKind::RoomSize,
        TaskKind::RelDist,
        TaskKind::RelDir,
        TaskKind::Locate,
        TaskKind::AppearOrder,
    ];

    /// Tasks averaged into the overall benchmark score.
    pub const SCORED: [TaskKind; 7] = [
        TaskKind::ObjCount,
        TaskKind::AbsDist,
        TaskKind::ObjSize,
        TaskKind::RoomSize,
        TaskKind::RelDist,
        TaskKind::RelDir,
        TaskKind::AppearOrder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ObjCount => "obj_count",
            TaskKind::AbsDist => "abs_dist",
            TaskKind::ObjSize => "obj_size",
            TaskKind::RoomSize => "room_size",
            TaskKind::RelDist => "rel_dist",
            TaskKind::RelDir => "rel_dir",
            TaskKind::Locate => "locate",
            TaskKind::AppearOrder => "appear_order",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn answer_kind(self) -> AnswerKind {
        match self {
            TaskKind::ObjCount | TaskKind::AbsDist | TaskKind::ObjSize | TaskKind::RoomSize => {
                AnswerKind::Scalar
            }
            TaskKind::RelDist | TaskKind::RelDir | TaskKind::AppearOrder => AnswerKind::Mca,
            TaskKind::Locate => AnswerKind::Box7,
        }
    }

    pub fn is_numeric(self) -> bool {
        matches!(self.answer_kind(), AnswerKind::Scalar | AnswerKind::Box7)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaSample {
    pub scene_id: u64,
    pub task: TaskKind,
    pub question: String,
    pub answer_kind: AnswerKind,
    pub choices: Option<Vec<String>>,
    pub rationale: String,
    pub target_scalar: Option<f64>,
    pub target_box: Option<[f64; 7]>,
    pub answer_text: String,
}

impl QaSample {
    /// Checks that exactly the target matching `answer_kind` is present.
    pub fn check(&self) -> Result<()> {
        let ok = match self.answer_kind {
            AnswerKind::Scalar => self.target_scalar.is_some() && self.target_box.is_none() && self.choices.is_none(),
            AnswerKind::Box7 => self.target_box.is_some() && self.target_scalar.is_none() && self.choices.is_none(),
            AnswerKind::Mca => self.choices.is_some() && self.target_scalar.is_none() && self.target_box.is_none(),
            AnswerKind::Text => self.target_scalar.is_none() && self.target_box.is_none(),
        };
        if ok && self.answer_kind == self.task.answer_kind() {
            Ok(())
        } else {
            Err(GeodeError::Dataset(format!(
                "scene {} task {}: targets do not match answer kind {:?}",
                self.scene_id,
                self.task.name(),
                self.answer_kind
            )))
        }
    }

    /// Index of the correct choice for multiple-choice samples.
    pub fn answer_index(&self) -> Option<usize> {
        let c = self.answer_text.chars().next()?;
        LETTERS.iter().position(|&l| l == c)
    }
}

pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];
pub const DIRECTIONS: [&str; 4] = ["left", "right", "front", "behind"];

/// Fixed-point rendering without a negative zero.
pub fn fmt_num(x: f64, decimals: usize) -> String {
    let s = format!("{x:.decimals$}");
    match s.strip_prefix('-') {
        Some(rest) if rest.chars().all(|c| c == '0' || c == '.') => rest.to_string(),
        _ => s,
    }
}

/// Every number stated in a text, in order.
pub fn numbers_in(text: &str) -> Vec<f64> {
    text.split_whitespace().filter_map(|w| w.parse::<f64>().ok()).collect()
}

/// Decimals of intermediate quantities in rationales; final values use two.
const STEP: usize = 1;

fn xyz(o: &Object) -> String {
    format!(
        "{} , {} , {}",
        fmt_num(o.center[0], STEP),
        fmt_num(o.center[1], STEP),
        fmt_num(o.center[2], STEP)
    )
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Scene inventory shared by every rationale: room footprint and object counts.
pub fn inventory(scene: &Scene) -> String {
    let counts: Vec<String> = Category::ALL
        .iter()
        .filter(|&&c| scene.count(c) > 0)
        .map(|&c| format!("{} {}", c.name(), scene.count(c)))
        .collect();
    format!(
        "room {} by {} ; objects {} ;",
        fmt_num(scene.room.width, STEP),
        fmt_num(scene.room.depth, STEP),
        counts.join(" , ")
    )
}

fn choice_list(choices: &[String]) -> String {
    choices
        .iter()
        .zip(LETTERS)
        .map(|(c, l)| format!("{l} {c}"))
        .collect::<Vec<_>>()
        .join(" , ")
}

/// Everything a template needs besides its own randomness.
pub struct SceneView<'a> {
    pub scene: &'a Scene,
    pub frames: &'a [Frame],
}

/// Task-specific part of a sample; the inventory prefix is added by [`make_qa`].
pub struct Draft {
    pub question: String,
    pub steps: String,
    pub choices: Option<Vec<String>>,
    pub target_scalar: Option<f64>,
    pub target_box: Option<[f64; 7]>,
    pub answer_text: String,
}

pub trait TaskTemplate: Send + Sync {
    fn kind(&self) -> TaskKind;
    fn draft(&self, view: &SceneView, rng: &mut ChaCha8Rng) -> Result<Draft>;
}

fn unsupported(kind: TaskKind, reason: &str) -> GeodeError {
    GeodeError::task(kind.name(), reason)
}

fn scalar(question: String, steps: String, target: f64, answer_text: String) -> Draft {
    Draft {
        question,
        steps,
        choices: None,
        target_scalar: Some(target),
        target_box: None,
        answer_text,
    }
}

/// Shuffles `options` and returns them with the letter of `options[0]`.
fn mca(question: String, steps_for: impl FnOnce(char) -> String, mut options: Vec<String>, rng: &mut ChaCha8Rng) -> Draft {
    let correct = options[0].clone();
    options.shuffle(rng);
    let idx = options.iter().position(|o| *o == correct).expect("correct option kept");
    let letter = LETTERS[idx];
    Draft {
        question: format!("{question} ; {} ?", choice_list(&options)),
        steps: steps_for(letter),
        choices: Some(options),
        target_scalar: None,
        target_box: None,
        answer_text: letter.to_string(),
    }
}

struct ObjCount;
impl TaskTemplate for ObjCount {
    fn kind(&self) -> TaskKind {
        TaskKind::ObjCount
    }
    fn draft(&self, view: &SceneView, rng: &mut ChaCha8Rng) -> Result<Draft> {
        let present: Vec<Category> = Category::ALL
            .into_iter()
            .filter(|&c| view.scene.count(c) > 0)
            .collect();
        let cat = *present
            .choose(rng)
            .ok_or_else(|| unsupported(self.kind(), "empty scene"))?;
        let found: Vec<String> = view
            .scene
            .objects
            .iter()
            .filter(|o| o.category == cat)
            .map(|o| {
                format!(
                    "{} at {} , {}",
                    cat.name(),
                    fmt_num(o.center[0], STEP),
                    fmt_num(o.center[1], STEP)
                )
            })
            .collect();
        let n = found.len();
        Ok(scalar(
            format!("how many {} are in the room ?", cat.name()),
            format!("{} ; total {n}", found.join(" ; ")),
            n as f64,
            n.to_string(),
        ))
    }
}

struct AbsDist;
impl TaskTemplate for AbsDist {
    fn kind(&self) -> TaskKind {
        TaskKind::AbsDist
    }
    fn draft(&self, view: &SceneView, rng: &mut ChaCha8Rng) -> Result<Draft> {
        let unique = view.scene.unique_objects();
        if unique.len() < 2 {
            return Err(unsupported(self.kind(), "needs two uniquely named objects"));
        }
        let mut pair: Vec<&Object> = unique.choose_multiple(rng, 2).copied().collect();
        pair.shuffle(rng);
        let (a, b) = (pair[0], pair[1]);
        let d = dist3(a.center, b.center);
        let delta = |k: usize| fmt_num((a.center[k] - b.center[k]).abs(), STEP);
        Ok(scalar(
            format!(
                "what is the distance between the {} and the {} ?",
                a.category.name(),
                b.category.name()
            ),
            format!(
                "{} at {} ; {} at {} ; dx {} , dy {} , dz {} ; distance {}",
                a.category.name(),
                xyz(a),
                b.category.name(),
                xyz(b),
                delta(0),
                delta(1),
                delta(2),
                fmt_num(d, 2)
            ),
            d,
            fmt_num(d, 2),
        ))
    }
}

struct ObjSize;
impl TaskTemplate for ObjSize {
    fn kind(&self) -> TaskKind {
        TaskKind::ObjSize
    }
    fn draft(&self, view: &SceneView, rng: &mut ChaCha8Rng) -> Result<Draft> {
        let o = *view
            .scene
            .unique_objects()
            .choose(rng)
            .ok_or_else(|| unsupported(self.kind(), "needs a uniquely named object"))?;
        let v = o.longest_dimension();
        Ok(scalar(
            format!("what is the longest dimension of the {} ?", o.category.name()),
            format!(
                "{} width {} , depth {} , height {} ; longest {}",
                o.category.name(),
                fmt_num(o.size[0], STEP),
                fmt_num(o.size[1], STEP),
                fmt_num(o.size[2], STEP),
                fmt_num(v, 2)
            ),
            v,
            fmt_num(v, 2),
        ))
    }
}

struct RoomSize;
impl TaskTemplate for RoomSize {
    fn kind(&self) -> TaskKind {
        TaskKind::RoomSize
    }
    fn draft(&self, view: &SceneView, _rng: &mut ChaCha8Rng) -> Result<Draft> {
        let room = &view.scene.room;
        let area = room.floor_area();
        Ok(scalar(
            "what is the floor area of the room ?".into(),
            format!(
                "width {} times depth {} ; area {}",
                fmt_num(room.width, 2),
                fmt_num(room.depth, 2),
                fmt_num(area, 2)
            ),
            area,
            fmt_num(area, 2),
        ))
    }
}

/// Smallest gap between the two candidate distances for an unambiguous answer.
const REL_DIST_MARGIN: f64 = 0.1;

struct RelDist;
impl TaskTemplate for RelDist {
    fn kind(&self) -> TaskKind {
        TaskKind::RelDist
    }
    fn draft(&self, view: &SceneView, rng: &mut ChaCha8Rng) -> Result<Draft> {
        let mut unique = view.scene.unique_objects();
        if unique.len() < 3 {
            return Err(unsupported(self.kind(), "needs three uniquely named objects"));
        }
        for _ in 0..20 {
            unique.shuffle(rng);
            let (anchor, x, y) = (unique[0], unique[1], unique[2]);
            let (dx, dy) = (dist3(anchor.center, x.center), dist3(anchor.center, y.center));
            if (dx - dy).abs() < REL_DIST_MARGIN {
                continue;
            }
            let (near, far) = if dx < dy { (x, y) } else { (y, x) };
            let line = |o: &Object| {
                format!(
                    "{} at {} , distance {}",
                    o.category.name(),
                    xyz(o),
                    fmt_num(dist3(anchor.center, o.center), STEP)
                )
            };
            let steps = format!(
                "{} at {} ; {} ; {} ; closer {}",
                anchor.category.name(),
                xyz(anchor),
                line(x),
                line(y),
                near.category.name()
            );
            return Ok(mca(
                format!("which object is closer to the {}", anchor.category.name()),
                |l| format!("{steps} ; answer {l}"),
                vec![near.category.name().to_string(), far.category.name().to_string()],
                rng,
            ));
        }
        Err(unsupported(self.kind(), "no pair with a clear distance gap"))
    }
}

/// Ratio the dominant axis must exceed the other by for a clear direction.
const REL_DIR_RATIO: f64 = 1.5;

/// Direction of `target` relative to `anchor` in the horizontal frame of `view`.
pub fn relative_direction(view: &crate::render::CameraPose, anchor: [f64; 3], target: [f64; 3]) -> (f64, f64, &'static str) {
    let (right, ahead) = view.ground_axes();
    let v = [target[0] - anchor[0], target[1] - anchor[1]];
    let a = v[0] * right[0] + v[1] * right[1];
    let b = v[0] * ahead[0] + v[1] * ahead[1];
    let dir = if a.abs() > b.abs() {
        if a > 0.0 {
            "right"
        } else {
            "left"
        }
    } else if b > 0.0 {
        "front"
    } else {
        "behind"
    };
    (a, b, dir)
}

struct RelDir;
impl TaskTemplate for RelDir {
    fn kind(&self) -> TaskKind {
        TaskKind::RelDir
    }
    fn draft(&self, view: &SceneView, rng: &mut ChaCha8Rng) -> Result<Draft> {
        let mut unique = view.scene.unique_objects();
        if unique.len() < 2 {
            return Err(unsupported(self.kind(), "needs two uniquely named objects"));
        }
        let pose = view
            .frames
            .first()
            .ok_or_else(|| unsupported(self.kind(), "needs a first frame"))?
            .pose;
        for _ in 0..20 {
            unique.shuffle(rng);
            let (anchor, x) = (unique[0], unique[1]);
            let (a, b, dir) = relative_direction(&pose, anchor.center, x.center);
            let (hi, lo) = (a.abs().max(b.abs()), a.abs().min(b.abs()));
            if hi < REL_DIR_RATIO * lo {
                continue;
            }
            let steps = format!(
                "{} at {} ; {} at {} ; right offset {} , ahead offset {} ; {} is {}",
                anchor.category.name(),
                xyz(anchor),
                x.category.name(),
                xyz(x),
                fmt_num(a, STEP),
                fmt_num(b, STEP),
                x.category.name(),
                dir
            );
            let mut options = vec![dir.to_string()];
            options.extend(DIRECTIONS.iter().filter(|&&d| d != dir).map(|d| d.to_string()));
            return Ok(mca(
                format!(
                    "from the first view , where is the {} relative to the {}",
                    x.category.name(),
                    anchor.category.name()
                ),
                |l| format!("{steps} ; answer {l}"),
                options,
                rng,
            ));
        }
        Err(unsupported(self.kind(), "no pair with a clear direction"))
    }
}

struct Locate;
impl TaskTemplate for Locate {
    fn kind(&self) -> TaskKind {
        TaskKind::Locate
    }
    fn draft(&self, view: &SceneView, rng: &mut ChaCha8Rng) -> Result<Draft> {
        let o = *view
            .scene
            .unique_objects()
            .choose(rng)
            .ok_or_else(|| unsupported(self.kind(), "needs a uniquely named object"))?;
        let b = o.box7();
        let f: Vec<String> = b.iter().map(|&v| fmt_num(v, 2)).collect();
        Ok(Draft {
            question: format!("where is the {} ?", o.category.name()),
            steps: format!(
                "{} center {} , {} , {} ; size {} , {} , {} ; yaw {}",
                o.category.name(),
                f[0],
                f[1],
                f[2],
                f[3],
                f[4],
                f[5],
                f[6]
            ),
            choices: None,
            target_scalar: None,
            target_box: Some(b),
            answer_text: f.join(" , "),
        })
    }
}

struct AppearOrder;
impl TaskTemplate for AppearOrder {
    fn kind(&self) -> TaskKind {
        TaskKind::AppearOrder
    }
    fn draft(&self, view: &SceneView, rng: &mut ChaCha8Rng) -> Result<Draft> {
        let mut seen: Vec<(&Object, usize)> = view
            .scene
            .unique_objects()
            .into_iter()
            .filter_map(|o| first_appearance(view.frames, o.id).map(|f| (o, f)))
            .collect();
        if seen.len() < 2 {
            return Err(unsupported(self.kind(), "needs two visible uniquely named objects"));
        }
        for _ in 0..20 {
            seen.shuffle(rng);
            let k = seen.len().min(LETTERS.len());
            let picked = &seen[..rng.gen_range(2..=k)];
            let first = picked.iter().map(|p| p.1).min().expect("non-empty");
            if picked.iter().filter(|p| p.1 == first).count() != 1 {
                continue;
            }
            let earliest = picked.iter().find(|p| p.1 == first).expect("present").0;
            let lines: Vec<String> = picked
                .iter()
                .map(|(o, f)| format!("{} first seen in frame {f}", o.category.name()))
                .collect();
            let steps = format!("{} ; earliest {}", lines.join(" ; "), earliest.category.name());
            let mut options = vec![earliest.category.name().to_string()];
            options.extend(
                picked
                    .iter()
                    .filter(|p| p.0.id != earliest.id)
                    .map(|p| p.0.category.name().to_string()),
            );
            return Ok(mca(
                "which object appears first in the video".into(),
                |l| format!("{steps} ; answer {l}"),
                options,
                rng,
            ));
        }
        Err(unsupported(self.kind(), "no set with a unique first appearance"))
    }
}

/// Templates keyed by task name.
pub fn task_registry() -> &'static Registry<dyn TaskTemplate> {
    static REGISTRY: OnceLock<Registry<dyn TaskTemplate>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let templates: Vec<Arc<dyn TaskTemplate>> = vec![
            Arc::new(ObjCount),
            Arc::new(AbsDist),
            Arc::new(ObjSize),
            Arc::new(RoomSize),
            Arc::new(RelDist),
            Arc::new(RelDir),
            Arc::new(Locate),
            Arc::new(AppearOrder),
        ];
        let mut r = Registry::new("task");
        for t in templates {
            r.register(t.kind().name(), t);
        }
        r
    })
}

pub fn make_qa(scene: &Scene, frames: &[Frame], task: TaskKind, seed: u64) -> Result<QaSample> {
    let template = task_registry().get(task.name())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draft = template.draft(&SceneView { scene, frames }, &mut rng)?;
    let sample = QaSample {
        scene_id: scene.id,
        task,
        question: draft.question,
        answer_kind: task.answer_kind(),
        choices: draft.choices,
        rationale: format!("{} {}", inventory(scene), draft.steps),
        target_scalar: draft.target_scalar,
        target_box: draft.target_box,
        answer_text: draft.answer_text,
    };
    sample.check()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Room;

    fn obj(id: usize, category: Category, x: f64, y: f64) -> Object {
        Object {
            id,
            category,
            center: [x, y, 0.5],
            size: [0.6, 0.6, 1.0],
            yaw: 0.0,
        }
    }

    fn scene(objects: Vec<Object>) -> Scene {
        Scene {
            id: 1,
            room: Room {
                width: 6.0,
                depth: 7.0,
                height: 3.0,
            },
            objects,
        }
    }

    #[test]
    fn three_four_five_distance() {
        let s = scene(vec![obj(0, Category::Table, 1.0, 1.0), obj(1, Category::Lamp, 4.0, 5.0)]);
        let q = make_qa(&s, &[], TaskKind::AbsDist, 0).unwrap();
        assert_eq!(q.target_scalar, Some(5.0));
        assert_eq!(q.answer_text, "5.00");
        assert_eq!(*numbers_in(&q.rationale).last().unwrap(), 5.0);
    }

    #[test]
    fn counts_chairs() {
        let s = scene(vec![
            obj(0, Category::Chair, 1.0, 1.0),
            obj(1, Category::Chair, 2.0, 1.0),
            obj(2, Category::Chair, 3.0, 1.0),
            obj(3, Category::Chair, 4.0, 1.0),
        ]);
        let q = make_qa(&s, &[], TaskKind::ObjCount, 3).unwrap();
        assert_eq!(q.target_scalar, Some(4.0));
        assert_eq!(q.answer_text, "4");
    }

    #[test]
    fn unsupported_task_is_an_error() {
        let s = scene(vec![obj(0, Category::Chair, 1.0, 1.0), obj(1, Category::Chair, 2.0, 1.0)]);
        let err = make_qa(&s, &[], TaskKind::AbsDist, 0).unwrap_err();
        assert!(matches!(err, GeodeError::Task { .. }), "{err}");
    }

    #[test]
    fn no_negative_zero() {
        assert_eq!(fmt_num(-0.001, 2), "0.00");
        assert_eq!(fmt_num(-0.35, 2), "-0.35");
        assert_eq!(fmt_num(2.0, 1), "2.0");
    }

    #[test]
    fn task_names_round_trip() {
        for t in TaskKind::ALL {
            assert_eq!(TaskKind::from_name(t.name()), Some(t));
            assert!(task_registry().contains(t.name()));
        }
    }
}
