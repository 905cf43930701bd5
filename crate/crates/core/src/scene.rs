//! Synthetic rooms populated with oriented boxes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SceneConfig;
use crate::{GeodeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Table,
    Chair,
    Sofa,
    Lamp,
    Bed,
    Shelf,
    Box,
    Plant,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Table,
        Category::Chair,
        Category::Sofa,
        Category::Lamp,
        Category::Bed,
        Category::Shelf,
        Category::Box,
        Category::Plant,
    ];
    pub const COUNT: usize = Self::ALL.len();

    pub fn name(self) -> &'static str {
        match self {
            Category::Table => "table",
            Category::Chair => "chair",
            Category::Sofa => "sofa",
            Category::Lamp => "lamp",
            Category::Bed => "bed",
            Category::Shelf => "shelf",
            Category::Box => "box",
            Category::Plant => "plant",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    /// (width, depth, height) ranges in meters.
    fn size_range(self) -> [(f64, f64); 3] {
        match self {
            Category::Table => [(0.8, 1.6), (0.6, 1.0), (0.7, 0.8)],
            Category::Chair => [(0.4, 0.6), (0.4, 0.6), (0.8, 1.0)],
            Category::Sofa => [(1.6, 2.4), (0.8, 1.0), (0.7, 0.9)],
            Category::Lamp => [(0.3, 0.5), (0.3, 0.5), (1.2, 1.8)],
            Category::Bed => [(1.4, 2.0), (1.9, 2.2), (0.4, 0.6)],
            Category::Shelf => [(0.8, 1.2), (0.3, 0.45), (1.5, 2.0)],
            Category::Box => [(0.3, 0.7), (0.3, 0.7), (0.3, 0.6)],
            Category::Plant => [(0.3, 0.6), (0.3, 0.6), (0.5, 1.5)],
        }
    }

    /// Largest extent any object of any category can have.
    pub fn max_extent() -> f64 {
        Self::ALL
            .iter()
            .flat_map(|c| c.size_range())
            .map(|r| r.1)
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub width: f64,
    pub depth: f64,
    pub height: f64,
}

impl Room {
    pub fn floor_area(&self) -> f64 {
        self.width * self.depth
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub id: usize,
    pub category: Category,
    /// Box center in meters; `center[2] == size[2] / 2`.
    pub center: [f64; 3],
    /// (width, depth, height) along the box's local x, y, z.
    pub size: [f64; 3],
    /// Rotation about +z in [-π, π).
    pub yaw: f64,
}

impl Object {
    /// Footprint corners, counter-clockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hw, hd) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let local = [[-hw, -hd], [hw, -hd], [hw, hd], [-hw, hd]];
        local.map(|[x, y]| [self.center[0] + c * x - s * y, self.center[1] + s * x + c * y])
    }

    pub fn footprint_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    pub fn longest_dimension(&self) -> f64 {
        self.size.iter().copied().fold(0.0, f64::max)
    }

    /// The 7-DoF box `(cx, cy, cz, w, d, h, yaw)`.
    pub fn box7(&self) -> [f64; 7] {
        let [cx, cy, cz] = self.center;
        let [w, d, h] = self.size;
        [cx, cy, cz, w, d, h, self.yaw]
    }

    /// World point into the box frame (origin at center, axes along w/d/h).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    fn dir_to_local(&self, d: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    /// Nearest positive intersection distance of the ray `origin + t·dir`
    /// (`dir` unit length) with the box surface. Rays starting inside the box
    /// do not hit it.
    pub fn ray_hit(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let o = self.to_local(origin);
        let d = self.dir_to_local(dir);
        let half = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0];
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a].abs() > half[a] {
                    return None;
                }
                continue;
            }
            let t1 = (-half[a] - o[a]) / d[a];
            let t2 = (half[a] - o[a]) / d[a];
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            t_near = t_near.max(lo);
            t_far = t_far.min(hi);
        }
        (t_near <= t_far && t_near > 1e-9).then_some(t_near)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub room: Room,
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn object(&self, id: usize) -> Option<&Object> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn categories(&self) -> Vec<Category> {
        self.objects.iter().map(|o| o.category).collect()
    }

    pub fn count(&self, category: Category) -> usize {
        self.objects.iter().filter(|o| o.category == category).count()
    }

    /// Objects whose category occurs exactly once in the scene.
    pub fn unique_objects(&self) -> Vec<&Object> {
        self.objects
            .iter()
            .filter(|o| self.count(o.category) == 1)
            .collect()
    }
}

/// Shoelace area of a simple polygon.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        s += a[0] * b[1] - b[0] * a[1];
    }
    s.abs() / 2.0
}

/// Intersection of two convex counter-clockwise polygons (Sutherland–Hodgman).
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let cross = |a: [f64; 2], b: [f64; 2], p: [f64; 2]| {
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
    };
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (cp, cq) = (cross(a, b, p), cross(a, b, q));
            if cp >= 0.0 {
                out.push(p);
            }
            if (cp >= 0.0) != (cq >= 0.0) {
                let t = cp / (cp - cq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

pub fn footprint_overlap(a: &Object, b: &Object) -> f64 {
    polygon_area(&clip_convex(&a.footprint(), &b.footprint()))
}

/// Largest allowed overlap as a fraction of the smaller footprint.
pub const MAX_OVERLAP: f64 = 0.10;
const MAX_ATTEMPTS: usize = 1000;

pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    if !(3.0..=10.0).contains(&config.room_min)
        || !(3.0..=10.0).contains(&config.room_max)
        || config.room_min > config.room_max
        || config.min_objects < 3
        || config.max_objects > 10
        || config.min_objects > config.max_objects
    {
        return Err(GeodeError::Generation(format!("invalid bounds {config:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = Room {
        width: rng.gen_range(config.room_min..=config.room_max),
        depth: rng.gen_range(config.room_min..=config.room_max),
        height: config.room_height,
    };
    let n = rng.gen_range(config.min_objects..=config.max_objects);
    let mut objects: Vec<Object> = Vec::with_capacity(n);
    for id in 0..n {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let category = Category::ALL[rng.gen_range(0..Category::COUNT)];
            let [rw, rd, rh] = category.size_range();
            let size = [
                rng.gen_range(rw.0..=rw.1),
                rng.gen_range(rd.0..=rd.1),
                rng.gen_range(rh.0..=rh.1).min(room.height),
            ];
            let cand = Object {
                id,
                category,
                center: [
                    rng.gen_range(0.0..room.width),
                    rng.gen_range(0.0..room.depth),
                    size[2] / 2.0,
                ],
                size,
                yaw: rng.gen_range(-PI..PI),
            };
            let inside = cand.footprint().iter().all(|&[x, y]| {
                (0.0..=room.width).contains(&x) && (0.0..=room.depth).contains(&y)
            });
            let clear = objects.iter().all(|o| {
                let smaller = o.footprint_area().min(cand.footprint_area());
                footprint_overlap(o, &cand) <= MAX_OVERLAP * smaller
            });
            if inside && clear {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(o) => objects.push(o),
            None => {
                return Err(GeodeError::Generation(format!(
                    "seed {seed}: could not place object {id} after {MAX_ATTEMPTS} attempts"
                )))
            }
        }
    }
    Ok(Scene {
        id: seed,
        room,
        objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(center: [f64; 2], size: [f64; 2], yaw: f64) -> Object {
        Object {
            id: 0,
            category: Category::Box,
            center: [center[0], center[1], 0.25],
            size: [size[0], size[1], 0.5],
            yaw,
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let c = SceneConfig::default();
        assert_eq!(generate_scene(7, &c).unwrap(), generate_scene(7, &c).unwrap());
        assert_ne!(generate_scene(7, &c).unwrap(), generate_scene(8, &c).unwrap());
    }

    #[test]
    fn object_count_respects_bounds() {
        let c = SceneConfig {
            max_objects: 3,
            ..SceneConfig::default()
        };
        for seed in 0..20 {
            assert!(generate_scene(seed, &c).unwrap().objects.len() <= 3);
        }
    }

    #[test]
    fn invalid_bounds_rejected() {
        let c = SceneConfig {
            room_max: 11.0,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(0, &c), Err(GeodeError::Generation(_))));
    }

    #[test]
    fn overlap_of_axis_aligned_squares() {
        let a = obj([0.0, 0.0], [2.0, 2.0], 0.0);
        let b = obj([1.0, 1.0], [2.0, 2.0], 0.0);
        assert!((footprint_overlap(&a, &b) - 1.0).abs() < 1e-12);
        let far = obj([5.0, 5.0], [1.0, 1.0], 0.3);
        assert_eq!(footprint_overlap(&a, &far), 0.0);
        // a square rotated inside a larger one is fully covered
        let inner = obj([0.0, 0.0], [0.5, 0.5], 0.7);
        assert!((footprint_overlap(&a, &inner) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ray_box_distance() {
        let o = Object {
            id: 0,
            category: Category::Box,
            center: [5.0, 0.0, 0.5],
            size: [2.0, 2.0, 1.0],
            yaw: 0.0,
        };
        let t = o.ray_hit([0.0, 0.0, 0.5], [1.0, 0.0, 0.0]).unwrap();
        assert!((t - 4.0).abs() < 1e-12);
        assert!(o.ray_hit([0.0, 0.0, 0.5], [-1.0, 0.0, 0.0]).is_none());
        assert!(o.ray_hit([5.0, 0.0, 0.5], [1.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn objects_rest_on_floor() {
        let s = generate_scene(3, &SceneConfig::default()).unwrap();
        for o in &s.objects {
            assert_eq!(o.center[2], o.size[2] / 2.0);
            assert!(o.size.iter().all(|&v| v > 0.0));
            assert!((-PI..PI).contains(&o.yaw));
        }
    }
}
