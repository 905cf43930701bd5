//! Orbit cameras, semantic-depth rasters and visible-surface point clouds.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scene::Scene;
use crate::{GeodeError, Result};

pub const FOV: f64 = PI / 2.0;
pub const CAMERA_HEIGHT: f64 = 1.6;
pub const CAMERA_PITCH: f64 = -0.35;
/// Height kept above an object the orbit passes over.
pub const CAMERA_CLEARANCE: f64 = 0.1;
pub const ORBIT_RADIUS_FRAC: f64 = 0.3;
pub const ORBIT_SWEEP: f64 = 1.5 * PI;
pub const MIN_POINTS: usize = 256;
pub const MAX_POINTS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
}

impl CameraPose {
    pub fn forward(&self) -> [f64; 3] {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        [cy * cp, sy * cp, sp]
    }

    pub fn right(&self) -> [f64; 3] {
        let (sy, cy) = self.yaw.sin_cos();
        [sy, -cy, 0.0]
    }

    pub fn up(&self) -> [f64; 3] {
        cross(self.right(), self.forward())
    }

    /// Horizontal (right, ahead) unit axes of the view.
    pub fn ground_axes(&self) -> ([f64; 2], [f64; 2]) {
        let (sy, cy) = self.yaw.sin_cos();
        ([sy, -cy], [cy, sy])
    }

    /// Unit ray through raster position `(row + dv, col + du)`, offsets in [0, 1).
    pub fn ray(&self, grid: usize, row: usize, col: usize, du: f64, dv: f64) -> [f64; 3] {
        let half = (FOV / 2.0).tan();
        let g = grid as f64;
        let u = ((col as f64 + du) / g * 2.0 - 1.0) * half;
        let v = (1.0 - (row as f64 + dv) / g * 2.0) * half;
        let (f, r, up) = (self.forward(), self.right(), self.up());
        normalize([
            f[0] + u * r[0] + v * up[0],
            f[1] + u * r[1] + v * up[1],
            f[2] + u * r[2] + v * up[2],
        ])
    }

    /// Raster cell containing the projection of `p`, if it lies in view.
    pub fn project(&self, grid: usize, p: [f64; 3]) -> Option<(usize, usize)> {
        let d = sub(p, self.position);
        let z = dot(d, self.forward());
        if z <= 1e-9 {
            return None;
        }
        let half = (FOV / 2.0).tan();
        let u = dot(d, self.right()) / (z * half);
        let v = dot(d, self.up()) / (z * half);
        let g = grid as f64;
        let col = ((u + 1.0) / 2.0 * g).floor();
        let row = ((1.0 - v) / 2.0 * g).floor();
        if (0.0..g).contains(&col) && (0.0..g).contains(&row) {
            Some((row as usize, col as usize))
        } else {
            None
        }
    }
}

/// One semantic-depth raster: per cell the nearest object id (−1 for none)
/// and the distance along the view ray (0 for none).
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub pose: CameraPose,
    pub grid: usize,
    pub ids: Vec<i32>,
    pub depth: Vec<f64>,
}

impl Frame {
    pub fn id_at(&self, row: usize, col: usize) -> i32 {
        self.ids[row * self.grid + col]
    }

    pub fn depth_at(&self, row: usize, col: usize) -> f64 {
        self.depth[row * self.grid + col]
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.contains(&(id as i32))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub ids: Vec<usize>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Wraps an angle into [−π, π).
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Nearest object hit by a ray, as `(object id, distance)`.
pub fn cast_ray(scene: &Scene, origin: [f64; 3], dir: [f64; 3]) -> Option<(usize, f64)> {
    scene
        .objects
        .iter()
        .filter_map(|o| o.ray_hit(origin, dir).map(|t| (o.id, t)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

/// `n` poses on a circular sweep around the room center, each looking at the
/// center from outside every object.
pub fn orbit_poses(scene: &Scene, trajectory_seed: u64, n: usize) -> Vec<CameraPose> {
    let mut rng = ChaCha8Rng::seed_from_u64(trajectory_seed);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let turn = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let room = &scene.room;
    let (cx, cy) = (room.width / 2.0, room.depth / 2.0);
    let radius = ORBIT_RADIUS_FRAC * room.width.min(room.depth);
    let z = CAMERA_HEIGHT.min(room.height - 0.1);
    (0..n)
        .map(|i| {
            let a = phase + turn * ORBIT_SWEEP * i as f64 / (n.max(2) - 1) as f64;
            let (x, y) = (cx + radius * a.cos(), cy + radius * a.sin());
            // a camera inside an object would see through it; lift it above
            let z = scene
                .objects
                .iter()
                .filter(|o| {
                    let l = o.to_local([x, y, z]);
                    l[0].abs() <= o.size[0] / 2.0 && l[1].abs() <= o.size[1] / 2.0 && l[2].abs() <= o.size[2] / 2.0
                })
                .map(|o| o.size[2] + CAMERA_CLEARANCE)
                .fold(z, f64::max)
                .min(room.height - 0.05);
            CameraPose {
                position: [x, y, z],
                yaw: wrap_angle(a + PI),
                pitch: CAMERA_PITCH,
            }
        })
        .collect()
}

pub fn render_view(scene: &Scene, pose: CameraPose, grid: usize) -> Frame {
    let mut ids = vec![-1; grid * grid];
    let mut depth = vec![0.0; grid * grid];
    for r in 0..grid {
        for c in 0..grid {
            let dir = pose.ray(grid, r, c, 0.5, 0.5);
            if let Some((id, t)) = cast_ray(scene, pose.position, dir) {
                ids[r * grid + c] = id as i32;
                depth[r * grid + c] = t;
            }
        }
    }
    Frame {
        pose,
        grid,
        ids,
        depth,
    }
}

pub fn render_frames(scene: &Scene, trajectory_seed: u64, n: usize, grid: usize) -> Result<Vec<Frame>> {
    if n < 2 || grid == 0 {
        return Err(GeodeError::Generation(format!(
            "need at least 2 frames and a non-empty grid, got n={n} grid={grid}"
        )));
    }
    Ok(orbit_poses(scene, trajectory_seed, n)
        .into_iter()
        .map(|p| render_view(scene, p, grid))
        .collect())
}

/// Samples points on visible surfaces by casting jittered rays through hit cells.
/// Every point re-projects into a cell of its own object in the frame it came from.
pub fn sample_pointcloud(scene: &Scene, frames: &[Frame], count: usize, seed: u64) -> Result<PointCloud> {
    let hits: Vec<(usize, usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| {
            (0..fr.grid * fr.grid)
                .filter(move |&k| fr.ids[k] >= 0)
                .map(move |k| (f, k / fr.grid, k % fr.grid))
        })
        .collect();
    if hits.is_empty() {
        return Err(GeodeError::EmptyCloud(format!(
            "scene {}: no object visible in {} frames",
            scene.id,
            frames.len()
        )));
    }
    let count = count.clamp(MIN_POINTS, MAX_POINTS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(count);
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        let (f, r, c) = hits[rng.gen_range(0..hits.len())];
        let fr = &frames[f];
        let want = fr.id_at(r, c) as usize;
        let mut hit = None;
        for _ in 0..16 {
            let (du, dv) = (rng.gen_range(0.02..0.98), rng.gen_range(0.02..0.98));
            let dir = fr.pose.ray(fr.grid, r, c, du, dv);
            if let Some((id, t)) = cast_ray(scene, fr.pose.position, dir) {
                if id == want {
                    hit = Some((dir, t));
                    break;
                }
            }
        }
        let (dir, t) = hit.unwrap_or_else(|| (fr.pose.ray(fr.grid, r, c, 0.5, 0.5), fr.depth_at(r, c)));
        let o = fr.pose.position;
        points.push([o[0] + t * dir[0], o[1] + t * dir[1], o[2] + t * dir[2]]);
        ids.push(want);
    }
    Ok(PointCloud { points, ids })
}

/// Index of the first frame in which each object appears, if any.
pub fn first_appearance(frames: &[Frame], id: usize) -> Option<usize> {
    frames.iter().position(|f| f.contains(id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Category, Object, Room};

    fn room_with(objects: Vec<Object>) -> Scene {
        Scene {
            id: 0,
            room: Room {
                width: 6.0,
                depth: 6.0,
                height: 3.0,
            },
            objects,
        }
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-7.0, -PI, 0.0, PI, 3.5 * PI, 100.0] {
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w), "{a} -> {w}");
            let turns = (w - a) / (2.0 * PI);
            assert!((turns - turns.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_inverts_rays() {
        let pose = CameraPose {
            position: [1.0, 2.0, 1.6],
            yaw: 0.7,
            pitch: CAMERA_PITCH,
        };
        for (r, c) in [(0, 0), (3, 5), (7, 7)] {
            let d = pose.ray(8, r, c, 0.3, 0.6);
            let p = [1.0 + 2.0 * d[0], 2.0 + 2.0 * d[1], 1.6 + 2.0 * d[2]];
            assert_eq!(pose.project(8, p), Some((r, c)));
        }
    }

    #[test]
    fn two_frames_minimum() {
        let s = room_with(vec![]);
        assert!(render_frames(&s, 0, 1, 8).is_err());
    }

    #[test]
    fn orbit_stays_in_room() {
        let s = room_with(vec![]);
        for p in orbit_poses(&s, 3, 16) {
            assert!(p.position[0] > 0.0 && p.position[0] < 6.0);
            assert!(p.position[1] > 0.0 && p.position[1] < 6.0);
            assert!(p.pitch.abs() <= PI / 2.0);
        }
    }

    #[test]
    fn empty_view_has_no_points() {
        let s = room_with(vec![Object {
            id: 0,
            category: Category::Box,
            center: [5.0, 5.0, 0.25],
            size: [0.5, 0.5, 0.5],
            yaw: 0.0,
        }]);
        let pose = CameraPose {
            position: [3.0, 3.0, 1.6],
            yaw: -3.0 * PI / 4.0,
            pitch: CAMERA_PITCH,
        };
        let f = render_view(&s, pose, 8);
        assert!(f.ids.iter().all(|&i| i == -1));
        assert!(matches!(
            sample_pointcloud(&s, &[f.clone(), f], 300, 0),
            Err(GeodeError::EmptyCloud(_))
        ));
    }
}
