//! Tunnel world: corridors as yaw-oriented boxes with wall relief.
//!
//! Free space is the union of corridor boxes. Each polyline segment becomes
//! one box whose floor is at z = 0; at interior vertices the boxes are
//! extended by half the width so corners stay open. Relief consists of
//! seeded rectangular bumps on walls and ceiling and, optionally, support
//! ribs at jittered intervals, all protruding into the corridor by at most
//! the texture amplitude.

use crate::geometry::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid world: {0}")]
    InvalidSpec(String),
    #[error("pose outside world at ({0:.3}, {1:.3}, {2:.3})")]
    PoseOutsideWorld(f64, f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorridorSpec {
    /// Centerline vertices in the xy plane (meters).
    pub centerline: Vec<[f64; 2]>,
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default = "default_height")]
    pub height: f64,
    /// Corridors sharing a texture seed and segment lengths get identical relief.
    #[serde(default)]
    pub texture_seed: Option<u64>,
    /// Close the corridor at its first and last vertex.
    #[serde(default = "yes")]
    pub closed_ends: bool,
    /// No relief on this corridor regardless of the world texture.
    #[serde(default)]
    pub featureless: bool,
}

fn default_width() -> f64 {
    4.0
}
fn default_height() -> f64 {
    4.0
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSpec {
    pub label: String,
    pub position: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub corridors: Vec<CorridorSpec>,
    /// Relief amplitude in meters; 0 gives perfectly flat walls.
    #[serde(default = "default_texture")]
    pub texture: f64,
    /// Bumps per square meter of wall and ceiling.
    #[serde(default = "default_density")]
    pub bump_density: f64,
    /// Mean spacing of support ribs in meters (jittered so they do not
    /// repeat exactly); 0 disables them.
    #[serde(default)]
    pub rib_spacing: f64,
    #[serde(default)]
    pub artifacts: Vec<ArtifactSpec>,
}

fn default_texture() -> f64 {
    0.15
}
fn default_density() -> f64 {
    0.5
}

/// Box rotated about z.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientedBox {
    pub center: Vec3,
    pub cos: f64,
    pub sin: f64,
    pub half: Vec3,
}

impl OrientedBox {
    fn to_local(&self, p: &Vec3) -> Vec3 {
        let d = p - self.center;
        self.dir_to_local(&d)
    }

    fn dir_to_local(&self, d: &Vec3) -> Vec3 {
        Vec3::new(self.cos * d.x + self.sin * d.y, -self.sin * d.x + self.cos * d.y, d.z)
    }

    fn local_to_world(&self, p: &Vec3) -> Vec3 {
        self.center + Vec3::new(self.cos * p.x - self.sin * p.y, self.sin * p.x + self.cos * p.y, p.z)
    }

    pub fn contains(&self, p: &Vec3, margin: f64) -> bool {
        let l = self.to_local(p);
        (0..3).all(|k| l[k].abs() < self.half[k] - margin)
    }

    /// Parameter interval of the ray inside the box.
    pub fn ray_interval(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let o = self.to_local(origin);
        let d = self.dir_to_local(dir);
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if o[k].abs() > self.half[k] {
                    return None;
                }
            } else {
                let a = (-self.half[k] - o[k]) / d[k];
                let b = (self.half[k] - o[k]) / d[k];
                let (a, b) = if a < b { (a, b) } else { (b, a) };
                t0 = t0.max(a);
                t1 = t1.min(b);
            }
        }
        (t0 <= t1).then_some((t0, t1))
    }

    fn xy_bounds(&self) -> ([f64; 2], [f64; 2]) {
        let ex = self.half.x * self.cos.abs() + self.half.y * self.sin.abs();
        let ey = self.half.x * self.sin.abs() + self.half.y * self.cos.abs();
        ([self.center.x - ex, self.center.y - ey], [self.center.x + ex, self.center.y + ey])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub id: u32,
    pub label: String,
    pub position: Vec3,
}

/// Uniform xy grid over obstacle boxes.
#[derive(Clone, Debug)]
struct Grid {
    origin: [f64; 2],
    cell: f64,
    dims: [usize; 2],
    cells: Vec<Vec<u32>>,
}

impl Grid {
    fn build(boxes: &[OrientedBox], cell: f64) -> Grid {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for b in boxes {
            let (l, h) = b.xy_bounds();
            for k in 0..2 {
                lo[k] = lo[k].min(l[k]);
                hi[k] = hi[k].max(h[k]);
            }
        }
        if boxes.is_empty() {
            return Grid { origin: [0.0; 2], cell, dims: [0, 0], cells: Vec::new() };
        }
        let dims = [((hi[0] - lo[0]) / cell).ceil() as usize + 1, ((hi[1] - lo[1]) / cell).ceil() as usize + 1];
        let mut cells = vec![Vec::new(); dims[0] * dims[1]];
        for (i, b) in boxes.iter().enumerate() {
            let (l, h) = b.xy_bounds();
            let i0 = ((l[0] - lo[0]) / cell).floor() as usize;
            let i1 = ((h[0] - lo[0]) / cell).floor() as usize;
            let j0 = ((l[1] - lo[1]) / cell).floor() as usize;
            let j1 = ((h[1] - lo[1]) / cell).floor() as usize;
            for x in i0..=i1.min(dims[0] - 1) {
                for y in j0..=j1.min(dims[1] - 1) {
                    cells[x * dims[1] + y].push(i as u32);
                }
            }
        }
        Grid { origin: lo, cell, dims, cells }
    }

    /// Cells crossed by the xy projection of the ray for `t ∈ [0, t_max]`,
    /// in order, with the parameter at which each cell is left.
    fn walk(&self, o: &Vec3, d: &Vec3, t_max: f64, mut visit: impl FnMut(&[u32], f64) -> bool) {
        if self.dims[0] == 0 {
            return;
        }
        let rel = [(o.x - self.origin[0]) / self.cell, (o.y - self.origin[1]) / self.cell];
        let dir = [d.x / self.cell, d.y / self.cell];
        let mut cell = [rel[0].floor() as i64, rel[1].floor() as i64];
        let step = [if dir[0] >= 0.0 { 1 } else { -1 }, if dir[1] >= 0.0 { 1 } else { -1 }];
        let mut t_next = [0.0; 2];
        let mut t_delta = [f64::INFINITY; 2];
        for k in 0..2 {
            if dir[k].abs() > 1e-15 {
                let boundary = if step[k] > 0 { cell[k] as f64 + 1.0 } else { cell[k] as f64 };
                t_next[k] = (boundary - rel[k]) / dir[k];
                t_delta[k] = 1.0 / dir[k].abs();
            } else {
                t_next[k] = f64::INFINITY;
            }
        }
        loop {
            let exit = t_next[0].min(t_next[1]);
            if cell[0] >= 0 && cell[1] >= 0 && (cell[0] as usize) < self.dims[0] && (cell[1] as usize) < self.dims[1] {
                let ids = &self.cells[cell[0] as usize * self.dims[1] + cell[1] as usize];
                if !ids.is_empty() && visit(ids, exit) {
                    return;
                }
            } else {
                // Outside the grid and moving away from it: nothing left.
                let outside = |k: usize| (cell[k] < 0 && step[k] < 0) || (cell[k] >= self.dims[k] as i64 && step[k] > 0);
                if outside(0) || outside(1) {
                    return;
                }
            }
            if exit >= t_max || !exit.is_finite() {
                return;
            }
            let k = if t_next[0] < t_next[1] { 0 } else { 1 };
            cell[k] += step[k];
            t_next[k] += t_delta[k];
        }
    }
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub spec: WorldSpec,
    pub seed: u64,
    corridors: Vec<OrientedBox>,
    obstacles: Vec<OrientedBox>,
    grid: Grid,
    pub artifacts: Vec<Artifact>,
}

fn segment_box(a: [f64; 2], b: [f64; 2], ext_a: f64, ext_b: f64, width: f64, height: f64) -> OrientedBox {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = (dx * dx + dy * dy).sqrt();
    let (cos, sin) = (dx / len, dy / len);
    // Center shifts toward the end with the larger extension.
    let shift = (ext_b - ext_a) / 2.0;
    let mid = [(a[0] + b[0]) / 2.0 + cos * shift, (a[1] + b[1]) / 2.0 + sin * shift];
    OrientedBox {
        center: Vec3::new(mid[0], mid[1], height / 2.0),
        cos,
        sin,
        half: Vec3::new(len / 2.0 + (ext_a + ext_b) / 2.0, width / 2.0, height / 2.0),
    }
}

impl WorldModel {
    pub fn new(spec: WorldSpec, seed: u64) -> Result<Self, WorldError> {
        if spec.corridors.is_empty() {
            return Err(WorldError::InvalidSpec("no corridors".into()));
        }
        if !(spec.texture >= 0.0) || !(spec.bump_density >= 0.0) || !(spec.rib_spacing >= 0.0) {
            return Err(WorldError::InvalidSpec("texture, density and rib spacing must be non-negative".into()));
        }
        let mut corridors = Vec::new();
        let mut segments = Vec::new();
        for (ci, c) in spec.corridors.iter().enumerate() {
            if c.centerline.len() < 2 || !(c.width > 0.5) || !(c.height > 0.5) {
                return Err(WorldError::InvalidSpec(format!("corridor {ci} needs two vertices and positive size")));
            }
            let n = c.centerline.len();
            for k in 0..n - 1 {
                let (a, b) = (c.centerline[k], c.centerline[k + 1]);
                let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                if len < 1e-6 {
                    return Err(WorldError::InvalidSpec(format!("corridor {ci} has a zero-length segment")));
                }
                let ext_a = if k > 0 || !c.closed_ends { c.width / 2.0 } else { 0.0 };
                let ext_b = if k + 2 < n || !c.closed_ends { c.width / 2.0 } else { 0.0 };
                corridors.push(segment_box(a, b, ext_a, ext_b, c.width, c.height));
                segments.push((ci, k, len));
            }
        }
        let mut world = WorldModel { spec: spec.clone(), seed, corridors, obstacles: Vec::new(), grid: Grid::build(&[], 2.0), artifacts: Vec::new() };
        if spec.texture > 0.0 {
            for (si, &(ci, k, len)) in segments.iter().enumerate() {
                let c = &spec.corridors[ci];
                if c.featureless {
                    continue;
                }
                let tex_seed = c.texture_seed.unwrap_or(ci as u64 * 1000 + 17);
                world.add_relief(si, k, len, c, tex_seed.wrapping_mul(0x9e37_79b9).wrapping_add(seed ^ ((k as u64) << 20)));
            }
        }
        world.grid = Grid::build(&world.obstacles, 2.0);
        world.artifacts = spec
            .artifacts
            .iter()
            .enumerate()
            .map(|(i, a)| Artifact { id: i as u32, label: a.label.clone(), position: Vec3::from(a.position) })
            .collect();
        for a in &world.artifacts {
            if !world.in_free_space(&a.position) {
                return Err(WorldError::InvalidSpec(format!("artifact {} ({}) is outside free space", a.id, a.label)));
            }
        }
        Ok(world)
    }

    /// Adds bumps and ribs to segment `si` (local frame: x along the segment,
    /// y across, z up from the box center).
    fn add_relief(&mut self, si: usize, segment_start: usize, len: f64, c: &CorridorSpec, seed: u64) {
        let seg = self.corridors[si].clone();
        let amp = self.spec.texture;
        let (w, h) = (c.width, c.height);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let outward = 0.5;
        // Local x range of the un-extended segment.
        let a = c.centerline[segment_start];
        let x_lo = seg.to_local(&Vec3::new(a[0], a[1], seg.center.z)).x;
        let x_range = (x_lo, x_lo + len);
        let mut candidates: Vec<(Vec3, Vec3, Vec3)> = Vec::new(); // (local center, half, probe point)
        let area = len * (2.0 * h + w);
        let count = (area * self.spec.bump_density).round() as usize;
        for _ in 0..count {
            let u = rng.random_range(x_range.0..x_range.1);
            let sx = rng.random_range(0.3..1.0);
            let sv = rng.random_range(0.3..1.0);
            let depth = amp * rng.random_range(0.5..1.0);
            let surface = rng.random_range(0.0..(2.0 * h + w));
            let (center, half, probe) = if surface < h {
                // Left wall (y = +w/2).
                let v = -h / 2.0 + surface;
                let yc = w / 2.0 - depth + (depth + outward) / 2.0;
                (Vec3::new(u, yc, v), Vec3::new(sx / 2.0, (depth + outward) / 2.0, sv / 2.0), Vec3::new(u, w / 2.0 + 0.05, v))
            } else if surface < 2.0 * h {
                let v = -h / 2.0 + (surface - h);
                let yc = -w / 2.0 + depth - (depth + outward) / 2.0;
                (Vec3::new(u, yc, v), Vec3::new(sx / 2.0, (depth + outward) / 2.0, sv / 2.0), Vec3::new(u, -w / 2.0 - 0.05, v))
            } else {
                let y = -w / 2.0 + (surface - 2.0 * h);
                let zc = h / 2.0 - depth + (depth + outward) / 2.0;
                (Vec3::new(u, y, zc), Vec3::new(sx / 2.0, sv / 2.0, (depth + outward) / 2.0), Vec3::new(u, y, h / 2.0 + 0.05))
            };
            candidates.push((center, half, probe));
        }
        if self.spec.rib_spacing > 0.0 {
            let depth = amp;
            let t = 0.15;
            let mut x = x_range.0 + self.spec.rib_spacing / 2.0;
            while x < x_range.1 {
                let side_half = Vec3::new(t, (depth + outward) / 2.0, h / 2.0 + outward);
                candidates.push((Vec3::new(x, w / 2.0 - depth + (depth + outward) / 2.0, 0.0), side_half, Vec3::new(x, w / 2.0 + 0.05, 0.0)));
                candidates.push((Vec3::new(x, -w / 2.0 + depth - (depth + outward) / 2.0, 0.0), side_half, Vec3::new(x, -w / 2.0 - 0.05, 0.0)));
                candidates.push((
                    Vec3::new(x, 0.0, h / 2.0 - depth + (depth + outward) / 2.0),
                    Vec3::new(t, w / 2.0 + outward, (depth + outward) / 2.0),
                    Vec3::new(x, 0.0, h / 2.0 + 0.05),
                ));
                x += self.spec.rib_spacing * rng.random_range(0.6..1.4);
            }
        }
        for (center, half, probe) in candidates {
            // Skip relief where the wall opens into another corridor.
            let probe_w = seg.local_to_world(&probe);
            if self.corridors.iter().enumerate().any(|(j, b)| j != si && b.contains(&probe_w, 0.0)) {
                continue;
            }
            self.obstacles.push(OrientedBox { center: seg.local_to_world(&center), cos: seg.cos, sin: seg.sin, half });
        }
    }

    pub fn corridor_boxes(&self) -> &[OrientedBox] {
        &self.corridors
    }

    pub fn obstacle_count(&self) -> usize {
        self.obstacles.len()
    }

    /// Inside some corridor box and not inside relief.
    pub fn in_free_space(&self, p: &Vec3) -> bool {
        self.corridors.iter().any(|b| b.contains(p, 0.0)) && !self.obstacles.iter().any(|b| b.contains(p, 0.0))
    }

    /// Distance along the unit ray to the first surface, if within `max_range`.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3, max_range: f64) -> Option<f64> {
        // Exit from the union of corridor boxes.
        let mut t = 0.0;
        loop {
            let mut best = t;
            for b in &self.corridors {
                if let Some((t0, t1)) = b.ray_interval(origin, dir) {
                    if t0 <= t + 1e-9 && t1 > best {
                        best = t1;
                    }
                }
            }
            if best <= t + 1e-12 {
                break;
            }
            t = best;
            if t > max_range {
                break;
            }
        }
        let mut hit = t;
        self.grid.walk(origin, dir, hit.min(max_range), |ids, cell_exit| {
            for &i in ids {
                if let Some((t0, _)) = self.obstacles[i as usize].ray_interval(origin, dir) {
                    if t0 > 1e-9 && t0 < hit {
                        hit = t0;
                    }
                }
            }
            hit <= cell_exit
        });
        (hit > 0.0 && hit <= max_range).then_some(hit)
    }

    pub fn check_pose(&self, p: &Vec3) -> Result<(), WorldError> {
        if self.in_free_space(p) {
            Ok(())
        } else {
            Err(WorldError::PoseOutsideWorld(p.x, p.y, p.z))
        }
    }
}
