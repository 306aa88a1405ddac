//! Ground-truth scene and the binary occupancy grid the planner sees.
//!
//! Obstacles live as analytic shapes moving along piecewise-linear paths.
//! Each tick they are rasterized into an [`OccupancyGrid`]; cells near the
//! manipulator and the target are excluded so the arm never perceives itself
//! as an obstacle. Distance queries against the grid treat every occupied
//! voxel as a ball of radius half its diagonal, which never overstates
//! clearance.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{segment_point_distance, Aabb, Vec3, WorldCapsule};

/// Reported by the distance queries when the grid holds no occupied cell.
pub const DISTANCE_SENTINEL: f64 = 1.0e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridParams {
    pub origin: [f64; 3],
    pub resolution: f64,
    pub dims: [usize; 3],
}

impl GridParams {
    /// 3 x 4 x 3 m at 5 cm around the default robot and target box.
    pub fn default_workspace() -> Self {
        Self {
            origin: [-2.5, -1.0, -0.6],
            resolution: 0.05,
            dims: [60, 80, 60],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) || self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParams(format!(
                "grid needs resolution > 0 and non-zero dims, got {} / {:?}",
                self.resolution, self.dims
            )));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn bounds(&self) -> Aabb {
        let o = Vec3::from(self.origin);
        let ext = Vec3::new(
            self.dims[0] as f64 * self.resolution,
            self.dims[1] as f64 * self.resolution,
            self.dims[2] as f64 * self.resolution,
        );
        Aabb::new(o, o + ext)
    }

    pub fn linear_index(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    pub fn cell_of_index(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn cell_center(&self, c: [usize; 3]) -> Vec3 {
        Vec3::new(
            self.origin[0] + (c[0] as f64 + 0.5) * self.resolution,
            self.origin[1] + (c[1] as f64 + 0.5) * self.resolution,
            self.origin[2] + (c[2] as f64 + 0.5) * self.resolution,
        )
    }

    /// Cell containing `p`, if inside the grid.
    pub fn cell_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut c = [0usize; 3];
        for i in 0..3 {
            let f = ((p[i] - self.origin[i]) / self.resolution).floor();
            if !(f >= 0.0) || f >= self.dims[i] as f64 {
                return None;
            }
            c[i] = f as usize;
        }
        Some(c)
    }

    /// Inclusive index range of cells whose extent may overlap `b`.
    fn cell_range(&self, b: &Aabb) -> Option<[(usize, usize); 3]> {
        let mut r = [(0usize, 0usize); 3];
        for i in 0..3 {
            let lo = ((b.min[i] - self.origin[i]) / self.resolution).floor() - 1.0;
            let hi = ((b.max[i] - self.origin[i]) / self.resolution).floor() + 1.0;
            let n = self.dims[i] as f64;
            if hi < 0.0 || lo >= n {
                return None;
            }
            r[i] = (lo.max(0.0) as usize, hi.min(n - 1.0) as usize);
        }
        Some(r)
    }

    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.resolution * 3.0_f64.sqrt()
    }
}

/// Binary voxel grid with a cached list of occupied cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    params: GridParams,
    bits: Vec<u64>,
    occupied: Vec<Vec3>,
}

impl OccupancyGrid {
    pub fn empty(params: GridParams) -> Result<Self> {
        params.validate()?;
        let n = params.cell_count();
        Ok(Self {
            params,
            bits: vec![0; n.div_ceil(64)],
            occupied: Vec::new(),
        })
    }

    pub fn params(&self) -> &GridParams {
        &self.params
    }

    pub fn is_occupied(&self, c: [usize; 3]) -> bool {
        let idx = self.params.linear_index(c);
        self.bits[idx / 64] >> (idx % 64) & 1 == 1
    }

    pub fn set_occupied(&mut self, c: [usize; 3]) {
        let idx = self.params.linear_index(c);
        let (w, b) = (idx / 64, idx % 64);
        if self.bits[w] >> b & 1 == 0 {
            self.bits[w] |= 1 << b;
            self.occupied.push(self.params.cell_center(c));
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.len()
    }

    pub fn occupied_centers(&self) -> &[Vec3] {
        &self.occupied
    }

    /// Conservative distance from `p` to the occupied space; negative inside.
    pub fn point_distance(&self, p: &Vec3) -> f64 {
        if self.occupied.is_empty() {
            return DISTANCE_SENTINEL;
        }
        let min = self
            .occupied
            .iter()
            .map(|c| (p - c).norm())
            .fold(f64::INFINITY, f64::min);
        min - self.params.half_diagonal()
    }

    /// Signed distance between the occupied space and the solid sight cone.
    pub fn cone_distance(&self, cone: &SightCone) -> f64 {
        if self.occupied.is_empty() {
            return DISTANCE_SENTINEL;
        }
        let min = self
            .occupied
            .iter()
            .map(|c| cone.signed_distance(c))
            .fold(f64::INFINITY, f64::min);
        min - self.params.half_diagonal()
    }

    /// Distance from a capsule surface to the occupied space, with the closest
    /// voxel center. `None` when the grid is empty.
    pub fn capsule_distance(&self, cap: &WorldCapsule) -> Option<(f64, Vec3)> {
        let mut best: Option<(f64, Vec3)> = None;
        for c in &self.occupied {
            let d = segment_point_distance(&cap.a, &cap.b, c);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, *c));
            }
        }
        best.map(|(d, c)| (d - cap.radius - self.params.half_diagonal(), c))
    }

    /// Writes the debugging dump: a text header followed by the bit-packed
    /// occupancy, cell `i + nx*(j + ny*k)` at bit `idx % 8` of byte `idx / 8`.
    pub fn write_dump<W: Write>(&self, config_hash: &str, mut w: W) -> std::io::Result<()> {
        let p = &self.params;
        writeln!(w, "reachtrack-grid 1")?;
        writeln!(w, "origin {} {} {}", p.origin[0], p.origin[1], p.origin[2])?;
        writeln!(w, "resolution {}", p.resolution)?;
        writeln!(w, "dims {} {} {}", p.dims[0], p.dims[1], p.dims[2])?;
        writeln!(w, "config_hash {config_hash}")?;
        writeln!(w, "end_header")?;
        let n = p.cell_count();
        let mut bytes = vec![0u8; n.div_ceil(8)];
        for (idx, byte) in bytes.iter_mut().enumerate() {
            for bit in 0..8 {
                let i = idx * 8 + bit;
                if i < n && self.bits[i / 64] >> (i % 64) & 1 == 1 {
                    *byte |= 1 << bit;
                }
            }
        }
        w.write_all(&bytes)
    }

    pub fn read_dump<R: BufRead>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::InvalidParams(format!("grid dump: {m}"));
        let mut header = Vec::new();
        loop {
            let mut line = String::new();
            let n = r.read_line(&mut line).map_err(|e| Error::io("<grid dump>", e))?;
            if n == 0 {
                return Err(bad("missing end_header"));
            }
            let line = line.trim_end().to_string();
            if line == "end_header" {
                break;
            }
            header.push(line);
        }
        if header.first().map(String::as_str) != Some("reachtrack-grid 1") {
            return Err(bad("unknown magic"));
        }
        let field = |key: &str| -> Result<Vec<f64>> {
            header
                .iter()
                .find_map(|l| l.strip_prefix(key).map(str::trim))
                .ok_or_else(|| bad(&format!("missing {key}")))?
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad(&format!("bad {key}"))))
                .collect()
        };
        let o = field("origin")?;
        let res = field("resolution")?;
        let d = field("dims")?;
        if o.len() != 3 || res.len() != 1 || d.len() != 3 {
            return Err(bad("wrong field arity"));
        }
        let params = GridParams {
            origin: [o[0], o[1], o[2]],
            resolution: res[0],
            dims: [d[0] as usize, d[1] as usize, d[2] as usize],
        };
        let mut grid = OccupancyGrid::empty(params)?;
        let n = params.cell_count();
        let mut bytes = vec![0u8; n.div_ceil(8)];
        r.read_exact(&mut bytes).map_err(|e| Error::io("<grid dump>", e))?;
        for i in 0..n {
            if bytes[i / 8] >> (i % 8) & 1 == 1 {
                grid.set_occupied(params.cell_of_index(i));
            }
        }
        Ok(grid)
    }
}

/// Finite solid cone from the camera center to the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SightCone {
    pub apex: Vec3,
    pub axis: Vec3,
    pub length: f64,
    pub base_radius: f64,
}

impl SightCone {
    /// Cone from `apex` to `target`; `None` when they coincide.
    pub fn between(apex: Vec3, target: Vec3, base_radius: f64) -> Option<Self> {
        let v = target - apex;
        let length = v.norm();
        if !(length > 1e-12) || !(base_radius > 0.0) {
            return None;
        }
        Some(Self {
            apex,
            axis: v / length,
            length,
            base_radius,
        })
    }

    /// Signed Euclidean distance from `p` to the cone solid (negative inside).
    /// The solid is a surface of revolution, so the closest point lies in the
    /// meridian half-plane of `p` and the problem reduces to a triangle.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        let v = p - self.apex;
        let h = v.dot(&self.axis);
        let rho = (v - self.axis * h).norm();
        let (l, r) = (self.length, self.base_radius);

        // Lateral edge from (0, 0) to (l, r) in (h, rho) coordinates.
        let len2 = l * l + r * r;
        let t = ((h * l + rho * r) / len2).clamp(0.0, 1.0);
        let lateral = ((h - t * l).powi(2) + (rho - t * r).powi(2)).sqrt();
        // Base cap from (l, 0) to (l, r).
        let cap = if rho <= r {
            (h - l).abs()
        } else {
            ((h - l).powi(2) + (rho - r).powi(2)).sqrt()
        };
        let inside = h >= 0.0 && h <= l && rho * l <= h * r;
        let d = lateral.min(cap);
        if inside {
            -d
        } else {
            d
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

impl Shape {
    pub fn cube(edge: f64) -> Self {
        Shape::Box {
            half_extents: [edge * 0.5; 3],
        }
    }

    fn bounding_box(&self, center: &Vec3) -> Aabb {
        match *self {
            Shape::Sphere { radius } => Aabb::from_center(*center, Vec3::repeat(radius)),
            Shape::Box { half_extents } => Aabb::from_center(*center, Vec3::from(half_extents)),
        }
    }

    /// Strict overlap with the open interior of an axis-aligned voxel.
    fn overlaps_aabb(&self, center: &Vec3, cell: &Aabb) -> bool {
        match *self {
            Shape::Sphere { radius } => cell.point_distance(center) < radius,
            Shape::Box { .. } => {
                let b = self.bounding_box(center);
                (0..3).all(|i| b.min[i].max(cell.min[i]) < b.max[i].min(cell.max[i]))
            }
        }
    }

    pub fn intersects_segment(&self, center: &Vec3, a: &Vec3, b: &Vec3) -> bool {
        match *self {
            Shape::Sphere { radius } => segment_point_distance(a, b, center) < radius,
            Shape::Box { .. } => self.bounding_box(center).intersects_segment(a, b),
        }
    }

    /// Distance from a capsule's surface to the shape (0 when touching or overlapping).
    pub fn capsule_distance(&self, center: &Vec3, cap: &WorldCapsule) -> f64 {
        let d = match *self {
            Shape::Sphere { radius } => segment_point_distance(&cap.a, &cap.b, center) - radius,
            Shape::Box { .. } => self.bounding_box(center).segment_distance(&cap.a, &cap.b),
        };
        (d - cap.radius).max(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("shape dimensions must be > 0: {self:?}")))
        }
    }
}

/// Piecewise-linear path: the body waits at `waypoints[0]` until
/// `start_time`, walks segment `i` at `speeds[i]`, then rests at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start_time: f64,
    pub waypoints: Vec<Vec3>,
    pub speeds: Vec<f64>,
}

impl Trajectory {
    pub fn stationary(p: Vec3) -> Self {
        Self {
            start_time: 0.0,
            waypoints: vec![p],
            speeds: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() || self.speeds.len() + 1 != self.waypoints.len() {
            return Err(Error::InvalidParams(
                "trajectory needs n waypoints and n-1 segment speeds".into(),
            ));
        }
        if self.speeds.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::InvalidParams("trajectory speeds must be >= 0".into()));
        }
        Ok(())
    }

    pub fn position(&self, t: f64) -> Vec3 {
        let mut remaining = t - self.start_time;
        if remaining <= 0.0 {
            return self.waypoints[0];
        }
        for (seg, &speed) in self.waypoints.windows(2).zip(&self.speeds) {
            let d = seg[1] - seg[0];
            let len = d.norm();
            if speed <= 0.0 {
                return seg[0];
            }
            let dur = len / speed;
            if remaining < dur {
                return seg[0] + d * (remaining / dur);
            }
            remaining -= dur;
        }
        *self.waypoints.last().expect("non-empty trajectory")
    }

    /// Speed of the segment being traversed at `t`; zero before the start and
    /// after the end.
    pub fn speed_at(&self, t: f64) -> f64 {
        let mut remaining = t - self.start_time;
        if remaining < 0.0 {
            return 0.0;
        }
        for (seg, &speed) in self.waypoints.windows(2).zip(&self.speeds) {
            if speed <= 0.0 {
                return 0.0;
            }
            let dur = (seg[1] - seg[0]).norm() / speed;
            if remaining < dur {
                return speed;
            }
            remaining -= dur;
        }
        0.0
    }

    /// Largest segment speed: the body's nominal speed.
    pub fn nominal_speed(&self) -> f64 {
        self.speeds.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleBody {
    pub id: usize,
    pub shape: Shape,
    pub trajectory: Trajectory,
}

impl ObstacleBody {
    pub fn position(&self, t: f64) -> Vec3 {
        self.trajectory.position(t)
    }
}

/// Target marker: a small sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetBody {
    pub position: Vec3,
    pub radius: f64,
}

/// Snapshot of the ground truth at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    pub time: f64,
    pub target: TargetBody,
    pub obstacles: Vec<ObstacleBody>,
}

impl SceneState {
    pub fn obstacle_positions(&self) -> impl Iterator<Item = (&ObstacleBody, Vec3)> {
        self.obstacles.iter().map(|o| (o, o.position(self.time)))
    }

    /// Analytic line-of-sight test: true iff no obstacle touches `a -> b`.
    pub fn segment_visibility(&self, a: &Vec3, b: &Vec3) -> bool {
        self.obstacle_positions()
            .all(|(o, c)| !o.shape.intersects_segment(&c, a, b))
    }

    /// Smallest surface distance between the capsules and any obstacle, with
    /// the id of that obstacle.
    pub fn min_capsule_distance(&self, caps: &[WorldCapsule]) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (o, c) in self.obstacle_positions() {
            for cap in caps {
                let d = o.shape.capsule_distance(&c, cap);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, o.id));
                }
            }
        }
        best
    }
}

/// Builds the occupancy grid for the current scene, leaving out voxels whose
/// centers fall inside the manipulator capsules or the target, each inflated
/// by one voxel diagonal.
pub fn rasterize(
    scene: &SceneState,
    params: &GridParams,
    exclusions: &[WorldCapsule],
) -> Result<OccupancyGrid> {
    let mut grid = OccupancyGrid::empty(*params)?;
    let bounds = params.bounds();
    if !bounds.contains(&scene.target.position) {
        return Err(Error::GridTooSmall { body: "target".into() });
    }
    for (i, cap) in exclusions.iter().enumerate() {
        if !bounds.contains(&cap.a) || !bounds.contains(&cap.b) {
            return Err(Error::GridTooSmall {
                body: format!("manipulator capsule {i}"),
            });
        }
    }
    let diag = params.resolution * 3.0_f64.sqrt();
    let half = Vec3::repeat(0.5 * params.resolution);
    let excluded = |c: &Vec3| {
        (c - scene.target.position).norm() < scene.target.radius + diag
            || exclusions
                .iter()
                .any(|cap| segment_point_distance(&cap.a, &cap.b, c) < cap.radius + diag)
    };
    for (body, center) in scene.obstacle_positions() {
        // Bodies outside the grid are invisible to the sensor.
        let Some(range) = params.cell_range(&body.shape.bounding_box(&center)) else {
            continue;
        };
        for k in range[2].0..=range[2].1 {
            for j in range[1].0..=range[1].1 {
                for i in range[0].0..=range[0].1 {
                    let c = [i, j, k];
                    let cc = params.cell_center(c);
                    let cell = Aabb::from_center(cc, half);
                    if body.shape.overlaps_aabb(&center, &cell) && !excluded(&cc) {
                        grid.set_occupied(c);
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// Writes a grid dump to `path`.
pub fn save_grid_dump(grid: &OccupancyGrid, config_hash: &str, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    grid.write_dump(config_hash, std::io::BufWriter::new(f))
        .map_err(|e| Error::io(path, e))
}
