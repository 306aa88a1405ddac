//! Offline reachability map: for every cell center, the fraction of sampled
//! camera orientations for which IK finds a limit-respecting,
//! self-collision-free configuration. Queries interpolate the stored scores
//! trilinearly in position only; orientation is marginalized at build time.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::geometry::{matrix_to_euler_xyz, Aabb, Pose6, Vec3};
use crate::ik::{ik_reachable, IkParams};
use crate::kinematics::KinematicChain;
use crate::world::GridParams;

const MAGIC: &str = "reachtrack-reachmap 1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapBuildParams {
    pub box_min: [f64; 3],
    pub box_max: [f64; 3],
    pub resolution: f64,
    /// Orientation samples per cell.
    pub orientations: usize,
    /// Random IK restarts per orientation before declaring failure.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for MapBuildParams {
    /// Box around the default robot base, covering its full reach.
    fn default() -> Self {
        Self {
            box_min: [-2.4, -1.0, -0.5],
            box_max: [0.4, 1.8, 2.3],
            resolution: 0.1,
            orientations: 50,
            restarts: 8,
            seed: 7,
        }
    }
}

impl MapBuildParams {
    pub fn validate(&self) -> Result<()> {
        let b = Aabb::new(Vec3::from(self.box_min), Vec3::from(self.box_max));
        if b.is_empty() || !(self.resolution > 0.0) || self.orientations == 0 || self.restarts == 0
        {
            return Err(Error::InvalidParams(format!(
                "map build needs a non-empty box, resolution > 0 and at least one orientation and restart: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridParams {
        let dims = [0, 1, 2].map(|i| {
            (((self.box_max[i] - self.box_min[i]) / self.resolution) - 1e-9).ceil().max(1.0)
                as usize
        });
        GridParams {
            origin: self.box_min,
            resolution: self.resolution,
            dims,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapMeta {
    pub chain_hash: String,
    pub orientations: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Hash of the configuration that produced the map; `-` when unknown.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachabilityMap {
    grid: GridParams,
    scores: Vec<f64>,
    meta: MapMeta,
}

/// SplitMix64 finalizer, used to derive independent per-cell seeds.
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic uniformly distributed rotations (Shoemake's method).
pub fn sample_orientations(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u1: f64 = rng.random();
            let u2: f64 = rng.random();
            let u3: f64 = rng.random();
            let tau = std::f64::consts::TAU;
            let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
            let q = UnitQuaternion::from_quaternion(Quaternion::new(
                b * (tau * u3).cos(),
                a * (tau * u2).sin(),
                a * (tau * u2).cos(),
                b * (tau * u3).sin(),
            ));
            matrix_to_euler_xyz(q.to_rotation_matrix().matrix())
        })
        .collect()
}

/// Builds the map. Cells are independent and evaluated through `exec`.
pub fn build_map(
    chain: &KinematicChain,
    params: &MapBuildParams,
    ik: &IkParams,
    exec: Execution,
) -> Result<ReachabilityMap> {
    params.validate()?;
    ik.validate()?;
    let grid = params.grid();
    let orientations = sample_orientations(params.orientations, params.seed);
    let base = chain.base().translation.vector;
    let n = params.orientations as f64;
    let scores = map_indexed(exec, grid.cell_count(), |idx| {
        let p = grid.cell_center(grid.cell_of_index(idx));
        if (p - base).norm() > chain.reach() {
            return 0.0;
        }
        let hits = orientations
            .iter()
            .enumerate()
            .filter(|(o, r)| {
                let seed = mix_seed(mix_seed(params.seed, idx as u64), *o as u64);
                ik_reachable(chain, &Pose6::new(p, **r), seed, params.restarts, ik)
            })
            .count();
        hits as f64 / n
    });
    Ok(ReachabilityMap {
        grid,
        scores,
        meta: MapMeta {
            chain_hash: chain.hash().to_string(),
            orientations: params.orientations,
            restarts: params.restarts,
            seed: params.seed,
            config_hash: "-".into(),
        },
    })
}

impl ReachabilityMap {
    pub fn from_scores(grid: GridParams, scores: Vec<f64>, meta: MapMeta) -> Result<Self> {
        grid.validate()?;
        if scores.len() != grid.cell_count() {
            return Err(Error::MalformedMap(format!(
                "expected {} scores, found {}",
                grid.cell_count(),
                scores.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::MalformedMap(format!("score {s} outside [0, 1]")));
        }
        Ok(Self { grid, scores, meta })
    }

    pub fn grid(&self) -> &GridParams {
        &self.grid
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn meta(&self) -> &MapMeta {
        &self.meta
    }

    pub fn set_config_hash(&mut self, hash: &str) {
        self.meta.config_hash = hash.to_string();
    }

    pub fn score(&self, c: [usize; 3]) -> f64 {
        self.scores[self.grid.linear_index(c)]
    }

    /// Reachability at a camera pose; only the position is used.
    pub fn query_pose(&self, pose: &Pose6) -> f64 {
        self.query(&pose.p)
    }

    /// Trilinear interpolation between cell centers, clamped to the outermost
    /// centers inside the map and zero outside it.
    pub fn query(&self, p: &Vec3) -> f64 {
        let g = &self.grid;
        let mut i0 = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let rel = (p[a] - g.origin[a]) / g.resolution;
            let n = g.dims[a];
            if !(rel >= 0.0) || rel > n as f64 {
                return 0.0;
            }
            let u = (rel - 0.5).clamp(0.0, (n - 1) as f64);
            let f = u.floor();
            let lo = (f as usize).min(n.saturating_sub(2));
            i0[a] = lo;
            frac[a] = if n == 1 { 0.0 } else { u - lo as f64 };
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut c = [0usize; 3];
            for a in 0..3 {
                let hi = corner >> a & 1 == 1;
                let n = g.dims[a];
                c[a] = if hi && n > 1 { i0[a] + 1 } else { i0[a] };
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
            }
            if w != 0.0 {
                acc += w * self.score(c);
            }
        }
        acc
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let g = &self.grid;
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "origin {} {} {}", g.origin[0], g.origin[1], g.origin[2])?;
        writeln!(w, "resolution {}", g.resolution)?;
        writeln!(w, "dims {} {} {}", g.dims[0], g.dims[1], g.dims[2])?;
        writeln!(w, "orientations {}", self.meta.orientations)?;
        writeln!(w, "restarts {}", self.meta.restarts)?;
        writeln!(w, "seed {}", self.meta.seed)?;
        writeln!(w, "chain_hash {}", self.meta.chain_hash)?;
        writeln!(w, "config_hash {}", self.meta.config_hash)?;
        writeln!(w, "end_header")?;
        for s in &self.scores {
            w.write_all(&s.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self> {
        let bad = |m: String| Error::MalformedMap(m);
        let mut header = Vec::new();
        loop {
            let mut line = String::new();
            let n = r
                .read_line(&mut line)
                .map_err(|e| bad(format!("header: {e}")))?;
            if n == 0 {
                return Err(bad("missing end_header".into()));
            }
            let line = line.trim_end().to_string();
            if line == "end_header" {
                break;
            }
            header.push(line);
        }
        if header.first().map(String::as_str) != Some(MAGIC) {
            return Err(bad("unknown magic line".into()));
        }
        let field = |key: &str| -> Result<Vec<String>> {
            header
                .iter()
                .find_map(|l| {
                    let (k, v) = l.split_once(' ')?;
                    (k == key).then(|| v.split_whitespace().map(String::from).collect())
                })
                .ok_or_else(|| bad(format!("missing header field {key}")))
        };
        fn num<T: std::str::FromStr>(v: &[String], n: usize, key: &str) -> Result<Vec<T>> {
            if v.len() != n {
                return Err(Error::MalformedMap(format!("{key}: expected {n} values")));
            }
            v.iter()
                .map(|t| {
                    t.parse::<T>()
                        .map_err(|_| Error::MalformedMap(format!("{key}: cannot parse {t}")))
                })
                .collect()
        }
        let origin: Vec<f64> = num(&field("origin")?, 3, "origin")?;
        let res: Vec<f64> = num(&field("resolution")?, 1, "resolution")?;
        let dims: Vec<usize> = num(&field("dims")?, 3, "dims")?;
        let orientations: Vec<usize> = num(&field("orientations")?, 1, "orientations")?;
        let restarts: Vec<usize> = num(&field("restarts")?, 1, "restarts")?;
        let seed: Vec<u64> = num(&field("seed")?, 1, "seed")?;
        let chain_hash = field("chain_hash")?.join(" ");
        let config_hash = field("config_hash")
            .map(|v| v.join(" "))
            .unwrap_or_else(|_| "-".into());
        let grid = GridParams {
            origin: [origin[0], origin[1], origin[2]],
            resolution: res[0],
            dims: [dims[0], dims[1], dims[2]],
        };
        grid.validate()?;
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| bad(format!("payload: {e}")))?;
        if buf.len() != grid.cell_count() * 8 {
            return Err(bad(format!(
                "payload holds {} bytes, expected {}",
                buf.len(),
                grid.cell_count() * 8
            )));
        }
        let scores = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::from_scores(
            grid,
            scores,
            MapMeta {
                chain_hash,
                orientations: orientations[0],
                restarts: restarts[0],
                seed: seed[0],
                config_hash,
            },
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f))
    }

    /// Loads a map and refuses it when it was built for a different chain.
    pub fn load_for_chain(path: &Path, chain: &KinematicChain) -> Result<Self> {
        let map = Self::load(path)?;
        if map.meta.chain_hash != chain.hash() {
            return Err(Error::ChainMismatch {
                expected: map.meta.chain_hash,
                found: chain.hash().to_string(),
            });
        }
        Ok(map)
    }

    /// Writes the horizontal layer nearest to height `z` as `x,y,z,score` CSV,
    /// after a `# config_hash:` comment line.
    pub fn write_slice_csv<W: Write>(&self, z: f64, config_hash: &str, mut w: W) -> std::io::Result<()> {
        let g = &self.grid;
        let k = (((z - g.origin[2]) / g.resolution - 0.5).round().max(0.0) as usize)
            .min(g.dims[2] - 1);
        writeln!(w, "# config_hash: {config_hash}")?;
        writeln!(w, "x,y,z,score")?;
        for j in 0..g.dims[1] {
            for i in 0..g.dims[0] {
                let c = g.cell_center([i, j, k]);
                writeln!(w, "{},{},{},{}", c.x, c.y, c.z, self.score([i, j, k]))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest};

    fn meta() -> MapMeta {
        MapMeta {
            chain_hash: "abc".into(),
            orientations: 1,
            restarts: 1,
            seed: 0,
            config_hash: "-".into(),
        }
    }

    fn random_map(seed: u64) -> ReachabilityMap {
        let grid = GridParams {
            origin: [0.0, -1.0, 0.5],
            resolution: 0.1,
            dims: [6, 5, 4],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = (0..grid.cell_count()).map(|_| rng.random::<f64>()).collect();
        ReachabilityMap::from_scores(grid, scores, meta()).unwrap()
    }

    #[test]
    fn slice_csv_holds_one_layer() {
        let m = random_map(4);
        let mut buf = Vec::new();
        m.write_slice_csv(0.72, "abc", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# config_hash: abc");
        assert_eq!(lines[1], "x,y,z,score");
        assert_eq!(lines.len(), 2 + 6 * 5);
        // Layer centers sit at 0.55, 0.65, 0.75, 0.85.
        let row: Vec<f64> = lines[2].split(',').map(|t| t.parse().unwrap()).collect();
        assert_abs_diff_eq!(row[2], 0.75, epsilon = 1e-12);
        assert_eq!(row[3], m.score([0, 0, 2]));
    }

    #[test]
    fn cell_center_returns_stored_score() {
        let m = random_map(1);
        for idx in 0..m.grid().cell_count() {
            let c = m.grid().cell_of_index(idx);
            assert_abs_diff_eq!(m.query(&m.grid().cell_center(c)), m.score(c), epsilon = 1e-12);
        }
    }

    #[test]
    fn midpoint_of_two_centers_is_average() {
        let grid = GridParams {
            origin: [0.0, 0.0, 0.0],
            resolution: 0.1,
            dims: [2, 1, 1],
        };
        let m = ReachabilityMap::from_scores(grid, vec![0.2, 0.6], meta()).unwrap();
        assert_abs_diff_eq!(m.query(&Vec3::new(0.1, 0.05, 0.05)), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn outside_map_is_zero() {
        let m = random_map(2);
        assert_eq!(m.query(&Vec3::new(-0.01, -0.5, 0.7)), 0.0);
        assert_eq!(m.query(&Vec3::new(0.3, -0.5, 10.0)), 0.0);
    }

    #[test]
    fn file_round_trip_and_chain_check() {
        let m = random_map(3);
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        let back = ReachabilityMap::read(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(back, m);
        let dir = std::env::temp_dir().join(format!("rt-map-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.map");
        m.save(&path).unwrap();
        let chain = KinematicChain::default_7r();
        let err = ReachabilityMap::load_for_chain(&path, &chain).unwrap_err();
        assert!(matches!(err, Error::ChainMismatch { .. }));
        let mut truncated = buf.clone();
        truncated.truncate(buf.len() - 3);
        assert!(ReachabilityMap::read(std::io::Cursor::new(&truncated)).is_err());
    }

    #[test]
    fn tiny_build_respects_boundary_cases() {
        let chain = KinematicChain::default_7r();
        let base = chain.base().translation.vector;
        // A single cell centered on the base origin, inside the base link.
        let params = MapBuildParams {
            box_min: (base - Vec3::repeat(0.05)).into(),
            box_max: (base + Vec3::repeat(0.05)).into(),
            resolution: 0.1,
            orientations: 4,
            restarts: 2,
            seed: 1,
        };
        let m = build_map(&chain, &params, &IkParams::default(), Execution::Sequential).unwrap();
        assert_eq!(m.scores(), &[0.0]);

        // Far outside the reach.
        let far = base + Vec3::new(2.0, 0.0, 0.0);
        let params = MapBuildParams {
            box_min: (far - Vec3::repeat(0.05)).into(),
            box_max: (far + Vec3::repeat(0.05)).into(),
            ..params
        };
        let m = build_map(&chain, &params, &IkParams::default(), Execution::Sequential).unwrap();
        assert_eq!(m.scores(), &[0.0]);
    }

    #[test]
    fn single_orientation_scores_are_binary_and_builds_reproduce() {
        let chain = KinematicChain::default_7r();
        let base = chain.base().translation.vector;
        let params = MapBuildParams {
            box_min: (base + Vec3::new(-0.2, 0.3, 0.1)).into(),
            box_max: (base + Vec3::new(0.2, 0.7, 0.5)).into(),
            resolution: 0.2,
            orientations: 1,
            restarts: 2,
            seed: 5,
        };
        let a = build_map(&chain, &params, &IkParams::default(), Execution::Sequential).unwrap();
        let b = build_map(&chain, &params, &IkParams::default(), Execution::Parallel).unwrap();
        assert!(a.scores().iter().all(|&s| s == 0.0 || s == 1.0));
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write(&mut ba).unwrap();
        b.write(&mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    proptest! {
        #[test]
        fn query_bounded_by_corners_and_lipschitz(
            x in 0.05..0.55f64, y in -0.95..-0.55f64, z in 0.55..0.85f64,
            dx in -0.05..0.05f64, dy in -0.05..0.05f64, dz in -0.05..0.05f64,
        ) {
            let m = random_map(9);
            let p = Vec3::new(x, y, z);
            let v = m.query(&p);
            // Corner bounds from the enclosing cell-center cube.
            let g = m.grid();
            let lo = [0, 1, 2].map(|a| (((p[a] - g.origin[a]) / g.resolution - 0.5).floor().max(0.0) as usize).min(g.dims[a] - 2));
            let mut cmin = f64::INFINITY;
            let mut cmax = f64::NEG_INFINITY;
            for corner in 0..8 {
                let c = [0, 1, 2].map(|a| lo[a] + (corner >> a & 1));
                cmin = cmin.min(m.score(c));
                cmax = cmax.max(m.score(c));
            }
            prop_assert!(v >= cmin - 1e-12 && v <= cmax + 1e-12);
            let range = m.scores().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - m.scores().iter().cloned().fold(f64::INFINITY, f64::min);
            let q = p + Vec3::new(dx, dy, dz);
            let l = 3.0_f64.sqrt() * range / g.resolution;
            prop_assert!((v - m.query(&q)).abs() <= l * (q - p).norm() + 1e-12);
        }
    }
}
