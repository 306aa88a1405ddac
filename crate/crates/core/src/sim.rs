//! Closed-loop simulation of the tracking controller.
//!
//! Each tick moves the ground truth, senses the target, rasterizes the grid,
//! plans a camera pose change, solves IK and checks for collisions. Scenario 1
//! sends obstacles across the line of sight; scenario 2 parks one obstacle on
//! it.

use std::time::Instant;

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::geometry::{Aabb, Pose6, Vec3};
use crate::ik::{ik_solve, random_config, IkParams};
use crate::kinematics::{JointConfig, KinematicChain};
use crate::planner::{plan_step, view_angle, PlannerInput, PlannerParams, TermMask};
use crate::reachability::{mix_seed, ReachabilityMap};
use crate::world::{
    rasterize, GridParams, ObstacleBody, OccupancyGrid, SceneState, Shape, TargetBody, Trajectory,
    DISTANCE_SENTINEL,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraModel {
    /// Half-angle of the detection cone around the view axis (rad).
    pub fov_half_angle: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fov_half_angle: 0.6,
            min_range: 0.3,
            max_range: 3.0,
        }
    }
}

impl CameraModel {
    /// Target inside the field of view and detection range (occlusion aside).
    pub fn in_view(&self, camera: &Pose6, target: &Vec3) -> bool {
        let d = (target - camera.p).norm();
        d >= self.min_range
            && d <= self.max_range
            && view_angle(camera, &Pose6::new(*target, Vec3::zeros())) <= self.fov_half_angle
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    /// 1: obstacles cross the line of sight; 2: one obstacle stops on it.
    pub kind: u8,
    pub obstacles: usize,
    pub moving_target: bool,
    pub target_box_min: [f64; 3],
    pub target_box_max: [f64; 3],
    /// Target walking speed (m/s).
    pub target_speed: f64,
    pub target_radius: f64,
    /// Obstacle speed range (m/s), sampled uniformly per obstacle.
    pub obstacle_speed: [f64; 2],
    /// Edge of the cubic obstacles (m).
    pub obstacle_edge: f64,
    /// Where crossing obstacles pass the initial line of sight, as a
    /// fraction of its length from the camera.
    pub crossing_aim: [f64; 2],
    /// Idle time (s) before a crossing obstacle enters the workspace.
    pub crossing_delay: [f64; 2],
    /// Where the blocker stops on the initial line of sight (fraction from the camera).
    pub blocker_stop: [f64; 2],
    /// Idle time (s) before the blocker enters.
    pub blocker_delay: [f64; 2],
    pub dt: f64,
    pub horizon: usize,
    pub runs: usize,
    pub seed: u64,
    pub terms: TermMask,
    pub camera: CameraModel,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self::scenario1(2)
    }
}

impl ScenarioSpec {
    /// Moving target, `obstacles` crossing obstacles.
    pub fn scenario1(obstacles: usize) -> Self {
        Self {
            kind: 1,
            obstacles,
            moving_target: true,
            target_box_min: [-1.0, 1.8, 1.0],
            target_box_max: [-1.0, 2.4, 2.0],
            target_speed: 0.5,
            target_radius: 0.05,
            obstacle_speed: [0.8, 1.2],
            obstacle_edge: 0.25,
            crossing_aim: [0.0, 0.3],
            crossing_delay: [0.0, 3.0],
            blocker_stop: [0.3, 0.6],
            blocker_delay: [0.0, 0.5],
            dt: 0.05,
            horizon: 100,
            runs: 50,
            seed: 1,
            terms: TermMask::ALL,
            camera: CameraModel::default(),
        }
    }

    /// One obstacle that stops on the line of sight; target stationary or moving.
    pub fn scenario2(moving_target: bool) -> Self {
        Self {
            kind: 2,
            obstacles: 1,
            moving_target,
            ..Self::scenario1(1)
        }
    }

    pub fn with_terms(mut self, terms: TermMask) -> Self {
        self.terms = terms;
        self
    }

    pub fn target_box(&self) -> Aabb {
        Aabb::new(Vec3::from(self.target_box_min), Vec3::from(self.target_box_max))
    }

    /// Case label in the style of the result tables.
    pub fn case_label(&self) -> String {
        match (self.kind, self.moving_target) {
            (2, false) => "s2-stop".into(),
            (2, true) => "s2-move".into(),
            _ => format!("s1-{}obs", self.obstacles),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        match (self.kind, self.obstacles) {
            (1, 0..=2) | (2, 1) => {}
            (k, n) => return bad(format!("scenario kind {k} with {n} obstacles is not supported (kind 1: 0-2, kind 2: 1)")),
        }
        if !(self.dt > 0.0) || self.horizon == 0 || self.runs == 0 {
            return bad("dt must be > 0 and horizon, runs >= 1".into());
        }
        let ranges = [
            ("obstacle_speed", self.obstacle_speed),
            ("crossing_aim", self.crossing_aim),
            ("crossing_delay", self.crossing_delay),
            ("blocker_stop", self.blocker_stop),
            ("blocker_delay", self.blocker_delay),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} must be a range 0 <= lo <= hi, got [{lo}, {hi}]"));
            }
        }
        if !(self.obstacle_speed[0] > 0.0) {
            return bad("obstacle speeds must be > 0".into());
        }
        if self.crossing_aim[1] > 1.0 || self.blocker_stop[1] > 1.0 {
            return bad("line-of-sight fractions must lie in [0, 1]".into());
        }
        if !(self.target_speed >= 0.0) || !(self.target_radius > 0.0) || !(self.obstacle_edge > 0.0) {
            return bad("target speed must be >= 0, target radius and obstacle edge > 0".into());
        }
        let tb = self.target_box();
        if (0..3).any(|i| tb.min[i] > tb.max[i]) {
            return bad("target box min must not exceed max".into());
        }
        let c = &self.camera;
        if !(c.fov_half_angle > 0.0) || !(c.min_range >= 0.0) || !(c.max_range > c.min_range) {
            return bad(format!("camera model out of range: {c:?}"));
        }
        Ok(())
    }
}

/// Everything a run needs besides the scenario.
#[derive(Debug, Clone, Copy)]
pub struct SimContext<'a> {
    pub chain: &'a KinematicChain,
    pub grid: GridParams,
    /// Planner parameters; the scenario's term mask overrides `terms`.
    pub planner: PlannerParams,
    pub ik: IkParams,
    pub map: Option<&'a ReachabilityMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StageTimes {
    pub rasterize_ms: f64,
    pub plan_ms: f64,
    pub ik_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    /// 1-based tick index.
    pub tick: usize,
    pub target_visible: bool,
    pub ik_failed: bool,
    pub collision: bool,
    /// Ground-truth surface distance from the arm to the nearest obstacle (m).
    pub min_obstacle_distance: f64,
    pub objective: f64,
    /// Reachability at the camera position after the tick; NaN without a map.
    pub reachability: f64,
    pub plan_degraded: bool,
    pub times: StageTimes,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub run: usize,
    pub collided: bool,
    pub elapsed_ticks: usize,
    pub ik_failure_rate: f64,
    pub tracking_rate: f64,
    /// Speed of the obstacle hit, when the run ended in a collision.
    pub collision_speed: Option<f64>,
    pub obstacle_speeds: Vec<f64>,
}

impl RunMetrics {
    pub fn from_records(run: usize, records: &[StepRecord], obstacle_speeds: Vec<f64>, collision_speed: Option<f64>) -> Self {
        let n = records.len().max(1) as f64;
        Self {
            run,
            collided: records.last().is_some_and(|r| r.collision),
            elapsed_ticks: records.len(),
            ik_failure_rate: records.iter().filter(|r| r.ik_failed).count() as f64 / n,
            tracking_rate: records.iter().filter(|r| r.target_visible).count() as f64 / n,
            collision_speed,
            obstacle_speeds,
        }
    }
}

/// One row of the result tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub case: String,
    pub objective: String,
    pub collision_failures: usize,
    pub avg_elapsed_steps: f64,
    pub ik_failure_rate: f64,
    pub tracking_rate: f64,
}

impl AggregateRow {
    pub fn from_metrics(case: &str, terms: TermMask, metrics: &[RunMetrics]) -> Self {
        let n = metrics.len().max(1) as f64;
        Self {
            case: case.to_string(),
            objective: terms.label(),
            collision_failures: metrics.iter().filter(|m| m.collided).count(),
            avg_elapsed_steps: metrics.iter().map(|m| m.elapsed_ticks as f64).sum::<f64>() / n,
            ik_failure_rate: metrics.iter().map(|m| m.ik_failure_rate).sum::<f64>() / n,
            tracking_rate: metrics.iter().map(|m| m.tracking_rate).sum::<f64>() / n,
        }
    }
}

/// Per-run randomized scene.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSetup {
    pub q0: JointConfig,
    pub target: Trajectory,
    pub obstacles: Vec<ObstacleBody>,
}

/// Distance along `dir` from `p` (inside `b`) to the boundary of `b`.
fn exit_distance(b: &Aabb, p: &Vec3, dir: &Vec3) -> f64 {
    let mut t = f64::INFINITY;
    for i in 0..3 {
        if dir[i] > 1e-12 {
            t = t.min((b.max[i] - p[i]) / dir[i]);
        } else if dir[i] < -1e-12 {
            t = t.min((b.min[i] - p[i]) / dir[i]);
        }
    }
    t.max(0.0)
}

fn uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Random-waypoint walk inside `b` at constant `speed`, long enough to cover
/// `duration` seconds.
pub fn target_walk<R: Rng>(rng: &mut R, b: &Aabb, speed: f64, duration: f64) -> Trajectory {
    let sample = |rng: &mut R| Vec3::from_fn(|i, _| uniform(rng, [b.min[i], b.max[i]]));
    let start = sample(rng);
    if speed <= 0.0 || b.max == b.min {
        return Trajectory::stationary(start);
    }
    let mut waypoints = vec![start];
    let mut length = 0.0;
    while length < speed * duration + 1e-9 {
        let next = sample(rng);
        let seg = (next - waypoints[waypoints.len() - 1]).norm();
        if seg < 1e-6 {
            continue;
        }
        length += seg;
        waypoints.push(next);
    }
    let speeds = vec![speed; waypoints.len() - 1];
    Trajectory {
        start_time: 0.0,
        waypoints,
        speeds,
    }
}

/// Horizontal heading across the corridor (along +x or -x), jittered.
fn crossing_direction<R: Rng>(rng: &mut R) -> Vec3 {
    let base = if rng.random::<bool>() { 0.0 } else { std::f64::consts::PI };
    let heading = base + rng.random_range(-0.5..0.5);
    let pitch: f64 = rng.random_range(-0.15..0.15);
    Vec3::new(heading.cos() * pitch.cos(), heading.sin() * pitch.cos(), pitch.sin())
}

/// Obstacle paths for one run, relative to the initial line of sight
/// `camera -> target`. Kind 1 crosses the sight line and leaves the
/// workspace; kind 2 enters and stops on it.
pub fn obstacle_trajectory_gen<R: Rng>(
    spec: &ScenarioSpec,
    rng: &mut R,
    camera: &Vec3,
    target: &Vec3,
    workspace: &Aabb,
) -> Vec<ObstacleBody> {
    let margin = spec.obstacle_edge;
    (0..spec.obstacles)
        .map(|id| {
            let speed = uniform(rng, spec.obstacle_speed);
            let dir = crossing_direction(rng);
            let (frac, delay) = if spec.kind == 2 {
                (uniform(rng, spec.blocker_stop), uniform(rng, spec.blocker_delay))
            } else {
                (uniform(rng, spec.crossing_aim), uniform(rng, spec.crossing_delay))
            };
            let aim = camera + (target - camera) * frac;
            let entry = aim - dir * (exit_distance(workspace, &aim, &-dir) + margin);
            let end = if spec.kind == 2 {
                aim
            } else {
                aim + dir * (exit_distance(workspace, &aim, &dir) + margin)
            };
            ObstacleBody {
                id,
                shape: Shape::cube(spec.obstacle_edge),
                trajectory: Trajectory {
                    start_time: delay,
                    waypoints: vec![entry, end],
                    speeds: vec![speed],
                },
            }
        })
        .collect()
}

/// Start camera position: on the line from the arm's shoulder to `target`,
/// at the desired distance from the target when that keeps the arm between
/// `extension.0` and `extension.1` times its length beyond the shoulder.
/// Near full stretch the wrist cannot turn the camera onto the target.
pub fn initial_eye(chain: &KinematicChain, target: &Vec3, d_des: f64, extension: (f64, f64)) -> Vec3 {
    let fk = chain.forward_kinematics(&JointConfig::zeros());
    let shoulder = fk.frames[2].translation.vector;
    let arm = (chain.reach() - (shoulder - chain.base().translation.vector).norm()).max(0.0);
    let to = target - shoulder;
    let r = (to.norm() - d_des).min(extension.1 * arm).max(extension.0 * arm).min(to.norm());
    shoulder + to.normalize() * r
}

pub const EYE_EXTENSION: (f64, f64) = (0.75, 0.85);

/// Start margins: self-clearance (m) and distance to every joint limit (rad).
pub const START_SELF_CLEARANCE: f64 = 0.02;
pub const START_LIMIT_MARGIN: f64 = 0.3;

/// Start configuration looking at `target` from `eye`: the most manipulable
/// of several restarts over four camera rolls, preferring solutions that keep
/// the start margins.
pub fn initial_configuration(
    chain: &KinematicChain,
    eye: &Vec3,
    target: &Vec3,
    seed: u64,
    ik: &IkParams,
) -> Option<JointConfig> {
    let base = Pose6::look_at(*eye, *target);
    let axis = nalgebra::Unit::new_normalize(base.view_axis());
    let offline = ik.offline();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(bool, f64, JointConfig)> = None;
    for roll in [0.0, 0.5, -0.5, 1.0] {
        let r = Rotation3::from_axis_angle(&axis, roll * std::f64::consts::PI).matrix() * base.rotation();
        let pose = Pose6::new(*eye, crate::geometry::matrix_to_euler_xyz(&r));
        for _ in 0..6 {
            let q0 = random_config(chain, &mut rng);
            let Ok(sol) = ik_solve(chain, &pose, &q0, None, &offline) else {
                continue;
            };
            let fk = chain.forward_kinematics(&sol.q);
            let j = chain.jacobian_from_fk(&fk);
            let w = (j * j.transpose()).determinant().max(0.0).sqrt();
            let margins = chain.self_clearance(&fk) >= START_SELF_CLEARANCE
                && chain
                    .limits()
                    .iter()
                    .zip(sol.q.0.iter())
                    .all(|(&(lo, hi), &v)| v - lo >= START_LIMIT_MARGIN && hi - v >= START_LIMIT_MARGIN);
            if best.is_none_or(|(bm, bw, _)| (margins, w) > (bm, bw)) {
                best = Some((margins, w, sol.q));
            }
        }
    }
    best.map(|(_, _, q)| q)
}

/// Draws the randomized scene of run `run`. The draw depends only on the
/// scenario seed and run index, so every objective configuration of a case
/// sees the same scenes.
pub fn setup_run(ctx: &SimContext, spec: &ScenarioSpec, run: usize) -> Result<RunSetup> {
    let seed = mix_seed(spec.seed, run as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let duration = spec.dt * spec.horizon as f64;
    let tb = spec.target_box();
    let target = if spec.moving_target {
        target_walk(&mut rng, &tb, spec.target_speed, duration)
    } else {
        target_walk(&mut rng, &tb, 0.0, duration)
    };
    let t0 = target.position(0.0);
    let eye = initial_eye(ctx.chain, &t0, ctx.planner.d_des, EYE_EXTENSION);
    let q0 = initial_configuration(ctx.chain, &eye, &t0, mix_seed(seed, 1), &ctx.ik).ok_or_else(|| {
        Error::InvalidParams(format!(
            "no start configuration sees the target at {t0:?} from {eye:?}; check the chain and target box"
        ))
    })?;
    let cam0 = ctx.chain.camera_pose(&q0).p;
    let obstacles = obstacle_trajectory_gen(spec, &mut rng, &cam0, &t0, &ctx.grid.bounds());
    Ok(RunSetup { q0, target, obstacles })
}

/// Mutable state of one run.
#[derive(Debug, Clone)]
pub struct SimState {
    pub tick: usize,
    pub q: JointConfig,
    /// Last observed target position.
    pub estimate: Vec3,
    pub setup: RunSetup,
    pub terminated: bool,
    /// Speed of the obstacle hit at termination.
    pub collision_speed: Option<f64>,
}

impl SimState {
    pub fn new(setup: RunSetup) -> Self {
        Self {
            tick: 0,
            q: setup.q0,
            estimate: setup.target.position(0.0),
            setup,
            terminated: false,
            collision_speed: None,
        }
    }

    pub fn time(&self, spec: &ScenarioSpec) -> f64 {
        self.tick as f64 * spec.dt
    }

    pub fn scene(&self, spec: &ScenarioSpec) -> SceneState {
        let time = self.time(spec);
        SceneState {
            time,
            target: TargetBody {
                position: self.setup.target.position(time),
                radius: spec.target_radius,
            },
            obstacles: self.setup.obstacles.clone(),
        }
    }

    /// Occupancy the planner would see at the current tick.
    pub fn occupancy(&self, ctx: &SimContext, spec: &ScenarioSpec) -> Result<OccupancyGrid> {
        let fk = ctx.chain.forward_kinematics(&self.q);
        let caps: Vec<_> = ctx.chain.world_capsules(&fk).into_iter().map(|(_, c)| c).collect();
        rasterize(&self.scene(spec), &ctx.grid, &caps)
    }

    /// Advances one tick.
    pub fn step(&mut self, ctx: &SimContext, spec: &ScenarioSpec) -> Result<StepRecord> {
        if self.terminated {
            return Err(Error::InvalidParams("run already terminated by a collision".into()));
        }
        self.tick += 1;
        let scene = self.scene(spec);
        let chain = ctx.chain;
        let fk = chain.forward_kinematics(&self.q);
        let camera = fk.pose();

        let target = scene.target.position;
        let visible = spec.camera.in_view(&camera, &target) && scene.segment_visibility(&camera.p, &target);
        if visible {
            self.estimate = target;
        }

        let t = Instant::now();
        let caps: Vec<_> = chain.world_capsules(&fk).into_iter().map(|(_, c)| c).collect();
        let grid = rasterize(&scene, &ctx.grid, &caps)?;
        let rasterize_ms = ms(t);

        let t = Instant::now();
        let params = ctx.planner.with_terms(spec.terms);
        let input = PlannerInput {
            x_ee: camera,
            x_t: Pose6::new(self.estimate, Vec3::zeros()),
            grid: &grid,
            reach: ctx.map,
        };
        let plan = plan_step(&input, &params);
        let plan_ms = ms(t);

        let t = Instant::now();
        let goal = camera.compose(&plan.delta);
        let ik = ik_solve(chain, &goal, &self.q, Some(&grid), &ctx.ik);
        let ik_ms = ms(t);
        let ik_failed = match ik {
            Ok(sol) => {
                self.q = sol.q;
                false
            }
            Err(_) => true,
        };

        let fk = chain.forward_kinematics(&self.q);
        let caps: Vec<_> = chain.world_capsules(&fk).into_iter().map(|(_, c)| c).collect();
        let (min_d, hit) = scene.min_capsule_distance(&caps).unwrap_or((DISTANCE_SENTINEL, usize::MAX));
        let collision = min_d <= 0.0;
        if collision {
            self.terminated = true;
            self.collision_speed = scene
                .obstacles
                .iter()
                .find(|o| o.id == hit)
                .map(|o| o.trajectory.nominal_speed());
        }
        Ok(StepRecord {
            tick: self.tick,
            target_visible: visible,
            ik_failed,
            collision,
            min_obstacle_distance: min_d,
            objective: plan.objective,
            reachability: ctx.map.map_or(f64::NAN, |m| m.query(&fk.camera.translation.vector)),
            plan_degraded: plan.degraded,
            times: StageTimes {
                rasterize_ms,
                plan_ms,
                ik_ms,
            },
        })
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Checks that the context can run `spec`.
pub fn check_context(ctx: &SimContext, spec: &ScenarioSpec) -> Result<()> {
    spec.validate()?;
    ctx.planner.validate()?;
    ctx.ik.validate()?;
    ctx.grid.validate()?;
    if spec.terms.reach && ctx.map.is_none() {
        return Err(Error::MissingMap);
    }
    let g = ctx.grid.bounds();
    let tb = spec.target_box();
    if !g.contains(&tb.min) || !g.contains(&tb.max) {
        return Err(Error::GridTooSmall {
            body: "target box".into(),
        });
    }
    Ok(())
}

/// Simulates run `run` to the horizon or the first collision.
pub fn simulate_run(ctx: &SimContext, spec: &ScenarioSpec, run: usize) -> Result<(RunMetrics, Vec<StepRecord>)> {
    let setup = setup_run(ctx, spec, run)?;
    let speeds = setup.obstacles.iter().map(|o| o.trajectory.nominal_speed()).collect();
    let mut state = SimState::new(setup);
    let mut records = Vec::with_capacity(spec.horizon);
    while state.tick < spec.horizon && !state.terminated {
        records.push(state.step(ctx, spec)?);
    }
    let metrics = RunMetrics::from_records(run, &records, speeds, state.collision_speed);
    Ok((metrics, records))
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub spec: ScenarioSpec,
    pub metrics: Vec<RunMetrics>,
    pub aggregate: AggregateRow,
    /// Per-run step records, kept only when requested.
    pub traces: Option<Vec<Vec<StepRecord>>>,
}

/// Runs all `spec.runs` runs, fanning them out through `exec`.
pub fn run(ctx: &SimContext, spec: &ScenarioSpec, exec: Execution, keep_traces: bool) -> Result<CaseResult> {
    check_context(ctx, spec)?;
    let results = map_indexed(exec, spec.runs, |r| simulate_run(ctx, spec, r));
    let mut metrics = Vec::with_capacity(spec.runs);
    let mut traces = keep_traces.then(Vec::new);
    for r in results {
        let (m, rec) = r?;
        metrics.push(m);
        if let Some(t) = traces.as_mut() {
            t.push(rec);
        }
    }
    let aggregate = AggregateRow::from_metrics(&spec.case_label(), spec.terms, &metrics);
    Ok(CaseResult {
        spec: spec.clone(),
        metrics,
        aggregate,
        traces,
    })
}

/// The four objective configurations compared in the ablation.
pub fn ablation_configs() -> [TermMask; 4] {
    [
        TermMask { occl: true, col: false, reach: false },
        TermMask { occl: true, col: true, reach: false },
        TermMask { occl: true, col: false, reach: true },
        TermMask::ALL,
    ]
}

/// The five cases: scenario 1 with 0, 1, 2 obstacles; scenario 2 with a
/// stationary and a moving target. `base` supplies everything else.
pub fn ablation_cases(base: &ScenarioSpec) -> [ScenarioSpec; 5] {
    let with = |kind: u8, obstacles: usize, moving: bool| ScenarioSpec {
        kind,
        obstacles,
        moving_target: moving,
        ..base.clone()
    };
    [with(1, 0, true), with(1, 1, true), with(1, 2, true), with(2, 1, false), with(2, 1, true)]
}

/// The ablation case called `label` (see [`ScenarioSpec::case_label`]).
pub fn case_by_label(base: &ScenarioSpec, label: &str) -> Result<ScenarioSpec> {
    ablation_cases(base)
        .into_iter()
        .find(|c| c.case_label() == label)
        .ok_or_else(|| {
            Error::InvalidParams(format!(
                "unknown case `{label}` (expected s1-0obs, s1-1obs, s1-2obs, s2-stop or s2-move)"
            ))
        })
}

/// Collision failures binned by the speed of the obstacle hit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedBin {
    pub lo: f64,
    pub hi: f64,
    /// Obstacles whose speed falls in the bin.
    pub obstacles: usize,
    pub failures: usize,
}

pub fn speed_histogram(metrics: &[RunMetrics], range: [f64; 2], bins: usize) -> Vec<SpeedBin> {
    let bins = bins.max(1);
    let w = (range[1] - range[0]) / bins as f64;
    let index = |s: f64| (((s - range[0]) / w).floor().max(0.0) as usize).min(bins - 1);
    let mut out: Vec<SpeedBin> = (0..bins)
        .map(|i| SpeedBin {
            lo: range[0] + w * i as f64,
            hi: range[0] + w * (i + 1) as f64,
            obstacles: 0,
            failures: 0,
        })
        .collect();
    for m in metrics {
        for &s in &m.obstacle_speeds {
            out[index(s)].obstacles += 1;
        }
        if let Some(s) = m.collision_speed {
            out[index(s)].failures += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reachability::MapMeta;

    fn chain() -> KinematicChain {
        KinematicChain::default_7r()
    }

    fn ctx(chain: &KinematicChain) -> SimContext<'_> {
        SimContext {
            chain,
            grid: GridParams::default_workspace(),
            planner: PlannerParams::paper_table1(),
            ik: IkParams::default(),
            map: None,
        }
    }

    fn no_reach(spec: ScenarioSpec) -> ScenarioSpec {
        spec.with_terms(TermMask { occl: true, col: true, reach: false })
    }

    #[test]
    fn target_walk_moves_at_constant_speed_inside_box() {
        let spec = ScenarioSpec::scenario1(0);
        let b = spec.target_box();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tr = target_walk(&mut rng, &b, 0.5, 5.0);
        for k in 0..=100 {
            let p = tr.position(k as f64 * 0.05);
            assert!(b.contains(&p), "{p:?}");
            assert_eq!(p.x, -1.0);
        }
        // Path length per tick is exact; it equals the straight-line
        // displacement whenever no waypoint is passed within the tick.
        let mut path = 0.0;
        let mut t = 0.0;
        let mut seg_start = 0.0;
        for (seg, &v) in tr.waypoints.windows(2).zip(&tr.speeds) {
            let dur = (seg[1] - seg[0]).norm() / v;
            while t + 0.05 <= seg_start + dur {
                let d = (tr.position(t + 0.05) - tr.position(t)).norm();
                assert!((d - 0.025).abs() < 1e-12, "{d}");
                path += d;
                t += 0.05;
            }
            seg_start += dur;
            if seg_start > 5.0 {
                break;
            }
            t = seg_start.max(t);
            t = (t / 0.05).ceil() * 0.05;
        }
        assert!(path > 0.0);
    }

    #[test]
    fn obstacle_generation_is_deterministic_and_in_speed_range() {
        let spec = ScenarioSpec::scenario1(2);
        let ws = GridParams::default_workspace().bounds();
        let cam = Vec3::new(-1.0, 1.1, 1.3);
        let tgt = Vec3::new(-1.0, 2.1, 1.5);
        let mut speeds = Vec::new();
        for s in 0..500 {
            let a = obstacle_trajectory_gen(&spec, &mut ChaCha8Rng::seed_from_u64(s), &cam, &tgt, &ws);
            let b = obstacle_trajectory_gen(&spec, &mut ChaCha8Rng::seed_from_u64(s), &cam, &tgt, &ws);
            assert_eq!(a, b);
            for o in &a {
                let tr = &o.trajectory;
                assert!(!ws.contains(&tr.waypoints[0]) && !ws.contains(&tr.waypoints[1]));
                speeds.push(tr.speeds[0]);
            }
        }
        assert_eq!(speeds.len(), 1000);
        assert!(speeds.iter().all(|s| (0.8..=1.2).contains(s)));
    }

    #[test]
    fn blocker_rests_on_initial_sight_line() {
        let spec = ScenarioSpec::scenario2(false);
        let ws = GridParams::default_workspace().bounds();
        let cam = Vec3::new(-1.0, 1.1, 1.3);
        let tgt = Vec3::new(-1.0, 2.1, 1.5);
        for s in 0..50 {
            let obs = obstacle_trajectory_gen(&spec, &mut ChaCha8Rng::seed_from_u64(s), &cam, &tgt, &ws);
            assert_eq!(obs.len(), 1);
            let end = obs[0].position(100.0);
            let d = crate::geometry::segment_point_distance(&cam, &tgt, &end);
            assert!(d < 1e-9, "{d}");
            let t = (end - cam).dot(&(tgt - cam)) / (tgt - cam).norm_squared();
            assert!((0.3..=0.6).contains(&t));
        }
    }

    #[test]
    fn empty_scene_tracks_without_failures() {
        let chain = chain();
        let c = ctx(&chain);
        let spec = no_reach(ScenarioSpec {
            moving_target: false,
            horizon: 20,
            ..ScenarioSpec::scenario1(0)
        });
        let (m, rec) = simulate_run(&c, &spec, 0).unwrap();
        assert_eq!(rec.len(), 20);
        assert!(rec.iter().all(|r| r.target_visible && !r.ik_failed && !r.collision), "{rec:?}");
        assert_eq!(m.tracking_rate, 1.0);
    }

    #[test]
    fn horizon_one_elapses_one_tick() {
        let chain = chain();
        let c = ctx(&chain);
        let spec = no_reach(ScenarioSpec {
            horizon: 1,
            runs: 2,
            ..ScenarioSpec::scenario1(0)
        });
        let r = run(&c, &spec, Execution::Sequential, false).unwrap();
        assert_eq!(r.aggregate.avg_elapsed_steps, 1.0);
        assert_eq!(r.aggregate.collision_failures, 0);
    }

    #[test]
    fn scripted_obstacle_through_base_link_collides() {
        let chain = chain();
        let c = ctx(&chain);
        let spec = ScenarioSpec {
            moving_target: false,
            horizon: 60,
            ..ScenarioSpec::scenario1(0)
        }
        .with_terms(TermMask::TRACK_ONLY);
        let mut setup = setup_run(&c, &spec, 0).unwrap();
        // The first link cannot dodge.
        let fk = chain.forward_kinematics(&setup.q0);
        let at = (fk.frames[0].translation.vector + fk.frames[1].translation.vector) * 0.5;
        setup.obstacles = vec![ObstacleBody {
            id: 0,
            shape: Shape::cube(0.25),
            trajectory: Trajectory {
                start_time: 0.0,
                waypoints: vec![at - Vec3::x() * 1.4, at + Vec3::x() * 1.4],
                speeds: vec![1.0],
            },
        }];
        let mut state = SimState::new(setup);
        let mut hit = false;
        while state.tick < spec.horizon && !state.terminated {
            hit |= state.step(&c, &spec).unwrap().collision;
        }
        assert!(hit);
        assert_eq!(state.collision_speed, Some(1.0));
        assert!(state.step(&c, &spec).is_err());
    }

    #[test]
    fn same_seed_same_aggregate() {
        let chain = chain();
        let c = ctx(&chain);
        let spec = no_reach(ScenarioSpec {
            horizon: 15,
            runs: 3,
            ..ScenarioSpec::scenario1(1)
        });
        let a = run(&c, &spec, Execution::Sequential, false).unwrap();
        let b = run(&c, &spec, Execution::Parallel, false).unwrap();
        assert_eq!(a.aggregate, b.aggregate);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn reach_terms_require_a_map() {
        let chain = chain();
        let c = ctx(&chain);
        let err = run(&c, &ScenarioSpec::scenario1(0), Execution::Sequential, false).unwrap_err();
        assert!(matches!(err, Error::MissingMap));
        let grid = GridParams {
            origin: [-2.0, -1.0, 0.0],
            resolution: 0.5,
            dims: [4, 4, 4],
        };
        let meta = MapMeta {
            chain_hash: chain.hash().into(),
            orientations: 1,
            restarts: 1,
            seed: 0,
            config_hash: "-".into(),
        };
        let map = ReachabilityMap::from_scores(grid, vec![1.0; 64], meta).unwrap();
        let c = SimContext { map: Some(&map), ..c };
        let spec = ScenarioSpec { horizon: 2, runs: 1, ..ScenarioSpec::scenario1(0) };
        run(&c, &spec, Execution::Sequential, false).unwrap();
    }

    #[test]
    fn histogram_bins_failures_by_hit_speed() {
        let m = |speeds: Vec<f64>, hit: Option<f64>| RunMetrics {
            run: 0,
            collided: hit.is_some(),
            elapsed_ticks: 10,
            ik_failure_rate: 0.0,
            tracking_rate: 1.0,
            collision_speed: hit,
            obstacle_speeds: speeds,
        };
        let h = speed_histogram(
            &[m(vec![0.85, 1.15], Some(1.15)), m(vec![1.2], Some(1.2)), m(vec![0.95], None)],
            [0.8, 1.2],
            4,
        );
        assert_eq!(h.iter().map(|b| b.obstacles).collect::<Vec<_>>(), [1, 1, 0, 2]);
        assert_eq!(h.iter().map(|b| b.failures).collect::<Vec<_>>(), [0, 0, 0, 2]);
    }

    #[test]
    fn ablation_grid_has_twenty_cells() {
        let cases = ablation_cases(&ScenarioSpec::default());
        assert_eq!(cases.len() * ablation_configs().len(), 20);
        assert!(ablation_configs().iter().all(|m| m.occl));
    }
}
