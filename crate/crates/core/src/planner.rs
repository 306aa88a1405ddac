//! Per-tick camera pose planner.
//!
//! The objective is the sum of four penalties on a candidate camera pose:
//! tracking (distance and centering), occlusion of the sight cone, camera
//! proximity to obstacles, and low reachability. Each penalty is a cubic
//! rescale of one scalar, and the avoidance terms switch off past a
//! threshold. The pose change is found by a box-constrained local optimizer
//! started from "hold the current pose".

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose6, PoseDelta};
use crate::optim::{minimize_box, BoxOptions, Vec6};
use crate::reachability::ReachabilityMap;
use crate::world::{OccupancyGrid, SightCone};

/// Weights `[w0, w1, w2]` of the cubic rescale `w0 * (w1 * x + w2)^3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RescaleWeights(pub [f64; 3]);

impl RescaleWeights {
    pub fn eval(&self, x: f64) -> f64 {
        rescale(self, x)
    }
}

pub fn rescale(w: &RescaleWeights, x: f64) -> f64 {
    let [w0, w1, w2] = w.0;
    let y = w1 * x + w2;
    w0 * y * y * y
}

/// Which avoidance terms are active; tracking is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermMask {
    pub occl: bool,
    pub col: bool,
    pub reach: bool,
}

impl TermMask {
    pub const ALL: TermMask = TermMask {
        occl: true,
        col: true,
        reach: true,
    };
    pub const TRACK_ONLY: TermMask = TermMask {
        occl: false,
        col: false,
        reach: false,
    };

    /// All eight combinations, ordered by the bit pattern occl|col|reach.
    pub fn all_combinations() -> [TermMask; 8] {
        std::array::from_fn(|i| TermMask {
            occl: i & 4 != 0,
            col: i & 2 != 0,
            reach: i & 1 != 0,
        })
    }

    /// Short label such as `track+occl+reach`.
    pub fn label(&self) -> String {
        let mut s = String::from("track");
        for (on, name) in [(self.occl, "occl"), (self.col, "col"), (self.reach, "reach")] {
            if on {
                s.push('+');
                s.push_str(name);
            }
        }
        s
    }

    /// Parses the form produced by [`TermMask::label`]; `track` may be omitted.
    pub fn parse(s: &str) -> Result<Self> {
        let mut m = TermMask::TRACK_ONLY;
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "track" => {}
                "occl" => m.occl = true,
                "col" => m.col = true,
                "reach" => m.reach = true,
                "all" => m = TermMask::ALL,
                other => {
                    return Err(Error::InvalidParams(format!(
                        "unknown term `{other}` (expected track, occl, col, reach or all)"
                    )))
                }
            }
        }
        Ok(m)
    }
}

impl Default for TermMask {
    fn default() -> Self {
        TermMask::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerParams {
    /// Lower bound of the per-tick pose change `[x, y, z, rx, ry, rz]` (m, rad).
    pub delta_lower: [f64; 6],
    pub delta_upper: [f64; 6],
    pub w_d: RescaleWeights,
    pub w_theta: RescaleWeights,
    pub w_occl: RescaleWeights,
    pub w_col: RescaleWeights,
    pub w_reach: RescaleWeights,
    /// Desired camera-target distance (m).
    pub d_des: f64,
    pub u_occl: f64,
    pub u_col: f64,
    pub u_reach: f64,
    /// Radius of the sight cone's base at the target (m).
    pub cone_base_radius: f64,
    pub max_evaluations: usize,
    pub step_tolerance: f64,
    pub fd_step: f64,
    pub terms: TermMask,
}

impl PlannerParams {
    /// The published parameter set, shipped as profile `paper-table1`.
    pub fn paper_table1() -> Self {
        Self {
            delta_lower: [-0.05, -0.05, -0.05, -0.2, -0.2, -0.2],
            delta_upper: [0.05, 0.05, 0.05, 0.2, 0.2, 0.2],
            w_d: RescaleWeights([0.5, 1.0, 0.0]),
            w_theta: RescaleWeights([7.5, 1.5, 0.0]),
            w_occl: RescaleWeights([-1.0, 5.0, -1.5]),
            w_col: RescaleWeights([-1.0, 1.5, -1.5]),
            w_reach: RescaleWeights([-5.0, 100.0, -50.0]),
            d_des: 1.0,
            u_occl: 0.3,
            u_col: 1.0,
            u_reach: 0.5,
            cone_base_radius: 0.1,
            max_evaluations: 600,
            step_tolerance: 1e-4,
            fd_step: 1e-6,
            terms: TermMask::ALL,
        }
    }

    pub fn with_terms(self, terms: TermMask) -> Self {
        Self { terms, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        for i in 0..6 {
            let (l, u) = (self.delta_lower[i], self.delta_upper[i]);
            if !(l < u) || l > 0.0 || u < 0.0 {
                return bad(format!(
                    "delta bounds must satisfy lower < upper and contain 0 (component {i}: [{l}, {u}])"
                ));
            }
        }
        if !(self.d_des > 0.0) {
            return bad(format!("d_des must be positive, got {}", self.d_des));
        }
        for (name, v) in [
            ("u_occl", self.u_occl),
            ("u_col", self.u_col),
            ("u_reach", self.u_reach),
            ("step_tolerance", self.step_tolerance),
            ("fd_step", self.fd_step),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.cone_base_radius >= 0.0) {
            return bad(format!("cone_base_radius must be >= 0, got {}", self.cone_base_radius));
        }
        if self.max_evaluations < 14 {
            return bad(format!(
                "max_evaluations must allow one gradient (>= 14), got {}",
                self.max_evaluations
            ));
        }
        Ok(())
    }
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self::paper_table1()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PlannerInput<'a> {
    /// Current camera pose.
    pub x_ee: Pose6,
    /// Most recent target estimate; only the position is used.
    pub x_t: Pose6,
    pub grid: &'a OccupancyGrid,
    pub reach: Option<&'a ReachabilityMap>,
}

/// Angle between the camera's view axis and the direction to `target`;
/// zero when the target sits at the camera origin.
pub fn view_angle(camera: &Pose6, target: &Pose6) -> f64 {
    let to = target.p - camera.p;
    let n = to.norm();
    if n == 0.0 {
        return 0.0;
    }
    let c = (camera.view_axis().dot(&to) / n).clamp(-1.0, 1.0);
    // atan2 keeps precision near 0 and pi where acos does not.
    camera.view_axis().cross(&to).norm().atan2(c * n)
}

pub fn term_track(params: &PlannerParams, input: &PlannerInput, cand: &Pose6) -> f64 {
    let d = (input.x_t.p - cand.p).norm();
    let theta = view_angle(cand, &input.x_t);
    rescale(&params.w_d, (params.d_des - d).abs()) + rescale(&params.w_theta, theta)
}

/// Signed distance between the sight cone at `cand` and the grid.
pub fn cone_clearance(params: &PlannerParams, input: &PlannerInput, cand: &Pose6) -> Option<f64> {
    SightCone::between(cand.p, input.x_t.p, params.cone_base_radius).map(|c| input.grid.cone_distance(&c))
}

pub fn term_occl(params: &PlannerParams, input: &PlannerInput, cand: &Pose6) -> f64 {
    match cone_clearance(params, input, cand) {
        Some(d) => occl_penalty(params, d),
        None => 0.0,
    }
}

pub fn occl_penalty(params: &PlannerParams, d: f64) -> f64 {
    if d < params.u_occl {
        rescale(&params.w_occl, d)
    } else {
        0.0
    }
}

pub fn term_col(params: &PlannerParams, input: &PlannerInput, cand: &Pose6) -> f64 {
    col_penalty(params, input.grid.point_distance(&cand.p))
}

pub fn col_penalty(params: &PlannerParams, d: f64) -> f64 {
    if d < params.u_col {
        rescale(&params.w_col, d)
    } else {
        0.0
    }
}

/// Zero when no map is supplied.
pub fn term_reach(params: &PlannerParams, input: &PlannerInput, cand: &Pose6) -> f64 {
    match input.reach {
        Some(map) => reach_penalty(params, map.query(&cand.p)),
        None => 0.0,
    }
}

pub fn reach_penalty(params: &PlannerParams, v: f64) -> f64 {
    if v < params.u_reach {
        rescale(&params.w_reach, v)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TermValues {
    pub track: f64,
    pub occl: f64,
    pub col: f64,
    pub reach: f64,
}

impl TermValues {
    pub fn total(&self) -> f64 {
        self.track + self.occl + self.col + self.reach
    }
}

/// Per-term breakdown at `x_ee ⊕ delta`; masked-off terms read zero.
pub fn objective_terms(params: &PlannerParams, input: &PlannerInput, delta: &PoseDelta) -> TermValues {
    let cand = input.x_ee.compose(delta);
    let m = params.terms;
    TermValues {
        track: term_track(params, input, &cand),
        occl: if m.occl { term_occl(params, input, &cand) } else { 0.0 },
        col: if m.col { term_col(params, input, &cand) } else { 0.0 },
        reach: if m.reach { term_reach(params, input, &cand) } else { 0.0 },
    }
}

pub fn objective(params: &PlannerParams, input: &PlannerInput, delta: &PoseDelta) -> f64 {
    objective_terms(params, input, delta).total()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanResult {
    pub delta: PoseDelta,
    pub objective: f64,
    /// Objective of holding the pose (`delta = 0`).
    pub start_objective: f64,
    pub evaluations: usize,
    /// The evaluation budget ran out; `delta` is the best point found.
    pub degraded: bool,
}

/// Picks this tick's camera pose change.
pub fn plan_step(input: &PlannerInput, params: &PlannerParams) -> PlanResult {
    let opts = BoxOptions {
        max_evaluations: params.max_evaluations,
        step_tolerance: params.step_tolerance,
        fd_step: params.fd_step,
    };
    let r = minimize_box(
        |x: &Vec6| objective(params, input, &PoseDelta(*x)),
        Vec6::zeros(),
        Vec6::from(params.delta_lower),
        Vec6::from(params.delta_upper),
        &opts,
    );
    PlanResult {
        delta: PoseDelta(r.x),
        objective: r.value,
        start_objective: r.start_value,
        evaluations: r.evaluations,
        degraded: r.exhausted,
    }
}

/// Number of objective evaluations that fit in `budget`, measured on `input`.
pub fn calibrate_max_evaluations(input: &PlannerInput, params: &PlannerParams, budget: Duration) -> usize {
    let probe = 200;
    let start = Instant::now();
    let mut sink = 0.0;
    for i in 0..probe {
        let s = (i as f64 / probe as f64 - 0.5) * 0.02;
        let d = PoseDelta(Vec6::new(s, -s, s, s, s, -s));
        sink += objective(params, input, &d);
    }
    std::hint::black_box(sink);
    let per = start.elapsed().as_secs_f64() / probe as f64;
    ((budget.as_secs_f64() / per.max(1e-9)) as usize).max(14)
}
