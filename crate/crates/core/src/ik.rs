//! Real-time inverse kinematics for the camera pose.
//!
//! Damped least squares drives the 6-D pose error to zero; continuity,
//! joint-limit and obstacle-clearance costs descend in the Jacobian null
//! space. Every iterate is clamped to the joint limits and to the per-tick
//! speed cap around `q_prev`, and a solution is only reported once it passes
//! all acceptance checks.

use nalgebra::{Matrix6, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_error, segment_closest_param, segment_segment_closest, Pose6, Vec3};
use crate::kinematics::{FkResult, Jacobian, JointConfig, JointVector, KinematicChain, DOF};
use crate::world::OccupancyGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkParams {
    /// Camera position tolerance (m).
    pub position_tolerance: f64,
    /// Camera orientation tolerance (rad).
    pub orientation_tolerance: f64,
    /// Iteration cap for online solves; sized to the 30 ms stage budget.
    pub max_iterations: usize,
    /// Iteration cap per restart when probing reachability offline.
    pub offline_max_iterations: usize,
    pub damping: f64,
    pub continuity_weight: f64,
    pub collision_weight: f64,
    /// Minimum capsule-to-grid distance (m).
    pub clearance_margin: f64,
    /// Extra distance over the margin where the clearance cost starts acting (m).
    pub clearance_activation: f64,
    /// Largest per-joint change from `q_prev` in one call (rad).
    pub speed_cap: f64,
}

impl Default for IkParams {
    fn default() -> Self {
        Self {
            position_tolerance: 1e-3,
            orientation_tolerance: 1e-2,
            max_iterations: 100,
            offline_max_iterations: 150,
            damping: 0.02,
            continuity_weight: 0.1,
            collision_weight: 5.0,
            clearance_margin: 0.03,
            clearance_activation: 0.1,
            speed_cap: 0.3,
        }
    }
}

impl IkParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.position_tolerance > 0.0
            && self.orientation_tolerance > 0.0
            && self.max_iterations > 0
            && self.offline_max_iterations > 0
            && self.damping >= 0.0
            && self.continuity_weight >= 0.0
            && self.collision_weight >= 0.0
            && self.clearance_margin >= 0.0
            && self.clearance_activation >= 0.0
            && self.speed_cap > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("ik parameters out of range: {self:?}")))
        }
    }

    /// Settings for offline reachability probes: no continuity constraint.
    pub fn offline(&self) -> Self {
        Self {
            max_iterations: self.offline_max_iterations,
            continuity_weight: 0.0,
            speed_cap: f64::INFINITY,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IkFailureReason {
    Unreachable,
    PoseError,
    Limits,
    SelfCollision,
    Clearance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkSolution {
    pub q: JointConfig,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkFailure {
    pub reason: IkFailureReason,
    pub iterations: usize,
}

pub type IkOutcome = std::result::Result<IkSolution, IkFailure>;

/// Pose error `[dp; dr]` (world frame) of the camera against `target`.
pub fn pose_error(fk: &FkResult, target: &Pose6) -> Vector6<f64> {
    let dp = target.p - fk.camera.translation.vector;
    let dr = rotation_error(&target.rotation(), fk.camera.rotation.matrix());
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

/// Independent acceptance test for a candidate configuration.
pub fn check_solution(
    chain: &KinematicChain,
    target: &Pose6,
    q: &JointConfig,
    q_prev: &JointConfig,
    grid: Option<&OccupancyGrid>,
    params: &IkParams,
) -> std::result::Result<(), IkFailureReason> {
    let fk = chain.forward_kinematics(q);
    verify(chain, &fk, target, q, q_prev, grid, params)
}

fn verify(
    chain: &KinematicChain,
    fk: &FkResult,
    target: &Pose6,
    q: &JointConfig,
    q_prev: &JointConfig,
    grid: Option<&OccupancyGrid>,
    params: &IkParams,
) -> std::result::Result<(), IkFailureReason> {
    let e = pose_error(fk, target);
    if e.fixed_rows::<3>(0).norm() > params.position_tolerance
        || e.fixed_rows::<3>(3).norm() > params.orientation_tolerance
    {
        return Err(IkFailureReason::PoseError);
    }
    if !chain.within_limits(q) || q.max_abs_diff(q_prev) > params.speed_cap + 1e-12 {
        return Err(IkFailureReason::Limits);
    }
    if chain.self_collision_fk(fk) {
        return Err(IkFailureReason::SelfCollision);
    }
    if let Some(grid) = grid {
        for (_, cap) in chain.world_capsules(fk) {
            if let Some((d, _)) = grid.capsule_distance(&cap) {
                if d < params.clearance_margin {
                    return Err(IkFailureReason::Clearance);
                }
            }
        }
    }
    Ok(())
}

/// Gradient of the clearance penalty `1/2 * sum(max(0, margin + act - d))^2`.
fn clearance_gradient(
    chain: &KinematicChain,
    fk: &FkResult,
    grid: &OccupancyGrid,
    params: &IkParams,
) -> JointVector {
    let mut g = JointVector::zeros();
    let limit = params.clearance_margin + params.clearance_activation;
    for (link, cap) in chain.world_capsules(fk) {
        if link == 0 {
            continue;
        }
        let Some((d, center)) = grid.capsule_distance(&cap) else {
            return g;
        };
        if d >= limit {
            continue;
        }
        let t = segment_closest_param(&cap.a, &cap.b, &center);
        let s = cap.a + (cap.b - cap.a) * t;
        let away = s - center;
        let n = if away.norm() > 1e-12 { away.normalize() } else { Vec3::z() };
        let jp = chain.point_jacobian(fk, link, &s);
        // d(distance)/dq = n^T Jp; cost gradient = -(limit - d) * that.
        g -= (jp.transpose() * n) * (limit - d);
    }
    g
}

/// Gradient of `1/2 * sum(max(0, act - d))^2` over non-adjacent link pairs,
/// `d` being the capsule surface distance.
fn self_clearance_gradient(chain: &KinematicChain, fk: &FkResult, act: f64) -> JointVector {
    let mut g = JointVector::zeros();
    let caps = chain.world_capsules(fk);
    for (i, (li, ci)) in caps.iter().enumerate() {
        for (lj, cj) in &caps[i + 1..] {
            if li.abs_diff(*lj) <= 1 {
                continue;
            }
            let (s, t, dist) = segment_segment_closest(&ci.a, &ci.b, &cj.a, &cj.b);
            let d = dist - ci.radius - cj.radius;
            if d >= act || dist < 1e-12 {
                continue;
            }
            let pi = ci.a + (ci.b - ci.a) * s;
            let pj = cj.a + (cj.b - cj.a) * t;
            let n = (pi - pj) / dist;
            let jd = chain.point_jacobian(fk, *li, &pi) - chain.point_jacobian(fk, *lj, &pj);
            g -= (jd.transpose() * n) * (act - d);
        }
    }
    g
}

fn limit_gradient(chain: &KinematicChain, q: &JointConfig) -> JointVector {
    let band = 0.15;
    let mut g = JointVector::zeros();
    for (i, &(lo, hi)) in chain.limits().iter().enumerate() {
        let v = q.0[i];
        if v < lo + band {
            g[i] = -(lo + band - v);
        } else if v > hi - band {
            g[i] = v - (hi - band);
        }
    }
    g
}

/// Per-joint box combining the joint limits and the speed cap around `q_prev`.
fn joint_bounds(chain: &KinematicChain, q_prev: &JointConfig, params: &IkParams) -> [(f64, f64); DOF] {
    let mut b = [(0.0, 0.0); DOF];
    for (i, &(lo, hi)) in chain.limits().iter().enumerate() {
        let p = q_prev.0[i];
        b[i] = (lo.max(p - params.speed_cap), hi.min(p + params.speed_cap));
    }
    b
}

fn clamp_to(q: &mut JointConfig, bounds: &[(f64, f64); DOF]) {
    for (v, &(lo, hi)) in q.0.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

/// Damped least-squares step for `e` that drops joints pinned at their
/// bounds, so the remaining joints take over their share of the task.
fn bounded_dls(
    jac: &Jacobian,
    e: &Vector6<f64>,
    q: &JointConfig,
    bounds: &[(f64, f64); DOF],
    lambda2: f64,
) -> JointVector {
    let mut active = [true; DOF];
    let mut dq = JointVector::zeros();
    for _ in 0..DOF {
        let mut jw = *jac;
        for (i, a) in active.iter().enumerate() {
            if !a {
                jw.column_mut(i).fill(0.0);
            }
        }
        let Some(chol) = (jw * jw.transpose() + Matrix6::identity() * lambda2).cholesky() else {
            return JointVector::zeros();
        };
        dq = jw.transpose() * chol.solve(e);
        let mut changed = false;
        for i in 0..DOF {
            let (lo, hi) = bounds[i];
            let v = q.0[i];
            if active[i] && ((v <= lo + 1e-12 && dq[i] < 0.0) || (v >= hi - 1e-12 && dq[i] > 0.0)) {
                active[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let step = dq.amax();
    if step > MAX_STEP {
        dq *= MAX_STEP / step;
    }
    dq
}

/// Descent direction for the secondary cost `grad` inside the null space of
/// the task, restricted to joints that are free to move that way.
fn bounded_null_step(
    jac: &Jacobian,
    grad: &JointVector,
    q: &JointConfig,
    bounds: &[(f64, f64); DOF],
    lambda2: f64,
) -> JointVector {
    let mut active = [true; DOF];
    let mut dq = JointVector::zeros();
    for _ in 0..DOF {
        let mut jw = *jac;
        let mut g = *grad;
        for (i, a) in active.iter().enumerate() {
            if !a {
                jw.column_mut(i).fill(0.0);
                g[i] = 0.0;
            }
        }
        let Some(chol) = (jw * jw.transpose() + Matrix6::identity() * lambda2).cholesky() else {
            return JointVector::zeros();
        };
        dq = -(g - jw.transpose() * chol.solve(&(jw * g)));
        for (i, a) in active.iter().enumerate() {
            if !a {
                dq[i] = 0.0;
            }
        }
        let mut changed = false;
        for i in 0..DOF {
            let (lo, hi) = bounds[i];
            let v = q.0[i];
            if active[i] && ((v <= lo + 1e-12 && dq[i] < 0.0) || (v >= hi - 1e-12 && dq[i] > 0.0)) {
                active[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let step = dq.amax();
    if step > MAX_SECONDARY_STEP {
        dq *= MAX_SECONDARY_STEP / step;
    }
    dq
}

const MAX_STEP: f64 = 0.3;
/// Largest joint change taken by one null-space step (rad).
const MAX_SECONDARY_STEP: f64 = 0.05;

/// Solves for a configuration placing the camera at `target`, seeded at
/// `q_prev`. On failure the caller keeps `q_prev`.
pub fn ik_solve(
    chain: &KinematicChain,
    target: &Pose6,
    q_prev: &JointConfig,
    grid: Option<&OccupancyGrid>,
    params: &IkParams,
) -> IkOutcome {
    let base = chain.base().translation.vector;
    if (target.p - base).norm() > chain.reach() {
        return Err(IkFailure {
            reason: IkFailureReason::Unreachable,
            iterations: 0,
        });
    }
    let mut q = *q_prev;
    let mut fk = chain.forward_kinematics(&q);
    let mut last = match verify(chain, &fk, target, &q, q_prev, grid, params) {
        Ok(()) => return Ok(IkSolution { q, iterations: 0 }),
        Err(r) => r,
    };
    let lambda2 = params.damping * params.damping;
    let bounds = joint_bounds(chain, q_prev, params);
    let mut best_err = f64::INFINITY;
    let mut stall = 0;
    for it in 1..=params.max_iterations {
        let mut grad = limit_gradient(chain, &q)
            + (q.0 - q_prev.0) * params.continuity_weight
            + self_clearance_gradient(chain, &fk, params.clearance_activation) * params.collision_weight;
        if let Some(grid) = grid {
            if params.collision_weight > 0.0 && grid.occupied_count() > 0 {
                grad += clearance_gradient(chain, &fk, grid, params) * params.collision_weight;
            }
        }
        if grad.amax() > 0.0 {
            let jac = chain.jacobian_from_fk(&fk);
            let dq = bounded_null_step(&jac, &grad, &q, &bounds, lambda2);
            q.0 += dq;
            clamp_to(&mut q, &bounds);
            fk = chain.forward_kinematics(&q);
        }

        // Null-space motion leaks into the task through damping, curvature
        // and clamping; the task step restores the pose.
        let e = pose_error(&fk, target);
        let jac = chain.jacobian_from_fk(&fk);
        q.0 += bounded_dls(&jac, &e, &q, &bounds, lambda2);
        clamp_to(&mut q, &bounds);
        fk = chain.forward_kinematics(&q);
        match verify(chain, &fk, target, &q, q_prev, grid, params) {
            Ok(()) => return Ok(IkSolution { q, iterations: it }),
            Err(r) => last = r,
        }

        // Without obstacles only the pose error matters, so a stalled error
        // means the target is out of reach from this seed.
        if grid.is_some_and(|g| g.occupied_count() > 0) {
            continue;
        }
        let err = pose_error(&fk, target).norm();
        if err < best_err - 1e-7 {
            best_err = err;
            stall = 0;
        } else {
            stall += 1;
            if stall > 20 {
                return Err(IkFailure {
                    reason: last,
                    iterations: it,
                });
            }
        }
    }
    Err(IkFailure {
        reason: last,
        iterations: params.max_iterations,
    })
}

/// Draws a configuration uniformly inside the joint limits.
pub fn random_config<R: Rng>(chain: &KinematicChain, rng: &mut R) -> JointConfig {
    let mut q = JointConfig::zeros();
    for (v, &(lo, hi)) in q.0.iter_mut().zip(chain.limits()) {
        *v = rng.random_range(lo..hi);
    }
    q
}

/// Tries `restarts` randomly seeded offline solves; returns the first
/// solution found. Deterministic in `seed`.
pub fn ik_find(
    chain: &KinematicChain,
    target: &Pose6,
    seed: u64,
    restarts: usize,
    params: &IkParams,
) -> Option<JointConfig> {
    let base = chain.base().translation.vector;
    if (target.p - base).norm() > chain.reach() {
        return None;
    }
    let offline = params.offline();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..restarts.max(1)).find_map(|_| {
        let q0 = random_config(chain, &mut rng);
        ik_solve(chain, target, &q0, None, &offline).ok().map(|s| s.q)
    })
}

/// True iff any of `restarts` random-seeded solves in empty space succeeds.
pub fn ik_reachable(
    chain: &KinematicChain,
    target: &Pose6,
    seed: u64,
    restarts: usize,
    params: &IkParams,
) -> bool {
    ik_find(chain, target, seed, restarts, params).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PoseDelta;
    use crate::world::GridParams;
    use nalgebra::Vector6;

    fn home() -> JointConfig {
        JointConfig::from_slice(&[0.3, 0.5, -0.2, -1.2, 0.1, 0.8, 0.2])
    }

    #[test]
    fn fixed_point_returns_q_prev_without_iterating() {
        let chain = KinematicChain::default_7r();
        let q = home();
        let target = chain.camera_pose(&q);
        let sol = ik_solve(&chain, &target, &q, None, &IkParams::default()).unwrap();
        assert_eq!(sol.q, q);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn small_displacement_is_tracked() {
        let chain = KinematicChain::default_7r();
        let params = IkParams::default();
        let q = home();
        let target = chain
            .camera_pose(&q)
            .compose(&PoseDelta(Vector6::new(0.001, 0.0, 0.0, 0.0, 0.0, 0.0)));
        let sol = ik_solve(&chain, &target, &q, None, &params).unwrap();
        let fk = chain.forward_kinematics(&sol.q);
        let e = pose_error(&fk, &target);
        assert!(e.fixed_rows::<3>(0).norm() <= params.position_tolerance);
        assert!(e.fixed_rows::<3>(3).norm() <= params.orientation_tolerance);
        assert!(sol.q.max_abs_diff(&q) < 0.05);
    }

    #[test]
    fn beyond_reach_fails() {
        let chain = KinematicChain::default_7r();
        let target = Pose6::new(Vec3::new(5.0, 5.0, 5.0), Vec3::zeros());
        let r = ik_solve(&chain, &target, &home(), None, &IkParams::default());
        assert_eq!(r.unwrap_err().reason, IkFailureReason::Unreachable);
        assert!(!ik_reachable(&chain, &target, 1, 8, &IkParams::default()));
    }

    #[test]
    fn reachable_probe_is_deterministic_and_sound() {
        let chain = KinematicChain::default_7r();
        let params = IkParams::default();
        let target = chain.camera_pose(&home());
        let a = ik_find(&chain, &target, 42, 8, &params);
        let b = ik_find(&chain, &target, 42, 8, &params);
        assert_eq!(a, b);
        let q = a.expect("mid-workspace pose is reachable");
        let fk = chain.forward_kinematics(&q);
        assert!(pose_error(&fk, &target).fixed_rows::<3>(0).norm() <= params.position_tolerance);
        assert!(!chain.self_collision(&q));
    }

    #[test]
    fn speed_cap_blocks_large_jumps() {
        let chain = KinematicChain::default_7r();
        let params = IkParams::default();
        let q = home();
        let mut far = q;
        far.0[0] += 1.0;
        let target = chain.camera_pose(&far);
        assert!(ik_solve(&chain, &target, &q, None, &params).is_err());
    }

    /// Home configuration with one occupied voxel next to the elbow capsule.
    fn elbow_obstacle(chain: &KinematicChain) -> OccupancyGrid {
        let fk = chain.forward_kinematics(&home());
        let caps = chain.world_capsules(&fk);
        let elbow = caps.iter().find(|(l, _)| *l == 4).unwrap().1;
        let mut grid = OccupancyGrid::empty(GridParams::default_workspace()).unwrap();
        let side = (elbow.b - elbow.a).cross(&Vec3::z()).normalize();
        let p = elbow.a + side * 0.09;
        grid.set_occupied(grid.params().cell_of(&p).unwrap());
        grid
    }

    #[test]
    fn clearance_blocked_by_speed_cap_is_reported() {
        let chain = KinematicChain::default_7r();
        let q = home();
        let grid = elbow_obstacle(&chain);
        let target = chain.camera_pose(&q);
        let r = ik_solve(&chain, &target, &q, Some(&grid), &IkParams::default());
        assert_eq!(r.unwrap_err().reason, IkFailureReason::Clearance);
    }

    #[test]
    fn clearance_pushes_body_away() {
        let chain = KinematicChain::default_7r();
        // The self-motion needed exceeds one tick's default speed cap.
        let params = IkParams {
            speed_cap: 1.0,
            ..IkParams::default()
        };
        let q = home();
        let grid = elbow_obstacle(&chain);
        let target = chain.camera_pose(&q);
        match ik_solve(&chain, &target, &q, Some(&grid), &params) {
            Ok(sol) => {
                check_solution(&chain, &target, &sol.q, &q, Some(&grid), &params).unwrap();
            }
            Err(f) => panic!("clearance should be recoverable in the null space: {f:?}"),
        }
    }
}
