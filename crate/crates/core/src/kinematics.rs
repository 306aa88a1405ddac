//! Serial 7-R chain: forward kinematics, the camera-frame geometric Jacobian,
//! and capsule-based self-collision.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, Translation3, Unit};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Pose6, Transform, Vec3, WorldCapsule};

pub const DOF: usize = 7;
pub const CHAIN_SCHEMA_VERSION: u32 = 1;

pub type JointVector = SVector<f64, DOF>;
pub type Jacobian = SMatrix<f64, 6, DOF>;

/// Rigid transform as stored in chain files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidSpec {
    pub translation: [f64; 3],
    #[serde(default = "identity_rows")]
    pub rotation: [[f64; 3]; 3],
}

fn identity_rows() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

impl RigidSpec {
    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            rotation: identity_rows(),
        }
    }

    fn to_transform(&self, what: &str) -> Result<Transform> {
        let r = &self.rotation;
        let m = Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        );
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        if !(ortho < 1e-9) || m.determinant() < 0.0 {
            return Err(Error::InvalidChain(format!(
                "{what}.rotation is not a proper rotation (orthonormality error {ortho:e})"
            )));
        }
        Ok(Transform::from_parts(
            Translation3::new(self.translation[0], self.translation[1], self.translation[2]),
            Rotation3::from_matrix_unchecked(m),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    /// Rotation axis in the joint frame.
    pub axis: [f64; 3],
    /// Fixed transform from the previous link frame to this joint.
    pub origin: RigidSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsuleSpec {
    /// 0 is the fixed base, `i` is the link driven by joint `i`.
    pub link: usize,
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

/// On-disk chain description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    /// World placement of the robot base.
    pub base: RigidSpec,
    pub joints: Vec<JointSpec>,
    pub limits: Vec<[f64; 2]>,
    pub capsules: Vec<CapsuleSpec>,
    pub camera_offset: RigidSpec,
}

impl ChainSpec {
    /// Generic anthropomorphic arm: alternating z/y axes, about 1.35 m of
    /// reach from the base, all joints limited to +-2.9 rad.
    pub fn default_7r() -> Self {
        let z = [0.0, 0.0, 1.0];
        let y = [0.0, 1.0, 0.0];
        // Shoulder column, upper arm (two joints) and forearm (two joints) as on
        // common 7-R arms, then a short wrist.
        let offsets = [0.16, 0.2, 0.2, 0.22, 0.2, 0.2, 0.12];
        let joints = offsets
            .iter()
            .enumerate()
            .map(|(i, &h)| JointSpec {
                axis: if i % 2 == 0 { z } else { y },
                origin: RigidSpec::translation([0.0, 0.0, h]),
            })
            .collect();
        // (link, start, end, radius); segments along the local z axis.
        let caps = [
            (0, 0.0, 0.16, 0.08),
            (1, 0.0, 0.2, 0.07),
            (2, 0.02, 0.2, 0.065),
            (3, 0.0, 0.22, 0.06),
            (4, 0.02, 0.2, 0.06),
            (5, 0.0, 0.2, 0.055),
            (6, 0.01, 0.12, 0.05),
            (7, 0.0, 0.06, 0.04),
        ];
        let capsules = caps
            .iter()
            .map(|&(link, a, b, radius)| CapsuleSpec {
                link,
                a: [0.0, 0.0, a],
                b: [0.0, 0.0, b],
                radius,
            })
            .collect();
        ChainSpec {
            schema_version: CHAIN_SCHEMA_VERSION,
            name: "generic-7r".into(),
            base: RigidSpec::translation([-1.0, 0.4, 0.9]),
            joints,
            limits: vec![[-2.9, 2.9]; DOF],
            capsules,
            camera_offset: RigidSpec::translation([0.0, 0.0, 0.06]),
        }
    }

    pub fn from_json_str(s: &str, path: &Path) -> Result<Self> {
        crate::config::parse_versioned(s, path, CHAIN_SCHEMA_VERSION)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s, path)
    }

    /// Short content hash of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("chain spec serializes");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone)]
struct Joint {
    axis: Unit<Vec3>,
    origin: Transform,
}

#[derive(Debug, Clone, Copy)]
struct LinkCapsule {
    link: usize,
    a: Vec3,
    b: Vec3,
    radius: f64,
}

/// Validated serial chain.
#[derive(Debug, Clone)]
pub struct KinematicChain {
    spec: ChainSpec,
    hash: String,
    base: Transform,
    joints: Vec<Joint>,
    limits: Vec<(f64, f64)>,
    capsules: Vec<LinkCapsule>,
    camera_offset: Transform,
    reach: f64,
}

/// Joint angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointConfig(pub JointVector);

impl JointConfig {
    pub fn zeros() -> Self {
        Self(JointVector::zeros())
    }

    pub fn from_slice(q: &[f64]) -> Self {
        Self(JointVector::from_column_slice(q))
    }

    pub fn max_abs_diff(&self, other: &JointConfig) -> f64 {
        (self.0 - other.0).amax()
    }
}

/// Result of forward kinematics.
#[derive(Debug, Clone)]
pub struct FkResult {
    /// Camera optical frame in world coordinates.
    pub camera: Transform,
    /// `frames[0]` is the base, `frames[i]` the frame after joint `i`.
    pub frames: Vec<Transform>,
}

impl FkResult {
    pub fn pose(&self) -> Pose6 {
        Pose6::from_transform(&self.camera)
    }
}

impl KinematicChain {
    pub fn new(spec: ChainSpec) -> Result<Self> {
        if spec.joints.len() != DOF {
            return Err(Error::InvalidChain(format!(
                "joints: expected {DOF} revolute joints, found {}",
                spec.joints.len()
            )));
        }
        if spec.limits.len() != DOF {
            return Err(Error::InvalidChain(format!(
                "limits: expected {DOF} entries, found {}",
                spec.limits.len()
            )));
        }
        let mut joints = Vec::with_capacity(DOF);
        for (i, j) in spec.joints.iter().enumerate() {
            let axis = Vec3::from(j.axis);
            if !(axis.norm() > 1e-9) {
                return Err(Error::InvalidChain(format!("joints[{i}].axis is zero")));
            }
            joints.push(Joint {
                axis: Unit::new_normalize(axis),
                origin: j.origin.to_transform(&format!("joints[{i}].origin"))?,
            });
        }
        let mut limits = Vec::with_capacity(DOF);
        for (i, l) in spec.limits.iter().enumerate() {
            if !(l[0] < l[1]) {
                return Err(Error::InvalidChain(format!(
                    "limits[{i}]: min {} must be below max {}",
                    l[0], l[1]
                )));
            }
            limits.push((l[0], l[1]));
        }
        let mut capsules = Vec::with_capacity(spec.capsules.len());
        for (i, c) in spec.capsules.iter().enumerate() {
            if !(c.radius > 0.0) {
                return Err(Error::InvalidChain(format!("capsules[{i}].radius must be > 0")));
            }
            if c.link > DOF {
                return Err(Error::InvalidChain(format!(
                    "capsules[{i}].link {} out of range 0..={DOF}",
                    c.link
                )));
            }
            capsules.push(LinkCapsule {
                link: c.link,
                a: Vec3::from(c.a),
                b: Vec3::from(c.b),
                radius: c.radius,
            });
        }
        let base = spec.base.to_transform("base")?;
        let camera_offset = spec.camera_offset.to_transform("camera_offset")?;
        let reach = joints
            .iter()
            .map(|j| j.origin.translation.vector.norm())
            .sum::<f64>()
            + camera_offset.translation.vector.norm();
        let hash = spec.hash();
        Ok(Self {
            spec,
            hash,
            base,
            joints,
            limits,
            capsules,
            camera_offset,
            reach,
        })
    }

    pub fn default_7r() -> Self {
        Self::new(ChainSpec::default_7r()).expect("default chain is valid")
    }

    pub fn spec(&self) -> &ChainSpec {
        &self.spec
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn base(&self) -> &Transform {
        &self.base
    }

    /// Upper bound on the camera's distance from the base origin.
    pub fn reach(&self) -> f64 {
        self.reach
    }

    pub fn limits(&self) -> &[(f64, f64)] {
        &self.limits
    }

    pub fn within_limits(&self, q: &JointConfig) -> bool {
        self.limits
            .iter()
            .zip(q.0.iter())
            .all(|(&(lo, hi), &v)| v >= lo && v <= hi)
    }

    pub fn clamp_to_limits(&self, q: &mut JointConfig) {
        for (v, &(lo, hi)) in q.0.iter_mut().zip(&self.limits) {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn forward_kinematics(&self, q: &JointConfig) -> FkResult {
        let mut frames = Vec::with_capacity(DOF + 1);
        let mut t = self.base;
        frames.push(t);
        for (j, &angle) in self.joints.iter().zip(q.0.iter()) {
            let rot = Rotation3::from_axis_angle(&j.axis, angle);
            t = t * j.origin * Transform::from_parts(Translation3::identity(), rot);
            frames.push(t);
        }
        FkResult {
            camera: t * self.camera_offset,
            frames,
        }
    }

    pub fn camera_pose(&self, q: &JointConfig) -> Pose6 {
        self.forward_kinematics(q).pose()
    }

    /// Geometric Jacobian at the camera origin. Rows 0..3 map joint rates to
    /// linear velocity, rows 3..6 to angular velocity, both in the world frame.
    pub fn jacobian(&self, q: &JointConfig) -> Jacobian {
        let fk = self.forward_kinematics(q);
        self.jacobian_from_fk(&fk)
    }

    pub fn jacobian_from_fk(&self, fk: &FkResult) -> Jacobian {
        let p = fk.camera.translation.vector;
        let mut jac = Jacobian::zeros();
        for (i, joint) in self.joints.iter().enumerate() {
            let frame = &fk.frames[i + 1];
            let z = frame.rotation * joint.axis.into_inner();
            let o = frame.translation.vector;
            let lin = z.cross(&(p - o));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
        }
        jac
    }

    /// Linear-velocity Jacobian of a world point rigidly attached to `link`.
    pub fn point_jacobian(&self, fk: &FkResult, link: usize, point: &Vec3) -> SMatrix<f64, 3, DOF> {
        let mut jac = SMatrix::<f64, 3, DOF>::zeros();
        for (i, joint) in self.joints.iter().enumerate().take(link) {
            let frame = &fk.frames[i + 1];
            let z = frame.rotation * joint.axis.into_inner();
            let lin = z.cross(&(point - frame.translation.vector));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        }
        jac
    }

    /// Link capsules placed in the world, paired with their link index.
    pub fn world_capsules(&self, fk: &FkResult) -> Vec<(usize, WorldCapsule)> {
        self.capsules
            .iter()
            .map(|c| {
                let f = &fk.frames[c.link];
                (
                    c.link,
                    WorldCapsule {
                        a: f.transform_point(&c.a.into()).coords,
                        b: f.transform_point(&c.b.into()).coords,
                        radius: c.radius,
                    },
                )
            })
            .collect()
    }

    pub fn self_collision(&self, q: &JointConfig) -> bool {
        let fk = self.forward_kinematics(q);
        self.self_collision_fk(&fk)
    }

    /// Smallest surface distance between capsules on non-adjacent links.
    pub fn self_clearance(&self, fk: &FkResult) -> f64 {
        let caps = self.world_capsules(fk);
        let mut best = f64::INFINITY;
        for (i, (li, ci)) in caps.iter().enumerate() {
            for (lj, cj) in &caps[i + 1..] {
                if li.abs_diff(*lj) > 1 {
                    best = best.min(ci.distance_to_capsule(cj));
                }
            }
        }
        best
    }

    /// True iff two capsules on non-adjacent links overlap.
    pub fn self_collision_fk(&self, fk: &FkResult) -> bool {
        let caps = self.world_capsules(fk);
        for (i, (li, ci)) in caps.iter().enumerate() {
            for (lj, cj) in &caps[i + 1..] {
                if li.abs_diff(*lj) <= 1 {
                    continue;
                }
                if ci.distance_to_capsule(cj) < 0.0 {
                    return true;
                }
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_distance;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_q(rng: &mut ChaCha8Rng, chain: &KinematicChain) -> JointConfig {
        let mut q = JointConfig::zeros();
        for (v, &(lo, hi)) in q.0.iter_mut().zip(chain.limits()) {
            *v = rng.random_range(lo..hi);
        }
        q
    }

    /// Independent 4x4 homogeneous product with Rodrigues rotations.
    fn homogeneous_tip(spec: &ChainSpec, q: &JointConfig) -> Matrix4<f64> {
        fn rigid(r: &RigidSpec) -> Matrix4<f64> {
            let mut m = Matrix4::identity();
            for i in 0..3 {
                for j in 0..3 {
                    m[(i, j)] = r.rotation[i][j];
                }
                m[(i, 3)] = r.translation[i];
            }
            m
        }
        fn rodrigues(axis: [f64; 3], angle: f64) -> Matrix4<f64> {
            let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
            let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
            let (s, c) = angle.sin_cos();
            let t = 1.0 - c;
            Matrix4::new(
                t * x * x + c, t * x * y - s * z, t * x * z + s * y, 0.0,
                t * x * y + s * z, t * y * y + c, t * y * z - s * x, 0.0,
                t * x * z - s * y, t * y * z + s * x, t * z * z + c, 0.0,
                0.0, 0.0, 0.0, 1.0,
            )
        }
        let mut m = rigid(&spec.base);
        for (j, &a) in spec.joints.iter().zip(q.0.iter()) {
            m = m * rigid(&j.origin) * rodrigues(j.axis, a);
        }
        m * rigid(&spec.camera_offset)
    }

    #[test]
    fn zero_config_is_fixed_transform_composition() {
        let chain = KinematicChain::default_7r();
        let fk = chain.forward_kinematics(&JointConfig::zeros());
        // Base (-1, 0.4, 0.9) plus every offset along z.
        let expected = Vec3::new(-1.0, 0.4, 0.9 + 0.16 + 0.2 + 0.2 + 0.22 + 0.2 + 0.2 + 0.12 + 0.06);
        assert_abs_diff_eq!(fk.camera.translation.vector, expected, epsilon = 1e-12);
        assert!(rotation_distance(fk.camera.rotation.matrix(), &Matrix3::identity()) < 1e-12);
    }

    #[test]
    fn base_joint_half_turn_negates_planar_offset() {
        let chain = KinematicChain::default_7r();
        let mut q0 = JointConfig::zeros();
        q0.0[1] = 0.7;
        q0.0[3] = -0.4;
        let mut q1 = q0;
        q1.0[0] = PI;
        let base = chain.base().translation.vector;
        let p0 = chain.camera_pose(&q0).p - base;
        let p1 = chain.camera_pose(&q1).p - base;
        assert_abs_diff_eq!(p1.x, -p0.x, epsilon = 1e-12);
        assert_abs_diff_eq!(p1.y, -p0.y, epsilon = 1e-12);
        assert_abs_diff_eq!(p1.z, p0.z, epsilon = 1e-12);
    }

    #[test]
    fn fk_matches_homogeneous_oracle() {
        let chain = KinematicChain::default_7r();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let q = random_q(&mut rng, &chain);
            let fk = chain.forward_kinematics(&q);
            let m = homogeneous_tip(chain.spec(), &q);
            for i in 0..3 {
                assert_abs_diff_eq!(fk.camera.translation.vector[i], m[(i, 3)], epsilon = 1e-10);
            }
            // Frame-chain associativity: last frame times camera offset.
            let composed = fk.frames[DOF] * chain.camera_offset;
            assert!((composed.to_homogeneous() - fk.camera.to_homogeneous()).amax() < 1e-10);
        }
    }

    #[test]
    fn single_joint_column_is_axis_cross_lever() {
        let chain = KinematicChain::default_7r();
        let q = JointConfig::zeros();
        let jac = chain.jacobian(&q);
        // Joint 2 (about y) sits at z = 0.9 + 0.36; camera straight above.
        let lever = Vec3::new(0.0, 0.0, 0.2 + 0.22 + 0.2 + 0.2 + 0.12 + 0.06);
        let expected = Vec3::y().cross(&lever);
        assert_abs_diff_eq!(jac.fixed_view::<3, 1>(0, 1).into_owned(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(jac.fixed_view::<3, 1>(3, 1).into_owned(), Vec3::y(), epsilon = 1e-12);
        assert_eq!(jac, chain.jacobian(&q));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let chain = KinematicChain::default_7r();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..100 {
            let q = random_q(&mut rng, &chain);
            let jac = chain.jacobian(&q);
            for i in 0..DOF {
                let mut qp = q;
                let mut qm = q;
                qp.0[i] += h;
                qm.0[i] -= h;
                let fp = chain.forward_kinematics(&qp).camera;
                let fm = chain.forward_kinematics(&qm).camera;
                let lin = (fp.translation.vector - fm.translation.vector) / (2.0 * h);
                let ang = crate::geometry::rotation_log(
                    &(fp.rotation.matrix() * fm.rotation.matrix().transpose()),
                ) / (2.0 * h);
                for k in 0..3 {
                    assert!((jac[(k, i)] - lin[k]).abs() <= 1e-5);
                    assert!((jac[(k + 3, i)] - ang[k]).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn default_zero_config_has_no_self_collision() {
        let chain = KinematicChain::default_7r();
        let fk = chain.forward_kinematics(&JointConfig::zeros());
        let caps = chain.world_capsules(&fk);
        let min_gap = caps
            .iter()
            .enumerate()
            .flat_map(|(i, (li, ci))| {
                caps[i + 1..]
                    .iter()
                    .filter(move |(lj, _)| li.abs_diff(*lj) > 1)
                    .map(move |(_, cj)| ci.distance_to_capsule(cj))
            })
            .fold(f64::INFINITY, f64::min);
        assert!(min_gap > 0.0, "min gap {min_gap}");
        assert!(!chain.self_collision(&JointConfig::zeros()));
    }

    #[test]
    fn coincident_capsules_collide_and_adjacent_are_exempt() {
        let mut spec = ChainSpec::default_7r();
        spec.capsules = vec![
            CapsuleSpec { link: 0, a: [0.0, 0.0, 0.0], b: [0.0, 0.0, 0.2], radius: 0.05 },
            CapsuleSpec { link: 1, a: [0.0, 0.0, -0.2], b: [0.0, 0.0, 0.0], radius: 0.05 },
        ];
        let chain = KinematicChain::new(spec.clone()).unwrap();
        assert!(!chain.self_collision(&JointConfig::zeros()));
        // Same geometry on non-adjacent links: link 2 folded back onto the base.
        spec.capsules[1] = CapsuleSpec {
            link: 2,
            a: [0.0, 0.0, -0.34],
            b: [0.0, 0.0, -0.14],
            radius: 0.05,
        };
        let chain = KinematicChain::new(spec).unwrap();
        assert!(chain.self_collision(&JointConfig::zeros()));
    }

    #[test]
    fn validation_rejects_bad_chains() {
        let mut s = ChainSpec::default_7r();
        s.joints.pop();
        assert!(KinematicChain::new(s).is_err());
        let mut s = ChainSpec::default_7r();
        s.limits[3] = [1.0, -1.0];
        assert!(KinematicChain::new(s).is_err());
        let mut s = ChainSpec::default_7r();
        s.capsules[0].radius = 0.0;
        assert!(KinematicChain::new(s).is_err());
        let mut s = ChainSpec::default_7r();
        s.camera_offset.rotation[0][0] = 1.01;
        assert!(KinematicChain::new(s).is_err());
    }

    #[test]
    fn schema_errors_name_the_field() {
        let err = ChainSpec::from_json_str(r#"{"schema_version": 1}"#, Path::new("c.json"))
            .unwrap_err();
        assert!(err.to_string().contains("base"), "{err}");
        let json = serde_json::to_string(&ChainSpec::default_7r()).unwrap();
        let back = ChainSpec::from_json_str(&json, Path::new("c.json")).unwrap();
        assert_eq!(back.hash(), ChainSpec::default_7r().hash());
    }
}
