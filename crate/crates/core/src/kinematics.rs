//! Planar serial-chain kinematics for the 4-link arms.
//!
//! Every arm lives in the horizontal plane of the glovebox. Links are capsules:
//! a segment between consecutive joint origins, swept by `link_radius`.

use nalgebra::{Matrix2x4, Vector2};

use crate::error::{Error, Result};

pub const NUM_LINKS: usize = 4;

/// Perpendicular of a planar vector (rotation by +90 degrees).
#[inline]
pub fn perp(v: Vector2<f64>) -> Vector2<f64> {
    Vector2::new(-v.y, v.x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarArm {
    pub base_position: Vector2<f64>,
    pub link_lengths: [f64; NUM_LINKS],
    pub link_radius: f64,
    pub joint_angles: [f64; NUM_LINKS],
}

impl PlanarArm {
    pub fn new(
        base_position: Vector2<f64>,
        link_lengths: [f64; NUM_LINKS],
        link_radius: f64,
        joint_angles: [f64; NUM_LINKS],
    ) -> Result<Self> {
        let arm = PlanarArm {
            base_position,
            link_lengths,
            link_radius,
            joint_angles,
        };
        arm.validate()?;
        Ok(arm)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_position.x.is_finite() && self.base_position.y.is_finite()) {
            return Err(Error::invalid("arm base position must be finite"));
        }
        if let Some(l) = self.link_lengths.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::invalid(format!("link length {l} must be > 0")));
        }
        if !(self.link_radius.is_finite() && self.link_radius > 0.0) {
            return Err(Error::invalid(format!(
                "link radius {} must be > 0",
                self.link_radius
            )));
        }
        if let Some(q) = self.joint_angles.iter().find(|q| !q.is_finite()) {
            return Err(Error::invalid(format!("joint angle {q} is not finite")));
        }
        Ok(())
    }

    pub fn with_joint_angles(&self, joint_angles: [f64; NUM_LINKS]) -> Self {
        PlanarArm {
            joint_angles,
            ..*self
        }
    }

    pub fn total_reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkFrame {
    pub origin: Vector2<f64>,
    pub cumulative_angle: f64,
    pub link_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Vector2<f64>,
    pub b: Vector2<f64>,
}

impl Segment {
    pub fn new(a: Vector2<f64>, b: Vector2<f64>) -> Self {
        Segment { a, b }
    }

    pub fn length(&self) -> f64 {
        (self.b - self.a).norm()
    }

    pub fn point_at(&self, t: f64) -> Vector2<f64> {
        self.a + (self.b - self.a) * t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmPose {
    pub frames: [LinkFrame; NUM_LINKS],
    pub end_effector: Vector2<f64>,
}

impl ArmPose {
    /// Origin of joint `j`, with `j == NUM_LINKS` naming the end effector.
    pub fn joint_origin(&self, j: usize) -> Vector2<f64> {
        if j < NUM_LINKS {
            self.frames[j].origin
        } else {
            self.end_effector
        }
    }

    pub fn link_segment(&self, link_index: usize) -> Segment {
        Segment::new(self.joint_origin(link_index), self.joint_origin(link_index + 1))
    }
}

pub fn forward_kinematics(arm: &PlanarArm) -> Result<ArmPose> {
    arm.validate()?;
    let mut origin = arm.base_position;
    let mut angle = 0.0;
    let mut frames = [LinkFrame {
        origin,
        cumulative_angle: 0.0,
        link_index: 0,
    }; NUM_LINKS];
    for (k, frame) in frames.iter_mut().enumerate() {
        angle += arm.joint_angles[k];
        *frame = LinkFrame {
            origin,
            cumulative_angle: angle,
            link_index: k,
        };
        origin += Vector2::new(angle.cos(), angle.sin()) * arm.link_lengths[k];
    }
    Ok(ArmPose {
        frames,
        end_effector: origin,
    })
}

fn check_link_point(link_index: usize, point_param: f64) -> Result<()> {
    if link_index >= NUM_LINKS {
        return Err(Error::invalid(format!(
            "link index {link_index} out of range 0..{}",
            NUM_LINKS - 1
        )));
    }
    if !(0.0..=1.0).contains(&point_param) {
        return Err(Error::invalid(format!(
            "point parameter {point_param} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Translational Jacobian of a point located `point_param` along link `link_index`.
pub fn point_jacobian(arm: &PlanarArm, link_index: usize, point_param: f64) -> Result<Matrix2x4<f64>> {
    check_link_point(link_index, point_param)?;
    let pose = forward_kinematics(arm)?;
    Ok(pose_point_jacobian(&pose, link_index, point_param))
}

/// Same as [`point_jacobian`] for an already evaluated pose. Inputs are assumed valid.
pub fn pose_point_jacobian(pose: &ArmPose, link_index: usize, point_param: f64) -> Matrix2x4<f64> {
    let point = pose.link_segment(link_index).point_at(point_param);
    let mut jac = Matrix2x4::zeros();
    for j in 0..=link_index {
        jac.set_column(j, &perp(point - pose.frames[j].origin));
    }
    jac
}

/// End-effector translational Jacobian.
pub fn end_effector_jacobian(arm: &PlanarArm) -> Result<Matrix2x4<f64>> {
    point_jacobian(arm, NUM_LINKS - 1, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapResult {
    pub gap: f64,
    /// Closest point on the link axis.
    pub closest_point: Vector2<f64>,
    /// Direction of the force the environment point applies to the link.
    pub normal_angle: f64,
    /// Parameter of `closest_point` along the segment, in [0, 1].
    pub param: f64,
}

/// Signed distance between a point and a capsule. Negative means penetration.
pub fn signed_gap(point: Vector2<f64>, link_segment: &Segment, link_radius: f64) -> Result<GapResult> {
    if !(point.x.is_finite() && point.y.is_finite()) {
        return Err(Error::invalid("gap query point must be finite"));
    }
    if !(link_radius.is_finite() && link_radius >= 0.0) {
        return Err(Error::invalid(format!("link radius {link_radius} must be >= 0")));
    }
    let axis = link_segment.b - link_segment.a;
    let len2 = axis.norm_squared();
    if !(len2.is_finite() && len2 > 0.0) {
        return Err(Error::invalid("segment must have positive length"));
    }
    let t = ((point - link_segment.a).dot(&axis) / len2).clamp(0.0, 1.0);
    let closest = link_segment.point_at(t);
    let offset = closest - point;
    let dist = offset.norm();
    // On the axis the normal is ambiguous; fall back to the left-hand link normal.
    let normal_angle = if dist > 0.0 {
        offset.y.atan2(offset.x)
    } else {
        let n = perp(axis);
        n.y.atan2(n.x)
    };
    Ok(GapResult {
        gap: dist - link_radius,
        closest_point: closest,
        normal_angle,
        param: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn arm(q: [f64; 4]) -> PlanarArm {
        PlanarArm::new(Vector2::new(0.2, 0.0), [0.3, 0.3, 0.25, 0.15], 0.04, q).unwrap()
    }

    #[test]
    fn straight_chain_reaches_sum_of_lengths() {
        let pose = forward_kinematics(&arm([0.0; 4])).unwrap();
        assert_relative_eq!(pose.end_effector, Vector2::new(1.2, 0.0), epsilon = 1e-15);
        assert_relative_eq!(pose.frames[2].origin, Vector2::new(0.8, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn rotated_straight_chain() {
        let pose = forward_kinematics(&arm([FRAC_PI_2, 0.0, 0.0, 0.0])).unwrap();
        assert_relative_eq!(pose.end_effector, Vector2::new(0.2, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn end_effector_matches_high_precision_value() {
        // 40-digit evaluation of sum l_k (cos, sin)(cumulative angle).
        let pose = forward_kinematics(&arm([0.1, 0.2, -0.3, 0.4])).unwrap();
        assert_relative_eq!(pose.end_effector.x, 1.173_261_345_421_522_3, epsilon = 1e-14);
        assert_relative_eq!(pose.end_effector.y, 0.177_018_838_338_747_9, epsilon = 1e-14);
    }

    #[test]
    fn frames_accumulate_angles() {
        let q = [0.1, 0.2, -0.3, 0.4];
        let pose = forward_kinematics(&arm(q)).unwrap();
        let mut acc = 0.0;
        for (k, f) in pose.frames.iter().enumerate() {
            acc += q[k];
            assert_eq!(f.link_index, k);
            assert_relative_eq!(f.cumulative_angle, acc);
        }
    }

    #[test]
    fn rejects_non_finite_angles_and_bad_links() {
        let mut a = arm([0.0; 4]);
        a.joint_angles[2] = f64::NAN;
        assert!(matches!(forward_kinematics(&a), Err(Error::InvalidInput(_))));
        assert!(PlanarArm::new(Vector2::zeros(), [0.3, 0.0, 0.2, 0.1], 0.04, [0.0; 4]).is_err());
        assert!(PlanarArm::new(Vector2::zeros(), [0.3, 0.3, 0.2, 0.1], 0.0, [0.0; 4]).is_err());
    }

    #[test]
    fn straight_chain_end_effector_jacobian() {
        let j = end_effector_jacobian(&arm([0.0; 4])).unwrap();
        assert_relative_eq!(j[(0, 0)], 0.0);
        assert_relative_eq!(j[(1, 0)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(j[(1, 3)], 0.15, epsilon = 1e-15);
    }

    #[test]
    fn distal_columns_are_zero() {
        let j = point_jacobian(&arm([0.0; 4]), 1, 0.5).unwrap();
        assert_eq!(j.column(2).norm(), 0.0);
        assert_eq!(j.column(3).norm(), 0.0);
        assert_relative_eq!(j[(1, 0)], 0.45, epsilon = 1e-15);
        assert_relative_eq!(j[(1, 1)], 0.15, epsilon = 1e-15);
    }

    #[test]
    fn point_jacobian_rejects_bad_indices() {
        assert!(point_jacobian(&arm([0.0; 4]), 4, 0.5).is_err());
        assert!(point_jacobian(&arm([0.0; 4]), 1, 1.5).is_err());
        assert!(point_jacobian(&arm([0.0; 4]), 1, -0.1).is_err());
    }

    fn fd_point_jacobian(a: &PlanarArm, link: usize, t: f64) -> Matrix2x4<f64> {
        let h = 1e-6;
        let mut out = Matrix2x4::zeros();
        for j in 0..4 {
            let mut qp = a.joint_angles;
            let mut qm = a.joint_angles;
            qp[j] += h;
            qm[j] -= h;
            let pp = forward_kinematics(&a.with_joint_angles(qp)).unwrap().link_segment(link).point_at(t);
            let pm = forward_kinematics(&a.with_joint_angles(qm)).unwrap().link_segment(link).point_at(t);
            out.set_column(j, &((pp - pm) / (2.0 * h)));
        }
        out
    }

    #[test]
    fn gap_on_axis_is_minus_radius() {
        let seg = Segment::new(Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0));
        let g = signed_gap(Vector2::new(0.4, 0.0), &seg, 0.04).unwrap();
        assert_relative_eq!(g.gap, -0.04);
    }

    #[test]
    fn gap_at_perpendicular_distance() {
        let seg = Segment::new(Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0));
        let g = signed_gap(Vector2::new(0.5, 0.10), &seg, 0.04).unwrap();
        assert_relative_eq!(g.gap, 0.06, epsilon = 1e-15);
        // Force from a point above pushes the link down.
        assert_relative_eq!(g.normal_angle, -FRAC_PI_2);
        assert_relative_eq!(g.closest_point, Vector2::new(0.5, 0.0));
    }

    #[test]
    fn gap_rejects_zero_length_segment() {
        let p = Vector2::new(0.3, 0.3);
        assert!(signed_gap(Vector2::zeros(), &Segment::new(p, p), 0.04).is_err());
    }

    #[test]
    fn gap_matches_dense_sampling() {
        let seg = Segment::new(Vector2::new(-0.13, 0.42), Vector2::new(0.31, 0.77));
        let radius = 0.04;
        for point in [
            Vector2::new(0.05, 0.35),
            Vector2::new(0.5, 0.9),
            Vector2::new(-0.3, 0.3),
            Vector2::new(0.1, 0.6),
        ] {
            let n = 1_000_000;
            let best = (0..=n)
                .map(|i| (seg.point_at(i as f64 / n as f64) - point).norm())
                .fold(f64::INFINITY, f64::min);
            let g = signed_gap(point, &seg, radius).unwrap();
            assert!((g.gap - (best - radius)).abs() <= 1e-6, "{} vs {}", g.gap, best - radius);
        }
    }

    proptest! {
        #[test]
        fn base_translation_is_equivariant(
            q in prop::array::uniform4(-3.0f64..3.0),
            dx in -1.0f64..1.0,
            dy in -1.0f64..1.0,
        ) {
            let a = arm(q);
            let mut b = a;
            b.base_position += Vector2::new(dx, dy);
            let pa = forward_kinematics(&a).unwrap();
            let pb = forward_kinematics(&b).unwrap();
            for k in 0..4 {
                let d = pb.frames[k].origin - pa.frames[k].origin;
                prop_assert!((d - Vector2::new(dx, dy)).norm() < 1e-12);
            }
            prop_assert!((pb.end_effector - pa.end_effector - Vector2::new(dx, dy)).norm() < 1e-12);
        }

        #[test]
        fn jacobian_matches_finite_differences(
            q in prop::array::uniform4(-3.0f64..3.0),
            link in 0usize..4,
            t in 0.0f64..=1.0,
        ) {
            let a = arm(q);
            let jac = point_jacobian(&a, link, t).unwrap();
            let fd = fd_point_jacobian(&a, link, t);
            for j in 0..4 {
                let err = (jac.column(j) - fd.column(j)).norm();
                let scale = jac.column(j).norm().max(1e-3);
                prop_assert!(err / scale <= 1e-5, "column {} err {}", j, err / scale);
            }
        }

        #[test]
        fn gap_is_lipschitz(
            px in -1.0f64..1.0, py in -1.0f64..1.0,
            dx in -0.01f64..0.01, dy in -0.01f64..0.01,
        ) {
            let seg = Segment::new(Vector2::new(-0.2, 0.1), Vector2::new(0.4, 0.5));
            let p = Vector2::new(px, py);
            let d = Vector2::new(dx, dy);
            let g0 = signed_gap(p, &seg, 0.04).unwrap().gap;
            let g1 = signed_gap(p + d, &seg, 0.04).unwrap().gap;
            prop_assert!((g1 - g0).abs() <= d.norm() + 1e-12);
        }
    }
}
