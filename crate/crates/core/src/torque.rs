//! Prioritized joint torques: support forces first, object wrench in the
//! remaining null space.

use nalgebra::{DMatrix, DVector, SVector, Vector2, Vector3};

use crate::contact::ContactState;
use crate::error::{Error, Result};
use crate::kinematics::{end_effector_jacobian, forward_kinematics, pose_point_jacobian, PlanarArm, Segment, NUM_LINKS};
use crate::statics::{distribute_object_wrench, GraspMap};

pub const NUM_JOINTS: usize = 2 * NUM_LINKS;

/// Relative singular-value cutoff used by the torque computations.
pub const PINV_TOLERANCE: f64 = 1e-10;

/// Moore-Penrose pseudo-inverse through the SVD. Singular values below
/// `tol * sigma_max` are treated as zero.
pub fn pseudo_inverse(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("pseudo-inverse of a matrix with non-finite entries"));
    }
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(DMatrix::zeros(cols, rows));
    }
    let svd = crate::linalg::svd(m);
    let sigma_max = svd.singular_values.max();
    let cutoff = tol * sigma_max;
    let mut out = DMatrix::zeros(cols, rows);
    for (k, &sigma) in svd.singular_values.iter().enumerate() {
        if sigma > cutoff && sigma > 0.0 {
            out += svd.v.column(k) * svd.u.column(k).transpose() / sigma;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TorqueCommand {
    pub tau: SVector<f64, NUM_JOINTS>,
    pub tau_s: SVector<f64, NUM_JOINTS>,
    pub tau_h_projected: SVector<f64, NUM_JOINTS>,
    /// Planar support forces, one per contact, in the order given.
    pub realized_support_forces: Vec<Vector3<f64>>,
    /// Stacked support Jacobian (2 rows per contact).
    pub support_jacobian: DMatrix<f64>,
    pub nullspace_projector: DMatrix<f64>,
}

/// Joint torques for the object wrench, `blockdiag(J1^T, J2^T) W_C^+ h_o`.
///
/// Only the x and y force rows of each contact wrench act through the planar
/// Jacobians; the vertical component is carried by the glovebox plane.
pub fn object_wrench_torques(
    arms: &[PlanarArm; 2],
    grasp: &GraspMap,
    h_o: &SVector<f64, 6>,
) -> Result<SVector<f64, NUM_JOINTS>> {
    let h_c = distribute_object_wrench(grasp, h_o)?;
    let mut tau = SVector::<f64, NUM_JOINTS>::zeros();
    for (i, arm) in arms.iter().enumerate() {
        let jac = end_effector_jacobian(arm)?;
        let force = Vector2::new(h_c[6 * i], h_c[6 * i + 1]);
        let t = jac.transpose() * force;
        tau.fixed_rows_mut::<NUM_LINKS>(NUM_LINKS * i).copy_from(&t);
    }
    Ok(tau)
}

fn support_point_param(arm: &PlanarArm, contact: &ContactState) -> Result<(usize, f64)> {
    let pose = forward_kinematics(arm)?;
    let link = contact.link_index;
    if link >= NUM_LINKS {
        return Err(Error::invalid(format!("contact link index {link} out of range")));
    }
    let seg: Segment = pose.link_segment(link);
    let axis = seg.b - seg.a;
    let t = (contact.contact_point - seg.a).dot(&axis) / axis.norm_squared();
    let off_axis = (seg.point_at(t.clamp(0.0, 1.0)) - contact.contact_point).norm();
    let tol = 1e-9 + arm.link_radius;
    if !(-1e-9..=1.0 + 1e-9).contains(&t) || off_axis > tol + 1e-9 {
        return Err(Error::invalid(format!(
            "contact point ({:.6}, {:.6}) is not on link {link} of arm {}",
            contact.contact_point.x, contact.contact_point.y, contact.arm_index
        )));
    }
    Ok((link, t.clamp(0.0, 1.0)))
}

/// Stacked support Jacobian: two rows per contact, eight joint columns.
pub fn support_jacobian(arms: &[PlanarArm; 2], contacts: &[ContactState]) -> Result<DMatrix<f64>> {
    let mut js = DMatrix::zeros(2 * contacts.len(), NUM_JOINTS);
    for (k, c) in contacts.iter().enumerate() {
        if c.arm_index > 1 {
            return Err(Error::invalid(format!("arm index {} out of range", c.arm_index)));
        }
        let arm = &arms[c.arm_index];
        let (link, t) = support_point_param(arm, c)?;
        let pose = forward_kinematics(arm)?;
        let jac = pose_point_jacobian(&pose, link, t);
        js.view_mut((2 * k, NUM_LINKS * c.arm_index), (2, NUM_LINKS)).copy_from(&jac);
    }
    Ok(js)
}

/// `tau_s = J_s^T f_s` for the planar support forces of `contacts`.
pub fn support_torques(
    arms: &[PlanarArm; 2],
    contacts: &[ContactState],
    support_force_scale: f64,
) -> Result<SVector<f64, NUM_JOINTS>> {
    let js = support_jacobian(arms, contacts)?;
    let fs = stacked_support_forces(contacts, support_force_scale)?;
    let tau = js.transpose() * fs;
    Ok(SVector::from_iterator(tau.iter().copied()))
}

fn stacked_support_forces(contacts: &[ContactState], support_force_scale: f64) -> Result<DVector<f64>> {
    let mut fs = DVector::zeros(2 * contacts.len());
    for (k, c) in contacts.iter().enumerate() {
        let f = c.support_force(support_force_scale)?;
        fs[2 * k] = f.x;
        fs[2 * k + 1] = f.y;
    }
    Ok(fs)
}

/// `N_s = I - J_s^T (J_s^T)^+`.
pub fn nullspace_projector(js: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = js.ncols();
    let jst = js.transpose();
    let pinv = pseudo_inverse(&jst, PINV_TOLERANCE)?;
    Ok(DMatrix::identity(n, n) - &jst * pinv)
}

pub fn combined_torques(
    arms: &[PlanarArm; 2],
    contacts: &[ContactState],
    grasp: &GraspMap,
    h_o: &SVector<f64, 6>,
    support_force_scale: f64,
) -> Result<TorqueCommand> {
    let tau_h = object_wrench_torques(arms, grasp, h_o)?;
    let js = support_jacobian(arms, contacts)?;
    let fs = stacked_support_forces(contacts, support_force_scale)?;
    let tau_s_dyn = js.transpose() * &fs;
    let tau_s = SVector::<f64, NUM_JOINTS>::from_iterator(tau_s_dyn.iter().copied());
    let ns = nullspace_projector(&js)?;
    let projected = &ns * DVector::from_iterator(NUM_JOINTS, tau_h.iter().copied());
    let tau_h_projected = SVector::<f64, NUM_JOINTS>::from_iterator(projected.iter().copied());
    let realized_support_forces = contacts
        .iter()
        .map(|c| c.support_force(support_force_scale))
        .collect::<Result<Vec<_>>>()?;
    Ok(TorqueCommand {
        tau: tau_s + tau_h_projected,
        tau_s,
        tau_h_projected,
        realized_support_forces,
        support_jacobian: js,
        nullspace_projector: ns,
    })
}

/// Least-squares support forces realized by `tau`, `(J_s^T)^+ tau`.
pub fn recovered_support_forces(js: &DMatrix<f64>, tau: &SVector<f64, NUM_JOINTS>) -> Result<DVector<f64>> {
    let pinv = pseudo_inverse(&js.transpose(), PINV_TOLERANCE)?;
    Ok(pinv * DVector::from_iterator(NUM_JOINTS, tau.iter().copied()))
}

/// True when `J_s^T` has full column rank.
pub fn has_full_column_rank(js: &DMatrix<f64>) -> bool {
    if js.nrows() == 0 {
        return true;
    }
    let sv = crate::linalg::singular_values(js);
    let max = sv.max();
    sv.len() == js.nrows() && sv.iter().all(|&s| s > PINV_TOLERANCE * max.max(1e-300))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn penrose_error(a: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
        let scale = a.norm().max(1.0) * p.norm().max(1.0);
        let e1 = (a * p * a - a).norm();
        let e2 = (p * a * p - p).norm();
        let e3 = ((a * p).transpose() - a * p).norm();
        let e4 = ((p * a).transpose() - p * a).norm();
        e1.max(e2).max(e3).max(e4) / scale
    }

    #[test]
    fn identity_inverse() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert_relative_eq!(pseudo_inverse(&i, 1e-10).unwrap(), i, epsilon = 1e-15);
    }

    #[test]
    fn rank_deficient_diagonal() {
        let a = dmatrix![2.0, 0.0; 0.0, 0.0];
        assert_relative_eq!(
            pseudo_inverse(&a, 1e-10).unwrap(),
            dmatrix![0.5, 0.0; 0.0, 0.0],
            epsilon = 1e-15
        );
    }

    #[test]
    fn rank_one_matrix() {
        // A = u v^T with u = (1, 2), v = (1, 2): A^+ = A^T / (|u|^2 |v|^2) = A / 25.
        let a = dmatrix![1.0, 2.0; 2.0, 4.0];
        let p = pseudo_inverse(&a, 1e-10).unwrap();
        assert_relative_eq!(p, &a / 25.0, epsilon = 1e-14);
        assert!(penrose_error(&a, &p) < 1e-12);
    }

    #[test]
    fn zero_support_jacobian_gives_identity_projector() {
        let ns = nullspace_projector(&DMatrix::zeros(4, 8)).unwrap();
        assert_relative_eq!(ns, DMatrix::identity(8, 8));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(pseudo_inverse(&dmatrix![f64::NAN, 0.0], 1e-10).is_err());
    }

    fn arm(base_x: f64, angles: [f64; 4]) -> PlanarArm {
        PlanarArm::new(Vector2::new(base_x, 0.0), [0.3, 0.3, 0.25, 0.15], 0.04, angles).unwrap()
    }

    fn contact_on(arms: &[PlanarArm; 2], arm_index: usize, link: usize, t: f64, gamma: f64, beta: f64) -> ContactState {
        let pose = forward_kinematics(&arms[arm_index]).unwrap();
        let point = pose.link_segment(link).point_at(t);
        ContactState {
            arm_index,
            link_index: link,
            edge_point: point,
            plane_height: 0.9,
            gap: -0.04,
            force_magnitude: gamma,
            normal_angle: beta,
            contact_point: point,
            param: t,
        }
    }

    fn default_grasp() -> GraspMap {
        GraspMap::new(Vector3::new(0.3, 0.0, 0.0), Vector3::new(-0.3, 0.0, 0.0))
    }

    #[test]
    fn lever_arm_on_first_joint() {
        // Link 0 along +x; a force along +y at distance 0.2 from the base.
        let arms = [arm(0.0, [0.0, 0.5, 0.5, 0.5]), arm(1.0, [1.0, 0.2, 0.2, 0.2])];
        let c = contact_on(&arms, 0, 0, 0.2 / 0.3, 5.0, std::f64::consts::FRAC_PI_2);
        let tau = support_torques(&arms, &[c], 1.0).unwrap();
        assert_relative_eq!(tau[0], 0.2 * 5.0, epsilon = 1e-12);
        assert!(tau.rows(1, 7).amax() < 1e-12);
    }

    #[test]
    fn zero_force_gives_zero_support_torque() {
        let arms = [arm(-0.2, [1.4, 0.3, 1.6, 2.6]), arm(0.2, [1.7, -0.3, -1.6, -2.6])];
        let c = contact_on(&arms, 1, 1, 0.5, 0.0, 1.0);
        assert_eq!(support_torques(&arms, &[c], 1.0).unwrap(), SVector::<f64, NUM_JOINTS>::zeros());
    }

    #[test]
    fn contact_on_second_link_leaves_distal_joints_unloaded() {
        let arms = [arm(-0.2, [1.4, 0.3, 1.6, 2.6]), arm(0.2, [1.7, -0.3, -1.6, -2.6])];
        for a in 0..2 {
            let c = contact_on(&arms, a, 1, 0.4, 30.0, 0.7);
            let tau = support_torques(&arms, &[c], 1.0).unwrap();
            let off = NUM_LINKS * a;
            assert!(tau[off].abs() > 1e-3 && tau[off + 1].abs() > 1e-3);
            assert_eq!(tau[off + 2], 0.0);
            assert_eq!(tau[off + 3], 0.0);
        }
    }

    #[test]
    fn contact_off_the_link_is_rejected() {
        let arms = [arm(-0.2, [1.4, 0.3, 1.6, 2.6]), arm(0.2, [1.7, -0.3, -1.6, -2.6])];
        let mut c = contact_on(&arms, 0, 1, 0.4, 1.0, 0.0);
        c.contact_point += Vector2::new(0.5, 0.5);
        assert!(matches!(support_torques(&arms, &[c], 1.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn no_contacts_gives_object_torque_only() {
        let arms = [arm(-0.2, [1.4, 0.3, 1.6, 2.6]), arm(0.2, [1.7, -0.3, -1.6, -2.6])];
        let h_o = SVector::<f64, 6>::new(0.0, 10.0, -117.72, 0.0, 0.0, 0.0);
        let cmd = combined_torques(&arms, &[], &default_grasp(), &h_o, 1.0).unwrap();
        let tau_h = object_wrench_torques(&arms, &default_grasp(), &h_o).unwrap();
        assert_relative_eq!(cmd.tau, tau_h, epsilon = 1e-12);
        assert_eq!(cmd.tau, cmd.tau_s + cmd.tau_h_projected);
    }

    #[test]
    fn zero_object_wrench_gives_support_torque_only() {
        let arms = [arm(-0.2, [1.4, 0.3, 1.6, 2.6]), arm(0.2, [1.7, -0.3, -1.6, -2.6])];
        let contacts = [contact_on(&arms, 0, 1, 0.3, 20.0, 0.4), contact_on(&arms, 1, 1, 0.6, 15.0, 2.8)];
        let zero = SVector::<f64, 6>::zeros();
        assert_eq!(object_wrench_torques(&arms, &default_grasp(), &zero).unwrap(), SVector::<f64, NUM_JOINTS>::zeros());
        let cmd = combined_torques(&arms, &contacts, &default_grasp(), &zero, 1.0).unwrap();
        assert_relative_eq!(cmd.tau, cmd.tau_s, epsilon = 1e-12);
    }

    #[test]
    fn object_torques_match_matrix_chain() {
        let prepared = crate::scenario::default_scenario().prepare().unwrap();
        let scene = &prepared.scene;
        let arms = scene.arms_at(&prepared.initial_theta);
        let h_o = SVector::<f64, 6>::new(0.0, 10.0, -117.72, 0.0, 0.0, 0.0);
        let tau = object_wrench_torques(&arms, &scene.grasp, &h_o).unwrap();

        // W^+ = W^T (W W^T)^-1 for the full-row-rank grasp map.
        let w = scene.grasp.w_c;
        let gram = (w * w.transpose()).try_inverse().unwrap();
        let h_c = w.transpose() * gram * h_o;
        let mut jt = nalgebra::SMatrix::<f64, 8, 12>::zeros();
        for (i, a) in arms.iter().enumerate() {
            let j = end_effector_jacobian(a).unwrap();
            jt.fixed_view_mut::<4, 2>(4 * i, 6 * i).copy_from(&j.transpose());
        }
        assert_relative_eq!(tau, jt * h_c, epsilon = 1e-9);
    }

    #[test]
    fn combined_torques_are_linear_in_object_wrench() {
        let arms = [arm(-0.2, [1.4, 0.3, 1.6, 2.6]), arm(0.2, [1.7, -0.3, -1.6, -2.6])];
        let contacts = [contact_on(&arms, 0, 1, 0.3, 20.0, 0.4)];
        let a = SVector::<f64, 6>::new(1.0, 2.0, -3.0, 0.1, 0.2, 0.3);
        let b = SVector::<f64, 6>::new(-2.0, 0.5, 7.0, 0.0, -0.4, 0.1);
        let g = default_grasp();
        let ta = combined_torques(&arms, &contacts, &g, &a, 1.0).unwrap().tau_h_projected;
        let tb = combined_torques(&arms, &contacts, &g, &b, 1.0).unwrap().tau_h_projected;
        let tab = combined_torques(&arms, &contacts, &g, &(a * 2.0 + b), 1.0).unwrap().tau_h_projected;
        assert_relative_eq!(tab, ta * 2.0 + tb, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn penrose_conditions_hold(
            vals in prop::collection::vec(-2.0f64..2.0, 12),
            rank_drop in any::<bool>(),
        ) {
            let mut a = DMatrix::from_vec(3, 4, vals);
            if rank_drop {
                let r0 = a.row(0).clone_owned();
                a.set_row(2, &(r0 * 2.0));
            }
            let p = pseudo_inverse(&a, 1e-10).unwrap();
            prop_assert!(penrose_error(&a, &p) < 1e-9);
        }

        #[test]
        fn support_torque_matches_virtual_work(
            q in prop::collection::vec(-3.0f64..3.0, 8),
            link in 0usize..4,
            t in 0.0f64..1.0,
            gamma in 0.0f64..50.0,
            beta in -3.0f64..3.0,
        ) {
            let arms = [
                arm(-0.2, [q[0], q[1], q[2], q[3]]),
                arm(0.2, [q[4], q[5], q[6], q[7]]),
            ];
            let c = contact_on(&arms, 1, link, t, gamma, beta);
            let tau = support_torques(&arms, &[c], 1.0).unwrap();
            let f = c.support_force(1.0).unwrap().xy();
            // d(f . p(theta)) / d theta with the force held fixed.
            let h = 1e-6;
            let work = |j: usize, d: f64| {
                let mut angles = arms[1].joint_angles;
                angles[j] += d;
                let pose = forward_kinematics(&arms[1].with_joint_angles(angles)).unwrap();
                f.dot(&pose.link_segment(link).point_at(t))
            };
            for j in 0..4 {
                let fd = (work(j, h) - work(j, -h)) / (2.0 * h);
                prop_assert!((tau[4 + j] - fd).abs() <= 1e-5 * fd.abs().max(1.0));
                prop_assert_eq!(tau[j], 0.0);
            }
        }

        #[test]
        fn projector_is_idempotent_symmetric_and_annihilating(
            vals in prop::collection::vec(-1.0f64..1.0, 32),
        ) {
            let js = DMatrix::from_vec(4, 8, vals);
            let ns = nullspace_projector(&js).unwrap();
            prop_assert!((&ns * &ns - &ns).amax() < 1e-9);
            prop_assert!((ns.transpose() - &ns).amax() < 1e-9);
            let pinv = pseudo_inverse(&js.transpose(), PINV_TOLERANCE).unwrap();
            prop_assert!((pinv * &ns).amax() < 1e-9);
        }
    }
}
