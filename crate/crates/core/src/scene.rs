//! The dual-arm robot, the glovebox ports and the carried bar as one
//! quasi-static model, with analytic derivatives of every quantity the
//! planner constrains.

use nalgebra::{Matrix2, RowSVector, SMatrix, SVector, Vector2, Vector3};

use crate::contact::{ContactCandidate, ContactState};
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, pose_point_jacobian, signed_gap, ArmPose, PlanarArm, NUM_LINKS};
use crate::statics::{compute_fzmp, compute_zmp, distribute_object_wrench, skew, AppliedWrench, GraspMap, RobotStaticsState, ZmpResult};
use crate::torque::NUM_JOINTS;

pub type JointVector = SVector<f64, NUM_JOINTS>;
pub type JointRow = RowSVector<f64, NUM_JOINTS>;
pub type Jacobian2 = SMatrix<f64, 2, NUM_JOINTS>;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Arm geometry; the joint angles stored here are ignored.
    pub arms: [PlanarArm; 2],
    pub plane_height: f64,
    /// Two candidate port edge points per arm.
    pub port_edges: [[Vector2<f64>; 2]; 2],
    pub contact_link: usize,
    pub link_mass: f64,
    /// Torso CoM; the torso carries the robot mass not assigned to links.
    pub torso_com: Vector3<f64>,
    /// Robot mass, sp polygon and safe circle. `com` is recomputed per configuration.
    pub balance: RobotStaticsState,
    pub bar_length: f64,
    pub object_wrench: SVector<f64, 6>,
    pub grasp: GraspMap,
    pub support_force_scale: f64,
    /// Per-hand load `[f; m]` on the robot from the object.
    hand_loads: [SVector<f64, 6>; 2],
}

impl Scene {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        arms: [PlanarArm; 2],
        plane_height: f64,
        port_edges: [[Vector2<f64>; 2]; 2],
        contact_link: usize,
        link_mass: f64,
        torso_com: Vector3<f64>,
        balance: RobotStaticsState,
        bar_length: f64,
        object_wrench: SVector<f64, 6>,
        support_force_scale: f64,
    ) -> Result<Self> {
        for arm in &arms {
            arm.validate()?;
        }
        balance.validate()?;
        if contact_link >= NUM_LINKS {
            return Err(Error::invalid(format!("contact link {contact_link} out of range")));
        }
        if !(link_mass.is_finite() && link_mass >= 0.0) {
            return Err(Error::invalid("link mass must be >= 0"));
        }
        if 2.0 * NUM_LINKS as f64 * link_mass >= balance.total_mass {
            return Err(Error::invalid("link masses must leave a positive torso mass"));
        }
        if !(bar_length.is_finite() && bar_length > 0.0) {
            return Err(Error::invalid("bar length must be > 0"));
        }
        if !(support_force_scale.is_finite() && support_force_scale > 0.0) {
            return Err(Error::invalid("support force scale must be > 0"));
        }
        let finite = plane_height.is_finite()
            && torso_com.iter().all(|v| v.is_finite())
            && object_wrench.iter().all(|v| v.is_finite())
            && port_edges.iter().flatten().all(|p| p.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::invalid("scene geometry and loads must be finite"));
        }
        let half = Vector3::new(bar_length / 2.0, 0.0, 0.0);
        let grasp = GraspMap::new(half, -half);
        let h_c = distribute_object_wrench(&grasp, &object_wrench)?;
        let hand_loads = [h_c.fixed_rows::<6>(0).into_owned(), h_c.fixed_rows::<6>(6).into_owned()];
        Ok(Scene {
            arms,
            plane_height,
            port_edges,
            contact_link,
            link_mass,
            torso_com,
            balance,
            bar_length,
            object_wrench,
            grasp,
            support_force_scale,
            hand_loads,
        })
    }

    pub fn torso_mass(&self) -> f64 {
        self.balance.total_mass - 2.0 * NUM_LINKS as f64 * self.link_mass
    }

    pub fn hand_loads(&self) -> &[SVector<f64, 6>; 2] {
        &self.hand_loads
    }

    pub fn arms_at(&self, theta: &JointVector) -> [PlanarArm; 2] {
        let q = |i: usize| -> [f64; NUM_LINKS] { std::array::from_fn(|j| theta[NUM_LINKS * i + j]) };
        [self.arms[0].with_joint_angles(q(0)), self.arms[1].with_joint_angles(q(1))]
    }

    pub fn poses(&self, theta: &JointVector) -> Result<[ArmPose; 2]> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("joint angles must be finite"));
        }
        let arms = self.arms_at(theta);
        Ok([forward_kinematics(&arms[0])?, forward_kinematics(&arms[1])?])
    }

    /// Bar center: midpoint of the two end effectors.
    pub fn object_position(&self, poses: &[ArmPose; 2]) -> Vector2<f64> {
        (poses[0].end_effector + poses[1].end_effector) * 0.5
    }

    pub fn object_jacobian(&self, poses: &[ArmPose; 2]) -> Jacobian2 {
        let mut j = Jacobian2::zeros();
        for (i, pose) in poses.iter().enumerate() {
            let ee = pose_point_jacobian(pose, NUM_LINKS - 1, 1.0) * 0.5;
            j.fixed_view_mut::<2, NUM_LINKS>(0, NUM_LINKS * i).copy_from(&ee);
        }
        j
    }

    /// `(ee_1 - ee_2) + (L, 0)`: zero when the hands hold the bar ends with the
    /// bar parallel to x.
    pub fn grasp_residual(&self, poses: &[ArmPose; 2]) -> Vector2<f64> {
        poses[0].end_effector - poses[1].end_effector + Vector2::new(self.bar_length, 0.0)
    }

    pub fn grasp_jacobian(&self, poses: &[ArmPose; 2]) -> Jacobian2 {
        let mut j = Jacobian2::zeros();
        j.fixed_view_mut::<2, NUM_LINKS>(0, 0)
            .copy_from(&pose_point_jacobian(&poses[0], NUM_LINKS - 1, 1.0));
        j.fixed_view_mut::<2, NUM_LINKS>(0, NUM_LINKS)
            .copy_from(&(-pose_point_jacobian(&poses[1], NUM_LINKS - 1, 1.0)));
        j
    }

    /// Whole-robot CoM, link masses at link midpoints in the arm plane.
    pub fn com(&self, poses: &[ArmPose; 2]) -> Vector3<f64> {
        let m = self.balance.total_mass;
        let mut c = self.torso_com * self.torso_mass();
        for pose in poses {
            for k in 0..NUM_LINKS {
                let mid = pose.link_segment(k).point_at(0.5);
                c += Vector3::new(mid.x, mid.y, self.plane_height) * self.link_mass;
            }
        }
        c / m
    }

    /// Horizontal CoM Jacobian; the vertical coordinate is constant.
    pub fn com_jacobian(&self, poses: &[ArmPose; 2]) -> Jacobian2 {
        let mut j = Jacobian2::zeros();
        let w = self.link_mass / self.balance.total_mass;
        for (i, pose) in poses.iter().enumerate() {
            let mut block = SMatrix::<f64, 2, NUM_LINKS>::zeros();
            for k in 0..NUM_LINKS {
                block += pose_point_jacobian(pose, k, 0.5) * w;
            }
            j.fixed_view_mut::<2, NUM_LINKS>(0, NUM_LINKS * i).copy_from(&block);
        }
        j
    }

    /// Gap, force direction and their joint gradients for one candidate.
    pub fn contact_geometry(&self, poses: &[ArmPose; 2], candidate: &ContactCandidate) -> Result<ContactGeometry> {
        candidate.validate()?;
        let arm = candidate.arm_index;
        let link = candidate.link_index;
        let pose = &poses[arm];
        let seg = pose.link_segment(link);
        let g = signed_gap(candidate.edge_point, &seg, self.arms[arm].link_radius)?;
        let jac = pose_point_jacobian(pose, link, g.param);
        let n = g.closest_point - candidate.edge_point;
        let dist = n.norm();
        let mut gap_grad = JointRow::zeros();
        let mut angle_grad = JointRow::zeros();
        let offset = NUM_LINKS * arm;
        if dist > 0.0 {
            let unit = n / dist;
            let dg = unit.transpose() * jac;
            let interior = g.param > 0.0 && g.param < 1.0;
            for j in 0..NUM_LINKS {
                gap_grad[offset + j] = dg[j];
                angle_grad[offset + j] = if interior {
                    // The normal turns with the link.
                    if j <= link {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    (n.x * jac[(1, j)] - n.y * jac[(0, j)]) / (dist * dist)
                };
            }
        } else {
            for j in 0..=link {
                angle_grad[offset + j] = 1.0;
            }
        }
        Ok(ContactGeometry {
            state: ContactState {
                arm_index: arm,
                link_index: link,
                edge_point: candidate.edge_point,
                plane_height: candidate.plane_height,
                gap: g.gap,
                force_magnitude: 0.0,
                normal_angle: g.normal_angle,
                contact_point: g.closest_point,
                param: g.param,
            },
            gap_grad,
            angle_grad,
        })
    }

    /// Loads on the robot other than gravity: the object at both hands and,
    /// when given, the support contacts.
    pub fn external_wrenches(&self, poses: &[ArmPose; 2], supports: &[ContactState]) -> Result<Vec<AppliedWrench>> {
        let mut out = Vec::with_capacity(2 + supports.len());
        for (pose, load) in poses.iter().zip(&self.hand_loads) {
            let ee = pose.end_effector;
            out.push(AppliedWrench {
                position: Vector3::new(ee.x, ee.y, self.plane_height),
                force: load.fixed_rows::<3>(0).into_owned(),
                moment: load.fixed_rows::<3>(3).into_owned(),
            });
        }
        for c in supports {
            out.push(AppliedWrench::force_at(c.position3(), c.support_force(self.support_force_scale)?));
        }
        Ok(out)
    }

    pub fn statics_state(&self, poses: &[ArmPose; 2]) -> RobotStaticsState {
        self.balance.with_com(self.com(poses))
    }

    /// ZMP with supports and the fictitious ZMP without them.
    pub fn balance(&self, poses: &[ArmPose; 2], supports: &[ContactState]) -> Result<(ZmpResult, ZmpResult)> {
        let state = self.statics_state(poses);
        let zmp = compute_zmp(&state, &self.external_wrenches(poses, supports)?)?;
        let fzmp = compute_fzmp(&state, &self.external_wrenches(poses, &[])?)?;
        Ok((zmp, fzmp))
    }

    /// ZMP for support magnitudes `gamma` on `candidates`, with its
    /// derivatives in the joint angles and in `gamma`.
    pub fn zmp_linearization(
        &self,
        poses: &[ArmPose; 2],
        candidates: &[ContactCandidate; 2],
        gamma: &Vector2<f64>,
    ) -> Result<ZmpLinearization> {
        let geoms = [
            self.contact_geometry(poses, &candidates[0])?,
            self.contact_geometry(poses, &candidates[1])?,
        ];
        let state = self.statics_state(poses);
        let weight = state.gravity * state.total_mass;
        let mut force = weight;
        let mut moment = state.com.cross(&weight);
        let com_j = self.com_jacobian(poses);
        // d(c x w) = -skew(w) dc
        let mut dm_theta = -skew(&weight).fixed_columns::<2>(0) * com_j;
        let mut dm_gamma = SMatrix::<f64, 3, 2>::zeros();

        for (i, (pose, load)) in poses.iter().zip(&self.hand_loads).enumerate() {
            let ee = pose.end_effector;
            let p = Vector3::new(ee.x, ee.y, self.plane_height);
            let f = load.fixed_rows::<3>(0).into_owned();
            force += f;
            moment += p.cross(&f) + load.fixed_rows::<3>(3);
            let dp = pose_point_jacobian(pose, NUM_LINKS - 1, 1.0);
            let block = -skew(&f).fixed_columns::<2>(0) * dp;
            let mut cols = dm_theta.fixed_view_mut::<3, NUM_LINKS>(0, NUM_LINKS * i);
            cols += block;
        }

        let mut contacts = [geoms[0].state, geoms[1].state];
        for (k, geom) in geoms.iter().enumerate() {
            let g = gamma[k];
            if !g.is_finite() {
                return Err(Error::invalid("support force magnitude must be finite"));
            }
            contacts[k].force_magnitude = g;
            let beta = geom.state.normal_angle;
            let dir = Vector3::new(beta.cos(), beta.sin(), 0.0) * self.support_force_scale;
            let f = dir * g;
            let p = geom.state.position3();
            force += f;
            moment += p.cross(&f);
            let arm = geom.state.arm_index;
            let pose = &poses[arm];
            let dp = pose_point_jacobian(pose, geom.state.link_index, geom.state.param);
            let dp_block = -skew(&f).fixed_columns::<2>(0) * dp;
            let mut cols = dm_theta.fixed_view_mut::<3, NUM_LINKS>(0, NUM_LINKS * arm);
            cols += dp_block;
            // df = g * d(dir)/d(beta) * d(beta)
            let ddir = Vector3::new(-beta.sin(), beta.cos(), 0.0) * (self.support_force_scale * g);
            dm_theta += skew(&p) * ddir * geom.angle_grad;
            dm_gamma.set_column(k, &(skew(&p) * dir));
        }

        let ground_force = -force;
        if !(ground_force.z > 0.0) {
            return Err(Error::Unbalanced(ground_force.z));
        }
        let fz = ground_force.z;
        let zmp = Vector2::new(moment.y / fz, -moment.x / fz);
        let mut d_theta = Jacobian2::zeros();
        d_theta.set_row(0, &(dm_theta.row(1) / fz));
        d_theta.set_row(1, &(-dm_theta.row(0) / fz));
        let mut d_gamma = Matrix2::zeros();
        d_gamma.set_row(0, &(dm_gamma.row(1) / fz));
        d_gamma.set_row(1, &(-dm_gamma.row(0) / fz));
        Ok(ZmpLinearization {
            zmp,
            d_theta,
            d_gamma,
            contacts,
            gap_grads: [geoms[0].gap_grad, geoms[1].gap_grad],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactGeometry {
    /// Gap and direction, with zero force.
    pub state: ContactState,
    pub gap_grad: JointRow,
    pub angle_grad: JointRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZmpLinearization {
    pub zmp: Vector2<f64>,
    pub d_theta: Jacobian2,
    pub d_gamma: Matrix2<f64>,
    /// Candidate contacts carrying the given force magnitudes.
    pub contacts: [ContactState; 2],
    pub gap_grads: [JointRow; 2],
}
