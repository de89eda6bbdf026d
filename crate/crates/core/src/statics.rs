//! Whole-body static balance: ground reaction, zero-moment point, support
//! polygon tests and the grasp wrench map.

use nalgebra::{DMatrix, Matrix3, Matrix6, SMatrix, SVector, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::torque::pseudo_inverse;

pub const STANDARD_GRAVITY: f64 = 9.81;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotStaticsState {
    pub total_mass: f64,
    pub gravity: Vector3<f64>,
    pub com: Vector3<f64>,
    pub sp_center: Vector2<f64>,
    /// Convex support polygon, counter-clockwise.
    pub sp_polygon: Vec<Vector2<f64>>,
    pub safe_radius: f64,
}

impl RobotStaticsState {
    pub fn new(
        total_mass: f64,
        gravity: Vector3<f64>,
        com: Vector3<f64>,
        sp_center: Vector2<f64>,
        sp_polygon: Vec<Vector2<f64>>,
        safe_radius: f64,
    ) -> Result<Self> {
        let state = RobotStaticsState {
            total_mass,
            gravity,
            com,
            sp_center,
            sp_polygon,
            safe_radius,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.total_mass.is_finite() && self.total_mass > 0.0) {
            return Err(Error::invalid(format!("total mass {} must be > 0", self.total_mass)));
        }
        if self.gravity.iter().chain(self.com.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("gravity and CoM must be finite"));
        }
        if !(self.safe_radius.is_finite() && self.safe_radius > 0.0) {
            return Err(Error::invalid(format!(
                "safe radius {} must be > 0",
                self.safe_radius
            )));
        }
        validate_convex_ccw(&self.sp_polygon)?;
        // Closed containment: every edge line at distance >= r_s from the center.
        let clearance = polygon_clearance(&self.sp_polygon, &self.sp_center);
        if clearance < self.safe_radius - 1e-12 {
            return Err(Error::invalid(format!(
                "safe circle of radius {} does not fit inside the support polygon (clearance {clearance})",
                self.safe_radius
            )));
        }
        Ok(())
    }

    pub fn with_com(&self, com: Vector3<f64>) -> Self {
        RobotStaticsState { com, ..self.clone() }
    }
}

fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

pub(crate) fn validate_convex_ccw(poly: &[Vector2<f64>]) -> Result<()> {
    if poly.len() < 3 {
        return Err(Error::invalid("support polygon needs at least 3 vertices"));
    }
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let c = poly[(i + 2) % n];
        if cross2(&(b - a), &(c - b)) <= 0.0 {
            return Err(Error::invalid("support polygon must be convex and counter-clockwise"));
        }
    }
    Ok(())
}

/// Signed distance from `p` to the nearest edge line; positive inside.
pub(crate) fn polygon_clearance(poly: &[Vector2<f64>], p: &Vector2<f64>) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let a = poly[i];
            let e = poly[(i + 1) % n] - a;
            cross2(&e, &(p - a)) / e.norm()
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn inside_polygon(poly: &[Vector2<f64>], p: &Vector2<f64>) -> bool {
    polygon_clearance(poly, p) >= 0.0
}

/// Closed-disk membership test around the support polygon center.
pub fn inside_safe_circle(p: &Vector2<f64>, state: &RobotStaticsState) -> bool {
    (p - state.sp_center).norm() <= state.safe_radius
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppliedWrench {
    pub position: Vector3<f64>,
    pub force: Vector3<f64>,
    pub moment: Vector3<f64>,
}

impl AppliedWrench {
    pub fn force_at(position: Vector3<f64>, force: Vector3<f64>) -> Self {
        AppliedWrench {
            position,
            force,
            moment: Vector3::zeros(),
        }
    }

    fn is_finite(&self) -> bool {
        self.position
            .iter()
            .chain(self.force.iter())
            .chain(self.moment.iter())
            .all(|v| v.is_finite())
    }

    /// Moment about the world origin.
    pub fn moment_about_origin(&self) -> Vector3<f64> {
        self.position.cross(&self.force) + self.moment
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZmpResult {
    pub zmp: Vector2<f64>,
    pub ground_force: Vector3<f64>,
    pub inside_safe_circle: bool,
    pub inside_sp: bool,
}

/// Net force and moment about the origin of gravity plus `externals`.
pub fn applied_totals(state: &RobotStaticsState, externals: &[AppliedWrench]) -> (Vector3<f64>, Vector3<f64>) {
    let weight = state.gravity * state.total_mass;
    let mut force = weight;
    let mut moment = state.com.cross(&weight);
    for w in externals {
        force += w.force;
        moment += w.moment_about_origin();
    }
    (force, moment)
}

/// Ground reaction and its point of application on the floor (z = 0) such
/// that forces and horizontal moments balance.
pub fn compute_zmp(state: &RobotStaticsState, externals: &[AppliedWrench]) -> Result<ZmpResult> {
    if externals.iter().any(|w| !w.is_finite()) {
        return Err(Error::invalid("external wrench with non-finite component"));
    }
    let (force, moment) = applied_totals(state, externals);
    let ground_force = -force;
    if !(ground_force.z > 0.0) {
        return Err(Error::Unbalanced(ground_force.z));
    }
    // (p_R x f_R)^H = (y f_Rz, -x f_Rz) must cancel the horizontal moment.
    let zmp = Vector2::new(moment.y / ground_force.z, -moment.x / ground_force.z);
    Ok(ZmpResult {
        zmp,
        ground_force,
        inside_safe_circle: inside_safe_circle(&zmp, state),
        inside_sp: inside_polygon(&state.sp_polygon, &zmp),
    })
}

/// Fictitious ZMP: the ZMP of the load without support-contact wrenches.
/// It may fall outside the support polygon.
pub fn compute_fzmp(state: &RobotStaticsState, externals_without_supports: &[AppliedWrench]) -> Result<ZmpResult> {
    compute_zmp(state, externals_without_supports)
}

/// Force residual norm and horizontal moment residual norm of a solved balance.
pub fn equilibrium_residual(
    state: &RobotStaticsState,
    externals: &[AppliedWrench],
    result: &ZmpResult,
) -> (f64, f64) {
    let (force, moment) = applied_totals(state, externals);
    let p_r = Vector3::new(result.zmp.x, result.zmp.y, 0.0);
    let total_moment = moment + p_r.cross(&result.ground_force);
    (
        (force + result.ground_force).norm(),
        total_moment.xy().norm(),
    )
}

/// Maps a contact wrench (force, moment) to the object origin, where `r_c`
/// points from the contact to the origin.
pub fn wrench_matrix(r_c: &Vector3<f64>) -> Matrix6<f64> {
    let mut w = Matrix6::identity();
    w.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-skew(r_c)));
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraspMap {
    pub r_c1: Vector3<f64>,
    pub r_c2: Vector3<f64>,
    pub w_c: SMatrix<f64, 6, 12>,
}

impl GraspMap {
    pub fn new(r_c1: Vector3<f64>, r_c2: Vector3<f64>) -> Self {
        let mut w_c = SMatrix::<f64, 6, 12>::zeros();
        w_c.fixed_view_mut::<6, 6>(0, 0).copy_from(&wrench_matrix(&r_c1));
        w_c.fixed_view_mut::<6, 6>(0, 6).copy_from(&wrench_matrix(&r_c2));
        GraspMap { r_c1, r_c2, w_c }
    }

    /// Grasp from two contact points and the object origin.
    pub fn from_points(p_c1: &Vector3<f64>, p_c2: &Vector3<f64>, origin: &Vector3<f64>) -> Self {
        GraspMap::new(origin - p_c1, origin - p_c2)
    }
}

/// Minimum-norm contact wrenches `h_C = W_C^+ h_o`, stacked `[h_C1; h_C2]`.
pub fn distribute_object_wrench(grasp: &GraspMap, h_o: &SVector<f64, 6>) -> Result<SVector<f64, 12>> {
    if grasp.r_c1.iter().chain(grasp.r_c2.iter()).chain(h_o.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("grasp and object wrench must be finite"));
    }
    if (grasp.r_c1 - grasp.r_c2).norm() <= 1e-9 {
        return Err(Error::DegenerateGrasp("grasp points coincide".into()));
    }
    let w = DMatrix::from_iterator(6, 12, grasp.w_c.iter().copied());
    let sv = crate::linalg::singular_values(&w);
    if sv.min() <= 1e-10 * sv.max() {
        return Err(Error::DegenerateGrasp("wrench matrix is rank deficient".into()));
    }
    let pinv = pseudo_inverse(&w, 1e-10)?;
    let h = pinv * nalgebra::DVector::from_iterator(6, h_o.iter().copied());
    Ok(SVector::from_iterator(h.iter().copied()))
}
