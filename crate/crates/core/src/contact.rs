//! Support contacts between arm links and the glovebox port edges.

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, signed_gap, PlanarArm, NUM_LINKS};

/// Second link, the one that passes through the port.
pub const DEFAULT_CONTACT_LINK: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactCandidate {
    pub arm_index: usize,
    pub link_index: usize,
    pub edge_point: Vector2<f64>,
    pub plane_height: f64,
}

impl ContactCandidate {
    pub fn validate(&self) -> Result<()> {
        if self.arm_index > 1 {
            return Err(Error::invalid(format!("arm index {} out of range", self.arm_index)));
        }
        if self.link_index >= NUM_LINKS {
            return Err(Error::invalid(format!("link index {} out of range", self.link_index)));
        }
        if !(self.edge_point.x.is_finite() && self.edge_point.y.is_finite() && self.plane_height.is_finite()) {
            return Err(Error::invalid("contact candidate must have finite coordinates"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactState {
    pub arm_index: usize,
    pub link_index: usize,
    pub edge_point: Vector2<f64>,
    pub plane_height: f64,
    pub gap: f64,
    pub force_magnitude: f64,
    /// Direction of the force the port edge applies to the link.
    pub normal_angle: f64,
    /// Closest point on the link axis.
    pub contact_point: Vector2<f64>,
    /// Position of `contact_point` along the link, in [0, 1].
    pub param: f64,
}

impl ContactState {
    pub fn support_force(&self, scale: f64) -> Result<Vector3<f64>> {
        support_force_vector(self.force_magnitude, self.normal_angle, scale)
    }

    pub fn position3(&self) -> Vector3<f64> {
        Vector3::new(self.contact_point.x, self.contact_point.y, self.plane_height)
    }
}

pub fn evaluate_gap(arms: &[PlanarArm; 2], candidate: &ContactCandidate) -> Result<ContactState> {
    candidate.validate()?;
    let arm = &arms[candidate.arm_index];
    let pose = forward_kinematics(arm)?;
    let seg = pose.link_segment(candidate.link_index);
    let g = signed_gap(candidate.edge_point, &seg, arm.link_radius)?;
    Ok(ContactState {
        arm_index: candidate.arm_index,
        link_index: candidate.link_index,
        edge_point: candidate.edge_point,
        plane_height: candidate.plane_height,
        gap: g.gap,
        force_magnitude: 0.0,
        normal_angle: g.normal_angle,
        contact_point: g.closest_point,
        param: g.param,
    })
}

/// Gap and normal for each candidate; force magnitudes are left at zero.
pub fn evaluate_gaps(arms: &[PlanarArm; 2], candidates: &[ContactCandidate]) -> Result<Vec<ContactState>> {
    candidates.iter().map(|c| evaluate_gap(arms, c)).collect()
}

/// Picks, per arm, the port edge with the smaller current gap. Equal gaps go
/// to the edge with the smaller x coordinate.
pub fn select_active_candidates(
    arms: &[PlanarArm; 2],
    port_edges: &[[Vector2<f64>; 2]; 2],
    link_index: usize,
    plane_height: f64,
) -> Result<[ContactCandidate; 2]> {
    let pick = |arm_index: usize| -> Result<ContactCandidate> {
        let make = |edge_point| ContactCandidate {
            arm_index,
            link_index,
            edge_point,
            plane_height,
        };
        let [e0, e1] = port_edges[arm_index];
        let (c0, c1) = (make(e0), make(e1));
        let g0 = evaluate_gap(arms, &c0)?.gap;
        let g1 = evaluate_gap(arms, &c1)?.gap;
        Ok(if g0 < g1 || (g0 == g1 && e0.x <= e1.x) { c0 } else { c1 })
    };
    Ok([pick(0)?, pick(1)?])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplementarityTolerances {
    pub gap: f64,
    pub force: f64,
    pub comp: f64,
}

impl Default for ComplementarityTolerances {
    fn default() -> Self {
        ComplementarityTolerances {
            gap: 1e-6,
            force: 1e-6,
            comp: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplementarityCheck {
    pub feasible: bool,
    pub violation: f64,
}

/// Checks the relaxed conditions `phi >= 0`, `gamma >= 0`, `s >= 0`, `s - gamma^T phi >= 0`.
pub fn complementarity_residual(
    phi: &[f64],
    gamma: &[f64],
    s: f64,
    tol: &ComplementarityTolerances,
) -> Result<ComplementarityCheck> {
    if phi.len() != gamma.len() {
        return Err(Error::invalid(format!(
            "gap and force vectors differ in length ({} vs {})",
            phi.len(),
            gamma.len()
        )));
    }
    let phi_min = phi.iter().copied().fold(f64::INFINITY, f64::min);
    let gamma_min = gamma.iter().copied().fold(f64::INFINITY, f64::min);
    let comp = s - phi.iter().zip(gamma).map(|(p, g)| p * g).sum::<f64>();
    let feasible = phi_min >= -tol.gap && gamma_min >= -tol.force && s >= -tol.force && comp >= -tol.comp;
    let violation = [0.0, -phi_min, -gamma_min, -s, -comp]
        .into_iter()
        .fold(0.0, f64::max);
    Ok(ComplementarityCheck { feasible, violation })
}

/// Planar support force `scale * gamma * (cos beta, sin beta, 0)`.
pub fn support_force_vector(gamma: f64, beta: f64, scale: f64) -> Result<Vector3<f64>> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("support force magnitude {gamma} must be >= 0")));
    }
    if !(beta.is_finite() && scale.is_finite()) {
        return Err(Error::invalid("support force angle and scale must be finite"));
    }
    Ok(Vector3::new(beta.cos(), beta.sin(), 0.0) * (scale * gamma))
}
