//! Runs a prepared scenario end to end: plans every waypoint, then computes
//! the joint torques of each planned step.

use nalgebra::Vector2;

use crate::contact::ContactState;
use crate::error::Result;
use crate::kinematics::forward_kinematics;
use crate::planner::{plan_path, PathFailure, PlanStep};
use crate::scenario::PreparedScenario;
use crate::scene::Scene;
use crate::torque::{combined_torques, TorqueCommand};

/// Planned force magnitude above which a support counts as active.
pub const ACTIVE_FORCE: f64 = 1e-6;

/// One row of the simulation trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub obj: [f64; 2],
    pub wp: [f64; 2],
    pub zmp: [f64; 2],
    pub fzmp: [f64; 2],
    pub gamma: [f64; 2],
    pub beta: [f64; 2],
    pub gap: [f64; 2],
    pub fs_norm: f64,
    pub tau_norm: f64,
    pub iters: usize,
    pub cost: f64,
    pub slack: f64,
    /// Object distance from the midpoint of the arm bases.
    pub dist: f64,
}

/// A planned step with its torques.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedStep {
    pub plan: PlanStep,
    /// Supports with planned force above [`ACTIVE_FORCE`].
    pub active_contacts: Vec<ContactState>,
    pub torque: TorqueCommand,
    pub record: StepRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub steps: Vec<SimulatedStep>,
    /// Set when planning stopped before the last waypoint.
    pub failure: Option<crate::Error>,
}

impl Simulation {
    pub fn records(&self) -> Vec<StepRecord> {
        self.steps.iter().map(|s| s.record.clone()).collect()
    }
}

pub fn base_center(scene: &Scene) -> Vector2<f64> {
    (scene.arms[0].base_position + scene.arms[1].base_position) * 0.5
}

pub fn simulate_step(scene: &Scene, plan: PlanStep) -> Result<SimulatedStep> {
    let arms = scene.arms_at(&plan.theta);
    let active: Vec<ContactState> = plan
        .contacts
        .iter()
        .filter(|c| c.force_magnitude > ACTIVE_FORCE)
        .copied()
        .collect();
    let torque = combined_torques(&arms, &active, &scene.grasp, &scene.object_wrench, scene.support_force_scale)?;
    let fs_norm = torque
        .realized_support_forces
        .iter()
        .map(|f| f.norm_squared())
        .sum::<f64>()
        .sqrt();
    let c = &plan.contacts;
    let record = StepRecord {
        step: plan.index,
        obj: [plan.object_position.x, plan.object_position.y],
        wp: [plan.waypoint.x, plan.waypoint.y],
        zmp: [plan.zmp.zmp.x, plan.zmp.zmp.y],
        fzmp: [plan.fzmp.zmp.x, plan.fzmp.zmp.y],
        gamma: [c[0].force_magnitude, c[1].force_magnitude],
        beta: [c[0].normal_angle, c[1].normal_angle],
        gap: [c[0].gap, c[1].gap],
        fs_norm,
        tau_norm: torque.tau.norm(),
        iters: plan.decision.iterations,
        cost: plan.decision.cost,
        slack: plan.decision.slack,
        dist: (plan.object_position - base_center(scene)).norm(),
    };
    Ok(SimulatedStep {
        plan,
        active_contacts: active,
        torque,
        record,
    })
}

/// Plans the whole path and evaluates torques for every planned step.
/// Planning failures are reported in [`Simulation::failure`] together with
/// the steps completed before it.
pub fn simulate(prepared: &PreparedScenario) -> Result<Simulation> {
    let (plans, failure) = match plan_path(
        &prepared.scene,
        &prepared.problem,
        &prepared.initial_theta,
        &prepared.waypoints,
        &prepared.settings,
    ) {
        Ok(plans) => (plans, None),
        Err(PathFailure { completed, error }) => (completed, Some(error)),
    };
    let steps = plans
        .into_iter()
        .map(|p| simulate_step(&prepared.scene, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(Simulation { steps, failure })
}

/// Link polylines of both arms for a joint configuration, base first.
pub fn arm_polylines(scene: &Scene, theta: &crate::scene::JointVector) -> Result<[Vec<Vector2<f64>>; 2]> {
    let arms = scene.arms_at(theta);
    let line = |i: usize| -> Result<Vec<Vector2<f64>>> {
        let pose = forward_kinematics(&arms[i])?;
        Ok((0..=crate::kinematics::NUM_LINKS).map(|j| pose.joint_origin(j)).collect())
    };
    Ok([line(0)?, line(1)?])
}
