//! Per-waypoint contact-implicit planning.
//!
//! Each waypoint solves
//!
//! ```text
//!     minimize    w1 |p_o^d - p_o|^2 + w2 |dtheta|^2 + w3 s
//!     subject to  g(theta) = 0
//!                 gamma >= 0, s >= 0
//!                 s - gamma^T phi(theta) >= 0
//!                 r_s - |p_R^d - p_R| >= 0
//!                 r_o - |p_o^d - p_o| >= 0
//!                 phi(theta) >= 0
//! ```
//!
//! with `theta = theta_k + dtheta`. Every term is evaluated at the post-step
//! configuration. The last row keeps links from passing through port edges,
//! which the slack row alone would reward.

use nalgebra::{DMatrix, DVector, Vector2};

use crate::contact::{select_active_candidates, ContactCandidate, ContactState};
use crate::error::{Error, Result};
use crate::scene::{JointVector, Scene};
use crate::sqp::{self, Nlp, NlpEval, SolverSettings};
use crate::statics::ZmpResult;
use crate::torque::NUM_JOINTS;

/// Number of decision variables: joint steps, two force magnitudes, slack.
pub const NUM_VARS: usize = NUM_JOINTS + 3;
pub const NUM_EQUALITIES: usize = 2;
pub const NUM_INEQUALITIES: usize = 8;

/// Largest slack accepted at a converged step.
pub const SLACK_LIMIT: f64 = 1e-4;

/// Indices of the inequality rows.
pub mod rows {
    pub const GAMMA: [usize; 2] = [0, 1];
    pub const SLACK: usize = 2;
    pub const COMPLEMENTARITY: usize = 3;
    pub const SAFE_CIRCLE: usize = 4;
    pub const OBJECT: usize = 5;
    pub const GAP: [usize; 2] = [6, 7];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanningProblem {
    /// `(w1, w2, w3)`: object tracking, joint motion, slack.
    pub weights: [f64; 3],
    pub safe_radius: f64,
    pub object_radius: f64,
    pub desired_object: Vector2<f64>,
    /// Desired ZMP, the support polygon center.
    pub sp_center: Vector2<f64>,
}

impl PlanningProblem {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("cost weights must be > 0"));
        }
        if !(self.safe_radius.is_finite() && self.safe_radius > 0.0) {
            return Err(Error::invalid("safe radius must be > 0"));
        }
        if !(self.object_radius.is_finite() && self.object_radius > 0.0) {
            return Err(Error::invalid("object radius must be > 0"));
        }
        let finite = self.desired_object.iter().chain(self.sp_center.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("desired object position and sp center must be finite"));
        }
        Ok(())
    }

    pub fn with_target(&self, desired_object: Vector2<f64>) -> Self {
        PlanningProblem { desired_object, ..*self }
    }
}

/// Configuration before the step and the support candidates chosen for it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerState {
    pub theta: JointVector,
    pub candidates: [ContactCandidate; 2],
}

impl PlannerState {
    /// Picks the nearer port edge per arm at `theta`.
    pub fn new(scene: &Scene, theta: JointVector) -> Result<Self> {
        let arms = scene.arms_at(&theta);
        let candidates = select_active_candidates(&arms, &scene.port_edges, scene.contact_link, scene.plane_height)?;
        Ok(PlannerState { theta, candidates })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanDecision {
    pub delta_theta: JointVector,
    pub gamma: Vector2<f64>,
    pub slack: f64,
    pub cost: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl PlanDecision {
    /// All-zero decision, the default starting point.
    pub fn zero() -> Self {
        PlanDecision {
            delta_theta: JointVector::zeros(),
            gamma: Vector2::zeros(),
            slack: 0.0,
            cost: 0.0,
            kkt_residual: f64::INFINITY,
            iterations: 0,
            converged: false,
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut x = DVector::zeros(NUM_VARS);
        x.rows_mut(0, NUM_JOINTS).copy_from(&self.delta_theta);
        x[NUM_JOINTS] = self.gamma[0];
        x[NUM_JOINTS + 1] = self.gamma[1];
        x[NUM_JOINTS + 2] = self.slack;
        x
    }

    pub fn from_vector(x: &DVector<f64>) -> Result<Self> {
        if x.len() != NUM_VARS {
            return Err(Error::invalid(format!("decision vector has {} entries, expected {NUM_VARS}", x.len())));
        }
        Ok(PlanDecision {
            delta_theta: JointVector::from_iterator(x.rows(0, NUM_JOINTS).iter().copied()),
            gamma: Vector2::new(x[NUM_JOINTS], x[NUM_JOINTS + 1]),
            slack: x[NUM_JOINTS + 2],
            ..PlanDecision::zero()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintValues {
    pub equalities: Vector2<f64>,
    /// In the order given by [`rows`].
    pub inequalities: DVector<f64>,
}

/// The per-waypoint NLP in the solver's generic form.
pub struct WaypointNlp<'a> {
    pub scene: &'a Scene,
    pub problem: &'a PlanningProblem,
    pub state: &'a PlannerState,
}

impl Nlp for WaypointNlp<'_> {
    fn num_vars(&self) -> usize {
        NUM_VARS
    }

    fn evaluate(&self, x: &DVector<f64>) -> Result<NlpEval> {
        evaluate_nlp(self.scene, self.problem, self.state, &PlanDecision::from_vector(x)?)
    }

    fn initial_hessian_diag(&self) -> DVector<f64> {
        let mut d = DVector::from_element(NUM_VARS, 2.0 * self.problem.weights[1]);
        d[NUM_JOINTS] = 1e-4;
        d[NUM_JOINTS + 1] = 1e-4;
        d[NUM_JOINTS + 2] = 1.0;
        d
    }
}

fn norm_row(value: f64, v: &Vector2<f64>, dv: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let n = v.norm();
    let grad = if n > 0.0 {
        -(DMatrix::from_row_slice(1, 2, &[v.x, v.y]) * dv) / n
    } else {
        DMatrix::zeros(1, dv.ncols())
    };
    (value - n, grad)
}

/// Cost, constraints and their derivatives in the variables
/// `(dtheta, gamma, s)`.
pub fn evaluate_nlp(
    scene: &Scene,
    problem: &PlanningProblem,
    state: &PlannerState,
    decision: &PlanDecision,
) -> Result<NlpEval> {
    let [w1, w2, w3] = problem.weights;
    let theta = state.theta + decision.delta_theta;
    let poses = scene.poses(&theta)?;
    let n = NUM_VARS;
    let ig = NUM_JOINTS;
    let is = NUM_JOINTS + 2;

    let p_o = scene.object_position(&poses);
    let e_o = problem.desired_object - p_o;
    let j_o = scene.object_jacobian(&poses);
    let mut grad = DVector::zeros(n);
    let g_theta = -(j_o.transpose() * e_o) * (2.0 * w1) + decision.delta_theta * (2.0 * w2);
    grad.rows_mut(0, NUM_JOINTS).copy_from(&g_theta);
    grad[is] = w3;
    let f = w1 * e_o.norm_squared() + w2 * decision.delta_theta.norm_squared() + w3 * decision.slack;

    let c_eq = scene.grasp_residual(&poses);
    let mut j_eq = DMatrix::zeros(NUM_EQUALITIES, n);
    j_eq.view_mut((0, 0), (2, NUM_JOINTS)).copy_from(&scene.grasp_jacobian(&poses));

    let lin = scene.zmp_linearization(&poses, &state.candidates, &decision.gamma)?;
    let phi = Vector2::new(lin.contacts[0].gap, lin.contacts[1].gap);
    let mut c_in = DVector::zeros(NUM_INEQUALITIES);
    let mut j_in = DMatrix::zeros(NUM_INEQUALITIES, n);
    for k in 0..2 {
        c_in[rows::GAMMA[k]] = decision.gamma[k];
        j_in[(rows::GAMMA[k], ig + k)] = 1.0;
    }
    c_in[rows::SLACK] = decision.slack;
    j_in[(rows::SLACK, is)] = 1.0;

    c_in[rows::COMPLEMENTARITY] = decision.slack - decision.gamma.dot(&phi);
    j_in[(rows::COMPLEMENTARITY, is)] = 1.0;
    for k in 0..2 {
        j_in[(rows::COMPLEMENTARITY, ig + k)] = -phi[k];
        for j in 0..NUM_JOINTS {
            j_in[(rows::COMPLEMENTARITY, j)] -= decision.gamma[k] * lin.gap_grads[k][j];
        }
    }

    let mut dzmp = DMatrix::zeros(2, n);
    dzmp.view_mut((0, 0), (2, NUM_JOINTS)).copy_from(&lin.d_theta);
    dzmp.view_mut((0, ig), (2, 2)).copy_from(&lin.d_gamma);
    let (v, g) = norm_row(problem.safe_radius, &(lin.zmp - problem.sp_center), &dzmp);
    c_in[rows::SAFE_CIRCLE] = v;
    j_in.set_row(rows::SAFE_CIRCLE, &g.row(0));

    let mut dobj = DMatrix::zeros(2, n);
    dobj.view_mut((0, 0), (2, NUM_JOINTS)).copy_from(&(-j_o));
    let (v, g) = norm_row(problem.object_radius, &e_o, &dobj);
    c_in[rows::OBJECT] = v;
    j_in.set_row(rows::OBJECT, &g.row(0));

    for k in 0..2 {
        c_in[rows::GAP[k]] = phi[k];
        for j in 0..NUM_JOINTS {
            j_in[(rows::GAP[k], j)] = lin.gap_grads[k][j];
        }
    }

    Ok(NlpEval {
        f,
        grad,
        c_eq: DVector::from_column_slice(c_eq.as_slice()),
        j_eq,
        c_in,
        j_in,
    })
}

pub fn evaluate_cost(scene: &Scene, problem: &PlanningProblem, state: &PlannerState, decision: &PlanDecision) -> Result<f64> {
    let theta = state.theta + decision.delta_theta;
    let poses = scene.poses(&theta)?;
    let [w1, w2, w3] = problem.weights;
    let e_o = problem.desired_object - scene.object_position(&poses);
    Ok(w1 * e_o.norm_squared() + w2 * decision.delta_theta.norm_squared() + w3 * decision.slack)
}

pub fn evaluate_constraints(
    scene: &Scene,
    problem: &PlanningProblem,
    state: &PlannerState,
    decision: &PlanDecision,
) -> Result<ConstraintValues> {
    let ev = evaluate_nlp(scene, problem, state, decision)?;
    Ok(ConstraintValues {
        equalities: Vector2::new(ev.c_eq[0], ev.c_eq[1]),
        inequalities: ev.c_in,
    })
}

/// Solves the waypoint NLP from `initial`.
pub fn solve_decision(
    scene: &Scene,
    problem: &PlanningProblem,
    state: &PlannerState,
    settings: &SolverSettings,
    initial: &PlanDecision,
) -> Result<PlanDecision> {
    problem.validate()?;
    let nlp = WaypointNlp { scene, problem, state };
    let r = sqp::solve_sqp(&nlp, &initial.to_vector(), settings)?;
    if !r.converged {
        log::debug!("waypoint solve stopped: {} (kkt {:.3e}, violation {:.3e})", r.message, r.kkt_residual, r.constraint_violation);
    }
    let mut d = PlanDecision::from_vector(&r.x)?;
    d.cost = r.f;
    d.kkt_residual = r.kkt_residual;
    d.iterations = r.iterations;
    d.converged = r.converged;
    Ok(d)
}

/// Max normalized discrepancy between analytic and central-difference
/// derivatives of the cost and every constraint row.
pub fn gradient_check(
    scene: &Scene,
    problem: &PlanningProblem,
    state: &PlannerState,
    decision: &PlanDecision,
    step: f64,
) -> Result<f64> {
    let nlp = WaypointNlp { scene, problem, state };
    sqp::gradient_check(&nlp, &decision.to_vector(), step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanStep {
    pub index: usize,
    pub waypoint: Vector2<f64>,
    pub decision: PlanDecision,
    pub theta: JointVector,
    /// Both candidates with their planned force magnitudes (zero when open).
    pub contacts: [ContactState; 2],
    pub object_position: Vector2<f64>,
    pub zmp: ZmpResult,
    pub fzmp: ZmpResult,
}

/// Fails when a hand target for `waypoint` lies beyond the arm's reach plus
/// the allowed object deviation.
pub fn check_reachable(scene: &Scene, problem: &PlanningProblem, index: usize, waypoint: &Vector2<f64>) -> Result<()> {
    let half = Vector2::new(scene.bar_length / 2.0, 0.0);
    let targets = [waypoint - half, waypoint + half];
    for (arm, target) in scene.arms.iter().zip(targets) {
        if (target - arm.base_position).norm() > arm.total_reach() + problem.object_radius {
            return Err(Error::Unreachable {
                index,
                x: waypoint.x,
                y: waypoint.y,
            });
        }
    }
    Ok(())
}

fn step_failure(index: usize, reason: impl Into<String>) -> Error {
    Error::StepFailure {
        index,
        reason: reason.into(),
    }
}

/// Plans one waypoint from `theta` with a zero-initialized decision.
pub fn plan_waypoint(
    scene: &Scene,
    problem: &PlanningProblem,
    theta: &JointVector,
    index: usize,
    waypoint: Vector2<f64>,
    settings: &SolverSettings,
) -> Result<PlanStep> {
    check_reachable(scene, problem, index, &waypoint)?;
    let problem = problem.with_target(waypoint);
    let state = PlannerState::new(scene, *theta)?;
    let mut decision = solve_decision(scene, &problem, &state, settings, &PlanDecision::zero())
        .map_err(|e| step_failure(index, e.to_string()))?;
    if !decision.converged {
        return Err(step_failure(
            index,
            format!(
                "solver did not converge in {} iterations (kkt residual {:.3e})",
                decision.iterations, decision.kkt_residual
            ),
        ));
    }
    if decision.slack > SLACK_LIMIT {
        return Err(step_failure(
            index,
            format!("complementarity slack {:.3e} above {SLACK_LIMIT:e}", decision.slack),
        ));
    }
    // Round-off from the solver may leave tiny negative values.
    decision.gamma = decision.gamma.map(|g| g.max(0.0));
    decision.slack = decision.slack.max(0.0);

    let theta_next = theta + decision.delta_theta;
    let poses = scene.poses(&theta_next)?;
    let lin = scene.zmp_linearization(&poses, &state.candidates, &decision.gamma)?;
    // The complementarity row holds to tol_con; lift s so it holds exactly.
    let gp: f64 = lin.contacts.iter().zip(decision.gamma.iter()).map(|(c, g)| g * c.gap).sum();
    if gp > decision.slack {
        decision.cost += problem.weights[2] * (gp - decision.slack);
        decision.slack = gp;
    }
    if decision.slack > SLACK_LIMIT {
        return Err(step_failure(
            index,
            format!("complementarity slack {:.3e} above {SLACK_LIMIT:e}", decision.slack),
        ));
    }
    let (zmp, fzmp) = scene.balance(&poses, &lin.contacts)?;
    Ok(PlanStep {
        index,
        waypoint,
        decision,
        theta: theta_next,
        contacts: lin.contacts,
        object_position: scene.object_position(&poses),
        zmp,
        fzmp,
    })
}

/// A path that stopped early: the steps planned so far and the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct PathFailure {
    pub completed: Vec<PlanStep>,
    pub error: Error,
}

impl std::fmt::Display for PathFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({} steps completed)", self.error, self.completed.len())
    }
}

impl std::error::Error for PathFailure {}

/// Plans every waypoint in order, each warm-started from the previous configuration.
pub fn plan_path(
    scene: &Scene,
    problem: &PlanningProblem,
    initial_theta: &JointVector,
    waypoints: &[Vector2<f64>],
    settings: &SolverSettings,
) -> std::result::Result<Vec<PlanStep>, PathFailure> {
    let mut steps: Vec<PlanStep> = Vec::with_capacity(waypoints.len());
    let mut theta = *initial_theta;
    for (index, wp) in waypoints.iter().enumerate() {
        match plan_waypoint(scene, problem, &theta, index, *wp, settings) {
            Ok(step) => {
                log::info!(
                    "step {index}: object ({:.4}, {:.4}) zmp ({:.4}, {:.4}) gamma ({:.3}, {:.3}) in {} iterations",
                    step.object_position.x,
                    step.object_position.y,
                    step.zmp.zmp.x,
                    step.zmp.zmp.y,
                    step.decision.gamma[0],
                    step.decision.gamma[1],
                    step.decision.iterations
                );
                theta = step.theta;
                steps.push(step);
            }
            Err(error) => {
                return Err(PathFailure {
                    completed: steps,
                    error,
                })
            }
        }
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{default_scenario, PreparedScenario};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn prepared() -> PreparedScenario {
        default_scenario().prepare().unwrap()
    }

    fn start(p: &PreparedScenario) -> (PlannerState, PlanningProblem) {
        let state = PlannerState::new(&p.scene, p.initial_theta).unwrap();
        let poses = p.scene.poses(&p.initial_theta).unwrap();
        let problem = p.problem.with_target(p.scene.object_position(&poses));
        (state, problem)
    }

    #[test]
    fn cost_is_zero_at_target() {
        let p = prepared();
        let (state, problem) = start(&p);
        let f = evaluate_cost(&p.scene, &problem, &state, &PlanDecision::zero()).unwrap();
        assert!(f < 1e-20);
    }

    #[test]
    fn cost_of_object_deviation() {
        let p = prepared();
        let (state, problem) = start(&p);
        let problem = problem.with_target(problem.desired_object + Vector2::new(0.06, 0.08));
        let f = evaluate_cost(&p.scene, &problem, &state, &PlanDecision::zero()).unwrap();
        assert_relative_eq!(f, 10.0, epsilon = 1e-9);
    }

    #[test]
    fn cost_of_slack() {
        let p = prepared();
        let (state, problem) = start(&p);
        let d = PlanDecision {
            slack: 1e-4,
            ..PlanDecision::zero()
        };
        let f = evaluate_cost(&p.scene, &problem, &state, &d).unwrap();
        assert_relative_eq!(f, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn initial_grasp_is_feasible() {
        let p = prepared();
        let (state, problem) = start(&p);
        let c = evaluate_constraints(&p.scene, &problem, &state, &PlanDecision::zero()).unwrap();
        assert!(c.equalities.amax() < 1e-9, "{:?}", c.equalities);
        assert!(c.inequalities.min() >= 0.0, "{:?}", c.inequalities);
    }

    #[test]
    fn negative_force_violates_its_row() {
        let p = prepared();
        let (state, problem) = start(&p);
        let d = PlanDecision {
            gamma: Vector2::new(0.5, -2.0),
            ..PlanDecision::zero()
        };
        let c = evaluate_constraints(&p.scene, &problem, &state, &d).unwrap();
        assert!(c.inequalities[rows::GAMMA[1]] < 0.0);
        assert!(c.inequalities[rows::GAMMA[0]] > 0.0);
    }

    #[test]
    fn zmp_at_center_fills_the_circle_row() {
        let p = prepared();
        let (state, problem) = start(&p);
        let poses = p.scene.poses(&state.theta).unwrap();
        let (zmp, _) = p.scene.balance(&poses, &[]).unwrap();
        let problem = PlanningProblem {
            sp_center: zmp.zmp,
            ..problem
        };
        let c = evaluate_constraints(&p.scene, &problem, &state, &PlanDecision::zero()).unwrap();
        assert_relative_eq!(c.inequalities[rows::SAFE_CIRCLE], problem.safe_radius, epsilon = 1e-12);
    }

    #[test]
    fn decision_vector_round_trip() {
        let d = PlanDecision {
            delta_theta: JointVector::from_fn(|i, _| i as f64 * 0.1),
            gamma: Vector2::new(3.0, 4.0),
            slack: 1e-5,
            ..PlanDecision::zero()
        };
        let back = PlanDecision::from_vector(&d.to_vector()).unwrap();
        assert_eq!(back.delta_theta, d.delta_theta);
        assert_eq!(back.gamma, d.gamma);
        assert_eq!(back.slack, d.slack);
        assert!(PlanDecision::from_vector(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn waypoint_at_object_needs_no_motion() {
        let p = prepared();
        let (_, problem) = start(&p);
        let step = plan_waypoint(&p.scene, &p.problem, &p.initial_theta, 0, problem.desired_object, &p.settings).unwrap();
        assert!(step.decision.converged);
        assert!(step.decision.delta_theta.norm() <= 1e-4);
        assert!(step.decision.cost <= p.problem.weights[2] * step.decision.slack + 1e-8);
    }

    #[test]
    fn single_waypoint_path() {
        let p = prepared();
        let steps = plan_path(&p.scene, &p.problem, &p.initial_theta, &p.waypoints[..1], &p.settings).unwrap();
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].index, 0);
    }

    #[test]
    fn unreachable_waypoint_names_its_index() {
        let p = prepared();
        let mut wps = p.waypoints[..2].to_vec();
        wps.push(Vector2::new(0.0, 3.0));
        let err = plan_path(&p.scene, &p.problem, &p.initial_theta, &wps, &p.settings).unwrap_err();
        assert_eq!(err.completed.len(), 2);
        assert!(matches!(err.error, Error::Unreachable { index: 2, .. }));
        assert!(err.error.to_string().contains('2'));
    }

    #[test]
    fn invalid_problem_is_rejected() {
        let p = prepared();
        let bad = PlanningProblem {
            object_radius: 0.0,
            ..p.problem
        };
        assert!(bad.validate().is_err());
        let (state, _) = start(&p);
        assert!(solve_decision(&p.scene, &bad, &state, &p.settings, &PlanDecision::zero()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn analytic_derivatives_match_differences(
            dq in prop::collection::vec(-0.05f64..0.05, 8),
            gamma in prop::collection::vec(0.0f64..50.0, 2),
            slack in 0.0f64..1e-4,
        ) {
            let p = prepared();
            let (state, problem) = start(&p);
            let problem = problem.with_target(problem.desired_object + Vector2::new(0.0, 0.05));
            let d = PlanDecision {
                delta_theta: JointVector::from_iterator(dq),
                gamma: Vector2::new(gamma[0], gamma[1]),
                slack,
                ..PlanDecision::zero()
            };
            let err = gradient_check(&p.scene, &problem, &state, &d, 1e-6).unwrap();
            prop_assert!(err <= 1e-5, "gradient error {err:e}");
        }
    }
}
