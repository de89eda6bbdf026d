//! Experiment description: geometry, masses, balance limits, task, cost
//! weights and solver settings, read from a TOML file.
//!
//! Every key is optional and falls back to the built-in default scenario.
//! Unknown keys are rejected. All quantities are SI (m, kg, N, rad).
//!
//! ```toml
//! support_force_scale = 1.0
//!
//! [robot]
//! mass = 54.0
//! link_mass = 1.75
//! torso_com = [0.0, -0.1, 0.5]
//! arm_bases = [[-0.2, 0.0], [0.2, 0.0]]
//! link_lengths = [0.3, 0.3, 0.25, 0.15]
//! link_radius = 0.04
//! contact_link = 1
//! joint_seed = [[1.396, 0.349, 1.6, 2.672], [1.745, -0.349, -1.6, -2.672]]
//!
//! [glovebox]
//! plane_height = 0.9
//! port_edges = [[[-0.325, 0.3], [-0.075, 0.3]], [[0.075, 0.3], [0.325, 0.3]]]
//!
//! [object]
//! bar_length = 0.6
//! mass = 12.0
//! initial_center = [0.0, 0.5]
//!
//! [balance]
//! sp_polygon = [[-0.2, -0.15], [0.2, -0.15], [0.2, 0.15], [-0.2, 0.15]]
//! sp_center = [0.0, 0.0]
//! safe_radius = 0.15
//! object_radius = 0.1
//!
//! [task]
//! direction = [0.0, 1.0]
//! length = 0.4
//! waypoints = 9
//! # desired_wrench defaults to [0, 10, -mass * 9.81, 0, 0, 0]
//!
//! [weights]
//! object = 1e3
//! motion = 1e2
//! slack = 1e6
//!
//! [solver]
//! tol_kkt = 1e-6
//! tol_con = 1e-6
//! max_iterations = 200
//! armijo = 1e-4
//! backtrack = 0.5
//! fd_step = 1e-6
//! penalty_growth = 2.0
//! ```

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::contact::ContactCandidate;
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, PlanarArm, NUM_LINKS};
use crate::planner::PlanningProblem;
use crate::scene::{JointVector, Scene};
use crate::sqp::{solve_sqp, Nlp, NlpEval, SolverSettings};
use crate::statics::{RobotStaticsState, STANDARD_GRAVITY};
use crate::torque::NUM_JOINTS;

/// Directory searched for relative scenario paths when set.
pub const SCENARIO_DIR_ENV: &str = "GLOVEBOX_SCENARIO_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotConfig {
    pub mass: f64,
    pub link_mass: f64,
    pub torso_com: [f64; 3],
    pub arm_bases: [[f64; 2]; 2],
    pub link_lengths: [f64; NUM_LINKS],
    pub link_radius: f64,
    pub contact_link: usize,
    /// Starting guess for the initial grasp configuration.
    pub joint_seed: [[f64; NUM_LINKS]; 2],
}

impl Default for RobotConfig {
    fn default() -> Self {
        RobotConfig {
            mass: 54.0,
            link_mass: 1.75,
            torso_com: [0.0, -0.1, 0.5],
            arm_bases: [[-0.2, 0.0], [0.2, 0.0]],
            link_lengths: [0.3, 0.3, 0.25, 0.15],
            link_radius: 0.04,
            contact_link: 1,
            joint_seed: [[1.396, 0.349, 1.6, 2.672], [1.745, -0.349, -1.6, -2.672]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GloveboxConfig {
    pub plane_height: f64,
    /// Two port edge points per arm.
    pub port_edges: [[[f64; 2]; 2]; 2],
}

impl Default for GloveboxConfig {
    fn default() -> Self {
        GloveboxConfig {
            plane_height: 0.9,
            port_edges: [[[-0.325, 0.3], [-0.075, 0.3]], [[0.075, 0.3], [0.325, 0.3]]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectConfig {
    pub bar_length: f64,
    pub mass: f64,
    pub initial_center: [f64; 2],
}

impl Default for ObjectConfig {
    fn default() -> Self {
        ObjectConfig {
            bar_length: 0.6,
            mass: 12.0,
            initial_center: [0.0, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    /// Convex, counter-clockwise.
    pub sp_polygon: Vec<[f64; 2]>,
    pub sp_center: [f64; 2],
    pub safe_radius: f64,
    pub object_radius: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            sp_polygon: vec![[-0.2, -0.15], [0.2, -0.15], [0.2, 0.15], [-0.2, 0.15]],
            sp_center: [0.0, 0.0],
            safe_radius: 0.15,
            object_radius: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub direction: [f64; 2],
    pub length: f64,
    pub waypoints: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub desired_wrench: Option<[f64; 6]>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            direction: [0.0, 1.0],
            length: 0.4,
            waypoints: 9,
            desired_wrench: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    pub object: f64,
    pub motion: f64,
    pub slack: f64,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        WeightsConfig {
            object: 1e3,
            motion: 1e2,
            slack: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol_kkt: f64,
    pub tol_con: f64,
    pub max_iterations: usize,
    pub armijo: f64,
    pub backtrack: f64,
    pub fd_step: f64,
    pub penalty_growth: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = SolverSettings::default();
        SolverConfig {
            tol_kkt: s.tol_kkt,
            tol_con: s.tol_con,
            max_iterations: s.max_iterations,
            armijo: s.armijo,
            backtrack: s.backtrack,
            fd_step: s.fd_step,
            penalty_growth: s.penalty_growth,
        }
    }
}

impl SolverConfig {
    pub fn settings(&self) -> SolverSettings {
        SolverSettings {
            tol_kkt: self.tol_kkt,
            tol_con: self.tol_con,
            max_iterations: self.max_iterations,
            armijo: self.armijo,
            backtrack: self.backtrack,
            fd_step: self.fd_step,
            penalty_growth: self.penalty_growth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Factor on the support force `gamma (cos beta, sin beta, 0)`.
    pub support_force_scale: f64,
    pub robot: RobotConfig,
    pub glovebox: GloveboxConfig,
    pub object: ObjectConfig,
    pub balance: BalanceConfig,
    pub task: TaskConfig,
    pub weights: WeightsConfig,
    pub solver: SolverConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            support_force_scale: 1.0,
            robot: RobotConfig::default(),
            glovebox: GloveboxConfig::default(),
            object: ObjectConfig::default(),
            balance: BalanceConfig::default(),
            task: TaskConfig::default(),
            weights: WeightsConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

pub fn default_scenario() -> ScenarioConfig {
    ScenarioConfig::default()
}

/// Resolves `path` against the scenario directory variable when it is
/// relative and not found as given.
pub fn resolve_scenario_path(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(dir) = std::env::var_os(SCENARIO_DIR_ENV) {
            return Path::new(&dir).join(path);
        }
    }
    path.to_path_buf()
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let path = resolve_scenario_path(path.as_ref());
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_scenario(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_scenario(text: &str) -> Result<ScenarioConfig> {
    let config: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string().trim_end().to_string()))?;
    config.validate()?;
    Ok(config)
}

fn check(ok: bool, msg: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(msg.into()))
    }
}

fn positive(value: f64, key: &str) -> Result<()> {
    check(value.is_finite() && value > 0.0, format!("{key} must be > 0"))
}

fn finite(values: &[f64], key: &str) -> Result<()> {
    check(values.iter().all(|v| v.is_finite()), format!("{key} must be finite"))
}

impl ScenarioConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        positive(self.support_force_scale, "support_force_scale")?;
        let r = &self.robot;
        positive(r.mass, "robot.mass")?;
        check(r.link_mass.is_finite() && r.link_mass >= 0.0, "robot.link_mass must be >= 0")?;
        check(
            2.0 * NUM_LINKS as f64 * r.link_mass < r.mass,
            "robot.link_mass leaves no torso mass (8 links must weigh less than robot.mass)",
        )?;
        finite(&r.torso_com, "robot.torso_com")?;
        finite(r.arm_bases.as_flattened(), "robot.arm_bases")?;
        for l in r.link_lengths {
            positive(l, "robot.link_lengths")?;
        }
        positive(r.link_radius, "robot.link_radius")?;
        check(r.contact_link < NUM_LINKS, format!("robot.contact_link must be < {NUM_LINKS}"))?;
        finite(r.joint_seed.as_flattened(), "robot.joint_seed")?;

        finite(&[self.glovebox.plane_height], "glovebox.plane_height")?;
        finite(self.glovebox.port_edges.as_flattened().as_flattened(), "glovebox.port_edges")?;

        positive(self.object.bar_length, "object.bar_length")?;
        positive(self.object.mass, "object.mass")?;
        finite(&self.object.initial_center, "object.initial_center")?;

        let b = &self.balance;
        positive(b.safe_radius, "balance.safe_radius")?;
        positive(b.object_radius, "balance.object_radius")?;
        finite(&b.sp_center, "balance.sp_center")?;
        finite(b.sp_polygon.as_flattened(), "balance.sp_polygon")?;
        self.statics_state().map_err(|e| match e {
            Error::InvalidInput(msg) => Error::Validation(format!("balance: {msg}")),
            other => other,
        })?;

        let t = &self.task;
        finite(&t.direction, "task.direction")?;
        check(Vector2::from(t.direction).norm() > 0.0, "task.direction must be nonzero")?;
        check(t.length.is_finite() && t.length >= 0.0, "task.length must be >= 0")?;
        check(t.waypoints >= 1, "task.waypoints must be >= 1")?;
        if let Some(w) = &t.desired_wrench {
            finite(w, "task.desired_wrench")?;
        }

        positive(self.weights.object, "weights.object")?;
        positive(self.weights.motion, "weights.motion")?;
        positive(self.weights.slack, "weights.slack")?;

        let s = &self.solver;
        positive(s.tol_kkt, "solver.tol_kkt")?;
        positive(s.tol_con, "solver.tol_con")?;
        check(s.max_iterations >= 1, "solver.max_iterations must be >= 1")?;
        positive(s.fd_step, "solver.fd_step")?;
        check(s.armijo > 0.0 && s.armijo < 0.5, "solver.armijo must be in (0, 0.5)")?;
        check(s.backtrack > 0.0 && s.backtrack < 1.0, "solver.backtrack must be in (0, 1)")?;
        check(s.penalty_growth > 1.0, "solver.penalty_growth must be > 1")?;

        // Both hands must reach their end of the bar at the start.
        let c = Vector2::from(self.object.initial_center);
        let half = Vector2::new(self.object.bar_length / 2.0, 0.0);
        let reach: f64 = r.link_lengths.iter().sum();
        for (i, target) in [c - half, c + half].into_iter().enumerate() {
            let d = (target - Vector2::from(r.arm_bases[i])).norm();
            check(
                d <= reach,
                format!("object.initial_center: bar end of arm {} is {d:.4} m from its base, beyond reach {reach:.4} m", i + 1),
            )?;
        }
        Ok(())
    }

    pub fn desired_wrench(&self) -> SVector<f64, 6> {
        let w = self.task.desired_wrench.unwrap_or([0.0, 10.0, -self.object.mass * STANDARD_GRAVITY, 0.0, 0.0, 0.0]);
        SVector::from(w)
    }

    fn statics_state(&self) -> Result<RobotStaticsState> {
        RobotStaticsState::new(
            self.robot.mass,
            Vector3::new(0.0, 0.0, -STANDARD_GRAVITY),
            Vector3::from(self.robot.torso_com),
            Vector2::from(self.balance.sp_center),
            self.balance.sp_polygon.iter().map(|p| Vector2::from(*p)).collect(),
            self.balance.safe_radius,
        )
    }

    pub fn scene(&self) -> Result<Scene> {
        let r = &self.robot;
        let arm = |i: usize| PlanarArm::new(Vector2::from(r.arm_bases[i]), r.link_lengths, r.link_radius, r.joint_seed[i]);
        let edges = self.glovebox.port_edges.map(|arm| arm.map(Vector2::from));
        Scene::new(
            [arm(0)?, arm(1)?],
            self.glovebox.plane_height,
            edges,
            r.contact_link,
            r.link_mass,
            Vector3::from(r.torso_com),
            self.statics_state()?,
            self.object.bar_length,
            self.desired_wrench(),
            self.support_force_scale,
        )
    }

    pub fn problem(&self) -> PlanningProblem {
        PlanningProblem {
            weights: [self.weights.object, self.weights.motion, self.weights.slack],
            safe_radius: self.balance.safe_radius,
            object_radius: self.balance.object_radius,
            desired_object: Vector2::from(self.object.initial_center),
            sp_center: Vector2::from(self.balance.sp_center),
        }
    }

    /// Equally spaced points from the initial center along the task
    /// direction; the first one is the start.
    pub fn waypoints(&self) -> Vec<Vector2<f64>> {
        let start = Vector2::from(self.object.initial_center);
        let dir = Vector2::from(self.task.direction).normalize();
        let n = self.task.waypoints;
        if n == 1 {
            return vec![start];
        }
        let spacing = self.task.length / (n - 1) as f64;
        (0..n).map(|k| start + dir * (spacing * k as f64)).collect()
    }

    /// Validated scene, planning problem, waypoints and the initial grasp.
    pub fn prepare(&self) -> Result<PreparedScenario> {
        self.validate()?;
        let scene = self.scene()?;
        let seed = JointVector::from_iterator(self.robot.joint_seed.iter().flatten().copied());
        let initial_theta = initial_grasp(&scene, &Vector2::from(self.object.initial_center), &seed)?;
        Ok(PreparedScenario {
            scene,
            problem: self.problem(),
            waypoints: self.waypoints(),
            initial_theta,
            settings: self.solver.settings(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedScenario {
    pub scene: Scene,
    pub problem: PlanningProblem,
    pub waypoints: Vec<Vector2<f64>>,
    pub initial_theta: JointVector,
    pub settings: SolverSettings,
}

/// Smallest gap between a contact link and its port edges in the initial grasp.
pub const INITIAL_PORT_CLEARANCE: f64 = 0.01;

/// Joint angles closest to `seed` with both hands on the bar ends and the
/// contact links clear of the port edges.
struct GraspIk<'a> {
    scene: &'a Scene,
    center: Vector2<f64>,
    seed: JointVector,
}

impl Nlp for GraspIk<'_> {
    fn num_vars(&self) -> usize {
        NUM_JOINTS
    }

    fn evaluate(&self, x: &DVector<f64>) -> Result<NlpEval> {
        let theta = JointVector::from_iterator(x.iter().copied());
        let poses = self.scene.poses(&theta)?;
        let d = theta - self.seed;
        let half = Vector2::new(self.scene.bar_length / 2.0, 0.0);
        let r1 = poses[0].end_effector - (self.center - half);
        let r2 = poses[1].end_effector - (self.center + half);
        let g = self.scene.grasp_jacobian(&poses);
        let o = self.scene.object_jacobian(&poses);
        // ee_1 = p_o + g/2 and ee_2 = p_o - g/2 up to constants.
        let j1 = o + g * 0.5;
        let j2 = o - g * 0.5;
        let mut j_eq = DMatrix::zeros(4, NUM_JOINTS);
        j_eq.view_mut((0, 0), (2, NUM_JOINTS)).copy_from(&j1);
        j_eq.view_mut((2, 0), (2, NUM_JOINTS)).copy_from(&j2);
        let mut c_in = DVector::zeros(4);
        let mut j_in = DMatrix::zeros(4, NUM_JOINTS);
        for (k, (arm, edge)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let candidate = ContactCandidate {
                arm_index: arm,
                link_index: self.scene.contact_link,
                edge_point: self.scene.port_edges[arm][edge],
                plane_height: self.scene.plane_height,
            };
            let geom = self.scene.contact_geometry(&poses, &candidate)?;
            c_in[k] = geom.state.gap - INITIAL_PORT_CLEARANCE;
            j_in.set_row(k, &geom.gap_grad);
        }
        Ok(NlpEval {
            f: d.norm_squared(),
            grad: DVector::from_iterator(NUM_JOINTS, (d * 2.0).iter().copied()),
            c_eq: DVector::from_column_slice(&[r1.x, r1.y, r2.x, r2.y]),
            j_eq,
            c_in,
            j_in,
        })
    }

    fn initial_hessian_diag(&self) -> DVector<f64> {
        DVector::from_element(NUM_JOINTS, 2.0)
    }
}

/// Solves for an initial configuration holding the bar centered at `center`
/// and checks that each contact link passes through its port.
pub fn initial_grasp(scene: &Scene, center: &Vector2<f64>, seed: &JointVector) -> Result<JointVector> {
    let ik = GraspIk {
        scene,
        center: *center,
        seed: *seed,
    };
    let settings = SolverSettings {
        tol_kkt: 1e-10,
        tol_con: 1e-12,
        ..SolverSettings::default()
    };
    let r = solve_sqp(&ik, &DVector::from_iterator(NUM_JOINTS, seed.iter().copied()), &settings)?;
    if r.constraint_violation > 1e-9 {
        return Err(Error::Validation(format!(
            "no initial grasp found near robot.joint_seed (hand error {:.3e} m)",
            r.constraint_violation
        )));
    }
    let theta = JointVector::from_iterator(r.x.iter().copied());
    let arms = scene.arms_at(&theta);
    for (i, arm) in arms.iter().enumerate() {
        let seg = forward_kinematics(arm)?.link_segment(scene.contact_link);
        let [e0, e1] = scene.port_edges[i];
        if !segments_cross(seg.a, seg.b, e0, e1) {
            return Err(Error::Validation(format!(
                "initial grasp: link {} of arm {} does not pass through its port; adjust robot.joint_seed",
                scene.contact_link + 1,
                i + 1
            )));
        }
    }
    Ok(theta)
}

fn segments_cross(a: Vector2<f64>, b: Vector2<f64>, c: Vector2<f64>, d: Vector2<f64>) -> bool {
    let orient = |p: Vector2<f64>, q: Vector2<f64>, r: Vector2<f64>| (q - p).perp(&(r - p));
    let d1 = orient(a, b, c);
    let d2 = orient(a, b, d);
    let d3 = orient(c, d, a);
    let d4 = orient(c, d, b);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}
