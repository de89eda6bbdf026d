//! Sequential quadratic programming for small dense NLPs.
//!
//! ```text
//!     minimize    f(x)
//!     subject to  c_eq(x)  = 0
//!                 c_in(x) >= 0
//! ```
//!
//! Damped BFGS approximation of the Lagrangian Hessian, Goldfarb-Idnani QP
//! subproblems with an elastic fallback, and an l1 merit function with
//! backtracking Armijo line search plus a second-order correction. The l1
//! merit weights each constraint row separately.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::qp::{solve_qp, QpError, QpProblem, QpSolution};

#[derive(Debug, Clone, PartialEq)]
pub struct NlpEval {
    pub f: f64,
    pub grad: DVector<f64>,
    pub c_eq: DVector<f64>,
    pub j_eq: DMatrix<f64>,
    pub c_in: DVector<f64>,
    pub j_in: DMatrix<f64>,
}

impl NlpEval {
    /// Max-norm constraint violation.
    pub fn violation(&self) -> f64 {
        let eq = self.c_eq.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.c_in.iter().fold(eq, |m, v| m.max(-v))
    }

    pub fn l1_violation(&self) -> f64 {
        self.c_eq.iter().map(|v| v.abs()).sum::<f64>() + self.c_in.iter().map(|v| (-v).max(0.0)).sum::<f64>()
    }

    /// Violation weighted row by row.
    pub fn weighted_violation(&self, weights: &Penalty) -> f64 {
        weighted(&self.c_eq, &self.c_in, weights)
    }

    fn linearized_weighted_violation(&self, d: &DVector<f64>, weights: &Penalty) -> f64 {
        weighted(&(&self.c_eq + &self.j_eq * d), &(&self.c_in + &self.j_in * d), weights)
    }

    pub fn lagrangian_gradient(&self, lambda_eq: &DVector<f64>, lambda_in: &DVector<f64>) -> DVector<f64> {
        &self.grad - self.j_eq.tr_mul(lambda_eq) - self.j_in.tr_mul(lambda_in)
    }
}

pub trait Nlp {
    fn num_vars(&self) -> usize;

    fn evaluate(&self, x: &DVector<f64>) -> Result<NlpEval>;

    /// Diagonal of the initial Hessian approximation.
    fn initial_hessian_diag(&self) -> DVector<f64> {
        DVector::from_element(self.num_vars(), 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub tol_kkt: f64,
    pub tol_con: f64,
    pub max_iterations: usize,
    pub armijo: f64,
    pub backtrack: f64,
    pub fd_step: f64,
    pub penalty_growth: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol_kkt: 1e-6,
            tol_con: 1e-6,
            max_iterations: 200,
            armijo: 1e-4,
            backtrack: 0.5,
            fd_step: 1e-6,
            penalty_growth: 2.0,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.tol_kkt, self.tol_con, self.fd_step, self.armijo];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("solver tolerances, Armijo constant and FD step must be > 0"));
        }
        if self.max_iterations < 1 {
            return Err(Error::invalid("max_iterations must be >= 1"));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) || self.armijo >= 0.5 {
            return Err(Error::invalid("backtracking ratio must be in (0, 1) and Armijo constant below 0.5"));
        }
        if !(self.penalty_growth > 1.0) {
            return Err(Error::invalid("penalty growth factor must be > 1"));
        }
        Ok(())
    }
}

fn weighted(c_eq: &DVector<f64>, c_in: &DVector<f64>, w: &Penalty) -> f64 {
    c_eq.iter().zip(w.eq.iter()).map(|(c, m)| m * c.abs()).sum::<f64>()
        + c_in.iter().zip(w.ineq.iter()).map(|(c, m)| m * (-c).max(0.0)).sum::<f64>()
}

/// Per-row weights of the l1 merit function `f + sum_i mu_i |violation_i|`.
///
/// Each weight is kept above `growth * |lambda_i|`; weights above that
/// target relax halfway towards it, which keeps rows with large but
/// harmless multipliers from dominating the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
}

impl Penalty {
    fn zeros(m_eq: usize, m_in: usize) -> Self {
        Penalty {
            eq: DVector::zeros(m_eq),
            ineq: DVector::zeros(m_in),
        }
    }

    fn update(&mut self, lambda_eq: &DVector<f64>, lambda_in: &DVector<f64>, growth: f64) {
        let step = |mu: &mut f64, lambda: f64| {
            let target = growth * lambda.abs();
            *mu = target.max(0.5 * (*mu + target));
        };
        self.eq.iter_mut().zip(lambda_eq.iter()).for_each(|(m, l)| step(m, *l));
        self.ineq.iter_mut().zip(lambda_in.iter()).for_each(|(m, l)| step(m, *l));
    }

    pub fn max(&self) -> f64 {
        self.eq.iter().chain(self.ineq.iter()).fold(0.0, |a, b| a.max(*b))
    }
}

/// Merit values around one accepted step, both with the weights used for it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeritStep {
    /// Largest row weight.
    pub penalty: f64,
    pub before: f64,
    pub after: f64,
    pub step_length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqpResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub lambda_eq: DVector<f64>,
    pub lambda_in: DVector<f64>,
    pub kkt_residual: f64,
    pub constraint_violation: f64,
    pub iterations: usize,
    pub converged: bool,
    pub merit_history: Vec<MeritStep>,
    /// Why the solver stopped when not converged.
    pub message: String,
}

/// Scaled KKT residual: stationarity and multiplier complementarity, divided by
/// a multiplier-size factor so that large cost weights do not dominate.
pub fn kkt_residual(ev: &NlpEval, lambda_eq: &DVector<f64>, lambda_in: &DVector<f64>) -> f64 {
    let stationarity = ev.lagrangian_gradient(lambda_eq, lambda_in).amax();
    let comp = ev
        .c_in
        .iter()
        .zip(lambda_in.iter())
        .map(|(c, l)| (c * l).abs())
        .fold(0.0, f64::max);
    let dual_sign = lambda_in.iter().fold(0.0f64, |m, l| m.max(-l));
    let m = lambda_eq.len() + lambda_in.len();
    let s_max = 100.0;
    let l1 = lambda_eq.iter().chain(lambda_in.iter()).map(|v| v.abs()).sum::<f64>();
    let scale = if m == 0 { 1.0 } else { (l1 / m as f64).max(s_max) / s_max };
    stationarity.max(comp).max(dual_sign) / scale
}

struct Subproblem {
    d: DVector<f64>,
    lambda_eq: DVector<f64>,
    lambda_in: DVector<f64>,
    elastic: bool,
}

fn solve_subproblem(b: &DMatrix<f64>, ev: &NlpEval, elastic_weight: f64) -> Result<Subproblem> {
    let direct = solve_qp(&QpProblem {
        hessian: b,
        gradient: &ev.grad,
        a_eq: &ev.j_eq,
        b_eq: &ev.c_eq,
        a_in: &ev.j_in,
        b_in: &ev.c_in,
    });
    match direct {
        Ok(QpSolution { x, lambda_eq, lambda_in, .. }) => Ok(Subproblem {
            d: x,
            lambda_eq,
            lambda_in,
            elastic: false,
        }),
        Err(QpError::Infeasible) | Err(QpError::DependentEqualities) | Err(QpError::IterationLimit) => {
            solve_elastic(b, ev, elastic_weight)
        }
        Err(e) => Err(Error::InfeasibleStep(e.to_string())),
    }
}

/// Elastic mode: one shared relaxation `t >= 0` on every linearized row,
/// charged linearly in the objective.
fn solve_elastic(b: &DMatrix<f64>, ev: &NlpEval, weight: f64) -> Result<Subproblem> {
    let n = ev.grad.len();
    let m_eq = ev.c_eq.len();
    let m_in = ev.c_in.len();
    let mut h = DMatrix::zeros(n + 1, n + 1);
    h.view_mut((0, 0), (n, n)).copy_from(b);
    h[(n, n)] = 1e-8 * b.diagonal().amax().max(1.0);
    let mut g = DVector::zeros(n + 1);
    g.rows_mut(0, n).copy_from(&ev.grad);
    g[n] = weight;
    let rows = 2 * m_eq + m_in + 1;
    let mut a = DMatrix::zeros(rows, n + 1);
    let mut c = DVector::zeros(rows);
    for i in 0..m_eq {
        a.view_mut((2 * i, 0), (1, n)).copy_from(&ev.j_eq.row(i));
        a[(2 * i, n)] = 1.0;
        c[2 * i] = ev.c_eq[i];
        a.view_mut((2 * i + 1, 0), (1, n)).copy_from(&(-ev.j_eq.row(i)));
        a[(2 * i + 1, n)] = 1.0;
        c[2 * i + 1] = -ev.c_eq[i];
    }
    for i in 0..m_in {
        let r = 2 * m_eq + i;
        a.view_mut((r, 0), (1, n)).copy_from(&ev.j_in.row(i));
        a[(r, n)] = 1.0;
        c[r] = ev.c_in[i];
    }
    a[(rows - 1, n)] = 1.0;
    let empty_a = DMatrix::zeros(0, n + 1);
    let empty_b = DVector::zeros(0);
    let sol = solve_qp(&QpProblem {
        hessian: &h,
        gradient: &g,
        a_eq: &empty_a,
        b_eq: &empty_b,
        a_in: &a,
        b_in: &c,
    })
    .map_err(|e| Error::InfeasibleStep(format!("elastic subproblem failed: {e}")))?;
    let lambda_eq = DVector::from_fn(m_eq, |i, _| sol.lambda_in[2 * i] - sol.lambda_in[2 * i + 1]);
    let lambda_in = DVector::from_fn(m_in, |i, _| sol.lambda_in[2 * m_eq + i]);
    Ok(Subproblem {
        d: sol.x.rows(0, n).into_owned(),
        lambda_eq,
        lambda_in,
        elastic: true,
    })
}

/// Minimum-norm correction pulling the working constraints of the trial
/// point back onto their linearization at the current point.
fn second_order_correction(ev: &NlpEval, trial: &NlpEval, sub: &Subproblem) -> Option<DVector<f64>> {
    let n = ev.grad.len();
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for i in 0..ev.c_eq.len() {
        rows.push((ev.j_eq.row(i).transpose(), trial.c_eq[i]));
    }
    for i in 0..ev.c_in.len() {
        let linear = ev.c_in[i] + ev.j_in.row(i).dot(&sub.d.transpose());
        if sub.lambda_in[i] > 0.0 || linear.abs() <= 1e-10 || trial.c_in[i] < 0.0 {
            rows.push((ev.j_in.row(i).transpose(), trial.c_in[i] - linear.max(0.0)));
        }
    }
    if rows.is_empty() {
        return None;
    }
    let a = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]);
    let r = DVector::from_fn(rows.len(), |i, _| rows[i].1);
    let pinv = crate::torque::pseudo_inverse(&a, 1e-10).ok()?;
    Some(-(pinv * r))
}

fn merit(ev: &NlpEval, penalty: &Penalty) -> f64 {
    ev.f + ev.weighted_violation(penalty)
}

fn damped_bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if !(sbs > 0.0) || !sbs.is_finite() {
        return;
    }
    let sy = s.dot(y);
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r = y * theta + &bs * (1.0 - theta);
    let sr = s.dot(&r);
    if !(sr > 0.0) || !sr.is_finite() {
        return;
    }
    let updated = &*b - &bs * bs.transpose() / sbs + &r * r.transpose() / sr;
    if updated.iter().all(|v| v.is_finite()) {
        *b = (&updated + updated.transpose()) * 0.5;
    }
}

pub fn solve_sqp<P: Nlp + ?Sized>(nlp: &P, x0: &DVector<f64>, settings: &SolverSettings) -> Result<SqpResult> {
    settings.validate()?;
    let n = nlp.num_vars();
    if x0.len() != n {
        return Err(Error::invalid(format!("initial point has {} entries, expected {n}", x0.len())));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial point must be finite"));
    }
    let mut x = x0.clone();
    let mut ev = nlp.evaluate(&x)?;
    let mut b = DMatrix::from_diagonal(&nlp.initial_hessian_diag());
    let mut penalty = Penalty::zeros(ev.c_eq.len(), ev.c_in.len());
    let mut history = Vec::new();
    let mut lambda_eq = DVector::zeros(ev.c_eq.len());
    let mut lambda_in = DVector::zeros(ev.c_in.len());
    let mut kkt = f64::INFINITY;
    let mut message = String::from("iteration limit reached");

    for iter in 0..settings.max_iterations {
        let elastic_weight = 10.0 * penalty.max().max(ev.grad.amax()).max(1.0);
        let sub = solve_subproblem(&b, &ev, elastic_weight)?;
        lambda_eq = sub.lambda_eq.clone();
        lambda_in = sub.lambda_in.clone();
        kkt = kkt_residual(&ev, &lambda_eq, &lambda_in);
        let violation = ev.violation();
        if kkt <= settings.tol_kkt && violation <= settings.tol_con && !sub.elastic {
            return Ok(SqpResult {
                x,
                f: ev.f,
                lambda_eq,
                lambda_in,
                kkt_residual: kkt,
                constraint_violation: violation,
                iterations: iter,
                converged: true,
                merit_history: history,
                message: String::from("converged"),
            });
        }

        log::trace!(
            "sqp {iter}: f {:.9e} violation {violation:.3e} kkt {kkt:.3e} penalty {:.3e} |d| {:.3e} elastic {}",
            ev.f,
            penalty.max(),
            sub.d.amax(),
            sub.elastic
        );
        penalty.update(&lambda_eq, &lambda_in, settings.penalty_growth);
        let phi0 = merit(&ev, &penalty);
        let mut slope = ev.grad.dot(&sub.d)
            - (ev.weighted_violation(&penalty) - ev.linearized_weighted_violation(&sub.d, &penalty));
        if slope >= 0.0 {
            // Only possible through round-off; fall back to the model curvature.
            slope = -sub.d.dot(&(&b * &sub.d)).abs();
        }

        let mut accepted: Option<(DVector<f64>, NlpEval, f64)> = None;
        let mut alpha = 1.0;
        let mut tried_soc = false;
        while alpha >= 1e-12 {
            let trial_x = &x + &sub.d * alpha;
            let trial = nlp.evaluate(&trial_x);
            if let Ok(trial) = trial {
                let phi = merit(&trial, &penalty);
                if phi.is_finite() && phi <= phi0 + settings.armijo * alpha * slope {
                    accepted = Some((trial_x, trial, alpha));
                    break;
                }
                if alpha == 1.0 && !tried_soc {
                    tried_soc = true;
                    if let Some(corr) = second_order_correction(&ev, &trial, &sub) {
                        let soc_x = &trial_x + corr;
                        if let Ok(soc) = nlp.evaluate(&soc_x) {
                            let phi_soc = merit(&soc, &penalty);
                            if phi_soc.is_finite() && phi_soc <= phi0 + settings.armijo * slope {
                                accepted = Some((soc_x, soc, 1.0));
                                break;
                            }
                        }
                    }
                }
            }
            alpha *= settings.backtrack;
        }

        let Some((x_new, ev_new, step_length)) = accepted else {
            message = format!("line search failed at iteration {iter}");
            let violation = ev.violation();
            return Ok(SqpResult {
                x,
                f: ev.f,
                lambda_eq,
                lambda_in,
                kkt_residual: kkt,
                constraint_violation: violation,
                iterations: iter,
                converged: false,
                merit_history: history,
                message,
            });
        };

        log::trace!("sqp {iter}: step length {step_length:.3e}, merit {phi0:.9e} slope {slope:.3e} soc tried {tried_soc}");
        history.push(MeritStep {
            penalty: penalty.max(),
            before: phi0,
            after: merit(&ev_new, &penalty),
            step_length,
        });
        let s = &x_new - &x;
        let y = ev_new.lagrangian_gradient(&lambda_eq, &lambda_in) - ev.lagrangian_gradient(&lambda_eq, &lambda_in);
        damped_bfgs_update(&mut b, &s, &y);
        x = x_new;
        ev = ev_new;
    }

    // Final convergence test at the last iterate.
    if let Ok(sub) = solve_subproblem(&b, &ev, 10.0 * penalty.max().max(ev.grad.amax()).max(1.0)) {
        lambda_eq = sub.lambda_eq;
        lambda_in = sub.lambda_in;
        kkt = kkt_residual(&ev, &lambda_eq, &lambda_in);
        if kkt <= settings.tol_kkt && ev.violation() <= settings.tol_con && !sub.elastic {
            message = String::from("converged");
        }
    }
    let violation = ev.violation();
    let converged = message == "converged";
    Ok(SqpResult {
        x,
        f: ev.f,
        lambda_eq,
        lambda_in,
        kkt_residual: kkt,
        constraint_violation: violation,
        iterations: settings.max_iterations,
        converged,
        merit_history: history,
        message,
    })
}

/// Largest normalized discrepancy between the analytic cost gradient and
/// constraint Jacobians of `nlp` and central finite differences at `x`.
///
/// Each function's error is `max |analytic - fd| / max(1, max |analytic|)`.
pub fn gradient_check<P: Nlp + ?Sized>(nlp: &P, x: &DVector<f64>, step: f64) -> Result<f64> {
    let ev = nlp.evaluate(x)?;
    let n = x.len();
    let m_eq = ev.c_eq.len();
    let m_in = ev.c_in.len();
    let mut fd_grad = DVector::zeros(n);
    let mut fd_eq = DMatrix::zeros(m_eq, n);
    let mut fd_in = DMatrix::zeros(m_in, n);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        let ep = nlp.evaluate(&xp)?;
        let em = nlp.evaluate(&xm)?;
        fd_grad[j] = (ep.f - em.f) / (2.0 * step);
        fd_eq.set_column(j, &((&ep.c_eq - &em.c_eq) / (2.0 * step)));
        fd_in.set_column(j, &((&ep.c_in - &em.c_in) / (2.0 * step)));
    }
    let rel = |analytic: DVector<f64>, fd: DVector<f64>| -> f64 {
        (&analytic - &fd).amax() / analytic.amax().max(1.0)
    };
    let mut worst = rel(ev.grad.clone(), fd_grad);
    for i in 0..m_eq {
        worst = worst.max(rel(ev.j_eq.row(i).transpose(), fd_eq.row(i).transpose()));
    }
    for i in 0..m_in {
        worst = worst.max(rel(ev.j_in.row(i).transpose(), fd_in.row(i).transpose()));
    }
    Ok(worst)
}
