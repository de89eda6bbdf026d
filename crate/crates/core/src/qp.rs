//! Dense strictly convex QP solver (Goldfarb-Idnani dual active-set method).
//!
//! ```text
//!     minimize    1/2 x' G x + g' x
//!     subject to  A_eq x + b_eq  = 0
//!                 A_in x + b_in >= 0
//! ```
//!
//! Multipliers satisfy `G x + g = A_eq' l_eq + A_in' l_in` with `l_in >= 0`.
//! Linearly dependent inequality rows are skipped rather than reported.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("equality constraints are linearly dependent")]
    DependentEqualities,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("active-set iteration limit reached")]
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub lambda_eq: DVector<f64>,
    pub lambda_in: DVector<f64>,
    /// Indices of the inequality rows active at the solution.
    pub active_in: Vec<usize>,
}

pub struct QpProblem<'a> {
    pub hessian: &'a DMatrix<f64>,
    pub gradient: &'a DVector<f64>,
    pub a_eq: &'a DMatrix<f64>,
    pub b_eq: &'a DVector<f64>,
    pub a_in: &'a DMatrix<f64>,
    pub b_in: &'a DVector<f64>,
}

impl QpProblem<'_> {
    fn check(&self) -> Result<(), QpError> {
        let n = self.gradient.len();
        let bad = self.hessian.shape() != (n, n)
            || self.a_eq.ncols() != n && self.a_eq.nrows() > 0
            || self.a_in.ncols() != n && self.a_in.nrows() > 0
            || self.a_eq.nrows() != self.b_eq.len()
            || self.a_in.nrows() != self.b_in.len();
        if bad {
            return Err(QpError::Dimension(format!(
                "n = {n}, G {:?}, A_eq {:?}, b_eq {}, A_in {:?}, b_in {}",
                self.hessian.shape(),
                self.a_eq.shape(),
                self.b_eq.len(),
                self.a_in.shape(),
                self.b_in.len()
            )));
        }
        Ok(())
    }
}

/// Active constraint tag: equality `i` or inequality `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Tag {
    Eq(usize),
    In(usize),
}

struct Factors {
    n: usize,
    /// `J = L^{-T}` rotated so that its first `iq` columns span the active normals.
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    iq: usize,
    r_norm: f64,
}

impl Factors {
    fn compute_d(&self, np: &DVector<f64>) -> DVector<f64> {
        self.j.tr_mul(np)
    }

    /// Primal step direction in the null space of the active set.
    fn update_z(&self, d: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.n);
        for jcol in self.iq..self.n {
            z.axpy(d[jcol], &self.j.column(jcol), 1.0);
        }
        z
    }

    /// Dual step direction `R^{-1} d[..iq]`.
    fn update_r(&self, d: &DVector<f64>) -> DVector<f64> {
        let mut r = DVector::zeros(self.iq);
        for i in (0..self.iq).rev() {
            let mut sum = d[i];
            for k in i + 1..self.iq {
                sum -= self.r[(i, k)] * r[k];
            }
            r[i] = sum / self.r[(i, i)];
        }
        r
    }

    fn add_constraint(&mut self, d: &mut DVector<f64>) -> bool {
        let n = self.n;
        for jj in ((self.iq + 1)..n).rev() {
            let mut cc = d[jj - 1];
            let mut ss = d[jj];
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            d[jj] = 0.0;
            ss /= h;
            cc /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[jj - 1] = -h;
            } else {
                d[jj - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[(k, jj - 1)];
                let t2 = self.j[(k, jj)];
                self.j[(k, jj - 1)] = t1 * cc + t2 * ss;
                self.j[(k, jj)] = xny * (t1 + self.j[(k, jj - 1)]) - t2;
            }
        }
        self.iq += 1;
        for i in 0..self.iq {
            self.r[(i, self.iq - 1)] = d[i];
        }
        let diag = d[self.iq - 1].abs();
        if diag <= f64::EPSILON * self.r_norm {
            return false;
        }
        self.r_norm = self.r_norm.max(diag);
        true
    }

    /// Removes active position `qq`, shifting later entries of `tags`/`u` down.
    fn delete_constraint(&mut self, tags: &mut Vec<Tag>, u: &mut Vec<f64>, qq: usize) {
        let n = self.n;
        // `u` holds the iq active multipliers plus the trailing candidate multiplier.
        tags.remove(qq);
        u.remove(qq);
        for i in qq..self.iq - 1 {
            for k in 0..n {
                self.r[(k, i)] = self.r[(k, i + 1)];
            }
        }
        for k in 0..n {
            self.r[(k, self.iq - 1)] = 0.0;
        }
        self.iq -= 1;
        if self.iq == 0 {
            return;
        }
        for jj in qq..self.iq {
            let mut cc = self.r[(jj, jj)];
            let mut ss = self.r[(jj + 1, jj)];
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(jj + 1, jj)] = 0.0;
            if cc < 0.0 {
                self.r[(jj, jj)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(jj, jj)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..self.iq {
                let t1 = self.r[(jj, k)];
                let t2 = self.r[(jj + 1, k)];
                self.r[(jj, k)] = t1 * cc + t2 * ss;
                self.r[(jj + 1, k)] = xny * (t1 + self.r[(jj, k)]) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, jj)];
                let t2 = self.j[(k, jj + 1)];
                self.j[(k, jj)] = t1 * cc + t2 * ss;
                self.j[(k, jj + 1)] = xny * (self.j[(k, jj)] + t1) - t2;
            }
        }
    }
}

pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution, QpError> {
    problem.check()?;
    let n = problem.gradient.len();
    let m_eq = problem.a_eq.nrows();
    let m_in = problem.a_in.nrows();
    let chol = problem
        .hessian
        .clone()
        .cholesky()
        .ok_or(QpError::NotPositiveDefinite)?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotPositiveDefinite)?;
    let mut fac = Factors {
        n,
        j: l_inv.transpose(),
        r: DMatrix::zeros(n, n),
        iq: 0,
        r_norm: 1.0,
    };
    let c1 = problem.hessian.trace();
    let c2 = fac.j.trace();

    let mut x = -chol.solve(problem.gradient);
    let mut tags: Vec<Tag> = Vec::with_capacity(n + 1);
    let mut u: Vec<f64> = Vec::with_capacity(n + 1);

    for i in 0..m_eq {
        let np: DVector<f64> = problem.a_eq.row(i).transpose();
        let mut d = fac.compute_d(&np);
        let z = fac.update_z(&d);
        let r = fac.update_r(&d);
        let zn = z.dot(&np);
        let t2 = if z.dot(&z).abs() > f64::EPSILON {
            (-np.dot(&x) - problem.b_eq[i]) / zn
        } else {
            0.0
        };
        x.axpy(t2, &z, 1.0);
        for k in 0..fac.iq {
            u[k] -= t2 * r[k];
        }
        u.push(t2);
        tags.push(Tag::Eq(i));
        if !fac.add_constraint(&mut d) {
            return Err(QpError::DependentEqualities);
        }
    }

    let slack = |x: &DVector<f64>, i: usize| problem.a_in.row(i).dot(&x.transpose()) + problem.b_in[i];
    let mut excluded = vec![false; m_in];
    let max_iter = 50 * (n + m_in + m_eq + 1);
    let mut iter = 0;

    'outer: loop {
        let mut active = vec![false; m_in];
        for t in &tags {
            if let Tag::In(i) = t {
                active[*i] = true;
            }
        }
        let s: Vec<f64> = (0..m_in).map(|i| slack(&x, i)).collect();
        let psi: f64 = s.iter().map(|v| v.min(0.0)).sum();
        if psi.abs() <= (m_in as f64) * f64::EPSILON * c1 * c2 * 100.0 {
            break;
        }
        let saved = (x.clone(), tags.clone(), u.clone(), fac.j.clone(), fac.r.clone(), fac.iq, fac.r_norm);

        'select: loop {
            iter += 1;
            if iter > max_iter {
                return Err(QpError::IterationLimit);
            }
            // Most violated inactive, non-excluded inequality.
            let s: Vec<f64> = (0..m_in).map(|i| slack(&x, i)).collect();
            let mut ss = 0.0;
            let mut ip = None;
            for i in 0..m_in {
                if !active[i] && !excluded[i] && s[i] < ss {
                    ss = s[i];
                    ip = Some(i);
                }
            }
            let Some(ip) = ip else {
                break 'outer;
            };
            let np: DVector<f64> = problem.a_in.row(ip).transpose();
            u.push(0.0);
            tags.push(Tag::In(ip));
            let mut s_ip = s[ip];

            loop {
                iter += 1;
                if iter > max_iter {
                    return Err(QpError::IterationLimit);
                }
                let mut d = fac.compute_d(&np);
                let z = fac.update_z(&d);
                let r = fac.update_r(&d);

                // Partial step keeping active inequality multipliers nonnegative.
                let mut t1 = f64::INFINITY;
                let mut drop = None;
                for k in 0..fac.iq {
                    if let Tag::In(_) = tags[k] {
                        if r[k] > 0.0 && u[k] / r[k] < t1 {
                            t1 = u[k] / r[k];
                            drop = Some(k);
                        }
                    }
                }
                let zz = z.dot(&z);
                let mut t2 = if zz.abs() > f64::EPSILON {
                    -s_ip / z.dot(&np)
                } else {
                    f64::INFINITY
                };
                if t2 < 0.0 {
                    t2 = f64::INFINITY;
                }
                let t = t1.min(t2);
                if !t.is_finite() {
                    return Err(QpError::Infeasible);
                }
                if !t2.is_finite() {
                    // Dual step only.
                    for k in 0..fac.iq {
                        u[k] -= t * r[k];
                    }
                    u[fac.iq] += t;
                    let qq = drop.expect("finite t1 has a drop index");
                    if let Tag::In(i) = tags[qq] {
                        active[i] = false;
                    }
                    fac.delete_constraint(&mut tags, &mut u, qq);
                    continue;
                }
                x.axpy(t, &z, 1.0);
                for k in 0..fac.iq {
                    u[k] -= t * r[k];
                }
                u[fac.iq] += t;
                if t == t2 {
                    if !fac.add_constraint(&mut d) {
                        // Dependent on the active set: exclude it and restart from the saved point.
                        excluded[ip] = true;
                        x = saved.0.clone();
                        tags = saved.1.clone();
                        u = saved.2.clone();
                        fac.j = saved.3.clone();
                        fac.r = saved.4.clone();
                        fac.iq = saved.5;
                        fac.r_norm = saved.6;
                        active = vec![false; m_in];
                        for t in &tags {
                            if let Tag::In(i) = t {
                                active[*i] = true;
                            }
                        }
                        continue 'select;
                    }
                    continue 'outer;
                }
                let qq = drop.expect("partial step has a drop index");
                if let Tag::In(i) = tags[qq] {
                    active[i] = false;
                }
                fac.delete_constraint(&mut tags, &mut u, qq);
                s_ip = slack(&x, ip);
            }
        }
    }

    let mut lambda_eq = DVector::zeros(m_eq);
    let mut lambda_in = DVector::zeros(m_in);
    let mut active_in = Vec::new();
    for (k, t) in tags.iter().enumerate().take(fac.iq) {
        match *t {
            Tag::Eq(i) => lambda_eq[i] = u[k],
            Tag::In(i) => {
                lambda_in[i] = u[k].max(0.0);
                active_in.push(i);
            }
        }
    }
    active_in.sort_unstable();
    let objective = 0.5 * x.dot(&(problem.hessian * &x)) + problem.gradient.dot(&x);
    Ok(QpSolution {
        x,
        objective,
        lambda_eq,
        lambda_in,
        active_in,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn stationarity(p: &QpProblem, s: &QpSolution) -> f64 {
        let lhs = p.hessian * &s.x + p.gradient;
        let rhs = p.a_eq.tr_mul(&s.lambda_eq) + p.a_in.tr_mul(&s.lambda_in);
        (lhs - rhs).amax()
    }

    #[test]
    fn unconstrained_minimum() {
        let g = dmatrix![2.0, 0.0; 0.0, 2.0];
        let c = dvector![-2.0, -4.0];
        let e = DMatrix::zeros(0, 2);
        let b = DVector::zeros(0);
        let p = QpProblem { hessian: &g, gradient: &c, a_eq: &e, b_eq: &b, a_in: &e, b_in: &b };
        let s = solve_qp(&p).unwrap();
        assert_relative_eq!(s.x, dvector![1.0, 2.0], epsilon = 1e-14);
    }

    #[test]
    fn halfplane_constraint() {
        // min x^2 + y^2  s.t.  x + y >= 1
        let g = dmatrix![2.0, 0.0; 0.0, 2.0];
        let c = dvector![0.0, 0.0];
        let e = DMatrix::zeros(0, 2);
        let be = DVector::zeros(0);
        let a = dmatrix![1.0, 1.0];
        let b = dvector![-1.0];
        let p = QpProblem { hessian: &g, gradient: &c, a_eq: &e, b_eq: &be, a_in: &a, b_in: &b };
        let s = solve_qp(&p).unwrap();
        assert_relative_eq!(s.x, dvector![0.5, 0.5], epsilon = 1e-14);
        assert_relative_eq!(s.lambda_in[0], 1.0, epsilon = 1e-14);
        assert_eq!(s.active_in, vec![0]);
        assert!(stationarity(&p, &s) < 1e-14);
    }

    #[test]
    fn quadprog_reference_problem() {
        // Classic quadprog example: solution (0.4761905, 1.0476190, 2.0952381).
        let g = DMatrix::identity(3, 3);
        let c = dvector![0.0, -5.0, 0.0];
        let a = dmatrix![-4.0, -3.0, 0.0; 2.0, 1.0, 0.0; 0.0, -2.0, 1.0];
        let b = dvector![8.0, -2.0, 0.0];
        let e = DMatrix::zeros(0, 3);
        let be = DVector::zeros(0);
        let p = QpProblem { hessian: &g, gradient: &c, a_eq: &e, b_eq: &be, a_in: &a, b_in: &b };
        let s = solve_qp(&p).unwrap();
        assert_relative_eq!(s.x, dvector![0.476_190_476_190_476_2, 1.047_619_047_619_047_6, 2.095_238_095_238_095], epsilon = 1e-12);
        assert!(stationarity(&p, &s) < 1e-12);
        assert!(s.lambda_in.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn equality_and_inequality() {
        // min (x-1)^2 + (y-2)^2 + z^2  s.t.  x + y + z = 1, z >= 0.5
        let g = DMatrix::identity(3, 3) * 2.0;
        let c = dvector![-2.0, -4.0, 0.0];
        let ae = dmatrix![1.0, 1.0, 1.0];
        let be = dvector![-1.0];
        let a = dmatrix![0.0, 0.0, 1.0];
        let b = dvector![-0.5];
        let p = QpProblem { hessian: &g, gradient: &c, a_eq: &ae, b_eq: &be, a_in: &a, b_in: &b };
        let s = solve_qp(&p).unwrap();
        // With z = 0.5: minimize (x-1)^2 + (y-2)^2 on x + y = 0.5 -> x = -0.25, y = 0.75.
        assert_relative_eq!(s.x, dvector![-0.25, 0.75, 0.5], epsilon = 1e-13);
        assert!(stationarity(&p, &s) < 1e-13);
    }

    #[test]
    fn dependent_inequalities_are_tolerated() {
        // Three copies of the same active row.
        let g = DMatrix::identity(2, 2);
        let c = dvector![0.0, 0.0];
        let a = dmatrix![1.0, 1.0; 2.0, 2.0; 1.0, 1.0];
        let b = dvector![-1.0, -2.0, -1.0];
        let e = DMatrix::zeros(0, 2);
        let be = DVector::zeros(0);
        let p = QpProblem { hessian: &g, gradient: &c, a_eq: &e, b_eq: &be, a_in: &a, b_in: &b };
        let s = solve_qp(&p).unwrap();
        assert_relative_eq!(s.x, dvector![0.5, 0.5], epsilon = 1e-12);
        assert!(stationarity(&p, &s) < 1e-12);
    }

    #[test]
    fn detects_infeasibility() {
        let g = DMatrix::identity(1, 1);
        let c = dvector![0.0];
        let a = dmatrix![1.0; -1.0];
        let b = dvector![-2.0, 1.0]; // x >= 2 and x <= 1
        let e = DMatrix::zeros(0, 1);
        let be = DVector::zeros(0);
        let p = QpProblem { hessian: &g, gradient: &c, a_eq: &e, b_eq: &be, a_in: &a, b_in: &b };
        assert_eq!(solve_qp(&p), Err(QpError::Infeasible));
    }

    #[test]
    fn rejects_indefinite_hessian() {
        let g = dmatrix![1.0, 0.0; 0.0, -1.0];
        let c = dvector![0.0, 0.0];
        let e = DMatrix::zeros(0, 2);
        let be = DVector::zeros(0);
        let p = QpProblem { hessian: &g, gradient: &c, a_eq: &e, b_eq: &be, a_in: &e, b_in: &be };
        assert_eq!(solve_qp(&p), Err(QpError::NotPositiveDefinite));
    }
}
