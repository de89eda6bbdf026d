//! One-sided Jacobi SVD for the small dense matrices used in the torque and
//! grasp computations.

use nalgebra::{DMatrix, DVector};

pub struct Svd {
    /// m x k, orthonormal columns for nonzero singular values.
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    /// n x k.
    pub v: DMatrix<f64>,
}

const MAX_SWEEPS: usize = 60;

/// Thin SVD `a = u diag(s) v^T` with `k = min(m, n)`, singular values sorted
/// in decreasing order.
pub fn svd(a: &DMatrix<f64>) -> Svd {
    let (m, n) = a.shape();
    if m < n {
        let t = svd(&a.transpose());
        return Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        };
    }
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..m {
                    let wp = w[(k, p)];
                    let wq = w[(k, q)];
                    w[(k, p)] = c * wp - s * wq;
                    w[(k, q)] = s * wp + c * wq;
                }
                for k in 0..n {
                    let vp = v[(k, p)];
                    let vq = v[(k, q)];
                    v[(k, p)] = c * vp - s * vq;
                    v[(k, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let mut u = DMatrix::zeros(m, n);
    let mut vs = DMatrix::zeros(n, n);
    let mut sv = DVector::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        sv[dst] = norms[src];
        if norms[src] > 0.0 {
            u.set_column(dst, &(w.column(src) / norms[src]));
        }
        vs.set_column(dst, &v.column(src));
    }
    Svd {
        u,
        singular_values: sv,
        v: vs,
    }
}

pub fn singular_values(a: &DMatrix<f64>) -> DVector<f64> {
    svd(a).singular_values
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn reconstructs_input(
            rows in 1usize..7,
            cols in 1usize..7,
            vals in prop::collection::vec(-2.0f64..2.0, 36),
            zero_mask in prop::collection::vec(any::<bool>(), 36),
        ) {
            let a = DMatrix::from_fn(rows, cols, |i, j| {
                let k = i * 6 + j;
                if zero_mask[k] { 0.0 } else { vals[k] }
            });
            let d = svd(&a);
            let back = &d.u * DMatrix::from_diagonal(&d.singular_values) * d.v.transpose();
            prop_assert!((back - &a).amax() <= 1e-12 * (1.0 + a.amax()));
            if rows >= cols {
                prop_assert!((d.v.transpose() * &d.v - DMatrix::<f64>::identity(cols, cols)).amax() < 1e-12);
            }
            for w in d.singular_values.as_slice().windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn rank_deficient_wide_matrix() {
        // A sparse rank-2 matrix that trips the bidiagonalization route.
        let mut a = DMatrix::from_vec(
            3,
            4,
            vec![0.0, 0.0, 0.0, -1.0965118458304413, 0.0, 0.0, -0.3248098240646712, 1.9594898388331206, 0.0, 0.0, 1.9458032553388214, 0.0],
        );
        let r0 = a.row(0).clone_owned();
        a.set_row(2, &(r0 * 2.0));
        let d = svd(&a);
        let back = &d.u * DMatrix::from_diagonal(&d.singular_values) * d.v.transpose();
        assert!((back - &a).amax() < 1e-14);
        assert!(d.singular_values[2] < 1e-14);
    }
}
