//! Out-of-sample extension: a kernel-ridge map `L` from input kernel to
//! embedding, the soft update pulling `Z` toward `K L`, and projection of new
//! points through `z(x*) = K(x*, X) L`.
//!
//! The L-subproblem is `mu/2 |T_hat Z - K L|^2 + lambda/2 tr(L^T K L)`, whose
//! stationarity condition `K (mu (K L - T_hat Z) + lambda L) = 0` is solved by
//! `L = mu (mu K + lambda I)^-1 T_hat Z`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, KernelSpec};
use crate::linalg::{self, Matrix};
use crate::transport::Coupling;

/// Which version of the coupling enters the consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingScaling {
    /// Rows rescaled to sum to one, so `T_hat Z` is a barycentric position.
    #[default]
    RowNormalized,
    /// The plan as stored, rows summing to `h_X`.
    Raw,
}

impl CouplingScaling {
    pub fn apply(self, coupling: &Coupling) -> Matrix {
        match self {
            CouplingScaling::RowNormalized => coupling.row_normalized(),
            CouplingScaling::Raw => coupling.plan().clone(),
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("lambda_l", format!("must be positive, got {lambda}")))
    }
}

fn shifted(k: &Matrix, scale: f64, shift: f64) -> Matrix {
    let mut a = k * scale;
    for i in 0..a.nrows() {
        a[(i, i)] += shift;
    }
    a
}

/// Closed-form L-step for a given (already scaled) coupling matrix `t`.
pub fn solve_l_with(k: &Matrix, t: &Matrix, z: &Matrix, lambda: f64, mu: f64) -> Result<Matrix> {
    check_lambda(lambda)?;
    if !(mu > 0.0) {
        return Err(Error::invalid("mu", "must be positive"));
    }
    linalg::ensure_square(k, "oos kernel")?;
    if t.nrows() != k.nrows() || t.ncols() != z.nrows() {
        return Err(Error::shape(
            "oos coupling",
            format!("{}x{}", k.nrows(), z.nrows()),
            format!("{}x{}", t.nrows(), t.ncols()),
        ));
    }
    let rhs = t * z * mu;
    linalg::spd_solve(&shifted(k, mu, lambda), &rhs, "L-step")
}

/// L-step with the coupling scaled per `scaling`.
pub fn solve_l(
    k: &Matrix,
    coupling: &Coupling,
    z: &Matrix,
    lambda: f64,
    mu: f64,
    scaling: CouplingScaling,
) -> Result<Matrix> {
    solve_l_with(k, &scaling.apply(coupling), z, lambda, mu)
}

/// Kernel ridge form `(K + lambda I)^-1 Z` used when `m = n`.
pub fn solve_l_ridge(k: &Matrix, z: &Matrix, lambda: f64) -> Result<Matrix> {
    check_lambda(lambda)?;
    linalg::ensure_square(k, "oos kernel")?;
    if z.nrows() != k.nrows() {
        return Err(Error::shape("ridge targets", k.nrows(), z.nrows()));
    }
    linalg::spd_solve(&shifted(k, 1.0, lambda), z, "kernel ridge")
}

/// Gradient of the L-subproblem; zero at the minimizer.
pub fn l_step_residual(k: &Matrix, t: &Matrix, z: &Matrix, l: &Matrix, lambda: f64, mu: f64) -> Matrix {
    let kl = k * l;
    k.transpose() * ((&kl - t * z) * mu) + k * l * lambda
}

/// Relax `Z` toward the RKHS-representable positions `K L`.
///
/// Without a coupling this is `(1 - beta) Z + beta K L`; with one it is the
/// least-squares compromise `(I + beta T^T T)^-1 (Z + beta T^T K L)`.
pub fn soft_update(z: &Matrix, k: &Matrix, l: &Matrix, beta: f64, t: Option<&Matrix>) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid("beta", format!("must lie in [0, 1], got {beta}")));
    }
    if k.ncols() != l.nrows() || l.ncols() != z.ncols() {
        return Err(Error::shape(
            "soft update",
            format!("L with {} rows and {} columns", k.ncols(), z.ncols()),
            format!("{}x{}", l.nrows(), l.ncols()),
        ));
    }
    if beta == 0.0 {
        return Ok(z.clone());
    }
    let kl = k * l;
    match t {
        None => {
            if kl.nrows() != z.nrows() {
                return Err(Error::shape("soft update rows", z.nrows(), kl.nrows()));
            }
            Ok(z * (1.0 - beta) + kl * beta)
        }
        Some(t) => {
            if t.nrows() != kl.nrows() || t.ncols() != z.nrows() {
                return Err(Error::shape(
                    "soft update coupling",
                    format!("{}x{}", kl.nrows(), z.nrows()),
                    format!("{}x{}", t.nrows(), t.ncols()),
                ));
            }
            let m = z.nrows();
            let mut a = t.transpose() * t * beta;
            for i in 0..m {
                a[(i, i)] += 1.0;
            }
            let rhs = z + t.transpose() * kl * beta;
            linalg::spd_solve(&a, &rhs, "soft update")
        }
    }
}

/// Fitted projection map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OosMap {
    #[serde(with = "crate::linalg::serde_matrix")]
    pub l: Matrix,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub x_train: Matrix,
    pub kernel: KernelSpec,
    pub lambda: f64,
    pub beta: f64,
    pub mu: f64,
}

impl OosMap {
    /// `K(x_new, X_train) L`
    pub fn project(&self, x_new: &Matrix) -> Result<Matrix> {
        if x_new.ncols() != self.x_train.ncols() {
            return Err(Error::shape(
                "projection features",
                self.x_train.ncols(),
                x_new.ncols(),
            ));
        }
        let cross = kernels::eval_kernel(&self.kernel, x_new, &self.x_train)?;
        Ok(cross * &self.l)
    }

    pub fn dim(&self) -> usize {
        self.l.ncols()
    }
}
