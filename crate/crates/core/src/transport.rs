//! Semi-relaxed barycentric-supervised fused Gromov-Wasserstein transport.
//!
//! The coupling `T` (n x m) only has its row marginal fixed to `h_X`; the
//! column marginal `h_Z = T^T 1` is free, which is what lets the solver
//! reweight prototypes. Prototype targets are eliminated in closed form, so
//! the objective depends on `T` only:
//!
//! `J(T) = (1 - alpha) * sum_ij L_s(y_i, g_j*(T)) T_ij + alpha * GW(T)`
//!
//! with the squared-loss GW term evaluated through the usual factorization
//! `GW(T) = h^T (P.P) h + h_Z^T (Q.Q) h_Z - 2 <T, P T Q^T>`, which costs
//! `O(n^2 m + n m^2)` instead of `O(n^2 m^2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

/// Row-marginal tolerance accepted for user-supplied couplings.
pub const FEASIBILITY_TOL: f64 = 1e-8;
/// Floor applied to prototype entries inside the modified cross-entropy.
pub const PROTOTYPE_FLOOR: f64 = 1e-12;

/// A nonnegative transport plan with a fixed row marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    #[serde(with = "crate::linalg::serde_matrix")]
    plan: Matrix,
    source: Vec<f64>,
}

impl Coupling {
    /// Validate `plan` against the row marginal `source`.
    pub fn new(plan: Matrix, source: Vector) -> Result<Self> {
        if plan.nrows() != source.len() {
            return Err(Error::shape("coupling rows", source.len(), plan.nrows()));
        }
        linalg::ensure_finite(&plan, "coupling")?;
        if plan.iter().any(|&v| v < 0.0) || source.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Domain {
                context: "coupling",
                reason: "entries must be nonnegative".into(),
            });
        }
        let violation = row_violation(&plan, source.as_slice());
        if violation > FEASIBILITY_TOL {
            return Err(Error::InfeasibleCoupling {
                violation,
                tolerance: FEASIBILITY_TOL,
            });
        }
        Ok(Coupling {
            plan,
            source: source.iter().copied().collect(),
        })
    }

    /// Build a coupling whose row marginal is read off the plan.
    pub fn from_plan(plan: Matrix) -> Result<Self> {
        let source = Vector::from_iterator(plan.nrows(), plan.row_iter().map(|r| r.sum()));
        Self::new(plan, source)
    }

    /// Independent coupling `h_X 1^T / m`.
    pub fn uniform(source: &Vector, m: usize) -> Self {
        let plan = Matrix::from_fn(source.len(), m, |i, _| source[i] / m as f64);
        Coupling {
            plan,
            source: source.iter().copied().collect(),
        }
    }

    /// Uniform source weights `1/n`.
    pub fn uniform_source(n: usize) -> Vector {
        Vector::from_element(n, 1.0 / n as f64)
    }

    pub fn plan(&self) -> &Matrix {
        &self.plan
    }

    pub fn source(&self) -> Vector {
        Vector::from_column_slice(&self.source)
    }

    pub fn n(&self) -> usize {
        self.plan.nrows()
    }

    pub fn m(&self) -> usize {
        self.plan.ncols()
    }

    /// Column masses `pi_j`, i.e. the induced prototype weights `h_Z`.
    pub fn column_masses(&self) -> Vector {
        column_sums(&self.plan)
    }

    /// Largest absolute deviation of a row sum from the prescribed marginal.
    pub fn row_violation(&self) -> f64 {
        row_violation(&self.plan, &self.source)
    }

    /// Rows rescaled to sum to one (zero rows stay zero).
    pub fn row_normalized(&self) -> Matrix {
        let mut out = self.plan.clone();
        for mut row in out.row_iter_mut() {
            let s = row.sum();
            if s > 0.0 {
                row /= s;
            }
        }
        out
    }

    pub(crate) fn from_parts_unchecked(plan: Matrix, source: &[f64]) -> Self {
        Coupling {
            plan,
            source: source.to_vec(),
        }
    }
}

fn row_violation(plan: &Matrix, source: &[f64]) -> f64 {
    plan.row_iter()
        .zip(source)
        .map(|(r, &h)| (r.sum() - h).abs())
        .fold(0.0, f64::max)
}

fn column_sums(m: &Matrix) -> Vector {
    Vector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

fn row_sums(m: &Matrix) -> Vector {
    Vector::from_iterator(m.nrows(), m.row_iter().map(|r| r.sum()))
}

/// Convex generator of a Bregman divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BregmanGenerator {
    /// `phi(u) = |u|^2 / 2`
    L2,
    /// `phi(u) = sum u_k ln u_k - u_k`, on strictly positive vectors.
    NegEntropy,
}

impl BregmanGenerator {
    pub fn phi(self, u: &[f64]) -> f64 {
        match self {
            BregmanGenerator::L2 => 0.5 * u.iter().map(|v| v * v).sum::<f64>(),
            BregmanGenerator::NegEntropy => u
                .iter()
                .map(|&v| if v > 0.0 { v * v.ln() - v } else { -v })
                .sum(),
        }
    }

    pub fn grad(self, u: f64) -> f64 {
        match self {
            BregmanGenerator::L2 => u,
            BregmanGenerator::NegEntropy => u.ln(),
        }
    }

    pub fn grad_inverse(self, v: f64) -> f64 {
        match self {
            BregmanGenerator::L2 => v,
            BregmanGenerator::NegEntropy => v.exp(),
        }
    }

    /// `D_phi(a, b) = phi(a) - phi(b) - <grad phi(b), a - b>`
    pub fn divergence(self, a: &[f64], b: &[f64]) -> f64 {
        let inner: f64 = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| self.grad(y) * (x - y))
            .sum();
        self.phi(a) - self.phi(b) - inner
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeForm {
    /// Transport-weighted mean of the targets.
    Primal,
    /// Mirror-space mean `(grad phi)^-1(mean of grad phi(y_i))`.
    Dual,
}

/// Per-prototype targets `g_j*(T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTargets {
    /// m x c matrix, one target per prototype.
    pub targets: Matrix,
    pub form: PrototypeForm,
    pub generator: BregmanGenerator,
    /// Prototypes that received no mass and carry the global target mean.
    pub empty: Vec<usize>,
}

/// Closed-form Bregman prototypes for the columns of `coupling`.
pub fn prototype_targets(
    coupling: &Coupling,
    y: &Matrix,
    generator: BregmanGenerator,
    form: PrototypeForm,
) -> Result<PrototypeTargets> {
    let plan = coupling.plan();
    if y.nrows() != plan.nrows() {
        return Err(Error::shape("prototype targets rows", plan.nrows(), y.nrows()));
    }
    if generator == BregmanGenerator::NegEntropy {
        let bad = match form {
            PrototypeForm::Dual => y.iter().any(|&v| v <= 0.0),
            PrototypeForm::Primal => y.iter().any(|&v| v < 0.0),
        };
        if bad {
            return Err(Error::Domain {
                context: "neg-entropy prototypes",
                reason: "targets outside the generator domain".into(),
            });
        }
    }
    let (m, c) = (plan.ncols(), y.ncols());
    let mass = column_sums(plan);
    let global: Vec<f64> = (0..c).map(|k| y.column(k).mean()).collect();
    let mut targets = Matrix::zeros(m, c);
    let mut empty = Vec::new();
    match form {
        PrototypeForm::Primal => {
            let weighted = plan.transpose() * y;
            for j in 0..m {
                for k in 0..c {
                    targets[(j, k)] = if mass[j] > 0.0 {
                        weighted[(j, k)] / mass[j]
                    } else {
                        global[k]
                    };
                }
            }
        }
        PrototypeForm::Dual => {
            let mirrored = y.map(|v| generator.grad(v));
            let weighted = plan.transpose() * mirrored;
            for j in 0..m {
                for k in 0..c {
                    targets[(j, k)] = if mass[j] > 0.0 {
                        generator.grad_inverse(weighted[(j, k)] / mass[j])
                    } else {
                        global[k]
                    };
                }
            }
        }
    }
    for j in 0..m {
        if mass[j] <= 0.0 {
            empty.push(j);
        }
    }
    Ok(PrototypeTargets {
        targets,
        form,
        generator,
        empty,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedLoss {
    /// `|y - g|^2 / 2`, paired with the L2 generator.
    Squared,
    /// `sum y_k ln(y_k / g_k) + g_k - y_k`, paired with negative entropy.
    ModifiedCrossEntropy,
}

impl SupervisedLoss {
    pub fn generator(self) -> BregmanGenerator {
        match self {
            SupervisedLoss::Squared => BregmanGenerator::L2,
            SupervisedLoss::ModifiedCrossEntropy => BregmanGenerator::NegEntropy,
        }
    }

    fn value_floored(self, y: &[f64], g: &[f64]) -> f64 {
        match self {
            SupervisedLoss::Squared => {
                0.5 * y.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }
            SupervisedLoss::ModifiedCrossEntropy => y
                .iter()
                .zip(g)
                .map(|(&yk, &gk)| {
                    let gk = gk.max(PROTOTYPE_FLOOR);
                    let log_term = if yk > 0.0 { yk * (yk / gk).ln() } else { 0.0 };
                    log_term + gk - yk
                })
                .sum(),
        }
    }
}

/// Supervised loss between a target and a prototype target.
pub fn supervised_loss(y: &[f64], g: &[f64], kind: SupervisedLoss) -> Result<f64> {
    if y.len() != g.len() {
        return Err(Error::shape("supervised loss", y.len(), g.len()));
    }
    if kind == SupervisedLoss::ModifiedCrossEntropy
        && (y.iter().any(|&v| v < 0.0) || g.iter().any(|&v| v <= 0.0))
    {
        return Err(Error::Domain {
            context: "modified cross-entropy",
            reason: "requires y >= 0 and g > 0".into(),
        });
    }
    Ok(kind.value_floored(y, g))
}

/// `M_ij = L_s(y_i, g_j)`, with prototype entries floored for the cross-entropy.
pub fn loss_matrix(y: &Matrix, prototypes: &Matrix, kind: SupervisedLoss) -> Matrix {
    let (n, m) = (y.nrows(), prototypes.nrows());
    let y_rows: Vec<Vec<f64>> = y.row_iter().map(|r| r.iter().copied().collect()).collect();
    let g_rows: Vec<Vec<f64>> = prototypes
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect();
    Matrix::from_fn(n, m, |i, j| kind.value_floored(&y_rows[i], &g_rows[j]))
}

fn validate_targets(y: &Matrix, kind: SupervisedLoss) -> Result<()> {
    linalg::ensure_finite(y, "supervised targets")?;
    if kind == SupervisedLoss::ModifiedCrossEntropy && y.iter().any(|&v| v < 0.0) {
        return Err(Error::Domain {
            context: "modified cross-entropy",
            reason: "targets must be nonnegative".into(),
        });
    }
    Ok(())
}

/// Supervised part `S(T) = sum_ij L_s(y_i, g_j*(T)) T_ij` with primal prototypes.
pub fn supervised_cost(coupling: &Coupling, y: &Matrix, kind: SupervisedLoss) -> Result<f64> {
    validate_targets(y, kind)?;
    let protos = prototype_targets(coupling, y, kind.generator(), PrototypeForm::Primal)?;
    let m = loss_matrix(y, &protos.targets, kind);
    Ok(m.dot(coupling.plan()))
}

fn check_gw_shapes(p: &Matrix, q: &Matrix, t: &Matrix) -> Result<()> {
    linalg::ensure_square(p, "gw input similarity")?;
    linalg::ensure_square(q, "gw embedding similarity")?;
    if t.nrows() != p.nrows() || t.ncols() != q.nrows() {
        return Err(Error::shape(
            "gw coupling",
            format!("{}x{}", p.nrows(), q.nrows()),
            format!("{}x{}", t.nrows(), t.ncols()),
        ));
    }
    Ok(())
}

/// Squared-loss GW structure and cached products for one `(P, Q)` pair.
struct GwOperator<'a> {
    p: &'a Matrix,
    q: &'a Matrix,
    p_sq: Matrix,
    q_sq: Matrix,
    symmetric: bool,
}

impl<'a> GwOperator<'a> {
    fn new(p: &'a Matrix, q: &'a Matrix) -> Self {
        let symmetric = linalg::asymmetry(p) == 0.0 && linalg::asymmetry(q) == 0.0;
        GwOperator {
            p,
            q,
            p_sq: p.component_mul(p),
            q_sq: q.component_mul(q),
            symmetric,
        }
    }

    /// `P T Q^T` and, for asymmetric inputs, `P^T T Q`.
    fn cross(&self, t: &Matrix) -> (Matrix, Option<Matrix>) {
        let forward = self.p * t * self.q.transpose();
        let backward = (!self.symmetric).then(|| self.p.transpose() * t * self.q);
        (forward, backward)
    }

    /// Same products for an assignment matrix with `D[i, cols[i]] = weights[i]`.
    fn cross_assignment(&self, cols: &[usize], weights: &[f64]) -> (Matrix, Option<Matrix>) {
        let (n, m) = (self.p.nrows(), self.q.nrows());
        let gather = |a: &Matrix| {
            // (A D)[:, j] = sum_{i: cols[i] = j} weights[i] * A[:, i]
            let mut ad = Matrix::zeros(n, m);
            for (i, (&j, &w)) in cols.iter().zip(weights).enumerate() {
                if w != 0.0 {
                    let mut col = ad.column_mut(j);
                    col.axpy(w, &a.column(i), 1.0);
                }
            }
            ad
        };
        let forward = gather(self.p) * self.q.transpose();
        let backward = (!self.symmetric).then(|| gather(&self.p.transpose()) * self.q);
        (forward, backward)
    }

    /// Quadratic form `GW(T)` given the cached forward product.
    fn value(&self, t: &Matrix, forward: &Matrix) -> f64 {
        let h = row_sums(t);
        let hz = column_sums(t);
        let a = (&self.p_sq * &h).dot(&h);
        let b = (&self.q_sq * &hz).dot(&hz);
        a + b - 2.0 * t.dot(forward)
    }

    fn gradient(&self, t: &Matrix, forward: &Matrix, backward: Option<&Matrix>) -> Matrix {
        let h = row_sums(t);
        let hz = column_sums(t);
        let (row_term, col_term) = if self.symmetric {
            (&self.p_sq * &h * 2.0, &self.q_sq * &hz * 2.0)
        } else {
            (
                &self.p_sq * &h + self.p_sq.transpose() * &h,
                &self.q_sq * &hz + self.q_sq.transpose() * &hz,
            )
        };
        let mut g = match backward {
            Some(b) => (forward + b) * -2.0,
            None => forward * -4.0,
        };
        for j in 0..g.ncols() {
            for i in 0..g.nrows() {
                g[(i, j)] += row_term[i] + col_term[j];
            }
        }
        g
    }
}

/// Squared-loss GW cost `sum_ijkl (P_ij - Q_kl)^2 T_ik T_jl`, factorized.
pub fn gw_cost(p: &Matrix, q: &Matrix, coupling: &Coupling) -> Result<f64> {
    let t = coupling.plan();
    check_gw_shapes(p, q, t)?;
    let op = GwOperator::new(p, q);
    let (forward, _) = op.cross(t);
    Ok(op.value(t, &forward))
}

/// Gradient of [`gw_cost`] with respect to the plan entries.
pub fn gw_grad_t(p: &Matrix, q: &Matrix, coupling: &Coupling) -> Result<Matrix> {
    let t = coupling.plan();
    check_gw_shapes(p, q, t)?;
    let op = GwOperator::new(p, q);
    let (forward, backward) = op.cross(t);
    Ok(op.gradient(t, &forward, backward.as_ref()))
}

/// Envelope gradient of the reduced objective:
/// `(1 - alpha) * M + alpha * grad GW`, with `M_ij = L_s(y_i, g_j*(T))`.
pub fn srbsfgw_gradient(
    coupling: &Coupling,
    y: &Matrix,
    p: &Matrix,
    q: &Matrix,
    alpha: f64,
    kind: SupervisedLoss,
) -> Result<Matrix> {
    check_alpha(alpha)?;
    validate_targets(y, kind)?;
    let gw = gw_grad_t(p, q, coupling)?;
    if alpha == 1.0 {
        return Ok(gw);
    }
    let protos = prototype_targets(coupling, y, kind.generator(), PrototypeForm::Primal)?;
    let m = loss_matrix(y, &protos.targets, kind);
    Ok(m * (1.0 - alpha) + gw * alpha)
}

/// Reduced objective `J(T)` (supervised plus GW part).
pub fn srbsfgw_objective(
    coupling: &Coupling,
    y: &Matrix,
    p: &Matrix,
    q: &Matrix,
    alpha: f64,
    kind: SupervisedLoss,
) -> Result<f64> {
    check_alpha(alpha)?;
    let s = if alpha < 1.0 {
        supervised_cost(coupling, y, kind)?
    } else {
        0.0
    };
    Ok((1.0 - alpha) * s + alpha * gw_cost(p, q, coupling)?)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::invalid("alpha", format!("must lie in [0, 1], got {alpha}")))
    }
}

/// Row-wise argmin of `grad`. Entries within a relative `1e-12` of each
/// other count as tied and go to the smallest column, so the choice does not
/// hinge on summation-order rounding.
fn lmo_columns(grad: &Matrix) -> Vec<usize> {
    grad.row_iter()
        .map(|row| {
            let slack = 1e-12 * row.amax();
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] < row[best] - slack {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Linear minimization oracle over `U(h_X)`: each row sends all of its mass
/// to its cheapest column.
pub fn semi_relaxed_lmo(grad: &Matrix, source: &Vector) -> Result<Coupling> {
    if grad.nrows() != source.len() {
        return Err(Error::shape("lmo rows", source.len(), grad.nrows()));
    }
    linalg::ensure_finite(grad, "lmo gradient")?;
    let cols = lmo_columns(grad);
    let mut plan = Matrix::zeros(grad.nrows(), grad.ncols());
    for (i, &j) in cols.iter().enumerate() {
        plan[(i, j)] = source[i];
    }
    Ok(Coupling::from_parts_unchecked(plan, source.as_slice()))
}

/// Conditional-gradient options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgOptions {
    /// Stop when the relative objective decrease falls below this.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            tol: 1e-9,
            max_iters: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub coupling: Coupling,
    /// Objective before the first iteration and after each accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// Minimize `a x^2 + b x` over `[0, 1]`.
fn quadratic_step(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        (-b / (2.0 * a)).clamp(0.0, 1.0)
    } else if a + b < 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Solve the semi-relaxed problem by conditional gradient.
///
/// Each iteration freezes the prototypes, takes the exact line-search step on
/// the resulting quadratic, then refreshes the prototypes. Both moves can only
/// lower the reduced objective, so the trace is non-increasing.
#[allow(clippy::too_many_arguments)]
pub fn srbsfgw_solve(
    p: &Matrix,
    q: &Matrix,
    y: &Matrix,
    alpha: f64,
    kind: SupervisedLoss,
    init: &Coupling,
    opts: &CgOptions,
) -> Result<SolveReport> {
    check_alpha(alpha)?;
    validate_targets(y, kind)?;
    if init.row_violation() > FEASIBILITY_TOL {
        return Err(Error::InfeasibleCoupling {
            violation: init.row_violation(),
            tolerance: FEASIBILITY_TOL,
        });
    }
    let mut t = init.plan().clone();
    check_gw_shapes(p, q, &t)?;
    if y.nrows() != t.nrows() {
        return Err(Error::shape("targets rows", t.nrows(), y.nrows()));
    }
    let source = init.source();
    let op = GwOperator::new(p, q);

    let supervised = alpha < 1.0;
    let losses = |t: &Matrix| -> Result<Matrix> {
        if !supervised {
            return Ok(Matrix::zeros(t.nrows(), t.ncols()));
        }
        let c = Coupling::from_parts_unchecked(t.clone(), source.as_slice());
        let protos = prototype_targets(&c, y, kind.generator(), PrototypeForm::Primal)?;
        Ok(loss_matrix(y, &protos.targets, kind))
    };

    let (mut fwd, mut bwd) = op.cross(&t);
    let mut m_loss = losses(&t)?;
    let objective = |t: &Matrix, fwd: &Matrix, m_loss: &Matrix| {
        (1.0 - alpha) * m_loss.dot(t) + alpha * op.value(t, fwd)
    };
    let mut value = objective(&t, &fwd, &m_loss);
    if !value.is_finite() {
        return Err(Error::NonFiniteObjective { step: "T-step init" });
    }
    let mut trace = vec![value];
    let mut iterations = 0;

    for _ in 0..opts.max_iters {
        iterations += 1;
        let grad = &m_loss * (1.0 - alpha) + op.gradient(&t, &fwd, bwd.as_ref()) * alpha;
        let cols = lmo_columns(&grad);
        let mut direction = Matrix::zeros(t.nrows(), t.ncols());
        for (i, &j) in cols.iter().enumerate() {
            direction[(i, j)] = source[i];
        }
        let delta = &direction - &t;
        let slope = grad.dot(&delta);
        if slope >= 0.0 {
            break;
        }
        let (dfwd, dbwd) = op.cross_assignment(&cols, source.as_slice());
        let delta_fwd = &dfwd - &fwd;
        let curvature = alpha * op.value(&delta, &delta_fwd);
        let gamma = quadratic_step(curvature, slope);
        if gamma <= 0.0 {
            break;
        }

        t += &delta * gamma;
        fwd = &fwd * (1.0 - gamma) + &dfwd * gamma;
        if let (Some(b), Some(db)) = (bwd.as_mut(), dbwd.as_ref()) {
            *b = &*b * (1.0 - gamma) + db * gamma;
        }
        m_loss = losses(&t)?;
        let next = objective(&t, &fwd, &m_loss);
        if !next.is_finite() {
            return Err(Error::NonFiniteObjective { step: "T-step" });
        }
        trace.push(next);
        let decrease = value - next;
        value = next;
        if decrease <= opts.tol * value.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }

    Ok(SolveReport {
        coupling: Coupling::from_parts_unchecked(t, source.as_slice()),
        trace,
        iterations,
    })
}
