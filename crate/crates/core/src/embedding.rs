//! Prototype embedding update: first-order descent on
//! `alpha * GW(Z; T) - eta * CKA(K_Z, T^T K_Y T)`.
//!
//! For a fixed coupling the GW term reduces to a function of the embedding
//! similarity `Q` only, `const + h_Z^T (Q.Q) h_Z - 2 <T^T P T, Q>`, and both
//! terms depend on `Z` through its pairwise squared distances. Gradients are
//! pushed through distances by hand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, KernelSpec};
use crate::linalg::{self, Matrix, Vector};
use crate::transport::Coupling;

/// How the embedding-side similarity `Q` is built from `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Jointly normalized Student-t affinity.
    StudentT,
    /// Raw squared Euclidean distances.
    SqDist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaConfig {
    /// Kernel on the embeddings.
    pub z_kernel: KernelSpec,
    pub eta: f64,
}

/// `T^T K_Y T`, the target kernel compressed onto the prototypes.
pub fn projected_target_kernel(k_y: &Matrix, coupling: &Coupling) -> Result<Matrix> {
    let t = coupling.plan();
    linalg::ensure_square(k_y, "target kernel")?;
    if k_y.nrows() != t.nrows() {
        return Err(Error::shape("target kernel", t.nrows(), k_y.nrows()));
    }
    let mut out = t.transpose() * k_y * t;
    // Exact symmetry keeps CKA symmetric to the last bit.
    let sym = (&out + out.transpose()) * 0.5;
    out.copy_from(&sym);
    Ok(out)
}

/// Centered kernel and its Frobenius norm; errors when the centered kernel vanishes.
fn centered(k: &Matrix, context: &'static str) -> Result<(Matrix, f64)> {
    let c = kernels::center_kernel(k)?;
    let norm = c.norm();
    let scale = k.norm();
    if !(norm > 1e-12 * scale) || norm == 0.0 {
        return Err(Error::DegenerateKernel(context));
    }
    Ok((c, norm))
}

/// Centered kernel alignment `<HAH, HBH> / (|HAH| |HBH|)`.
pub fn cka(k_a: &Matrix, k_b: &Matrix) -> Result<f64> {
    if k_a.shape() != k_b.shape() {
        return Err(Error::shape(
            "cka",
            format!("{}x{}", k_a.nrows(), k_a.ncols()),
            format!("{}x{}", k_b.nrows(), k_b.ncols()),
        ));
    }
    let (a, na) = centered(k_a, "cka first argument")?;
    let (b, nb) = centered(k_b, "cka second argument")?;
    Ok(a.dot(&b) / (na * nb))
}

/// Z-step objective for one outer iteration: the coupling, input similarity
/// and target kernel are frozen.
#[derive(Debug, Clone)]
pub struct ZProblem {
    mode: SimilarityMode,
    alpha: f64,
    eta: f64,
    z_kernel: KernelSpec,
    /// `T^T P T`
    cross: Matrix,
    hz: Vector,
    /// `h^T (P.P) h`, the part of GW that does not move with `Z`.
    gw_const: f64,
    /// Centered, unit-norm projected target kernel (absent when `eta = 0`).
    target: Option<Matrix>,
}

impl ZProblem {
    pub fn new(
        coupling: &Coupling,
        p: &Matrix,
        k_y: Option<&Matrix>,
        cfg: &CkaConfig,
        alpha: f64,
        mode: SimilarityMode,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid("alpha", format!("must lie in [0, 1], got {alpha}")));
        }
        if !(cfg.eta >= 0.0) || !cfg.eta.is_finite() {
            return Err(Error::invalid("eta", "must be finite and nonnegative"));
        }
        if cfg.z_kernel.value_from_sq_dist(0.0).is_none() {
            return Err(Error::invalid("z_kernel", "must be an isotropic kernel"));
        }
        cfg.z_kernel.validate()?;
        let t = coupling.plan();
        linalg::ensure_square(p, "input similarity")?;
        if p.nrows() != t.nrows() {
            return Err(Error::shape("input similarity", t.nrows(), p.nrows()));
        }
        let h = coupling.source();
        let gw_const = (p.component_mul(p) * &h).dot(&h);
        let target = if cfg.eta > 0.0 {
            let k_y = k_y.ok_or(Error::invalid("k_y", "target kernel required when eta > 0"))?;
            let kt = projected_target_kernel(k_y, coupling)?;
            let (c, norm) = centered(&kt, "projected target kernel")?;
            Some(c / norm)
        } else {
            None
        };
        Ok(ZProblem {
            mode,
            alpha,
            eta: cfg.eta,
            z_kernel: cfg.z_kernel.clone(),
            cross: t.transpose() * p * t,
            hz: coupling.column_masses(),
            gw_const,
            target,
        })
    }

    pub fn m(&self) -> usize {
        self.hz.len()
    }

    fn check(&self, z: &Matrix) -> Result<()> {
        if z.nrows() != self.m() {
            return Err(Error::shape("embedding rows", self.m(), z.nrows()));
        }
        linalg::ensure_finite(z, "embedding")
    }

    fn similarity(&self, d2: &Matrix) -> (Matrix, Option<Matrix>, f64) {
        match self.mode {
            SimilarityMode::StudentT => {
                let (w, total) = kernels::student_t_weights(d2);
                (&w / total, Some(w), total)
            }
            SimilarityMode::SqDist => (d2.clone(), None, 1.0),
        }
    }

    fn gw_value(&self, q: &Matrix) -> f64 {
        let q2 = q.component_mul(q);
        self.gw_const + (&q2 * &self.hz).dot(&self.hz) - 2.0 * self.cross.dot(q)
    }

    /// `GW(Z; T)` alone.
    pub fn gw(&self, z: &Matrix) -> Result<f64> {
        self.check(z)?;
        let d2 = kernels::pairwise_sq_dists(z)?;
        Ok(self.gw_value(&self.similarity(&d2).0))
    }

    /// `CKA(K_Z, T^T K_Y T)`; `None` when the CKA term is switched off.
    pub fn cka(&self, z: &Matrix) -> Result<Option<f64>> {
        self.check(z)?;
        let Some(target) = &self.target else {
            return Ok(None);
        };
        let d2 = kernels::pairwise_sq_dists(z)?;
        let kz = d2.map(|v| self.z_kernel.value_from_sq_dist(v).expect("isotropic"));
        let (c, norm) = centered(&kz, "embedding kernel")?;
        Ok(Some(c.dot(target) / norm))
    }

    pub fn objective(&self, z: &Matrix) -> Result<f64> {
        let gw = if self.alpha > 0.0 { self.gw(z)? } else { 0.0 };
        let cka = self.cka(z)?.unwrap_or(0.0);
        Ok(self.alpha * gw - self.eta * cka)
    }

    pub fn value_and_gradient(&self, z: &Matrix) -> Result<(f64, Matrix)> {
        self.check(z)?;
        let m = self.m();
        let d2 = kernels::pairwise_sq_dists(z)?;
        // dL/dd for every ordered pair (k, l); loops run down columns.
        let mut dd = Matrix::zeros(m, m);
        let mut value = 0.0;
        let hz = self.hz.as_slice();

        if self.alpha > 0.0 {
            let (q, w, total) = self.similarity(&d2);
            // G_Q = 2 Q.(hz hz^T) - 2 T^T P T
            let g_q = |k: usize, l: usize| 2.0 * (q[(k, l)] * hz[k] * hz[l] - self.cross[(k, l)]);
            let mut gw = self.gw_const;
            let mut inner = 0.0;
            for l in 0..m {
                for k in 0..m {
                    let qkl = q[(k, l)];
                    gw += qkl * qkl * hz[k] * hz[l] - 2.0 * self.cross[(k, l)] * qkl;
                    inner += g_q(k, l) * qkl;
                }
            }
            value += self.alpha * gw;
            match w {
                Some(w) => {
                    let scale = self.alpha / total;
                    for l in 0..m {
                        for k in 0..m {
                            if k != l {
                                let wkl = w[(k, l)];
                                dd[(k, l)] -= scale * wkl * wkl * (g_q(k, l) - inner);
                            }
                        }
                    }
                }
                None => {
                    for l in 0..m {
                        for k in 0..m {
                            dd[(k, l)] += self.alpha * g_q(k, l);
                        }
                    }
                }
            }
        }

        if let Some(target) = &self.target {
            let kz = d2.map(|v| self.z_kernel.value_from_sq_dist(v).expect("isotropic"));
            let (c, norm) = centered(&kz, "embedding kernel")?;
            let score = c.dot(target) / norm;
            value -= self.eta * score;
            // dCKA/dK_Z = (B - score C / |C|) / |C|
            let coef = self.eta / norm;
            let shrink = score / norm;
            for l in 0..m {
                for k in 0..m {
                    if k != l {
                        let dk = self.z_kernel.derivative_from_sq_dist(d2[(k, l)]).expect("isotropic");
                        dd[(k, l)] -= coef * (target[(k, l)] - c[(k, l)] * shrink) * dk;
                    }
                }
            }
        }

        let p = z.ncols();
        let mut grad = Matrix::zeros(m, p);
        for l in 0..m {
            for k in 0..m {
                let w = dd[(k, l)] + dd[(l, k)];
                if k != l && w != 0.0 {
                    for c in 0..p {
                        grad[(k, c)] += 2.0 * w * (z[(k, c)] - z[(l, c)]);
                    }
                }
            }
        }
        if !value.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteObjective { step: "Z-step" });
        }
        Ok((value, grad))
    }

    pub fn gradient(&self, z: &Matrix) -> Result<Matrix> {
        Ok(self.value_and_gradient(z)?.1)
    }
}

/// Anything the embedding loop can minimize.
pub trait Objective {
    fn value_and_gradient(&self, z: &Matrix) -> Result<(f64, Matrix)>;
}

impl Objective for ZProblem {
    fn value_and_gradient(&self, z: &Matrix) -> Result<(f64, Matrix)> {
        ZProblem::value_and_gradient(self, z)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub first: Matrix,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub second: Matrix,
    pub step: u64,
}

impl Adam {
    pub fn new(rows: usize, cols: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: Matrix::zeros(rows, cols),
            second: Matrix::zeros(rows, cols),
            step: 0,
        }
    }

    /// In-place update of `x` along `grad`.
    pub fn step(&mut self, x: &mut Matrix, grad: &Matrix) {
        assert_eq!(x.shape(), grad.shape(), "adam: gradient shape");
        assert_eq!(x.shape(), self.first.shape(), "adam: state shape");
        self.step += 1;
        let b1t = 1.0 - self.beta1.powf(self.step as f64);
        let b2t = 1.0 - self.beta2.powf(self.step as f64);
        for ((xi, &g), (m, v)) in x
            .iter_mut()
            .zip(grad.iter())
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / b1t;
            let v_hat = *v / b2t;
            *xi -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingState {
    #[serde(with = "crate::linalg::serde_matrix")]
    pub z: Matrix,
    pub adam: Adam,
    pub trace: Vec<f64>,
}

impl EmbeddingState {
    pub fn new(z: Matrix, lr: f64) -> Self {
        let adam = Adam::new(z.nrows(), z.ncols(), lr);
        EmbeddingState {
            z,
            adam,
            trace: Vec::new(),
        }
    }

    /// One Adam step on `grad`.
    pub fn adam_step(&mut self, grad: &Matrix) {
        self.adam.step(&mut self.z, grad);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZLoopOptions {
    pub max_steps: usize,
    /// Relative objective change over `window` steps that ends the loop.
    pub tol: f64,
    pub window: usize,
    /// Return the best iterate seen (including the start) rather than the last.
    pub keep_best: bool,
}

impl Default for ZLoopOptions {
    fn default() -> Self {
        ZLoopOptions {
            max_steps: 1000,
            tol: 1e-7,
            window: 10,
            keep_best: false,
        }
    }
}

/// Run Adam on `objective`, recording the objective at each iterate before
/// it is stepped. Returns the number of steps taken.
pub fn run_z_loop<O: Objective + ?Sized>(
    state: &mut EmbeddingState,
    objective: &O,
    opts: &ZLoopOptions,
) -> Result<usize> {
    if opts.max_steps == 0 {
        return Err(Error::invalid("max_steps", "must be at least 1"));
    }
    let start = state.trace.len();
    let mut best: Option<(f64, Matrix)> = None;
    let mut steps = opts.max_steps;
    for step in 0..opts.max_steps {
        let (value, grad) = objective.value_and_gradient(&state.z)?;
        if opts.keep_best && best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, state.z.clone()));
        }
        state.trace.push(value);
        state.adam_step(&grad);
        let local = state.trace.len() - start;
        if opts.window > 0 && local > opts.window {
            let old = state.trace[state.trace.len() - 1 - opts.window];
            if (old - value).abs() <= opts.tol * old.abs().max(f64::MIN_POSITIVE) {
                steps = step + 1;
                break;
            }
        }
    }
    if let Some((best_value, best_z)) = best {
        let (last, _) = objective.value_and_gradient(&state.z)?;
        if best_value < last {
            state.z = best_z;
        }
    }
    Ok(steps)
}

/// Rational-quadratic kernel with the median-distance lengthscale of `z`.
pub fn rq_median(z: &Matrix) -> KernelSpec {
    KernelSpec::rational_quadratic(kernels::median_distance(z), kernels::DEFAULT_RQ_ALPHA)
}
