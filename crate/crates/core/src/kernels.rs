//! Kernels, affinities and preprocessing.
//!
//! Everything here is a pure function of its inputs. Distances are squared
//! Euclidean unless stated otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

/// Maximum number of bisection steps per affinity row.
pub const BISECTION_MAX_ITERS: usize = 200;
/// Entropy tolerance (nats) for the per-row calibration.
pub const ENTROPY_TOL: f64 = 1e-5;
/// Precision bracket searched in log space.
pub const PRECISION_BRACKET: (f64, f64) = (1e-12, 1e12);
/// Default shape parameter of the rational-quadratic kernel.
pub const DEFAULT_RQ_ALPHA: f64 = 1.0;

/// Pairwise squared Euclidean distances between the rows of `x`.
pub fn pairwise_sq_dists(x: &Matrix) -> Result<Matrix> {
    if x.nrows() == 0 {
        return Err(Error::invalid("x", "need at least one row"));
    }
    linalg::ensure_finite(x, "pairwise_sq_dists")?;
    Ok(cross_sq_dists(x, x))
}

/// Squared distances between rows of `a` and rows of `b` (no validation).
pub(crate) fn cross_sq_dists(a: &Matrix, b: &Matrix) -> Matrix {
    let (n, q, d) = (a.nrows(), b.nrows(), a.ncols());
    let mut out = Matrix::zeros(n, q);
    let same = std::ptr::eq(a, b);
    for i in 0..n {
        let start = if same { i + 1 } else { 0 };
        for j in start..q {
            let mut s = 0.0;
            for k in 0..d {
                let diff = a[(i, k)] - b[(j, k)];
                s += diff * diff;
            }
            out[(i, j)] = s;
            if same {
                out[(j, i)] = s;
            }
        }
    }
    out
}

/// Median of the pairwise (non-squared) distances among distinct row pairs.
///
/// Falls back to the mean nonzero distance when more than half the pairs
/// coincide, and to 1.0 for fully degenerate data.
pub fn median_distance(x: &Matrix) -> f64 {
    let n = x.nrows();
    let d2 = cross_sq_dists(x, x);
    let mut dists: Vec<f64> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(d2[(i, j)].sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if median > 0.0 {
        return median;
    }
    let nonzero: Vec<f64> = dists.into_iter().filter(|&v| v > 0.0).collect();
    if nonzero.is_empty() {
        1.0
    } else {
        nonzero.iter().sum::<f64>() / nonzero.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Rbf {
        lengthscale: f64,
        signal_variance: f64,
    },
    ArdRbf {
        lengthscales: Vec<f64>,
        signal_variance: f64,
    },
    RationalQuadratic {
        lengthscale: f64,
        alpha: f64,
        signal_variance: f64,
    },
    /// 1 when the (integer-coded) label rows are equal, 0 otherwise.
    Delta,
}

impl KernelSpec {
    pub fn rbf(lengthscale: f64) -> Self {
        KernelSpec::Rbf {
            lengthscale,
            signal_variance: 1.0,
        }
    }

    pub fn rational_quadratic(lengthscale: f64, alpha: f64) -> Self {
        KernelSpec::RationalQuadratic {
            lengthscale,
            alpha,
            signal_variance: 1.0,
        }
    }

    /// Unit-variance RBF whose lengthscale is the median pairwise distance of `x`.
    pub fn rbf_median(x: &Matrix) -> Self {
        Self::rbf(median_distance(x))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must be positive, got {v}")))
            }
        };
        match self {
            KernelSpec::Rbf {
                lengthscale,
                signal_variance,
            } => {
                positive("lengthscale", *lengthscale)?;
                positive("signal_variance", *signal_variance)
            }
            KernelSpec::ArdRbf {
                lengthscales,
                signal_variance,
            } => {
                if lengthscales.is_empty() {
                    return Err(Error::invalid("lengthscales", "empty"));
                }
                for &l in lengthscales {
                    positive("lengthscales", l)?;
                }
                positive("signal_variance", *signal_variance)
            }
            KernelSpec::RationalQuadratic {
                lengthscale,
                alpha,
                signal_variance,
            } => {
                positive("lengthscale", *lengthscale)?;
                positive("rq_alpha", *alpha)?;
                positive("signal_variance", *signal_variance)
            }
            KernelSpec::Delta => Ok(()),
        }
    }

    /// Kernel value as a function of squared distance, for isotropic kernels.
    pub fn value_from_sq_dist(&self, d2: f64) -> Option<f64> {
        match *self {
            KernelSpec::Rbf {
                lengthscale,
                signal_variance,
            } => Some(signal_variance * (-0.5 * d2 / (lengthscale * lengthscale)).exp()),
            KernelSpec::RationalQuadratic {
                lengthscale,
                alpha,
                signal_variance,
            } => {
                let base = 1.0 + d2 / (2.0 * alpha * lengthscale * lengthscale);
                Some(signal_variance * if alpha == 1.0 { 1.0 / base } else { base.powf(-alpha) })
            }
            KernelSpec::ArdRbf { .. } | KernelSpec::Delta => None,
        }
    }

    /// Derivative of the kernel value with respect to the squared distance.
    pub fn derivative_from_sq_dist(&self, d2: f64) -> Option<f64> {
        match *self {
            KernelSpec::Rbf {
                lengthscale,
                signal_variance,
            } => {
                let l2 = lengthscale * lengthscale;
                Some(-0.5 / l2 * signal_variance * (-0.5 * d2 / l2).exp())
            }
            KernelSpec::RationalQuadratic {
                lengthscale,
                alpha,
                signal_variance,
            } => {
                let c = 2.0 * alpha * lengthscale * lengthscale;
                let base = 1.0 + d2 / c;
                let pow = if alpha == 1.0 { 1.0 / (base * base) } else { base.powf(-alpha - 1.0) };
                Some(-signal_variance * alpha / c * pow)
            }
            KernelSpec::ArdRbf { .. } | KernelSpec::Delta => None,
        }
    }
}

/// Evaluate `spec` on every pair of rows `(a_i, b_j)`.
pub fn eval_kernel(spec: &KernelSpec, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    spec.validate()?;
    if a.ncols() != b.ncols() {
        return Err(Error::shape("eval_kernel feature dimension", a.ncols(), b.ncols()));
    }
    linalg::ensure_finite(a, "eval_kernel")?;
    linalg::ensure_finite(b, "eval_kernel")?;
    match spec {
        KernelSpec::Delta => {
            let integral = |m: &Matrix| m.iter().all(|v| v.fract() == 0.0);
            if !integral(a) || !integral(b) {
                return Err(Error::Domain {
                    context: "delta kernel",
                    reason: "labels must be integer-coded".into(),
                });
            }
            Ok(Matrix::from_fn(a.nrows(), b.nrows(), |i, j| {
                if a.row(i) == b.row(j) {
                    1.0
                } else {
                    0.0
                }
            }))
        }
        KernelSpec::ArdRbf {
            lengthscales,
            signal_variance,
        } => {
            if lengthscales.len() != a.ncols() {
                return Err(Error::shape(
                    "ARD lengthscales",
                    a.ncols(),
                    lengthscales.len(),
                ));
            }
            Ok(Matrix::from_fn(a.nrows(), b.nrows(), |i, j| {
                let mut s = 0.0;
                for (k, l) in lengthscales.iter().enumerate() {
                    let diff = (a[(i, k)] - b[(j, k)]) / l;
                    s += diff * diff;
                }
                signal_variance * (-0.5 * s).exp()
            }))
        }
        isotropic => {
            let d2 = cross_sq_dists(a, b);
            Ok(d2.map(|v| isotropic.value_from_sq_dist(v).expect("isotropic kernel")))
        }
    }
}

/// Double centering `H K H` with `H = I - 11^T / n`.
pub fn center_kernel(k: &Matrix) -> Result<Matrix> {
    linalg::ensure_square(k, "center_kernel")?;
    let n = k.nrows();
    if n == 0 {
        return Ok(k.clone());
    }
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).sum() / nf).collect();
    let col_means: Vec<f64> = (0..n).map(|j| k.column(j).sum() / nf).collect();
    let grand = row_means.iter().sum::<f64>() / nf;
    Ok(Matrix::from_fn(n, n, |i, j| {
        k[(i, j)] - row_means[i] - col_means[j] + grand
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    EntropicAffinity,
    StudentT,
    SqDist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    JointSumOne,
    None,
}

/// A square nonnegative similarity matrix tagged with how it was built.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub matrix: Matrix,
    pub construction: Construction,
    pub normalization: Normalization,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    /// Raw squared distances of the rows of `x`.
    pub fn sq_dists(x: &Matrix) -> Result<Self> {
        Ok(SimilarityMatrix {
            matrix: pairwise_sq_dists(x)?,
            construction: Construction::SqDist,
            normalization: Normalization::None,
        })
    }
}

fn row_distribution(d: &Matrix, row: usize, precision: f64, out: &mut [f64]) -> f64 {
    let n = d.ncols();
    let dmin = (0..n)
        .filter(|&j| j != row)
        .map(|j| d[(row, j)])
        .fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for j in 0..n {
        out[j] = if j == row {
            0.0
        } else {
            (-(d[(row, j)] - dmin) * precision).exp()
        };
        total += out[j];
    }
    let mut entropy = 0.0;
    for p in out.iter_mut() {
        *p /= total;
        if *p > 0.0 {
            entropy -= *p * p.ln();
        }
    }
    entropy
}

/// Row-conditional Gaussian affinities calibrated by bisection so that every
/// row has Shannon entropy `ln(perplexity)`.
///
/// The target is capped at `ln(n - 1)`, the largest entropy a row over
/// `n - 1` neighbours can reach. Returns the row-stochastic matrix and the
/// per-row precisions.
pub fn conditional_entropic_affinity(d: &Matrix, perplexity: f64) -> Result<(Matrix, Vec<f64>)> {
    linalg::ensure_square(d, "entropic_affinity")?;
    linalg::ensure_finite(d, "entropic_affinity")?;
    let n = d.nrows();
    if n < 2 {
        return Err(Error::invalid("n", "entropic affinity needs at least two points"));
    }
    if !(perplexity > 1.0 && perplexity < n as f64) {
        return Err(Error::invalid(
            "perplexity",
            format!("must lie in (1, {n}), got {perplexity}"),
        ));
    }
    let target = perplexity.ln().min(((n - 1) as f64).ln());
    let (lo0, hi0) = (PRECISION_BRACKET.0.ln(), PRECISION_BRACKET.1.ln());
    let mut cond = Matrix::zeros(n, n);
    let mut precisions = vec![0.0; n];
    let mut row = vec![0.0; n];
    let mut worst: Option<(usize, f64)> = None;
    for i in 0..n {
        let (mut lo, mut hi) = (lo0, hi0);
        let mut log_beta = 0.0f64.clamp(lo, hi);
        let mut gap = f64::INFINITY;
        for _ in 0..BISECTION_MAX_ITERS {
            let h = row_distribution(d, i, log_beta.exp(), &mut row);
            gap = h - target;
            if gap.abs() <= ENTROPY_TOL {
                break;
            }
            if gap > 0.0 {
                lo = log_beta;
            } else {
                hi = log_beta;
            }
            log_beta = 0.5 * (lo + hi);
        }
        if gap.abs() > ENTROPY_TOL {
            // Keep the last evaluated distribution consistent with log_beta.
            gap = row_distribution(d, i, log_beta.exp(), &mut row) - target;
            if gap.abs() > ENTROPY_TOL && worst.is_none_or(|(_, g)| gap.abs() > g) {
                worst = Some((i, gap.abs()));
            }
        }
        precisions[i] = log_beta.exp();
        for j in 0..n {
            cond[(i, j)] = row[j];
        }
    }
    if let Some((row, gap)) = worst {
        return Err(Error::BisectionFailed { row, gap });
    }
    Ok((cond, precisions))
}

/// Symmetrized, jointly normalized entropic affinity `(P + P^T) / (2n)`.
pub fn entropic_affinity(d: &Matrix, perplexity: f64) -> Result<SimilarityMatrix> {
    let (cond, _) = conditional_entropic_affinity(d, perplexity)?;
    let n = cond.nrows() as f64;
    let sym = (&cond + cond.transpose()) / (2.0 * n);
    Ok(SimilarityMatrix {
        matrix: sym,
        construction: Construction::EntropicAffinity,
        normalization: Normalization::JointSumOne,
    })
}

/// Unnormalized Student-t weights `(1 + d_ij)^-1` with zero diagonal, plus their sum.
pub(crate) fn student_t_weights(d2: &Matrix) -> (Matrix, f64) {
    let m = d2.nrows();
    let mut w = Matrix::zeros(m, m);
    let mut total = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            let v = 1.0 / (1.0 + d2[(i, j)]);
            w[(i, j)] = v;
            w[(j, i)] = v;
            total += 2.0 * v;
        }
    }
    (w, total)
}

/// Jointly normalized Student-t affinity of the rows of `z`.
pub fn student_t_affinity(z: &Matrix) -> Result<SimilarityMatrix> {
    if z.nrows() < 2 {
        return Err(Error::invalid("m", "Student-t affinity needs at least two points"));
    }
    let d2 = pairwise_sq_dists(z)?;
    let (w, total) = student_t_weights(&d2);
    Ok(SimilarityMatrix {
        matrix: w / total,
        construction: Construction::StudentT,
        normalization: Normalization::JointSumOne,
    })
}

/// Principal component projection fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// d x k matrix of unit-norm principal directions.
    #[serde(with = "crate::linalg::serde_matrix")]
    pub components: Matrix,
    /// Variance captured by each retained component.
    pub explained_variance: Vec<f64>,
}

impl Pca {
    pub fn fit(x: &Matrix, k: usize) -> Result<Self> {
        let (n, d) = (x.nrows(), x.ncols());
        if k < 1 || k > n.min(d) {
            return Err(Error::invalid(
                "k",
                format!("must lie in [1, {}], got {k}", n.min(d)),
            ));
        }
        linalg::ensure_finite(x, "pca")?;
        let mean: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();
        let centered = Matrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let (values, vectors) = linalg::sorted_symmetric_eigen(&cov);
        Ok(Pca {
            mean,
            components: vectors.columns(0, k).into_owned(),
            explained_variance: values.iter().take(k).map(|v| v.max(0.0)).collect(),
        })
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.mean.len() {
            return Err(Error::shape("pca transform", self.mean.len(), x.ncols()));
        }
        let centered = Matrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - self.mean[j]);
        Ok(centered * &self.components)
    }

    /// Map projected coordinates back to the input space.
    pub fn inverse_transform(&self, scores: &Matrix) -> Matrix {
        let mut out = scores * self.components.transpose();
        for mut row in out.row_iter_mut() {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        out
    }
}

/// Project `x` onto its top-`k` principal components.
pub fn pca_reduce(x: &Matrix, k: usize) -> Result<Matrix> {
    Pca::fit(x, k)?.transform(x)
}

/// Per-column z-score statistics (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
        let std = x
            .column_iter()
            .zip(&mean)
            .map(|(c, m)| (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt())
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.mean.len() {
            return Err(Error::shape("standardize", self.mean.len(), x.ncols()));
        }
        Ok(Matrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            if self.std[j] > 0.0 {
                (x[(i, j)] - self.mean[j]) / self.std[j]
            } else {
                0.0
            }
        }))
    }

    /// Undo the scaling of column `j` for a vector of standardized values.
    pub fn invert_column(&self, j: usize, values: &Vector) -> Vector {
        values.map(|v| v * self.std[j] + self.mean[j])
    }
}

/// Z-score the columns of `x`, fitting statistics unless `stats` is given.
pub fn standardize(x: &Matrix, stats: Option<&Standardizer>) -> Result<(Matrix, Standardizer)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => Standardizer::fit(x),
    };
    let out = stats.apply(x)?;
    Ok((out, stats))
}
