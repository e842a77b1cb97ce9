//! Clustering scores, downstream regressors and calibration measures.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::kernels::{self, KernelSpec};
use crate::linalg::{self, Matrix, Vector};
use crate::rng::{self, Purpose};
use crate::transport::Coupling;

const LLOYD_MAX_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Cluster ids relabeled in order of first appearance.
    pub labels: Vec<usize>,
    pub centers: Matrix,
    pub inertia: f64,
}

/// Lloyd's algorithm with k-means++ seeding; best inertia over `restarts`.
pub fn kmeans(points: &Matrix, k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid("k", format!("must lie in 1..={n}, got {k}")));
    }
    linalg::ensure_finite(points, "kmeans points")?;
    if k == n {
        return Ok(KMeans {
            labels: (0..n).collect(),
            centers: points.clone(),
            inertia: 0.0,
        });
    }
    let restarts = restarts.max(1);
    let mut best: Option<KMeans> = None;
    for r in 0..restarts {
        let mut rng = rng::stream(seed, Purpose::KMeans, r as u32);
        if let Some(run) = lloyd(points, k, &mut rng) {
            if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
                best = Some(run);
            }
        }
    }
    let mut best = best.ok_or(Error::EmptyCluster { restarts })?;
    let order = first_appearance(&best.labels);
    let mut centers = best.centers.clone();
    for (old, &new) in order.iter().enumerate() {
        centers.set_row(new, &best.centers.row(old));
    }
    best.labels = best.labels.iter().map(|&l| order[l]).collect();
    best.centers = centers;
    Ok(best)
}

/// Map each label to its rank of first appearance.
fn first_appearance(labels: &[usize]) -> Vec<usize> {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut order = vec![usize::MAX; k];
    let mut next = 0;
    for &l in labels {
        if order[l] == usize::MAX {
            order[l] = next;
            next += 1;
        }
    }
    order
}

fn sq_dist_row(points: &Matrix, i: usize, centers: &Matrix, c: usize) -> f64 {
    points
        .row(i)
        .iter()
        .zip(centers.row(c).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn lloyd<R: Rng>(points: &Matrix, k: usize, rng: &mut R) -> Option<KMeans> {
    let (n, d) = (points.nrows(), points.ncols());
    let mut centers = Matrix::zeros(k, d);
    let first = rng.random_range(0..n);
    centers.set_row(0, &points.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist_row(points, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.set_row(c, &points.row(pick));
        for (i, v) in nearest.iter_mut().enumerate() {
            *v = v.min(sq_dist_row(points, i, &centers, c));
        }
    }

    let mut labels = vec![0usize; n];
    for _ in 0..LLOYD_MAX_ITERS {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let dist = sq_dist_row(points, i, &centers, c);
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            if *label != best.0 {
                changed = true;
                *label = best.0;
            }
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            let mut row = sums.row_mut(l);
            row += points.row(i);
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            let mean = sums.row(c) / counts[c] as f64;
            centers.set_row(c, &mean);
        }
        if !changed {
            break;
        }
    }
    let inertia = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist_row(points, i, &centers, l))
        .sum();
    Some(KMeans {
        labels,
        centers,
        inertia,
    })
}

fn check_lengths(a: usize, b: usize, context: &'static str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(context, a, b))
    }
}

fn entropy_of_counts<'a>(counts: impl Iterator<Item = &'a usize>, n: f64) -> f64 {
    counts
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

struct Contingency {
    joint: BTreeMap<(usize, usize), usize>,
    a: BTreeMap<usize, usize>,
    b: BTreeMap<usize, usize>,
    n: f64,
}

impl Contingency {
    fn new(a: &[usize], b: &[usize]) -> Self {
        let mut joint = BTreeMap::new();
        let mut ca = BTreeMap::new();
        let mut cb = BTreeMap::new();
        for (&x, &y) in a.iter().zip(b) {
            *joint.entry((x, y)).or_insert(0) += 1;
            *ca.entry(x).or_insert(0) += 1;
            *cb.entry(y).or_insert(0) += 1;
        }
        Contingency {
            joint,
            a: ca,
            b: cb,
            n: a.len() as f64,
        }
    }

    fn mutual_information(&self) -> f64 {
        self.joint
            .iter()
            .map(|(&(x, y), &c)| {
                let pxy = c as f64 / self.n;
                let px = self.a[&x] as f64 / self.n;
                let py = self.b[&y] as f64 / self.n;
                pxy * (pxy / (px * py)).ln()
            })
            .sum::<f64>()
            .max(0.0)
    }
}

/// `1 - H(C|K) / H(C)`; 1 when the classes have zero entropy.
pub fn homogeneity(true_labels: &[usize], clusters: &[usize]) -> Result<f64> {
    check_lengths(true_labels.len(), clusters.len(), "homogeneity")?;
    if true_labels.is_empty() {
        return Ok(1.0);
    }
    let t = Contingency::new(true_labels, clusters);
    let h_c = entropy_of_counts(t.a.values(), t.n);
    if h_c <= 0.0 {
        return Ok(1.0);
    }
    let h_k = entropy_of_counts(t.b.values(), t.n);
    let h_ck = entropy_of_counts(t.joint.values(), t.n) - h_k;
    Ok((1.0 - h_ck / h_c).clamp(0.0, 1.0))
}

/// Mutual information normalized by the arithmetic mean of the entropies.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a.len(), b.len(), "nmi")?;
    if a.is_empty() {
        return Ok(1.0);
    }
    let t = Contingency::new(a, b);
    let ha = entropy_of_counts(t.a.values(), t.n);
    let hb = entropy_of_counts(t.b.values(), t.n);
    if ha <= 0.0 && hb <= 0.0 {
        return Ok(1.0);
    }
    let denom = 0.5 * (ha + hb);
    Ok((t.mutual_information() / denom).clamp(0.0, 1.0))
}

/// Mean silhouette coefficient; singleton-cluster points score 0.
///
/// With `weights`, within/between distances are weighted means and the
/// final average is weighted as well.
pub fn silhouette(points: &Matrix, labels: &[usize], weights: Option<&[f64]>) -> Result<f64> {
    let n = points.nrows();
    check_lengths(n, labels.len(), "silhouette labels")?;
    if let Some(w) = weights {
        check_lengths(n, w.len(), "silhouette weights")?;
        if w.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("weights", "must be nonnegative"));
        }
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::invalid("labels", "silhouette needs at least two clusters"));
    }
    let index: BTreeMap<usize, usize> = clusters.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let d2 = kernels::pairwise_sq_dists(points)?;
    let k = clusters.len();
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut mass = vec![0.0; k];
        for j in 0..n {
            if j != i {
                let c = index[&labels[j]];
                sums[c] += w(j) * d2[(i, j)].sqrt();
                mass[c] += w(j);
            }
        }
        let own = index[&labels[i]];
        let s = if mass[own] > 0.0 {
            let a = sums[own] / mass[own];
            let b = (0..k)
                .filter(|&c| c != own && mass[c] > 0.0)
                .map(|c| sums[c] / mass[c])
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 && b.is_finite() {
                (b - a) / denom
            } else {
                0.0
            }
        } else {
            0.0
        };
        total += w(i) * s;
        weight_sum += w(i);
    }
    if weight_sum <= 0.0 {
        return Err(Error::invalid("weights", "must not all be zero"));
    }
    Ok(total / weight_sum)
}

/// Mean of the `k` nearest training targets; distance ties go to the smaller index.
pub fn knn_regress(z_train: &Matrix, y_train: &[f64], z_test: &Matrix, k: usize) -> Result<Vec<f64>> {
    let n = z_train.nrows();
    check_lengths(n, y_train.len(), "knn targets")?;
    if k == 0 || k > n {
        return Err(Error::invalid("k", format!("must lie in 1..={n}, got {k}")));
    }
    if z_train.ncols() != z_test.ncols() {
        return Err(Error::shape("knn features", z_train.ncols(), z_test.ncols()));
    }
    let d2 = kernels::cross_sq_dists(z_test, z_train);
    Ok((0..z_test.nrows())
        .map(|r| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| d2[(r, a)].total_cmp(&d2[(r, b)]).then(a.cmp(&b)));
            idx[..k].iter().map(|&i| y_train[i]).sum::<f64>() / k as f64
        })
        .collect())
}

/// RBF kernel ridge regression `K(test, train) (K + ridge I)^-1 y`.
pub fn krr_regress(
    z_train: &Matrix,
    y_train: &[f64],
    z_test: &Matrix,
    lengthscale: f64,
    ridge: f64,
) -> Result<Vec<f64>> {
    check_lengths(z_train.nrows(), y_train.len(), "krr targets")?;
    if !(ridge > 0.0) {
        return Err(Error::invalid("ridge", "must be positive"));
    }
    let spec = KernelSpec::rbf(lengthscale);
    let mut gram = kernels::eval_kernel(&spec, z_train, z_train)?;
    for i in 0..gram.nrows() {
        gram[(i, i)] += ridge;
    }
    let y = Matrix::from_column_slice(y_train.len(), 1, y_train);
    let coef = linalg::cholesky_ladder(&gram, "krr")?.0.solve(&y);
    let cross = kernels::eval_kernel(&spec, z_test, z_train)?;
    Ok((cross * coef).iter().copied().collect())
}

/// Coefficient of determination.
pub fn r2(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_lengths(y_true.len(), y_pred.len(), "r2")?;
    if y_true.is_empty() {
        return Err(Error::invalid("y_true", "must not be empty"));
    }
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Domain {
            context: "r2",
            reason: "constant y_true".into(),
        });
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub const DOWNSTREAM_KNN_K: usize = 10;
pub const DOWNSTREAM_KRR_LENGTHSCALE: f64 = 1.0;
pub const DOWNSTREAM_KRR_RIDGE: f64 = 1.0;

/// Center embeddings on the training mean and divide by one common scale
/// (root mean squared training coordinate), preserving their geometry.
pub fn isotropic_scale(z_train: &Matrix, z_test: &Matrix) -> Result<(Matrix, Matrix)> {
    if z_train.ncols() != z_test.ncols() {
        return Err(Error::shape("embedding columns", z_train.ncols(), z_test.ncols()));
    }
    let mean = z_train.row_mean();
    let centered = |z: &Matrix| Matrix::from_fn(z.nrows(), z.ncols(), |i, j| z[(i, j)] - mean[j]);
    let (a, b) = (centered(z_train), centered(z_test));
    let scale = linalg::rms(&a);
    if !(scale > 0.0) {
        return Err(Error::Domain {
            context: "isotropic_scale",
            reason: "training embeddings are all identical".into(),
        });
    }
    Ok((a / scale, b / scale))
}

/// Held-out R² of the two downstream regressors on an embedding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownstreamScores {
    pub knn_r2: f64,
    pub krr_r2: f64,
}

/// kNN (k = 10) and RBF kernel ridge (lengthscale 1, ridge 1) fitted on
/// isotropically scaled embeddings and standardized training targets.
pub fn downstream_scores(z_train: &Matrix, y_train: &[f64], z_test: &Matrix, y_test: &[f64]) -> Result<DownstreamScores> {
    check_lengths(z_train.nrows(), y_train.len(), "downstream targets")?;
    check_lengths(z_test.nrows(), y_test.len(), "downstream test targets")?;
    let (a, b) = isotropic_scale(z_train, z_test)?;
    let n = y_train.len() as f64;
    let mean = y_train.iter().sum::<f64>() / n;
    let sd = (y_train.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    let ys: Vec<f64> = y_train.iter().map(|y| (y - mean) / sd).collect();
    let back = |p: Vec<f64>| -> Vec<f64> { p.into_iter().map(|v| v * sd + mean).collect() };
    let k = DOWNSTREAM_KNN_K.min(y_train.len());
    let knn = back(knn_regress(&a, &ys, &b, k)?);
    let krr = back(krr_regress(&a, &ys, &b, DOWNSTREAM_KRR_LENGTHSCALE, DOWNSTREAM_KRR_RIDGE)?);
    Ok(DownstreamScores {
        knn_r2: r2(y_test, &knn)?,
        krr_r2: r2(y_test, &krr)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub levels: Vec<f64>,
    pub coverages: Vec<f64>,
}

/// Empirical coverage of the symmetric Gaussian bands at levels `k / (n_bins + 1)`.
pub fn calibration_curve(means: &[f64], stds: &[f64], y_true: &[f64], n_bins: usize) -> Result<CalibrationCurve> {
    check_lengths(means.len(), stds.len(), "calibration stds")?;
    check_lengths(means.len(), y_true.len(), "calibration targets")?;
    if n_bins == 0 {
        return Err(Error::invalid("n_bins", "must be at least 1"));
    }
    if means.is_empty() {
        return Err(Error::invalid("means", "must not be empty"));
    }
    if stds.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain {
            context: "calibration",
            reason: "standard deviations must be positive".into(),
        });
    }
    let normal = Normal::standard();
    // Standardized absolute residuals; a point is inside band k iff r <= z_k.
    let residuals: Vec<f64> = means
        .iter()
        .zip(stds)
        .zip(y_true)
        .map(|((m, s), y)| (y - m).abs() / s)
        .collect();
    let n = residuals.len() as f64;
    let mut levels = Vec::with_capacity(n_bins);
    let mut coverages = Vec::with_capacity(n_bins);
    for k in 1..=n_bins {
        let level = k as f64 / (n_bins + 1) as f64;
        let z = normal.inverse_cdf((1.0 + level) / 2.0);
        let inside = residuals.iter().filter(|&&r| r <= z).count();
        levels.push(level);
        coverages.push(inside as f64 / n);
    }
    Ok(CalibrationCurve { levels, coverages })
}

/// Mean absolute calibration error.
pub fn mace(levels: &[f64], coverages: &[f64]) -> Result<f64> {
    check_lengths(levels.len(), coverages.len(), "mace")?;
    if levels.is_empty() {
        return Err(Error::invalid("levels", "must not be empty"));
    }
    Ok(levels.iter().zip(coverages).map(|(a, c)| (a - c).abs()).sum::<f64>() / levels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeLabels {
    pub labels: Vec<usize>,
    /// Prototypes without mass, labeled with the majority class.
    pub empty: Vec<usize>,
}

/// Majority class by transported mass for each prototype.
pub fn prototype_labels(coupling: &Coupling, y_labels: &[usize]) -> Result<PrototypeLabels> {
    let t = coupling.plan();
    check_lengths(t.nrows(), y_labels.len(), "prototype labels")?;
    let classes = y_labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &c in y_labels {
        counts[c] += 1;
    }
    let majority = argmax(counts.iter().map(|&c| c as f64));
    let mut labels = Vec::with_capacity(t.ncols());
    let mut empty = Vec::new();
    for j in 0..t.ncols() {
        let mut mass = vec![0.0; classes];
        for (i, &c) in y_labels.iter().enumerate() {
            mass[c] += t[(i, j)];
        }
        if mass.iter().all(|&v| v <= 0.0) {
            empty.push(j);
            labels.push(majority);
        } else {
            labels.push(argmax(mass.into_iter()));
        }
    }
    Ok(PrototypeLabels { labels, empty })
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Mean log predictive density of independent Gaussians.
pub fn gaussian_mll(means: &[f64], variances: &[f64], y_true: &[f64]) -> Result<f64> {
    check_lengths(means.len(), variances.len(), "mll variances")?;
    check_lengths(means.len(), y_true.len(), "mll targets")?;
    if means.is_empty() {
        return Err(Error::invalid("means", "must not be empty"));
    }
    let total: f64 = means
        .iter()
        .zip(variances)
        .zip(y_true)
        .map(|((m, v), y)| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (y - m).powi(2) / v))
        .sum();
    Ok(total / means.len() as f64)
}

pub fn mse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_lengths(y_true.len(), y_pred.len(), "mse")?;
    if y_true.is_empty() {
        return Err(Error::invalid("y_true", "must not be empty"));
    }
    Ok(y_true.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y_true.len() as f64)
}

/// Convert integer-coded label column to class ids.
pub fn labels_from_column(v: &Vector) -> Result<Vec<usize>> {
    v.iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && x < u32::MAX as f64 {
                Ok(x as usize)
            } else {
                Err(Error::Data(format!("label {x} is not a nonnegative integer")))
            }
        })
        .collect()
}
