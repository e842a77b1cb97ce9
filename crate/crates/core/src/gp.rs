//! Exact Gaussian-process regression with an ARD squared-exponential kernel,
//! and the SDR-GP pipeline that feeds projected embeddings to it.

use serde::{Deserialize, Serialize};

use crate::driver::{self, PrototypeCount, SdrConfig, SdrModel, Task};
use crate::embedding::Adam;
use crate::error::{Error, Result};
use crate::kernels::{self, Standardizer};
use crate::linalg::{self, Matrix, Vector};
use crate::metrics;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Log-hyperparameters are kept inside this box during optimization.
const LOG_BOUND: f64 = 15.0;
const MIN_LOG_NOISE: f64 = -13.8; // ~1e-6

/// Log-scale ARD hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_variance: f64,
    pub log_noise_variance: f64,
}

impl GpHyper {
    pub fn new(lengthscales: &[f64], signal_variance: f64, noise_variance: f64) -> Result<Self> {
        if lengthscales.is_empty() || lengthscales.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::invalid("lengthscales", "must be positive and finite"));
        }
        if !(signal_variance > 0.0 && signal_variance.is_finite()) {
            return Err(Error::invalid("signal_variance", "must be positive"));
        }
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(Error::invalid("noise_variance", "must be positive"));
        }
        Ok(GpHyper {
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_signal_variance: signal_variance.ln(),
            log_noise_variance: noise_variance.ln(),
        })
    }

    /// Data-driven starting point: column spreads, target variance, 10% noise.
    pub fn heuristic(z: &Matrix, y: &[f64]) -> Result<Self> {
        let scaler = Standardizer::fit(z);
        let ls: Vec<f64> = scaler.std.iter().map(|&s| if s > 0.0 { s } else { 1.0 }).collect();
        let n = y.len().max(1) as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let var = if var > 0.0 { var } else { 1.0 };
        GpHyper::new(&ls, var, 0.1 * var)
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|v| v.exp()).collect()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    /// Log-parameters: lengthscales, then signal and noise variance.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengthscales.clone();
        v.push(self.log_signal_variance);
        v.push(self.log_noise_variance);
        v
    }

    /// Inverse of [`GpHyper::to_vec`]; needs at least three entries.
    pub fn from_vec(v: &[f64]) -> Self {
        assert!(v.len() >= 3, "log-parameter vector too short");
        let p = v.len() - 2;
        GpHyper {
            log_lengthscales: v[..p].to_vec(),
            log_signal_variance: v[p],
            log_noise_variance: v[p + 1],
        }
    }
}

/// `sigma_f^2 exp(-1/2 sum_d (a_d - b_d)^2 / l_d^2)`
pub fn ard_kernel(hyper: &GpHyper, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.ncols() != hyper.dim() || b.ncols() != hyper.dim() {
        return Err(Error::shape("ard kernel inputs", hyper.dim(), a.ncols().max(b.ncols())));
    }
    let inv: Vec<f64> = hyper.log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect();
    let sf2 = hyper.signal_variance();
    Ok(Matrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let r2: f64 = (0..inv.len()).map(|d| (a[(i, d)] - b[(j, d)]).powi(2) * inv[d]).sum();
        sf2 * (-0.5 * r2).exp()
    }))
}

fn check_training(z: &Matrix, y: &[f64], hyper: &GpHyper) -> Result<()> {
    if z.nrows() != y.len() {
        return Err(Error::shape("gp targets", z.nrows(), y.len()));
    }
    if z.ncols() != hyper.dim() {
        return Err(Error::shape("gp inputs", hyper.dim(), z.ncols()));
    }
    if z.nrows() == 0 {
        return Err(Error::invalid("z_train", "must not be empty"));
    }
    linalg::ensure_finite(z, "gp inputs")?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gp targets"));
    }
    Ok(())
}

/// Factorization of `A = K + sigma_n^2 I` together with `alpha = A^-1 y`.
struct Factor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: Vector,
    k: Matrix,
}

fn factor(hyper: &GpHyper, z: &Matrix, y: &[f64]) -> Result<Factor> {
    let k = ard_kernel(hyper, z, z)?;
    let mut a = k.clone();
    let sn2 = hyper.noise_variance();
    for i in 0..a.nrows() {
        a[(i, i)] += sn2;
    }
    let (chol, _) = linalg::cholesky_ladder(&a, "gp covariance")?;
    let alpha = chol.solve(&Vector::from_column_slice(y));
    Ok(Factor { chol, alpha, k })
}

fn lml_from(f: &Factor, y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let fit: f64 = y.iter().zip(f.alpha.iter()).map(|(a, b)| a * b).sum();
    let logdet: f64 = 2.0 * f.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * fit - 0.5 * logdet - 0.5 * n * LN_2PI
}

/// Exact log marginal likelihood `log N(y | 0, K + sigma_n^2 I)`.
pub fn log_marginal_likelihood(hyper: &GpHyper, z: &Matrix, y: &[f64]) -> Result<f64> {
    check_training(z, y, hyper)?;
    Ok(lml_from(&factor(hyper, z, y)?, y))
}

/// Log marginal likelihood and its gradient in log-hyperparameter order
/// `(log l_1..log l_p, log sigma_f^2, log sigma_n^2)`.
pub fn lml_and_gradient(hyper: &GpHyper, z: &Matrix, y: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_training(z, y, hyper)?;
    let f = factor(hyper, z, y)?;
    let value = lml_from(&f, y);
    let n = z.nrows();
    let a_inv = f.chol.inverse();
    // W = alpha alpha^T - A^-1; dLML/dtheta = 1/2 tr(W dA/dtheta)
    let w = &f.alpha * f.alpha.transpose() - a_inv;
    let mut grad = Vec::with_capacity(hyper.dim() + 2);
    for (d, l) in hyper.log_lengthscales.iter().enumerate() {
        let inv = (-2.0 * l).exp();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let diff = z[(i, d)] - z[(j, d)];
                s += w[(i, j)] * f.k[(i, j)] * diff * diff * inv;
            }
        }
        grad.push(0.5 * s);
    }
    grad.push(0.5 * w.component_mul(&f.k).sum());
    grad.push(0.5 * hyper.noise_variance() * w.diagonal().sum());
    Ok((value, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpOptions {
    pub lr: f64,
    pub steps: usize,
    /// Starting hyperparameters; `None` uses [`GpHyper::heuristic`].
    pub init: Option<GpHyper>,
}

impl Default for GpOptions {
    fn default() -> Self {
        GpOptions {
            lr: 0.1,
            steps: 100,
            init: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModel {
    pub hyper: GpHyper,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub z_train: Matrix,
    pub y_train: Vec<f64>,
    pub lml: f64,
    pub lml_trace: Vec<f64>,
    #[serde(skip)]
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    l: Matrix,
    alpha: Vector,
}

impl GpModel {
    /// Build a model at fixed hyperparameters.
    pub fn new(hyper: GpHyper, z_train: Matrix, y_train: Vec<f64>) -> Result<Self> {
        check_training(&z_train, &y_train, &hyper)?;
        let f = factor(&hyper, &z_train, &y_train)?;
        let lml = lml_from(&f, &y_train);
        Ok(GpModel {
            hyper,
            z_train,
            y_train,
            lml,
            lml_trace: Vec::new(),
            cache: Some(Cache {
                l: f.chol.l(),
                alpha: f.alpha,
            }),
        })
    }

    fn cache(&self) -> Result<Cache> {
        match &self.cache {
            Some(c) => Ok(c.clone()),
            None => {
                let f = factor(&self.hyper, &self.z_train, &self.y_train)?;
                Ok(Cache {
                    l: f.chol.l(),
                    alpha: f.alpha,
                })
            }
        }
    }

    /// Posterior mean and marginal predictive variance (noise included).
    pub fn predict(&self, z_star: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        if z_star.ncols() != self.hyper.dim() {
            return Err(Error::shape("gp prediction inputs", self.hyper.dim(), z_star.ncols()));
        }
        linalg::ensure_finite(z_star, "gp prediction inputs")?;
        let cache = self.cache()?;
        let ks = ard_kernel(&self.hyper, z_star, &self.z_train)?;
        let mean = (&ks * &cache.alpha).iter().copied().collect();
        let v = cache
            .l
            .solve_lower_triangular(&ks.transpose())
            .ok_or(Error::Factorization {
                context: "gp prediction",
                jitter: 0.0,
            })?;
        let prior = self.hyper.signal_variance() + self.hyper.noise_variance();
        let var = v
            .column_iter()
            .map(|c| {
                let raw = prior - c.norm_squared();
                if raw < -1e-8 {
                    log::warn!("gp: clamped predictive variance {raw:e}");
                }
                raw.max(0.0)
            })
            .collect();
        Ok((mean, var))
    }
}

/// Maximize the log marginal likelihood over log-hyperparameters with Adam,
/// returning the best iterate seen.
pub fn gp_fit(z: &Matrix, y: &[f64], opts: &GpOptions) -> Result<GpModel> {
    if z.nrows() < 2 {
        return Err(Error::invalid("z_train", "need at least two points"));
    }
    if !(opts.lr > 0.0) {
        return Err(Error::invalid("gp.lr", "must be positive"));
    }
    let init = match &opts.init {
        Some(h) => h.clone(),
        None => GpHyper::heuristic(z, y)?,
    };
    let (mut best_val, mut grad) = match lml_and_gradient(&init, z, y) {
        Ok((v, g)) if v.is_finite() => (v, g),
        _ => {
            return Err(Error::Domain {
                context: "gp_fit",
                reason: format!("non-finite marginal likelihood at initial hyperparameters {init:?}"),
            })
        }
    };
    let mut theta = Matrix::from_column_slice(init.dim() + 2, 1, &init.to_vec());
    let mut best = init;
    let mut trace = vec![best_val];
    let mut adam = Adam::new(theta.nrows(), 1, opts.lr);
    for _ in 0..opts.steps {
        let neg = Matrix::from_iterator(theta.nrows(), 1, grad.iter().map(|g| -g));
        adam.step(&mut theta, &neg);
        let last = theta.nrows() - 1;
        for (i, v) in theta.iter_mut().enumerate() {
            let lo = if i == last { MIN_LOG_NOISE } else { -LOG_BOUND };
            *v = v.clamp(lo, LOG_BOUND);
        }
        let h = GpHyper::from_vec(theta.as_slice());
        match lml_and_gradient(&h, z, y) {
            Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => {
                trace.push(v);
                if v > best_val {
                    best_val = v;
                    best = h;
                }
                grad = g;
            }
            // A failed factorization ends the ascent; the best iterate stands.
            _ => break,
        }
    }
    let mut model = GpModel::new(best, z.clone(), y.to_vec())?;
    model.lml_trace = trace;
    Ok(model)
}

/// Predictions and held-out scores of one GP run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpRun {
    /// Means and standard deviations on the original target scale, one column per output.
    #[serde(with = "crate::linalg::serde_matrix")]
    pub mean: Matrix,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub std: Matrix,
    pub report: GpReport,
}

/// Scores on standardized targets (training statistics), averaged over outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GpReport {
    pub test_mll: Option<f64>,
    pub test_mse: Option<f64>,
    pub test_r2: Option<f64>,
    pub mace: Option<f64>,
    pub train_lml: Vec<f64>,
    pub hyper: Vec<GpHyper>,
}

pub const CALIBRATION_BINS: usize = 99;

fn run_gps(
    z_train: &Matrix,
    ys_train: &Matrix,
    z_test: &Matrix,
    y_scaler: &Standardizer,
    y_test: Option<&Matrix>,
    opts: &GpOptions,
) -> Result<GpRun> {
    let outputs = ys_train.ncols();
    let nt = z_test.nrows();
    let mut mean = Matrix::zeros(nt, outputs);
    let mut std = Matrix::zeros(nt, outputs);
    let mut report = GpReport::default();
    let mut scores = (0.0, 0.0, 0.0, 0.0);
    let ys_test = y_test.map(|y| y_scaler.apply(y)).transpose()?;
    for c in 0..outputs {
        let yc: Vec<f64> = ys_train.column(c).iter().copied().collect();
        let gp = gp_fit(z_train, &yc, opts)?;
        let (mu, var) = gp.predict(z_test)?;
        let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        if let Some(yt) = &ys_test {
            let truth: Vec<f64> = yt.column(c).iter().copied().collect();
            scores.0 += metrics::gaussian_mll(&mu, &var, &truth)?;
            scores.1 += metrics::mse(&truth, &mu)?;
            scores.2 += metrics::r2(&truth, &mu)?;
            let curve = metrics::calibration_curve(&mu, &sd, &truth, CALIBRATION_BINS)?;
            scores.3 += metrics::mace(&curve.levels, &curve.coverages)?;
        }
        let scale = y_scaler.std[c];
        let back = y_scaler.invert_column(c, &Vector::from_vec(mu));
        mean.set_column(c, &back);
        std.set_column(c, &Vector::from_iterator(nt, sd.iter().map(|s| s * scale)));
        report.train_lml.push(gp.lml);
        report.hyper.push(gp.hyper);
    }
    if ys_test.is_some() {
        let k = outputs as f64;
        report.test_mll = Some(scores.0 / k);
        report.test_mse = Some(scores.1 / k);
        report.test_r2 = Some(scores.2 / k);
        report.mace = Some(scores.3 / k);
    }
    Ok(GpRun { mean, std, report })
}

fn check_targets(x_train: &Matrix, y_train: &Matrix, x_test: &Matrix, y_test: Option<&Matrix>) -> Result<()> {
    if x_train.nrows() != y_train.nrows() {
        return Err(Error::shape("training targets", x_train.nrows(), y_train.nrows()));
    }
    if x_test.ncols() != x_train.ncols() {
        return Err(Error::shape("test features", x_train.ncols(), x_test.ncols()));
    }
    if let Some(y) = y_test {
        if y.nrows() != x_test.nrows() || y.ncols() != y_train.ncols() {
            return Err(Error::shape("test targets", x_test.nrows(), y.nrows()));
        }
    }
    Ok(())
}

/// SDR-GP: fit SDR in the pure-DR regime with the out-of-sample map, project
/// train and test inputs, and regress each standardized output with its own GP.
pub fn sdr_gp_pipeline(
    x_train: &Matrix,
    y_train: &Matrix,
    x_test: &Matrix,
    y_test: Option<&Matrix>,
    cfg: &SdrConfig,
    opts: &GpOptions,
) -> Result<(SdrModel, GpRun)> {
    check_targets(x_train, y_train, x_test, y_test)?;
    if cfg.oos.is_none() {
        return Err(Error::invalid("oos", "the GP pipeline needs the out-of-sample map enabled"));
    }
    if cfg.task != Task::Regression {
        return Err(Error::invalid("task", "the GP pipeline needs regression targets"));
    }
    if cfg.m.resolve(x_train.nrows()) != x_train.nrows() {
        return Err(Error::invalid("m", "the GP pipeline runs with one prototype per sample"));
    }
    let model = driver::fit(x_train, y_train, cfg)?;
    let scaler = model
        .y_scaler
        .clone()
        .ok_or_else(|| Error::invalid("model", "lacks target statistics"))?;
    let z_train = model.project(x_train)?;
    let z_test = model.project(x_test)?;
    let ys_train = scaler.apply(y_train)?;
    let run = run_gps(&z_train, &ys_train, &z_test, &scaler, y_test, opts)?;
    Ok((model, run))
}

/// Baseline: the same GP head directly on standardized raw inputs.
pub fn raw_gp(
    x_train: &Matrix,
    y_train: &Matrix,
    x_test: &Matrix,
    y_test: Option<&Matrix>,
    opts: &GpOptions,
) -> Result<GpRun> {
    check_targets(x_train, y_train, x_test, y_test)?;
    let (xs, xscaler) = kernels::standardize(x_train, None)?;
    let xt = xscaler.apply(x_test)?;
    let (ys, yscaler) = kernels::standardize(y_train, None)?;
    run_gps(&xs, &ys, &xt, &yscaler, y_test, opts)
}

/// Pure-DR SDR configuration (one prototype per sample, OOS map on) with the
/// regression-regime step size and a 300-step Z budget per outer iteration.
pub fn pipeline_config(seed: u64) -> SdrConfig {
    SdrConfig {
        m: PrototypeCount::EqualsN,
        lr: 0.01,
        inner_max: 300,
        oos: Some(Default::default()),
        seed,
        ..Default::default()
    }
}

/// Candidate OOS lengthscales, as multiples of the median pairwise distance.
pub const OOS_LENGTHSCALE_FACTORS: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

/// Folds used by [`sdr_gp_pipeline_selected`].
pub const SELECTION_FOLDS: usize = 5;

/// Outcome of the validation search over OOS kernel lengthscales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthscaleSelection {
    pub factors: Vec<f64>,
    pub lengthscales: Vec<f64>,
    pub validation_mll: Vec<f64>,
    pub chosen: f64,
}

/// Pick the RBF lengthscale of the out-of-sample kernel by mean held-out GP
/// predictive likelihood over a k-fold partition of the training data only.
pub fn select_oos_lengthscale(
    x_train: &Matrix,
    y_train: &Matrix,
    cfg: &SdrConfig,
    opts: &GpOptions,
    factors: &[f64],
    folds: usize,
) -> Result<LengthscaleSelection> {
    if factors.is_empty() || factors.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::invalid("factors", "need at least one positive factor"));
    }
    let scaled = if cfg.standardize {
        kernels::standardize(x_train, None)?.0
    } else {
        x_train.clone()
    };
    let median = kernels::median_distance(&scaled);
    let n = x_train.nrows();
    let partition = crate::datasets::kfold(n, folds, cfg.seed)?;
    let pick = |m: &Matrix, rows: &[usize]| crate::datasets::select_rows(m, rows);
    let splits: Vec<_> = partition
        .iter()
        .map(|val| {
            let fit: Vec<usize> = (0..n).filter(|i| val.binary_search(i).is_err()).collect();
            (pick(x_train, &fit), pick(y_train, &fit), pick(x_train, val), pick(y_train, val))
        })
        .collect();
    let mut out = LengthscaleSelection {
        factors: factors.to_vec(),
        lengthscales: Vec::new(),
        validation_mll: Vec::new(),
        chosen: f64::NAN,
    };
    let mut best = f64::NEG_INFINITY;
    for &f in factors {
        let ls = f * median;
        let mut c = cfg.clone();
        c.oos.get_or_insert_with(Default::default).kernel = Some(kernels::KernelSpec::rbf(ls));
        let mut total = 0.0;
        for (xf, yf, xv, yv) in &splits {
            let (_, run) = sdr_gp_pipeline(xf, yf, xv, Some(yv), &c, opts)?;
            total += run.report.test_mll.unwrap_or(f64::NEG_INFINITY);
        }
        let v = total / splits.len() as f64;
        log::debug!("oos lengthscale {ls:.4}: cross-validated mll {v:.4}");
        if v > best {
            best = v;
            out.chosen = ls;
        }
        out.lengthscales.push(ls);
        out.validation_mll.push(v);
    }
    if !best.is_finite() {
        return Err(Error::NonFiniteObjective { step: "lengthscale validation" });
    }
    Ok(out)
}

/// [`sdr_gp_pipeline`] after choosing the OOS lengthscale by cross-validation.
pub fn sdr_gp_pipeline_selected(
    x_train: &Matrix,
    y_train: &Matrix,
    x_test: &Matrix,
    y_test: Option<&Matrix>,
    cfg: &SdrConfig,
    opts: &GpOptions,
) -> Result<(SdrModel, GpRun, LengthscaleSelection)> {
    check_targets(x_train, y_train, x_test, y_test)?;
    let sel = select_oos_lengthscale(x_train, y_train, cfg, opts, &OOS_LENGTHSCALE_FACTORS, SELECTION_FOLDS)?;
    let mut c = cfg.clone();
    c.oos.get_or_insert_with(Default::default).kernel = Some(kernels::KernelSpec::rbf(sel.chosen));
    let (model, run) = sdr_gp_pipeline(x_train, y_train, x_test, y_test, &c, opts)?;
    Ok((model, run, sel))
}
