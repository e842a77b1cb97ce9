//! Block-coordinate descent for the full SDR objective
//!
//! `J(Z, T) = (1 - alpha) S(T) + alpha GW(P, Q(Z), T) - eta CKA(K_Z, T^T K_Y T)`
//!
//! and, with the out-of-sample map enabled, its extension by the
//! projection-consistency and ridge terms. Each outer iteration runs a
//! warm-started T-step, a Z-step, then optionally an L-step with a soft update
//! of `Z`, so the embedding is always fitted to the current coupling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::embedding::{self, CkaConfig, EmbeddingState, SimilarityMode, ZLoopOptions, ZProblem};
use crate::error::{Error, Result};
use crate::kernels::{self, KernelSpec, Standardizer};
use crate::linalg::{self, Matrix, Vector};
use crate::metrics;
use crate::oos::{self, CouplingScaling, OosMap};
use crate::rng::{self, Purpose};
use crate::transport::{self, CgOptions, Coupling, PrototypeForm, SupervisedLoss};

pub const KMEANS_RESTARTS: usize = 50;

/// Number of prototypes, either fixed or tied to the sample count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeCount {
    Fixed(usize),
    EqualsN,
}

impl PrototypeCount {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            PrototypeCount::Fixed(m) => m,
            PrototypeCount::EqualsN => n,
        }
    }
}

impl fmt::Display for PrototypeCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrototypeCount::Fixed(m) => write!(f, "{m}"),
            PrototypeCount::EqualsN => f.write_str("equals-n"),
        }
    }
}

impl FromStr for PrototypeCount {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "equals-n" | "n" => Ok(PrototypeCount::EqualsN),
            _ => s
                .parse()
                .map(PrototypeCount::Fixed)
                .map_err(|_| format!("expected a positive integer or `equals-n`, got `{s}`")),
        }
    }
}

impl Serialize for PrototypeCount {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PrototypeCount::Fixed(m) => s.serialize_u64(*m as u64),
            PrototypeCount::EqualsN => s.serialize_str("equals-n"),
        }
    }
}

impl<'de> Deserialize<'de> for PrototypeCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(m) => Ok(PrototypeCount::Fixed(m as usize)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Spectral for regression, random for classification.
    Auto,
    Spectral,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OosConfig {
    pub lambda: f64,
    pub mu: f64,
    pub beta: f64,
    /// Input kernel; `None` selects an RBF with the median-distance lengthscale.
    pub kernel: Option<KernelSpec>,
    pub scaling: CouplingScaling,
    /// Raise `beta` linearly to 1 over this many final outer iterations.
    pub beta_ramp: usize,
}

impl Default for OosConfig {
    fn default() -> Self {
        OosConfig {
            lambda: 1e-2,
            mu: 1.0,
            beta: 0.5,
            kernel: None,
            scaling: CouplingScaling::RowNormalized,
            beta_ramp: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdrConfig {
    pub alpha: f64,
    pub eta: f64,
    pub m: PrototypeCount,
    pub p: usize,
    pub perplexity: f64,
    pub task: Task,
    pub loss: SupervisedLoss,
    pub similarity: SimilarityMode,
    pub lr: f64,
    pub outer_max: usize,
    pub inner_max: usize,
    pub outer_tol: f64,
    pub z_tol: f64,
    pub z_window: usize,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub init: InitMode,
    pub standardize: bool,
    /// Reject T-steps that raise the full objective (CKA included).
    pub t_step_guard: bool,
    pub oos: Option<OosConfig>,
    pub seed: u64,
}

impl Default for SdrConfig {
    fn default() -> Self {
        SdrConfig {
            alpha: 0.2,
            eta: 1000.0,
            m: PrototypeCount::Fixed(20),
            p: 2,
            perplexity: 20.0,
            task: Task::Regression,
            loss: SupervisedLoss::Squared,
            similarity: SimilarityMode::StudentT,
            lr: 1e-3,
            outer_max: 30,
            inner_max: 1000,
            outer_tol: 1e-6,
            z_tol: 1e-7,
            z_window: 10,
            cg_tol: 1e-9,
            cg_max_iters: 1000,
            init: InitMode::Auto,
            standardize: true,
            t_step_guard: false,
            oos: None,
            seed: 0,
        }
    }
}

impl SdrConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must lie in [0, 1], got {v}")))
            }
        };
        let positive = |name, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must be positive, got {v}")))
            }
        };
        unit("alpha", self.alpha)?;
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("eta", format!("must be nonnegative, got {}", self.eta)));
        }
        if let PrototypeCount::Fixed(m) = self.m {
            if m < 2 {
                return Err(Error::invalid("m", "need at least two prototypes"));
            }
        }
        if self.p == 0 {
            return Err(Error::invalid("p", "must be at least 1"));
        }
        if !(self.perplexity > 1.0) {
            return Err(Error::invalid("perplexity", "must exceed 1"));
        }
        positive("lr", self.lr)?;
        positive("outer_tol", self.outer_tol)?;
        positive("z_tol", self.z_tol)?;
        positive("cg_tol", self.cg_tol)?;
        if self.outer_max == 0 || self.inner_max == 0 || self.cg_max_iters == 0 {
            return Err(Error::invalid("outer_max", "iteration limits must be at least 1"));
        }
        if self.task == Task::Regression && self.loss == SupervisedLoss::ModifiedCrossEntropy {
            return Err(Error::invalid("loss", "modified cross-entropy needs classification targets"));
        }
        if let Some(o) = &self.oos {
            positive("oos.lambda", o.lambda)?;
            positive("oos.mu", o.mu)?;
            unit("oos.beta", o.beta)?;
            if let Some(k) = &o.kernel {
                k.validate()?;
            }
            if o.beta_ramp >= self.outer_max {
                return Err(Error::invalid("oos.beta_ramp", "must be smaller than outer_max"));
            }
        }
        Ok(())
    }

    fn resolved_init(&self) -> InitMode {
        match (self.init, self.task) {
            (InitMode::Auto, Task::Regression) => InitMode::Spectral,
            (InitMode::Auto, Task::Classification) => InitMode::Random,
            (mode, _) => mode,
        }
    }
}

/// Initial coupling: spectral clustering of the affinity graph, or random rows.
pub fn init_coupling(affinity: &Matrix, m: usize, mode: InitMode, seed: u64) -> Result<Coupling> {
    linalg::ensure_square(affinity, "init affinity")?;
    let n = affinity.nrows();
    if m == 0 || m > n {
        return Err(Error::invalid("m", format!("must lie in 1..={n}, got {m}")));
    }
    let h = Coupling::uniform_source(n);
    match mode {
        InitMode::Random => {
            use rand::Rng;
            let mut rng = rng::stream(seed, Purpose::CouplingInit, 0);
            let u = Matrix::from_fn(n, m, |_, _| rng.random_range(0.5..1.5));
            let plan = Matrix::from_fn(n, m, |i, j| h[i] * u[(i, j)] / u.row(i).sum());
            Coupling::new(plan, h)
        }
        InitMode::Spectral | InitMode::Auto => {
            let labels = if m == n {
                (0..n).collect()
            } else {
                let emb = spectral_embedding(affinity, m);
                metrics::kmeans(&emb, m, KMEANS_RESTARTS, rng::child_seed(seed, Purpose::KMeans, 0))?.labels
            };
            let mut plan = Matrix::zeros(n, m);
            for (i, &c) in labels.iter().enumerate() {
                plan[(i, c)] = h[i];
            }
            Coupling::new(plan, h)
        }
    }
}

/// Leading eigenvectors of `D^-1/2 W D^-1/2`, rows scaled to unit length.
fn spectral_embedding(w: &Matrix, k: usize) -> Matrix {
    let n = w.nrows();
    let sym = (w + w.transpose()) * 0.5;
    let deg: Vec<f64> = (0..n).map(|i| sym.row(i).sum()).collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let norm = Matrix::from_fn(n, n, |i, j| inv_sqrt[i] * sym[(i, j)] * inv_sqrt[j]);
    let (_, vecs) = linalg::sorted_symmetric_eigen(&norm);
    let mut emb = vecs.columns(0, k).into_owned();
    for mut row in emb.row_iter_mut() {
        let r = row.norm();
        if r > 0.0 {
            row /= r;
        }
    }
    emb
}

/// Embedding-side similarity for the GW term.
pub fn embedding_similarity(z: &Matrix, mode: SimilarityMode) -> Result<Matrix> {
    Ok(match mode {
        SimilarityMode::StudentT => kernels::student_t_affinity(z)?.matrix,
        SimilarityMode::SqDist => kernels::pairwise_sq_dists(z)?,
    })
}

/// Components of the objective at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub supervised: f64,
    pub gw: f64,
    pub cka: f64,
    /// Consistency plus ridge terms of the out-of-sample objective (0 without it).
    pub oos: f64,
    pub total: f64,
}

/// Problem data derived from `(X, Y)` once per fit.
struct Prepared {
    x: Matrix,
    x_scaler: Option<Standardizer>,
    y_scaler: Option<Standardizer>,
    p_sim: Matrix,
    targets: Matrix,
    k_y: Matrix,
}

fn prepare(x: &Matrix, y: &Matrix, cfg: &SdrConfig) -> Result<Prepared> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(Error::shape("target rows", n, y.nrows()));
    }
    if n < 3 {
        return Err(Error::invalid("n", "need at least three samples"));
    }
    if y.ncols() == 0 {
        return Err(Error::invalid("targets", "need at least one target column"));
    }
    linalg::ensure_finite(x, "inputs")?;
    linalg::ensure_finite(y, "targets")?;
    let (xs, x_scaler) = if cfg.standardize {
        let (xs, s) = kernels::standardize(x, None)?;
        (xs, Some(s))
    } else {
        (x.clone(), None)
    };
    let p_sim = kernels::entropic_affinity(&kernels::pairwise_sq_dists(&xs)?, cfg.perplexity)?.matrix;
    match cfg.task {
        Task::Regression => {
            let (ys, s) = kernels::standardize(y, None)?;
            let k_y = kernels::eval_kernel(&KernelSpec::rbf_median(&ys), &ys, &ys)?;
            Ok(Prepared {
                x: xs,
                x_scaler,
                y_scaler: Some(s),
                p_sim,
                targets: ys,
                k_y,
            })
        }
        Task::Classification => {
            if y.ncols() != 1 {
                return Err(Error::invalid("targets", "classification needs one label column"));
            }
            let labels = metrics::labels_from_column(&y.column(0).into_owned())?;
            let classes = labels.iter().max().map_or(0, |&c| c + 1);
            let onehot = Matrix::from_fn(n, classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
            let k_y = kernels::eval_kernel(&KernelSpec::Delta, y, y)?;
            Ok(Prepared {
                x: xs,
                x_scaler,
                y_scaler: None,
                p_sim,
                targets: onehot,
                k_y,
            })
        }
    }
}

fn initial_embedding(x: &Matrix, coupling: &Coupling, p: usize, mode: InitMode, seed: u64) -> Result<Matrix> {
    let m = coupling.m();
    match mode {
        InitMode::Random => {
            use rand::Rng;
            let mut rng = rng::stream(seed, Purpose::EmbeddingInit, 0);
            Ok(Matrix::from_fn(m, p, |_, _| rng.sample(rand_distr::StandardNormal)))
        }
        InitMode::Spectral | InitMode::Auto => {
            let k = p.min(x.ncols()).min(x.nrows());
            let scores = kernels::pca_reduce(x, k)?;
            let mass = coupling.column_masses();
            let weighted = coupling.plan().transpose() * &scores;
            let fallback: Vec<f64> = (0..k).map(|c| scores.column(c).mean()).collect();
            let mut z = Matrix::zeros(m, p);
            for j in 0..m {
                for c in 0..k {
                    z[(j, c)] = if mass[j] > 0.0 { weighted[(j, c)] / mass[j] } else { fallback[c] };
                }
            }
            // Pad missing dimensions with a small deterministic spread.
            if k < p {
                use rand::Rng;
                let mut rng = rng::stream(seed, Purpose::EmbeddingInit, 1);
                for j in 0..m {
                    for c in k..p {
                        z[(j, c)] = 1e-2 * rng.sample::<f64, _>(rand_distr::StandardNormal);
                    }
                }
            }
            let mean = z.mean();
            let sd = z.variance().sqrt();
            if sd > 0.0 {
                z.apply(|v| *v = (*v - mean) / sd);
            }
            Ok(z)
        }
    }
}

/// Z-step helper bundle built once per outer iteration.
struct OuterState<'a> {
    cfg: &'a SdrConfig,
    prep: &'a Prepared,
    oos_kernel: Option<Matrix>,
}

impl OuterState<'_> {

    fn terms(&self, z: &Matrix, coupling: &Coupling, z_kernel: &KernelSpec, l: Option<&Matrix>) -> Result<ObjectiveTerms> {
        let cfg = self.cfg;
        let supervised = if cfg.alpha < 1.0 {
            transport::supervised_cost(coupling, &self.prep.targets, cfg.loss)?
        } else {
            0.0
        };
        let q = embedding_similarity(z, cfg.similarity)?;
        let gw = transport::gw_cost(&self.prep.p_sim, &q, coupling)?;
        // Reported even when the CKA term is off (the eta = 0 ablation).
        let kz = kernels::eval_kernel(z_kernel, z, z)?;
        let cka = match embedding::cka(&kz, &embedding::projected_target_kernel(&self.prep.k_y, coupling)?) {
            Ok(v) => v,
            Err(Error::DegenerateKernel(_)) if cfg.eta == 0.0 => 0.0,
            Err(e) => return Err(e),
        };
        let mut oos_term = 0.0;
        if let (Some(o), Some(k), Some(l)) = (&cfg.oos, &self.oos_kernel, l) {
            let t = o.scaling.apply(coupling);
            let kl = k * l;
            oos_term = 0.5 * o.mu * (t * z - &kl).norm_squared() + 0.5 * o.lambda * l.dot(&kl);
        }
        let total = (1.0 - cfg.alpha) * supervised + cfg.alpha * gw - cfg.eta * cka + oos_term;
        if !total.is_finite() {
            return Err(Error::NonFiniteObjective { step: "objective evaluation" });
        }
        Ok(ObjectiveTerms {
            supervised,
            gw,
            cka,
            oos: oos_term,
            total,
        })
    }
}

/// Per-outer-iteration solver statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub z_steps: usize,
    pub z_start: f64,
    pub z_end: f64,
    pub t_iterations: usize,
    pub t_trace: Vec<f64>,
    pub t_rejected: bool,
    pub beta: Option<f64>,
    pub terms: ObjectiveTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdrModel {
    pub version: String,
    pub config: SdrConfig,
    pub n: usize,
    pub m: usize,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub z: Matrix,
    pub coupling: Coupling,
    pub h_z: Vec<f64>,
    /// Prototype targets (standardized scale for regression, class scores otherwise).
    #[serde(with = "crate::linalg::serde_matrix")]
    pub prototypes: Matrix,
    pub oos: Option<OosMap>,
    /// Embedding-side kernel of the CKA term.
    pub cka_kernel: KernelSpec,
    pub x_scaler: Option<Standardizer>,
    pub y_scaler: Option<Standardizer>,
    /// Full objective after each outer iteration.
    pub objective_trace: Vec<f64>,
    pub cka_trace: Vec<f64>,
    pub outer: Vec<OuterRecord>,
    pub converged: bool,
    /// Input column names, when the caller recorded them.
    #[serde(default)]
    pub feature_names: Vec<String>,
}

impl SdrModel {
    /// Barycentric embedding of each training sample, `T_hat Z`.
    pub fn sample_embedding(&self) -> Matrix {
        self.coupling.row_normalized() * &self.z
    }

    pub fn final_cka(&self) -> f64 {
        self.cka_trace.last().copied().unwrap_or(0.0)
    }

    /// Project raw inputs through the out-of-sample map.
    pub fn project(&self, x_new: &Matrix) -> Result<Matrix> {
        let map = self.oos.as_ref().ok_or_else(|| {
            Error::invalid("model", "has no out-of-sample map; refit with the OOS objective enabled")
        })?;
        let xs = match &self.x_scaler {
            Some(s) => s.apply(x_new)?,
            None => x_new.clone(),
        };
        map.project(&xs)
    }

    /// Prototype labels by transported class mass (classification only).
    pub fn prototype_labels(&self, labels: &[usize]) -> Result<metrics::PrototypeLabels> {
        metrics::prototype_labels(&self.coupling, labels)
    }
}

fn is_identity_like(t_hat: &Matrix) -> Option<Vec<usize>> {
    // Returns the permutation when every row and column carries a single unit entry.
    if t_hat.nrows() != t_hat.ncols() {
        return None;
    }
    let n = t_hat.nrows();
    let mut perm = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for row in t_hat.row_iter() {
        let j = row.iter().position(|&v| v == 1.0)?;
        if row.iter().enumerate().any(|(c, &v)| c != j && v != 0.0) || seen[j] {
            return None;
        }
        seen[j] = true;
        perm.push(j);
    }
    Some(perm)
}

/// Fit SDR on inputs `x` (n x d) and targets `y` (n x c, or one label column).
pub fn fit(x: &Matrix, y: &Matrix, cfg: &SdrConfig) -> Result<SdrModel> {
    cfg.validate()?;
    let prep = prepare(x, y, cfg)?;
    let n = prep.x.nrows();
    let m = cfg.m.resolve(n);
    if m < 2 || m > n {
        return Err(Error::invalid("m", format!("must lie in 2..={n}, got {m}")));
    }
    let init = cfg.resolved_init();
    let mut coupling = init_coupling(&prep.p_sim, m, init, cfg.seed)?;
    let mut z = initial_embedding(&prep.x, &coupling, cfg.p, init, cfg.seed)?;

    let oos_kernel_spec = cfg
        .oos
        .as_ref()
        .map(|o| o.kernel.clone().unwrap_or_else(|| KernelSpec::rbf_median(&prep.x)));
    let oos_kernel = match &oos_kernel_spec {
        Some(spec) => Some(kernels::eval_kernel(spec, &prep.x, &prep.x)?),
        None => None,
    };
    let outer_state = OuterState {
        cfg,
        prep: &prep,
        oos_kernel,
    };
    let cg = CgOptions {
        tol: cfg.cg_tol,
        max_iters: cfg.cg_max_iters,
    };
    let z_opts = ZLoopOptions {
        max_steps: cfg.inner_max,
        tol: cfg.z_tol,
        window: cfg.z_window,
        keep_best: true,
    };

    // One embedding kernel for the whole fit, so every outer iteration
    // descends the same objective.
    let cka_cfg = CkaConfig {
        z_kernel: embedding::rq_median(&z),
        eta: cfg.eta,
    };
    let mut objective_trace = Vec::new();
    let mut cka_trace = Vec::new();
    let mut outer = Vec::new();
    let mut l_map: Option<Matrix> = None;
    let mut converged = false;
    let ramp = cfg.oos.as_ref().map_or(0, |o| o.beta_ramp);
    // Index of the first ramped iteration, fixed once convergence is seen.
    let mut ramp_start: Option<usize> = None;
    let mut iter = 0;

    loop {
        let ramp_step = ramp_start.map(|s| iter - s + 1);
        if ramp_step.is_none() && iter >= cfg.outer_max {
            break;
        }
        if ramp_step.is_some_and(|r| r > ramp) {
            break;
        }

        // T-step
        let q = embedding_similarity(&z, cfg.similarity)?;
        let report = transport::srbsfgw_solve(&prep.p_sim, &q, &prep.targets, cfg.alpha, cfg.loss, &coupling, &cg)?;
        let mut t_rejected = false;
        if cfg.t_step_guard {
            let before = outer_state.terms(&z, &coupling, &cka_cfg.z_kernel, l_map.as_ref())?.total;
            let after = outer_state.terms(&z, &report.coupling, &cka_cfg.z_kernel, l_map.as_ref())?.total;
            t_rejected = after > before;
        }
        let t_iterations = report.iterations;
        let t_trace = report.trace;
        if !t_rejected {
            coupling = report.coupling;
        }

        // Z-step
        let problem = ZProblem::new(&coupling, &prep.p_sim, Some(&prep.k_y), &cka_cfg, cfg.alpha, cfg.similarity)?;
        let mut state = EmbeddingState::new(z.clone(), cfg.lr);
        let z_start = problem.objective(&z)?;
        let z_steps = embedding::run_z_loop(&mut state, &problem, &z_opts)?;
        z = state.z;
        let z_end = problem.objective(&z)?;

        // L-step and soft update
        let mut beta_used = None;
        if let (Some(o), Some(k)) = (&cfg.oos, &outer_state.oos_kernel) {
            let t_scaled = o.scaling.apply(&coupling);
            let l = oos::solve_l_with(k, &t_scaled, &z, o.lambda, o.mu)?;
            let beta = match ramp_step {
                Some(r) => o.beta + (1.0 - o.beta) * r as f64 / ramp as f64,
                None => o.beta,
            };
            z = match (o.scaling, is_identity_like(&coupling.row_normalized())) {
                (CouplingScaling::RowNormalized, Some(perm)) => {
                    // Permutation coupling: the m = n convex form, in prototype order.
                    let kl = k * &l;
                    let mut target = Matrix::zeros(z.nrows(), z.ncols());
                    for (i, &j) in perm.iter().enumerate() {
                        target.set_row(j, &kl.row(i));
                    }
                    &z * (1.0 - beta) + target * beta
                }
                _ => oos::soft_update(&z, k, &l, beta, Some(&t_scaled))?,
            };
            beta_used = Some(beta);
            l_map = Some(l);
        }

        let terms = outer_state.terms(&z, &coupling, &cka_cfg.z_kernel, l_map.as_ref())?;
        log::debug!(
            "outer {iter}: J={:.6e} S={:.4e} GW={:.4e} CKA={:.4} z_steps={z_steps} t_iters={t_iterations}",
            terms.total,
            terms.supervised,
            terms.gw,
            terms.cka
        );
        let previous = objective_trace.last().copied();
        objective_trace.push(terms.total);
        cka_trace.push(terms.cka);
        outer.push(OuterRecord {
            z_steps,
            z_start,
            z_end,
            t_iterations,
            t_trace,
            t_rejected,
            beta: beta_used,
            terms,
        });
        iter += 1;

        if ramp_start.is_none() {
            let small_change = previous
                .is_some_and(|p| (p - terms.total).abs() <= cfg.outer_tol * p.abs().max(f64::MIN_POSITIVE));
            if small_change {
                converged = true;
            }
            if ramp > 0 && (converged || iter >= cfg.outer_max - ramp) {
                ramp_start = Some(iter);
            } else if converged {
                break;
            }
        }
    }

    let protos = transport::prototype_targets(
        &coupling,
        &prep.targets,
        cfg.loss.generator(),
        PrototypeForm::Primal,
    )?;
    let oos = match (l_map, oos_kernel_spec, &cfg.oos) {
        (Some(l), Some(kernel), Some(o)) => Some(OosMap {
            l,
            x_train: prep.x.clone(),
            kernel,
            lambda: o.lambda,
            beta: o.beta,
            mu: o.mu,
        }),
        _ => None,
    };
    Ok(SdrModel {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        n,
        m,
        h_z: coupling.column_masses().iter().copied().collect(),
        z,
        coupling,
        prototypes: protos.targets,
        oos,
        cka_kernel: cka_cfg.z_kernel,
        x_scaler: prep.x_scaler,
        y_scaler: prep.y_scaler,
        objective_trace,
        cka_trace,
        outer,
        converged,
        feature_names: Vec::new(),
    })
}

/// Sizes of the two supervision channels reaching `Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckReport {
    /// Norm of the gradient of the CKA term with respect to `Z`.
    pub cka_gradient_norm: f64,
    /// Finite-difference norm of `Z -> S(T*(Z))`, re-solving the T-step per probe.
    pub supervised_fd_gradient_norm: f64,
    pub coordinates_probed: usize,
    pub coordinates_total: usize,
    pub epsilon: f64,
}

/// Compare the direct CKA gradient with the supervised signal that only
/// reaches `Z` through the optimal coupling.
pub fn bottleneck_diagnostic(model: &SdrModel, x: &Matrix, y: &Matrix, max_coords: usize) -> Result<BottleneckReport> {
    let cfg = &model.config;
    let prep = prepare(x, y, cfg)?;
    if prep.x.nrows() != model.n {
        return Err(Error::shape("diagnostic rows", model.n, prep.x.nrows()));
    }
    let z = &model.z;
    let cka_gradient_norm = if cfg.alpha < 1.0 && cfg.eta > 0.0 {
        let cka_cfg = CkaConfig {
            z_kernel: model.cka_kernel.clone(),
            eta: cfg.eta,
        };
        let cka_only = ZProblem::new(&model.coupling, &prep.p_sim, Some(&prep.k_y), &cka_cfg, 0.0, cfg.similarity)?;
        cka_only.gradient(z)?.norm()
    } else {
        0.0
    };

    let cg = CgOptions {
        tol: cfg.cg_tol,
        max_iters: cfg.cg_max_iters,
    };
    let eps = 1e-4;
    let total = z.len();
    let probes = total.min(max_coords.max(1));
    let s_at = |zz: &Matrix| -> Result<f64> {
        let q = embedding_similarity(zz, cfg.similarity)?;
        let rep = transport::srbsfgw_solve(&prep.p_sim, &q, &prep.targets, cfg.alpha, cfg.loss, &model.coupling, &cg)?;
        transport::supervised_cost(&rep.coupling, &prep.targets, cfg.loss)
    };
    let mut sum_sq = 0.0;
    for c in 0..probes {
        // Spread probes evenly over the coordinates.
        let idx = c * total / probes;
        let (r, col) = (idx % z.nrows(), idx / z.nrows());
        let mut plus = z.clone();
        let mut minus = z.clone();
        plus[(r, col)] += eps;
        minus[(r, col)] -= eps;
        let g = (s_at(&plus)? - s_at(&minus)?) / (2.0 * eps);
        sum_sq += g * g;
    }
    let supervised_fd_gradient_norm = (sum_sq * total as f64 / probes as f64).sqrt();
    Ok(BottleneckReport {
        cka_gradient_norm,
        supervised_fd_gradient_norm,
        coordinates_probed: probes,
        coordinates_total: total,
        epsilon: eps,
    })
}

/// Standardized-scale regression targets back on the original scale.
pub fn unstandardize(scaler: Option<&Standardizer>, column: usize, v: &Vector) -> Vector {
    match scaler {
        Some(s) => s.invert_column(column, v),
        None => v.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets;

    fn blobs(n: usize, seed: u64) -> (Matrix, Matrix) {
        use rand::Rng;
        let mut rng = rng::stream(seed, Purpose::Simulation, 100);
        let x = Matrix::from_fn(n, 2, |i, _| {
            let c = if i < n / 2 { -4.0 } else { 4.0 };
            c + rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.5
        });
        let y = Matrix::from_fn(n, 1, |i, _| if i < n / 2 { 0.0 } else { 1.0 });
        (x, y)
    }

    #[test]
    fn prototype_count_parsing() {
        assert_eq!("equals-n".parse::<PrototypeCount>().unwrap(), PrototypeCount::EqualsN);
        assert_eq!("12".parse::<PrototypeCount>().unwrap(), PrototypeCount::Fixed(12));
        assert!("x".parse::<PrototypeCount>().is_err());
        let j = serde_json::to_string(&PrototypeCount::EqualsN).unwrap();
        assert_eq!(serde_json::from_str::<PrototypeCount>(&j).unwrap(), PrototypeCount::EqualsN);
        assert_eq!(serde_json::from_str::<PrototypeCount>("7").unwrap(), PrototypeCount::Fixed(7));
    }

    #[test]
    fn init_coupling_modes() {
        let (x, _) = blobs(20, 1);
        let p = kernels::entropic_affinity(&kernels::pairwise_sq_dists(&x).unwrap(), 5.0).unwrap().matrix;
        let r = init_coupling(&p, 3, InitMode::Random, 4).unwrap();
        assert!(r.row_violation() <= 1e-12);
        assert_eq!(r, init_coupling(&p, 3, InitMode::Random, 4).unwrap());
        let s = init_coupling(&p, 2, InitMode::Spectral, 4).unwrap();
        assert_eq!(s, init_coupling(&p, 2, InitMode::Spectral, 4).unwrap());
        assert!(init_coupling(&p, 21, InitMode::Random, 0).is_err());

        let full = init_coupling(&p, 20, InitMode::Spectral, 4).unwrap();
        for i in 0..20 {
            assert_eq!(full.plan().row(i).iter().filter(|&&v| v > 0.0).count(), 1);
            assert_eq!(full.plan().column(i).iter().filter(|&&v| v > 0.0).count(), 1);
        }
    }

    #[test]
    fn spectral_init_separates_blobs() {
        let (x, _) = blobs(30, 2);
        let p = kernels::entropic_affinity(&kernels::pairwise_sq_dists(&x).unwrap(), 5.0).unwrap().matrix;
        let t = init_coupling(&p, 2, InitMode::Spectral, 0).unwrap();
        let col = |i: usize| (0..2).find(|&j| t.plan()[(i, j)] > 0.0).unwrap();
        assert!((0..15).all(|i| col(i) == col(0)));
        assert!((15..30).all(|i| col(i) == col(15)));
        assert_ne!(col(0), col(15));
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = SdrConfig { alpha: 1.5, ..Default::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("alpha"));
        let bad = SdrConfig {
            oos: Some(OosConfig { lambda: 0.0, ..Default::default() }),
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("oos.lambda"));
        let cfg: SdrConfig = serde_json::from_str(r#"{"eta": 0, "m": "equals-n"}"#).unwrap();
        assert_eq!((cfg.eta, cfg.m, cfg.alpha), (0.0, PrototypeCount::EqualsN, 0.2));
        assert!(serde_json::from_str::<SdrConfig>(r#"{"etaa": 0}"#).is_err());
    }

    fn quick(m: usize, eta: f64) -> SdrConfig {
        SdrConfig {
            m: PrototypeCount::Fixed(m),
            eta,
            task: Task::Classification,
            perplexity: 10.0,
            outer_max: 5,
            inner_max: 200,
            lr: 0.05,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn two_blob_prototypes_are_pure() {
        let (x, y) = blobs(40, 5);
        let model = fit(&x, &y, &quick(2, 1000.0)).unwrap();
        let labels = metrics::labels_from_column(&y.column(0).into_owned()).unwrap();
        let protos = model.prototype_labels(&labels).unwrap();
        assert_ne!(protos.labels[0], protos.labels[1]);
        let clusters: Vec<usize> = (0..40)
            .map(|i| (0..2).max_by(|&a, &b| model.coupling.plan()[(i, a)].total_cmp(&model.coupling.plan()[(i, b)])).unwrap())
            .collect();
        assert_eq!(metrics::homogeneity(&labels, &clusters).unwrap(), 1.0);
        assert!(model.coupling.row_violation() <= 1e-10);
        let hz: f64 = model.h_z.iter().sum();
        assert!((hz - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn fit_is_deterministic() {
        let d = datasets::gen_scurve(30, 0.05, 1).unwrap();
        let y = Matrix::from_column_slice(30, 1, d.y.as_slice());
        let cfg = SdrConfig {
            m: PrototypeCount::Fixed(6),
            outer_max: 3,
            inner_max: 50,
            perplexity: 8.0,
            ..Default::default()
        };
        let a = crate::io::encode_model(&fit(&d.x, &y, &cfg).unwrap()).unwrap();
        let b = crate::io::encode_model(&fit(&d.x, &y, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diagnostic_reports_finite_norms() {
        let (x, y) = blobs(20, 6);
        let model = fit(&x, &y, &quick(3, 10.0)).unwrap();
        let rep = bottleneck_diagnostic(&model, &x, &y, 6).unwrap();
        assert!(rep.cka_gradient_norm.is_finite() && rep.cka_gradient_norm >= 0.0);
        assert!(rep.supervised_fd_gradient_norm.is_finite() && rep.supervised_fd_gradient_norm >= 0.0);
        let back: BottleneckReport = serde_json::from_str(&serde_json::to_string(&rep).unwrap()).unwrap();
        assert_eq!(back, rep);

        let unsup = fit(&x, &y, &SdrConfig { alpha: 1.0, ..quick(3, 10.0) }).unwrap();
        assert_eq!(bottleneck_diagnostic(&unsup, &x, &y, 2).unwrap().cka_gradient_norm, 0.0);
    }

    #[test]
    fn project_requires_oos_map() {
        let (x, y) = blobs(20, 7);
        let model = fit(&x, &y, &quick(3, 10.0)).unwrap();
        assert!(model.project(&x).unwrap_err().to_string().contains("out-of-sample"));
    }
}
