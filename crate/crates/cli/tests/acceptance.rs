//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- 5 7`. The process fails
//! when a criterion outside `KNOWN_SHORTFALLS` fails; the known shortfalls
//! still print FAIL with their measured values.

use std::panic;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sdr_core::driver::{self, OosConfig, PrototypeCount, SdrConfig, Task};
use sdr_core::embedding::{rq_median, CkaConfig, SimilarityMode, ZProblem};
use sdr_core::gp::{self, GpHyper};
use sdr_core::kernels::{entropic_affinity, eval_kernel, pairwise_sq_dists, KernelSpec};
use sdr_core::rng::{stream, Purpose};
use sdr_core::transport::{
    self, BregmanGenerator, CgOptions, Coupling, PrototypeForm, SupervisedLoss,
};
use sdr_core::{datasets, linalg, metrics, Matrix};

/// Criteria whose targets this implementation does not reach; see the README.
const KNOWN_SHORTFALLS: &[u8] = &[6, 9];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    stream(seed, Purpose::Simulation, 1000)
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn random_coupling(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Coupling {
    let raw = Matrix::from_fn(n, m, |_, _| rng.random_range(0.05..1.0));
    let plan = Matrix::from_fn(n, m, |i, j| raw[(i, j)] / raw.row(i).sum() / n as f64);
    Coupling::new(plan, Coupling::uniform_source(n)).unwrap()
}

fn random_similarity(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = rng.random_range(0.0..1.0);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

fn col(v: &sdr_core::Vector) -> Matrix {
    Matrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Root of a nondecreasing function on `[lo, hi]` by bisection to machine precision.
fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Minimizer over `g` of `sum_i w_i D(y_i, g)` (primal) or `sum_i w_i D(g, y_i)`
/// (dual), found coordinatewise from the sign of the derivative.
fn numeric_prototype(w: &[f64], y: &[f64], generator: BregmanGenerator, form: PrototypeForm) -> f64 {
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return lo;
    }
    let derivative = |g: f64| -> f64 {
        w.iter()
            .zip(y)
            .map(|(&wi, &yi)| match (generator, form) {
                (BregmanGenerator::L2, _) => wi * (g - yi),
                (BregmanGenerator::NegEntropy, PrototypeForm::Primal) => wi * (1.0 - yi / g),
                (BregmanGenerator::NegEntropy, PrototypeForm::Dual) => wi * (g / yi).ln(),
            })
            .sum()
    };
    bisect(derivative, lo, hi)
}

fn c1_prototypes() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for seed in 0..50u64 {
        let mut r = rng(seed);
        let n = r.random_range(2..=12);
        let m = r.random_range(1..=5);
        let c = r.random_range(1..=3);
        let t = random_coupling(&mut r, n, m);
        for generator in [BregmanGenerator::L2, BregmanGenerator::NegEntropy] {
            let y = match generator {
                BregmanGenerator::L2 => gaussian(&mut r, n, c),
                BregmanGenerator::NegEntropy => Matrix::from_fn(n, c, |_, _| r.random_range(0.05..3.0)),
            };
            for form in [PrototypeForm::Primal, PrototypeForm::Dual] {
                let closed = transport::prototype_targets(&t, &y, generator, form).unwrap().targets;
                for j in 0..m {
                    let w: Vec<f64> = t.plan().column(j).iter().copied().collect();
                    for k in 0..c {
                        let yk: Vec<f64> = y.column(k).iter().copied().collect();
                        let g = numeric_prototype(&w, &yk, generator, form);
                        worst = worst.max((g - closed[(j, k)]).abs());
                    }
                }
                cases += 1;
            }
        }
    }
    verdict(worst <= 1e-8, format!("max |closed - numeric| = {worst:.2e} over {cases} (T, Y, generator, form) cases"))
}

fn c2_gw_factorization() -> Verdict {
    let mut worst_cost: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for seed in 0..20u64 {
        let mut r = rng(100 + seed);
        let n = r.random_range(2..=8);
        let m = r.random_range(2..=6);
        let p = random_similarity(&mut r, n);
        let q = random_similarity(&mut r, m);
        let t = random_coupling(&mut r, n, m);
        let plan = t.plan();
        let mut cost = 0.0;
        let mut grad = Matrix::zeros(n, m);
        for i in 0..n {
            for k in 0..n {
                for j in 0..m {
                    for l in 0..m {
                        let d = (p[(i, k)] - q[(j, l)]).powi(2);
                        cost += d * plan[(i, j)] * plan[(k, l)];
                        grad[(i, j)] += d * plan[(k, l)];
                        grad[(k, l)] += d * plan[(i, j)];
                    }
                }
            }
        }
        worst_cost = worst_cost.max((transport::gw_cost(&p, &q, &t).unwrap() - cost).abs());
        worst_grad = worst_grad.max((transport::gw_grad_t(&p, &q, &t).unwrap() - grad).amax());
    }
    verdict(
        worst_cost <= 1e-10 && worst_grad <= 1e-10,
        format!("20 instances: max cost error {worst_cost:.1e}, max gradient error {worst_grad:.1e}"),
    )
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}

fn c3_gradients() -> Verdict {
    // (a) embedding gradient
    let mut worst_z: f64 = 0.0;
    for seed in 0..20u64 {
        for mode in [SimilarityMode::StudentT, SimilarityMode::SqDist] {
            for delta in [false, true] {
                let mut r = rng(200 + seed);
                let n = 14;
                let m = 6;
                let x = gaussian(&mut r, n, 3);
                let p = entropic_affinity(&pairwise_sq_dists(&x).unwrap(), 3.0).unwrap().matrix;
                let t = random_coupling(&mut r, n, m);
                let k_y = if delta {
                    let l = Matrix::from_fn(n, 1, |i, _| (i % 3) as f64);
                    eval_kernel(&KernelSpec::Delta, &l, &l).unwrap()
                } else {
                    let y = gaussian(&mut r, n, 1);
                    eval_kernel(&KernelSpec::rbf_median(&y), &y, &y).unwrap()
                };
                let z = gaussian(&mut r, m, 2);
                let cfg = CkaConfig {
                    z_kernel: rq_median(&z),
                    eta: 10.0,
                };
                let prob = ZProblem::new(&t, &p, Some(&k_y), &cfg, 0.3, mode).unwrap();
                let g = prob.gradient(&z).unwrap();
                let h = 1e-6;
                let fd = Matrix::from_fn(m, 2, |i, j| {
                    let (mut a, mut b) = (z.clone(), z.clone());
                    a[(i, j)] += h;
                    b[(i, j)] -= h;
                    (prob.objective(&a).unwrap() - prob.objective(&b).unwrap()) / (2.0 * h)
                });
                worst_z = worst_z.max(rel(&g, &fd));
            }
        }
    }
    // (b) reduced transport objective, prototypes re-solved at every evaluation
    let mut worst_t: f64 = 0.0;
    for seed in 0..20u64 {
        let mut r = rng(300 + seed);
        let n = r.random_range(3..=9);
        let m = r.random_range(2..=5);
        let p = random_similarity(&mut r, n);
        let q = random_similarity(&mut r, m);
        let t = random_coupling(&mut r, n, m);
        let alpha = r.random_range(0.0..1.0);
        for kind in [SupervisedLoss::Squared, SupervisedLoss::ModifiedCrossEntropy] {
            let y = match kind {
                SupervisedLoss::Squared => gaussian(&mut r, n, 2),
                SupervisedLoss::ModifiedCrossEntropy => Matrix::from_fn(n, 3, |_, _| r.random_range(0.05..1.0)),
            };
            let g = transport::srbsfgw_gradient(&t, &y, &p, &q, alpha, kind).unwrap();
            let h = 1e-6;
            let f = |plan: Matrix| {
                let c = Coupling::from_plan(plan).unwrap();
                transport::srbsfgw_objective(&c, &y, &p, &q, alpha, kind).unwrap()
            };
            let fd = Matrix::from_fn(n, m, |i, j| {
                let (mut a, mut b) = (t.plan().clone(), t.plan().clone());
                a[(i, j)] += h;
                b[(i, j)] -= h;
                (f(a) - f(b)) / (2.0 * h)
            });
            worst_t = worst_t.max(rel(&g, &fd));
        }
    }
    // (c) GP marginal likelihood
    let mut worst_gp: f64 = 0.0;
    for seed in 0..20u64 {
        let mut r = rng(400 + seed);
        let n = r.random_range(5..=30);
        let d = r.random_range(1..=3);
        let z = gaussian(&mut r, n, d);
        let y: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let ls: Vec<f64> = (0..d).map(|_| r.random_range(0.3..2.0)).collect();
        let hyper = GpHyper::new(&ls, r.random_range(0.5..2.0), r.random_range(0.05..0.5)).unwrap();
        let (_, grad) = gp::lml_and_gradient(&hyper, &z, &y).unwrap();
        let theta = hyper.to_vec();
        let eps = 1e-5;
        let fd: Vec<f64> = (0..theta.len())
            .map(|k| {
                let (mut a, mut b) = (theta.clone(), theta.clone());
                a[k] += eps;
                b[k] -= eps;
                let f = |v: &[f64]| gp::log_marginal_likelihood(&GpHyper::from_vec(v), &z, &y).unwrap();
                (f(&a) - f(&b)) / (2.0 * eps)
            })
            .collect();
        let g = Matrix::from_column_slice(grad.len(), 1, &grad);
        let f = Matrix::from_column_slice(fd.len(), 1, &fd);
        worst_gp = worst_gp.max(rel(&g, &f));
    }
    verdict(
        worst_z <= 1e-4 && worst_t <= 1e-5 && worst_gp <= 1e-4,
        format!("relative errors: embedding {worst_z:.1e} (80 runs), transport {worst_t:.1e} (40), GP {worst_gp:.1e} (20)"),
    )
}

fn c4_solver_descent() -> Verdict {
    let mut worst_rise: f64 = f64::NEG_INFINITY;
    let mut worst_violation: f64 = 0.0;
    let mut iterations = 0;
    for seed in 0..20u64 {
        let mut r = rng(500 + seed);
        let n = r.random_range(5..=30);
        let m = r.random_range(2..=8);
        let x = gaussian(&mut r, n, 3);
        let p = entropic_affinity(&pairwise_sq_dists(&x).unwrap(), 3.0).unwrap().matrix;
        let zq = gaussian(&mut r, m, 2);
        let q = sdr_core::kernels::student_t_affinity(&zq).unwrap().matrix;
        let y = gaussian(&mut r, n, 1);
        let init = random_coupling(&mut r, n, m);
        let alpha = r.random_range(0.0..=1.0);
        let rep =
            transport::srbsfgw_solve(&p, &q, &y, alpha, SupervisedLoss::Squared, &init, &CgOptions::default()).unwrap();
        for w in rep.trace.windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
        iterations += rep.iterations;
        worst_violation = worst_violation.max(rep.coupling.row_violation());
    }
    verdict(
        worst_rise <= 1e-10 && worst_violation <= 1e-10,
        format!(
            "20 instances, {iterations} iterations: largest objective rise {worst_rise:.1e}, max row violation {worst_violation:.1e}"
        ),
    )
}

fn c5_bottleneck() -> Verdict {
    let mut diffs = Vec::new();
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let d = datasets::generate("classes", 300, None, seed).unwrap();
        let y = col(&d.y);
        let run = |eta: f64| {
            let cfg = SdrConfig {
                m: PrototypeCount::Fixed(50),
                eta,
                task: Task::Classification,
                lr: 0.1,
                seed,
                ..Default::default()
            };
            driver::fit(&d.x, &y, &cfg).unwrap().final_cka()
        };
        let (sdr, fgw) = (run(1000.0), run(0.0));
        diffs.push(sdr - fgw);
        pairs.push(format!("{sdr:.3}/{fgw:.3}"));
    }
    let wins = diffs.iter().filter(|&&d| d >= 0.15).count();
    verdict(
        wins == 5,
        format!("CKA eta=1000 / eta=0 per seed: {}; {wins}/5 seeds with gap >= 0.15", pairs.join(", ")),
    )
}

/// Pure-DR fit on an 80/20 split; downstream scores on projected embeddings.
fn pure_dr_scores(name: &str, n: usize, seed: u64) -> metrics::DownstreamScores {
    let d = datasets::generate(name, n, None, seed).unwrap();
    let (tr, te) = datasets::train_test_split(n, 0.2, seed).unwrap();
    let (a, b) = (d.select(&tr), d.select(&te));
    let model = driver::fit(&a.x, &col(&a.y), &gp::pipeline_config(seed)).unwrap();
    let ya: Vec<f64> = a.y.iter().copied().collect();
    let yb: Vec<f64> = b.y.iter().copied().collect();
    metrics::downstream_scores(&model.project(&a.x).unwrap(), &ya, &model.project(&b.x).unwrap(), &yb).unwrap()
}

fn c6_friedman() -> Verdict {
    let scores: Vec<_> = (0..5).map(|s| pure_dr_scores("friedman", 500, s)).collect();
    let knn: Vec<f64> = scores.iter().map(|s| s.knn_r2).collect();
    let krr: Vec<f64> = scores.iter().map(|s| s.krr_r2).collect();
    let (k, r) = (mean(&knn), mean(&krr));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    verdict(
        k >= 0.85 && r >= 0.85,
        format!("Friedman(500): mean KRR R2 {r:.3} [{}], mean kNN R2 {k:.3} [{}] (need >= 0.85)", fmt(&krr), fmt(&knn)),
    )
}

fn c7_manifolds() -> Verdict {
    let mut parts = Vec::new();
    let mut pass = true;
    for name in ["scurve", "swissroll"] {
        let knn: Vec<f64> = (0..5).map(|s| pure_dr_scores(name, 100, s).knn_r2).collect();
        let m = mean(&knn);
        pass &= m >= 0.88;
        parts.push(format!("{name} mean kNN R2 {m:.3}"));
    }
    verdict(pass, parts.join(", ") + " (need >= 0.88)")
}

fn c8_self_consistency() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..3u64 {
        let d = datasets::generate("scurve", 100, None, seed).unwrap();
        let mut cfg = gp::pipeline_config(seed);
        cfg.oos = Some(OosConfig {
            lambda: 1e-6,
            beta_ramp: 5,
            ..Default::default()
        });
        let model = driver::fit(&d.x, &col(&d.y), &cfg).unwrap();
        let projected = model.project(&d.x).unwrap();
        worst = worst.max(linalg::rms(&(projected - model.sample_embedding())));
    }
    verdict(worst <= 1e-3, format!("S-curve(100), 3 seeds: max RMS(project(X) - stored Z) = {worst:.2e}"))
}

fn c9_sdr_gp() -> Verdict {
    let mut wins = 0;
    let mut worst_mace: f64 = 0.0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let d = datasets::generate("piecewise", 200, None, seed).unwrap();
        let (tr, te) = datasets::train_test_split(200, 0.2, seed).unwrap();
        let (a, b) = (d.select(&tr), d.select(&te));
        let opts = gp::GpOptions::default();
        let raw = gp::raw_gp(&a.x, &col(&a.y), &b.x, Some(&col(&b.y)), &opts).unwrap();
        let (_, run, _) =
            gp::sdr_gp_pipeline_selected(&a.x, &col(&a.y), &b.x, Some(&col(&b.y)), &gp::pipeline_config(seed), &opts)
                .unwrap();
        let (s, r) = (run.report.test_mll.unwrap(), raw.report.test_mll.unwrap());
        let mace = run.report.mace.unwrap();
        if s >= r {
            wins += 1;
        }
        worst_mace = worst_mace.max(mace);
        rows.push(format!("{s:.3}/{r:.3}"));
    }
    verdict(
        wins >= 4 && worst_mace <= 0.15,
        format!(
            "test MLL SDR-GP / raw GP: {}; {wins}/5 wins (need 4), max MACE {worst_mace:.3} (need <= 0.15)",
            rows.join(", ")
        ),
    )
}

fn c10_calibration() -> Verdict {
    let mut r = rng(1010);
    let n = 5000;
    let means: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
    let stds: Vec<f64> = (0..n).map(|_| r.random_range(0.2..3.0)).collect();
    let y: Vec<f64> = means
        .iter()
        .zip(&stds)
        .map(|(m, s)| m + s * r.sample::<f64, _>(StandardNormal))
        .collect();
    let curve = metrics::calibration_curve(&means, &stds, &y, gp::CALIBRATION_BINS).unwrap();
    let mace = metrics::mace(&curve.levels, &curve.coverages).unwrap();
    let monotone = curve.coverages.windows(2).all(|w| w[0] <= w[1]);
    verdict(
        mace <= 0.03 && monotone && curve.levels.len() == 99,
        format!("n=5000: MACE {mace:.4}, coverage monotone over {} levels: {monotone}", curve.levels.len()),
    )
}

fn run_cli(args: &[&str], dir: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_sdr")).args(args).current_dir(dir).output().unwrap();
    assert!(out.status.success(), "sdr {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn c11_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_cli(&["gen", "--dataset", "classes", "--n", "150", "--seed", "4", "--out", "data.csv"], d);
    let fit = |out: &str| {
        run_cli(
            &[
                "fit", "--in", "data.csv", "--targets", "label", "--task", "classification", "--m", "15", "--lr",
                "0.1", "--seed", "11", "--out", out,
            ],
            d,
        )
    };
    fit("a");
    fit("b");
    let mut files: Vec<String> = std::fs::read_dir(d.join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| std::fs::read(d.join("a").join(f)).unwrap() != std::fs::read(d.join("b").join(f)).unwrap())
        .collect();
    let required = files.iter().any(|f| f == "metrics.json") && files.iter().any(|f| f == "model.sdr");
    verdict(
        required && differing.is_empty(),
        format!("two `sdr fit` runs, {} artifacts compared, {} differ", files.len(), differing.len()),
    )
}

type Criterion = (u8, &'static str, Option<Duration>, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "prototype oracle equivalence", Some(Duration::from_secs(10)), c1_prototypes),
        (2, "GW factorization correctness", Some(Duration::from_secs(5)), c2_gw_factorization),
        (3, "gradient suites", Some(Duration::from_secs(60)), c3_gradients),
        (4, "solver descent", None, c4_solver_descent),
        (5, "supervision bottleneck", Some(Duration::from_secs(300)), c5_bottleneck),
        (6, "Friedman pure-DR downstream R2", Some(Duration::from_secs(900)), c6_friedman),
        (7, "toy manifolds kNN R2", Some(Duration::from_secs(300)), c7_manifolds),
        (8, "OOS self-consistency", None, c8_self_consistency),
        (9, "SDR-GP vs plain GP", None, c9_sdr_gp),
        (10, "calibration math", None, c10_calibration),
        (11, "determinism", None, c11_determinism),
    ];
    let selected: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = Vec::new();
    for (id, name, limit, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(check);
        let took = start.elapsed();
        let (mut pass, mut detail) = match outcome {
            Ok(v) => (v.pass, v.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if let Some(limit) = limit {
            if took > limit {
                pass = false;
                detail += &format!("; runtime over the {} s budget", limit.as_secs());
            }
        }
        let known = !pass && KNOWN_SHORTFALLS.contains(&id);
        println!(
            "criterion {id:>2} {} {name}: {detail} [{:.1} s]{}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            if known { " (known shortfall)" } else { "" }
        );
        if !pass && !known {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
