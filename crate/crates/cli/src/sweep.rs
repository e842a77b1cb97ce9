//! Grid sweeps over eta or beta, one isolated fit per (value, seed).
//!
//! Runs fan out over a thread pool sized by `SDR_THREADS` (default: all
//! cores); rows are written in grid order, so the table does not depend on
//! scheduling.

use rayon::prelude::*;
use sdr_core::driver::{self, SdrConfig, Task};
use sdr_core::{datasets, io, metrics, Matrix};

use crate::args::{SweepArgs, SweepParam};
use crate::output::{self, FitMetrics, Loaded};
use crate::{config, CliError, CliResult};

pub const THREADS_ENV: &str = "SDR_THREADS";

#[derive(Debug, Clone)]
struct Row {
    value: f64,
    seed: u64,
    fit: FitMetrics,
    knn_r2: Option<f64>,
    krr_r2: Option<f64>,
}

pub fn grid(values: Option<&[f64]>, logspace: Option<&str>) -> CliResult<Vec<f64>> {
    let grid = match (values, logspace) {
        (Some(v), _) => v.to_vec(),
        (None, Some(spec)) => parse_logspace(spec)?,
        (None, None) => Vec::new(),
    };
    if grid.is_empty() {
        return Err(CliError::usage("empty sweep grid: pass --values or --logspace"));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(CliError::usage("sweep values must be finite"));
    }
    Ok(grid)
}

fn parse_logspace(spec: &str) -> CliResult<Vec<f64>> {
    let bad = || CliError::usage(format!("invalid --logspace `{spec}` (expected START:STOP:COUNT)"));
    let parts: Vec<&str> = spec.split(':').collect();
    let [start, stop, count] = parts.as_slice() else {
        return Err(bad());
    };
    let start: f64 = start.trim().parse().map_err(|_| bad())?;
    let stop: f64 = stop.trim().parse().map_err(|_| bad())?;
    let count: usize = count.trim().parse().map_err(|_| bad())?;
    Ok(match count {
        0 => Vec::new(),
        1 => vec![10f64.powf(start)],
        _ => (0..count)
            .map(|i| 10f64.powf(start + (stop - start) * i as f64 / (count - 1) as f64))
            .collect(),
    })
}

fn threads() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t > 0)
            .ok_or_else(|| CliError::usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn run(a: SweepArgs) -> CliResult<()> {
    let values = grid(a.values.as_deref(), a.logspace.as_deref())?;
    if a.seeds.is_empty() {
        return Err(CliError::usage("need at least one seed"));
    }
    let mut base = config::resolve(&a.model, SdrConfig::default())?;
    if a.param == SweepParam::Beta {
        base.oos.get_or_insert_with(Default::default);
    }
    let data = output::load(&a.data, base.task)?;
    let jobs: Vec<(f64, u64)> = values.iter().flat_map(|&v| a.seeds.iter().map(move |&s| (v, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads()?)
        .build()
        .map_err(|e| CliError::usage(format!("cannot start worker pool: {e}")))?;
    let rows: Vec<CliResult<Row>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(value, seed)| {
                let mut cfg = base.clone();
                cfg.seed = seed;
                match a.param {
                    SweepParam::Eta => cfg.eta = value,
                    SweepParam::Beta => cfg.oos.get_or_insert_with(Default::default).beta = value,
                }
                cfg.validate()?;
                one_run(&data, &cfg, a.test_fraction, value)
            })
            .collect()
    });
    let rows = rows.into_iter().collect::<CliResult<Vec<_>>>()?;
    let name = match a.param {
        SweepParam::Eta => "eta",
        SweepParam::Beta => "beta",
    };
    io::write_atomic(&a.out, render(name, &rows).as_bytes())?;
    Ok(())
}

fn one_run(data: &Loaded, cfg: &SdrConfig, test_fraction: Option<f64>, value: f64) -> CliResult<Row> {
    let downstream = test_fraction.is_some() && cfg.oos.is_some() && cfg.task == Task::Regression;
    let (train_rows, test_rows) = match test_fraction {
        Some(f) if downstream => datasets::train_test_split(data.x.nrows(), f, cfg.seed)?,
        _ => ((0..data.x.nrows()).collect(), Vec::new()),
    };
    let pick = |m: &Matrix, rows: &[usize]| datasets::select_rows(m, rows);
    let (x, y) = (pick(&data.x, &train_rows), pick(&data.y, &train_rows));
    let labels = data.labels.as_ref().map(|l| train_rows.iter().map(|&i| l[i]).collect::<Vec<_>>());
    let model = driver::fit(&x, &y, cfg)?;
    let fit = output::fit_metrics(&model, labels.as_deref())?;
    let (mut knn_r2, mut krr_r2) = (None, None);
    if downstream {
        let col = |m: &Matrix| m.column(0).iter().copied().collect::<Vec<f64>>();
        let (xt, yt) = (pick(&data.x, &test_rows), pick(&data.y, &test_rows));
        let s = metrics::downstream_scores(&model.project(&x)?, &col(&y), &model.project(&xt)?, &col(&yt))?;
        knn_r2 = Some(s.knn_r2);
        krr_r2 = Some(s.krr_r2);
    }
    Ok(Row {
        value,
        seed: cfg.seed,
        fit,
        knn_r2,
        krr_r2,
    })
}

/// Missing scores are left as empty fields.
fn render(param: &str, rows: &[Row]) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut out = format!(
        "{param},seed,objective,cka,homogeneity,nmi,silhouette,silhouette_weighted,outer_iterations,converged,knn_r2,krr_r2\n"
    );
    for r in rows {
        let f = &r.fit;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.value,
            r.seed,
            f.objective,
            f.cka,
            opt(f.homogeneity),
            opt(f.nmi),
            opt(f.silhouette),
            opt(f.silhouette_weighted),
            f.outer_iterations,
            u8::from(f.converged),
            opt(r.knn_r2),
            opt(r.krr_r2),
        ));
    }
    out
}
