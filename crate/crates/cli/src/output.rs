//! Data loading and artifact writing shared by the subcommands.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sdr_core::driver::{SdrModel, Task};
use sdr_core::io::{self, Table};
use sdr_core::{metrics, Matrix};

use crate::args::DataArgs;
use crate::{CliError, CliResult};

/// Feature and target matrices read from a CSV.
pub struct Loaded {
    pub x: Matrix,
    pub y: Matrix,
    pub feature_names: Vec<String>,
    /// Integer classes for the clustering scores, when available.
    pub labels: Option<Vec<usize>>,
}

pub fn load(args: &DataArgs, task: Task) -> CliResult<Loaded> {
    let table = io::load_csv(&args.input)?;
    select(&table, args, task)
}

pub fn select(table: &Table, args: &DataArgs, task: Task) -> CliResult<Loaded> {
    let targets: Vec<&str> = args.targets.iter().map(String::as_str).collect();
    let y = table.columns(&targets)?;
    let (feature_names, x) = match &args.features {
        Some(names) => {
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            (names.iter().map(|s| s.to_string()).collect(), table.columns(&names)?)
        }
        None => {
            let mut excluded = targets.clone();
            if let Some(l) = &args.labels {
                excluded.push(l);
            }
            table.columns_except(&excluded)
        }
    };
    if x.ncols() == 0 {
        return Err(CliError::data("no feature columns left after removing targets"));
    }
    let labels = match (&args.labels, task) {
        (Some(col), _) => Some(metrics::labels_from_column(&table.column(col)?)?),
        (None, Task::Classification) if targets.len() == 1 => {
            Some(metrics::labels_from_column(&table.column(targets[0])?)?)
        }
        _ => None,
    };
    Ok(Loaded {
        x,
        y,
        feature_names,
        labels,
    })
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

pub fn names(prefix: &str, k: usize) -> Vec<String> {
    (0..k).map(|j| format!("{prefix}{j}")).collect()
}

/// Label-consistency scores of a fitted model.
#[derive(Debug, Clone, Default, Serialize)]
pub struct FitMetrics {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub outer_iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub cka: f64,
    pub homogeneity: Option<f64>,
    pub nmi: Option<f64>,
    pub silhouette: Option<f64>,
    pub silhouette_weighted: Option<f64>,
    pub empty_prototypes: usize,
}

/// Sample-to-prototype assignment by largest transported mass.
pub fn assignments(model: &SdrModel) -> Vec<usize> {
    let t = model.coupling.plan();
    (0..t.nrows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn fit_metrics(model: &SdrModel, labels: Option<&[usize]>) -> CliResult<FitMetrics> {
    let mut out = FitMetrics {
        n: model.n,
        m: model.m,
        p: model.z.ncols(),
        outer_iterations: model.outer.len(),
        converged: model.converged,
        objective: model.objective_trace.last().copied().unwrap_or(f64::NAN),
        cka: model.final_cka(),
        ..Default::default()
    };
    let Some(labels) = labels else {
        return Ok(out);
    };
    let proto = model.prototype_labels(labels)?;
    out.empty_prototypes = proto.empty.len();
    out.homogeneity = Some(metrics::homogeneity(labels, &assignments(model))?);
    let classes = proto.labels.iter().copied().max().map_or(0, |c| c + 1);
    let distinct = {
        let mut l = proto.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if classes >= 2 && classes <= model.m {
        let km = metrics::kmeans(&model.z, classes, sdr_core::driver::KMEANS_RESTARTS, model.config.seed)?;
        out.nmi = Some(metrics::nmi(&proto.labels, &km.labels)?);
    }
    if distinct >= 2 {
        out.silhouette = Some(metrics::silhouette(&model.z, &proto.labels, None)?);
        out.silhouette_weighted = Some(metrics::silhouette(&model.z, &proto.labels, Some(&model.h_z))?);
    }
    Ok(out)
}

/// Every artifact of a fit: model, embeddings, coupling, masses, traces, metrics.
pub fn write_fit(dir: &Path, model: &SdrModel, metrics: &FitMetrics) -> CliResult<()> {
    ensure_dir(dir)?;
    let p = model.z.ncols();
    io::save_model(&dir.join("model.sdr"), model)?;
    io::save_csv(&dir.join("embeddings.csv"), &names("z", p), &model.z)?;
    io::save_csv(&dir.join("sample_embeddings.csv"), &names("z", p), &model.sample_embedding())?;
    io::save_csv(&dir.join("coupling.csv"), &names("t", model.m), model.coupling.plan())?;
    let hz = Matrix::from_column_slice(model.m, 1, &model.h_z);
    io::save_csv(&dir.join("hz.csv"), &["h_z".to_string()], &hz)?;

    let headers: Vec<String> = ["iteration", "objective", "supervised", "gw", "cka", "oos", "z_steps", "t_iterations"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let trace = Matrix::from_fn(model.outer.len(), headers.len(), |i, j| {
        let r = &model.outer[i];
        match j {
            0 => (i + 1) as f64,
            1 => r.terms.total,
            2 => r.terms.supervised,
            3 => r.terms.gw,
            4 => r.terms.cka,
            5 => r.terms.oos,
            6 => r.z_steps as f64,
            _ => r.t_iterations as f64,
        }
    });
    io::save_csv(&dir.join("objective_trace.csv"), &headers, &trace)?;
    let cka = Matrix::from_fn(model.cka_trace.len(), 2, |i, j| {
        if j == 0 {
            (i + 1) as f64
        } else {
            model.cka_trace[i]
        }
    });
    io::save_csv(&dir.join("cka_trace.csv"), &["iteration".into(), "cka".into()], &cka)?;
    io::save_json(&dir.join("metrics.json"), metrics)?;
    Ok(())
}
