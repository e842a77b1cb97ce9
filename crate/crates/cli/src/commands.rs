use std::path::Path;

use serde::Serialize;
use sdr_core::driver::{self, SdrConfig, SdrModel, Task};
use sdr_core::gp::{self, GpOptions, GpReport, GpRun, LengthscaleSelection};
use sdr_core::io::{self, Table};
use sdr_core::{datasets, metrics, Matrix};

use crate::args::{Baseline, FitArgs, GenArgs, GpArgs, ProjectArgs};
use crate::output::{self, Loaded};
use crate::{config, CliError, CliResult};

pub fn gen(a: GenArgs) -> CliResult<()> {
    let d = datasets::generate(&a.dataset, a.n, a.noise, a.seed)?;
    let mut headers = d.feature_names.clone();
    headers.push(d.target_name.clone());
    let data = Matrix::from_fn(d.len(), headers.len(), |i, j| if j < d.x.ncols() { d.x[(i, j)] } else { d.y[i] });
    io::save_table(&a.out, &Table::new(headers, data)?)?;
    Ok(())
}

pub fn fit(a: FitArgs) -> CliResult<()> {
    let cfg = config::resolve(&a.model, SdrConfig::default())?;
    let data = output::load(&a.data, cfg.task)?;
    let mut model = driver::fit(&data.x, &data.y, &cfg)?;
    model.feature_names = data.feature_names.clone();
    log::info!(
        "fitted n={} m={} in {} outer iterations (converged: {})",
        model.n,
        model.m,
        model.outer.len(),
        model.converged
    );
    let m = output::fit_metrics(&model, data.labels.as_deref())?;
    output::write_fit(&a.out, &model, &m)
}

pub fn project(a: ProjectArgs) -> CliResult<()> {
    let model: SdrModel = io::load_model(&a.model)?;
    let table = io::load_csv(&a.input)?;
    let names: Vec<String> = match (&a.features, model.feature_names.is_empty()) {
        (Some(f), _) => f.clone(),
        (None, false) => model.feature_names.clone(),
        (None, true) => table.headers.clone(),
    };
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let x = table.columns(&refs)?;
    let z = model.project(&x)?;
    io::save_csv(&a.out, &output::names("z", z.ncols()), &z)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct GpMetrics {
    targets: Vec<String>,
    n_train: usize,
    n_test: usize,
    sdr_gp: GpReport,
    oos_lengthscale: Option<LengthscaleSelection>,
    baseline: Option<GpReport>,
}

pub fn gp(a: GpArgs) -> CliResult<()> {
    let cfg = config::resolve(&a.model, gp::pipeline_config(0))?;
    if cfg.task != Task::Regression {
        return Err(CliError::usage("the GP pipeline supports regression targets only"));
    }
    let (train, test, y_test) = split_data(&a)?;
    let opts = GpOptions {
        lr: a.gp_lr,
        steps: a.gp_steps,
        init: None,
    };
    let (model, run, selection) = if a.select_oos_lengthscale {
        let (m, r, s) = gp::sdr_gp_pipeline_selected(&train.x, &train.y, &test.x, y_test.as_ref(), &cfg, &opts)?;
        (m, r, Some(s))
    } else {
        let (m, r) = gp::sdr_gp_pipeline(&train.x, &train.y, &test.x, y_test.as_ref(), &cfg, &opts)?;
        (m, r, None)
    };
    let baseline = match a.baseline {
        Some(Baseline::RawGp) => Some(gp::raw_gp(&train.x, &train.y, &test.x, y_test.as_ref(), &opts)?),
        None => None,
    };

    if let Some(mll) = run.report.test_mll {
        log::info!("sdr-gp test mll {mll:.4}");
    }
    output::ensure_dir(&a.out)?;
    let mut model = model;
    model.feature_names = train.feature_names.clone();
    io::save_model(&a.out.join("model.sdr"), &model)?;
    write_predictions(&a.out.join("predictions.csv"), &a.data.targets, &run)?;
    if let Some(y) = &y_test {
        write_calibration(&a.out.join("calibration.csv"), &a.data.targets, &run, y)?;
    }
    if let Some(b) = &baseline {
        write_predictions(&a.out.join("baseline_predictions.csv"), &a.data.targets, b)?;
    }
    let report = GpMetrics {
        targets: a.data.targets.clone(),
        n_train: train.x.nrows(),
        n_test: test.x.nrows(),
        sdr_gp: run.report,
        oos_lengthscale: selection,
        baseline: baseline.map(|b| b.report),
    };
    io::save_json(&a.out.join("metrics.json"), &report)?;
    Ok(())
}

/// Training and test tables, with test targets when the test file has them.
fn split_data(a: &GpArgs) -> CliResult<(Loaded, Loaded, Option<Matrix>)> {
    let table = io::load_csv(&a.data.input)?;
    let all = output::select(&table, &a.data, Task::Regression)?;
    match &a.test {
        Some(path) => {
            let t = io::load_csv(path)?;
            let refs: Vec<&str> = all.feature_names.iter().map(String::as_str).collect();
            let x = t.columns(&refs)?;
            let targets: Vec<&str> = a.data.targets.iter().map(String::as_str).collect();
            let y = if targets.iter().all(|c| t.headers.iter().any(|h| h == c)) {
                Some(t.columns(&targets)?)
            } else {
                None
            };
            let test = Loaded {
                x,
                y: y.clone().unwrap_or_else(|| Matrix::zeros(0, targets.len())),
                feature_names: all.feature_names.clone(),
                labels: None,
            };
            Ok((all, test, y))
        }
        None => {
            let (tr, te) = datasets::train_test_split(all.x.nrows(), a.test_fraction, a.split_seed)?;
            let part = |rows: &[usize]| Loaded {
                x: datasets::select_rows(&all.x, rows),
                y: datasets::select_rows(&all.y, rows),
                feature_names: all.feature_names.clone(),
                labels: None,
            };
            let (train, test) = (part(&tr), part(&te));
            let y = test.y.clone();
            Ok((train, test, Some(y)))
        }
    }
}

fn write_predictions(path: &Path, targets: &[String], run: &GpRun) -> CliResult<()> {
    let k = run.mean.ncols();
    let headers: Vec<String> = if k == 1 {
        vec!["mean".into(), "std".into()]
    } else {
        targets.iter().flat_map(|t| [format!("{t}_mean"), format!("{t}_std")]).collect()
    };
    let data = Matrix::from_fn(run.mean.nrows(), 2 * k, |i, j| {
        if j % 2 == 0 {
            run.mean[(i, j / 2)]
        } else {
            run.std[(i, j / 2)]
        }
    });
    io::save_csv(path, &headers, &data)?;
    Ok(())
}

fn write_calibration(path: &Path, targets: &[String], run: &GpRun, y: &Matrix) -> CliResult<()> {
    let k = run.mean.ncols();
    let mut columns = Vec::with_capacity(k);
    let mut levels = Vec::new();
    for j in 0..k {
        let col = |m: &Matrix| m.column(j).iter().copied().collect::<Vec<f64>>();
        let curve = metrics::calibration_curve(&col(&run.mean), &col(&run.std), &col(y), gp::CALIBRATION_BINS)?;
        levels = curve.levels;
        columns.push(curve.coverages);
    }
    let mut headers = vec!["level".to_string()];
    if k == 1 {
        headers.push("coverage".into());
    } else {
        headers.extend(targets.iter().map(|t| format!("coverage_{t}")));
    }
    let data = Matrix::from_fn(levels.len(), k + 1, |i, j| if j == 0 { levels[i] } else { columns[j - 1][i] });
    io::save_csv(path, &headers, &data)?;
    Ok(())
}
