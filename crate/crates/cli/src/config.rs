//! Resolution order: library (or command) defaults, then the TOML config
//! file, then command-line flags.

use std::fs;

use sdr_core::driver::SdrConfig;
use sdr_core::kernels::KernelSpec;

use crate::args::ModelArgs;
use crate::{CliError, CliResult};

pub fn resolve(args: &ModelArgs, base: SdrConfig) -> CliResult<SdrConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.display())))?;
            merge_file(base, &text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?
        }
        None => base,
    };
    apply_flags(&mut cfg, args);
    cfg.validate()?;
    if args.dump_config {
        print!("{}", dump(&cfg)?);
    }
    Ok(cfg)
}

pub fn dump(cfg: &SdrConfig) -> CliResult<String> {
    toml::to_string(cfg).map_err(|e| CliError::usage(format!("cannot render configuration: {e}")))
}

fn merge_file(base: SdrConfig, text: &str) -> Result<SdrConfig, String> {
    let file: toml::Table = text.parse().map_err(|e: toml::de::Error| e.message().to_string())?;
    let mut merged = toml::Table::try_from(&base).map_err(|e| e.to_string())?;
    overlay(&mut merged, file);
    merged.try_into().map_err(|e: toml::de::Error| e.message().to_string())
}

fn overlay(dst: &mut toml::Table, src: toml::Table) {
    for (key, value) in src {
        match (dst.get_mut(&key), value) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => overlay(d, s),
            (_, v) => {
                dst.insert(key, v);
            }
        }
    }
}

fn apply_flags(cfg: &mut SdrConfig, a: &ModelArgs) {
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field {
                cfg.$field = v.into();
            }
        )*};
    }
    set!(alpha, eta, m, p, perplexity, task, loss, similarity, lr, outer_max, inner_max, outer_tol, init, seed);
    if a.no_standardize {
        cfg.standardize = false;
    }
    if a.t_step_guard {
        cfg.t_step_guard = true;
    }
    let wants_oos =
        a.oos || a.lambda_l.is_some() || a.beta.is_some() || a.beta_ramp.is_some() || a.oos_lengthscale.is_some();
    if wants_oos {
        let o = cfg.oos.get_or_insert_with(Default::default);
        if let Some(v) = a.lambda_l {
            o.lambda = v;
        }
        if let Some(v) = a.beta {
            o.beta = v;
        }
        if let Some(v) = a.beta_ramp {
            o.beta_ramp = v;
        }
        if let Some(v) = a.oos_lengthscale {
            o.kernel = Some(KernelSpec::rbf(v));
        }
    }
}
