//! Synthetic datasets and train/test splitting.
//!
//! Every generator is a pure function of its parameters and seed.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    /// Regression target or integer-coded class.
    pub y: Vector,
    pub feature_names: Vec<String>,
    pub target_name: String,
}

impl Dataset {
    fn new(x: Matrix, y: Vector, prefix: &str, target: &str) -> Self {
        let feature_names = (0..x.ncols()).map(|j| format!("{prefix}{j}")).collect();
        Dataset {
            x,
            y,
            feature_names,
            target_name: target.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: select_rows(&self.x, rows),
            y: Vector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i])),
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
        }
    }
}

pub fn select_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    Matrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn check(n: usize, noise: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::invalid("noise", format!("must be nonnegative, got {noise}")));
    }
    Ok(())
}

fn add_noise<R: Rng>(x: &mut Matrix, noise: f64, rng: &mut R) {
    if noise > 0.0 {
        for v in x.iter_mut() {
            *v += noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// S-curve in 3-D; the target is the curve parameter `t`.
pub fn gen_scurve(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check(n, noise)?;
    let mut rng = rng::stream(seed, Purpose::Dataset, 0);
    let mut x = Matrix::zeros(n, 3);
    let mut y = Vector::zeros(n);
    for i in 0..n {
        let t = 3.0 * PI * (rng.random::<f64>() - 0.5);
        let u = 2.0 * rng.random::<f64>();
        x[(i, 0)] = t.sin();
        x[(i, 1)] = u;
        x[(i, 2)] = t.signum() * (t.cos() - 1.0);
        y[i] = t;
    }
    add_noise(&mut x, noise, &mut rng);
    Ok(Dataset::new(x, y, "x", "t"))
}

/// Swiss roll; the target is the roll parameter `t` in `[1.5 pi, 4.5 pi]`.
pub fn gen_swissroll(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check(n, noise)?;
    let mut rng = rng::stream(seed, Purpose::Dataset, 1);
    let mut x = Matrix::zeros(n, 3);
    let mut y = Vector::zeros(n);
    for i in 0..n {
        let t = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
        let height = 21.0 * rng.random::<f64>();
        x[(i, 0)] = t * t.cos();
        x[(i, 1)] = height;
        x[(i, 2)] = t * t.sin();
        y[i] = t;
    }
    add_noise(&mut x, noise, &mut rng);
    Ok(Dataset::new(x, y, "x", "t"))
}

/// Friedman #1 response.
pub fn friedman_response(x: &[f64]) -> f64 {
    10.0 * (PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4]
}

/// Friedman #1: ten uniform features, five of them irrelevant.
pub fn gen_friedman(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    check(n, noise_std)?;
    let mut rng = rng::stream(seed, Purpose::Dataset, 2);
    let mut x = Matrix::zeros(n, 10);
    let mut y = Vector::zeros(n);
    for i in 0..n {
        let row: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
        for (j, v) in row.iter().enumerate() {
            x[(i, j)] = *v;
        }
        y[i] = friedman_response(&row) + noise_std * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(Dataset::new(x, y, "x", "y"))
}

pub const PIECEWISE_LOW_FREQ: f64 = 1.0;
pub const PIECEWISE_HIGH_FREQ: f64 = 8.0;

/// Noise-free piecewise-frequency signal: slow sine on `[0, 0.5]`, fast on `(0.5, 1]`.
pub fn piecewise_signal(x: f64) -> f64 {
    let f = if x <= 0.5 {
        PIECEWISE_LOW_FREQ
    } else {
        PIECEWISE_HIGH_FREQ
    };
    (2.0 * PI * f * x).sin()
}

/// 1-D inputs on `[0, 1]` with a signal whose frequency jumps at 0.5.
pub fn gen_piecewise(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check(n, noise)?;
    let mut rng = rng::stream(seed, Purpose::Dataset, 3);
    let mut x = Matrix::zeros(n, 1);
    let mut y = Vector::zeros(n);
    for i in 0..n {
        let xi: f64 = rng.random();
        x[(i, 0)] = xi;
        y[i] = piecewise_signal(xi) + noise * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(Dataset::new(x, y, "x", "y"))
}

/// Labeled Gaussian classes whose means differ only in the first two
/// coordinates; the remaining `dim - 2` coordinates carry larger-scale noise
/// that dominates the input geometry.
pub fn gen_hidden_classes(
    n: usize,
    classes: usize,
    dim: usize,
    separation: f64,
    nuisance: f64,
    seed: u64,
) -> Result<Dataset> {
    check(n, nuisance)?;
    if classes < 2 {
        return Err(Error::invalid("classes", "need at least two classes"));
    }
    if dim < 2 {
        return Err(Error::invalid("dim", "need at least two dimensions"));
    }
    let mut rng = rng::stream(seed, Purpose::Dataset, 4);
    let mut x = Matrix::zeros(n, dim);
    let mut y = Vector::zeros(n);
    for i in 0..n {
        let c = i % classes;
        let angle = 2.0 * PI * c as f64 / classes as f64;
        x[(i, 0)] = separation * angle.cos() + rng.sample::<f64, _>(StandardNormal);
        x[(i, 1)] = separation * angle.sin() + rng.sample::<f64, _>(StandardNormal);
        for j in 2..dim {
            x[(i, j)] = nuisance * rng.sample::<f64, _>(StandardNormal);
        }
        y[i] = c as f64;
    }
    Ok(Dataset::new(x, y, "x", "label"))
}

/// Names accepted by [`generate`].
pub const GENERATORS: [&str; 5] = ["scurve", "swissroll", "friedman", "piecewise", "classes"];

/// Dispatch by generator name with each generator's default noise.
pub fn generate(name: &str, n: usize, noise: Option<f64>, seed: u64) -> Result<Dataset> {
    match name {
        "scurve" => gen_scurve(n, noise.unwrap_or(0.0), seed),
        "swissroll" => gen_swissroll(n, noise.unwrap_or(0.0), seed),
        "friedman" => gen_friedman(n, noise.unwrap_or(1.0), seed),
        "piecewise" => gen_piecewise(n, noise.unwrap_or(0.1), seed),
        "classes" => gen_hidden_classes(n, 4, 10, 3.0, noise.unwrap_or(4.0), seed),
        other => Err(Error::invalid(
            "dataset",
            format!("unknown generator `{other}` (expected one of {})", GENERATORS.join(", ")),
        )),
    }
}

/// Shuffled split with `round(fraction * n)` test rows, at least one on each side.
pub fn train_test_split(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(
            "test_fraction",
            format!("must lie in (0, 1), got {test_fraction}"),
        ));
    }
    if n < 2 {
        return Err(Error::invalid("n", "need at least two rows to split"));
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Purpose::Split, 0));
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// Shuffled k-fold partition: `folds` disjoint sorted index sets covering `0..n`,
/// with sizes differing by at most one.
pub fn kfold(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > n {
        return Err(Error::invalid("folds", format!("need 2 <= folds <= {n}, got {folds}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Purpose::Split, 1));
    let mut out: Vec<Vec<usize>> = (0..folds)
        .map(|f| idx.iter().skip(f).step_by(folds).copied().collect())
        .collect();
    for fold in &mut out {
        fold.sort_unstable();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kfold_partitions() {
        let folds = kfold(23, 5, 3).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 4 || f.len() == 5));
        assert!(kfold(3, 4, 0).is_err() && kfold(10, 1, 0).is_err());
    }

    #[test]
    fn scurve_shape_and_ranges() {
        let d = gen_scurve(100, 0.0, 1).unwrap();
        assert_eq!(d.x.shape(), (100, 3));
        for i in 0..100 {
            assert!(d.x[(i, 0)].powi(2) <= 1.0);
            assert!(d.x[(i, 2)].abs() <= 2.0);
            let t = d.y[i];
            assert!((d.x[(i, 0)] - t.sin()).abs() < 1e-15);
        }
        assert_eq!(d, gen_scurve(100, 0.0, 1).unwrap());
        assert!(gen_scurve(10, -1.0, 1).is_err());
    }

    #[test]
    fn swissroll_polar_identity() {
        let d = gen_swissroll(80, 0.0, 2).unwrap();
        for i in 0..80 {
            let r = d.x[(i, 0)].hypot(d.x[(i, 2)]);
            assert!((r - d.y[i]).abs() <= 1e-12);
            assert!(d.y[i] >= 1.5 * PI && d.y[i] <= 4.5 * PI);
        }
        assert_eq!(d, gen_swissroll(80, 0.0, 2).unwrap());
    }

    #[test]
    fn friedman_formula() {
        let mut x = vec![0.0; 10];
        x[0] = 0.5;
        x[1] = 1.0;
        x[2] = 0.5;
        assert!((friedman_response(&x) - 10.0).abs() < 1e-12);
        let d = gen_friedman(50, 0.0, 3).unwrap();
        for i in 0..50 {
            let row: Vec<f64> = d.x.row(i).iter().copied().collect();
            assert_eq!(d.y[i], friedman_response(&row));
        }
        assert_eq!(gen_friedman(50, 1.0, 3).unwrap(), gen_friedman(50, 1.0, 3).unwrap());
        assert_ne!(gen_friedman(50, 1.0, 3).unwrap(), gen_friedman(50, 1.0, 4).unwrap());
    }

    #[test]
    fn piecewise_is_continuous_at_the_break() {
        assert!(piecewise_signal(0.5).abs() < 1e-12);
        assert!(piecewise_signal(0.5 + 1e-12).abs() < 1e-9);
        let d = gen_piecewise(200, 0.0, 4).unwrap();
        assert!(d.x.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn generator_dispatch() {
        for name in GENERATORS {
            assert_eq!(generate(name, 12, None, 0).unwrap().len(), 12);
        }
        assert!(matches!(generate("mnist", 10, None, 0), Err(Error::InvalidParameter { .. })));
    }

    #[test]
    fn split_cases() {
        let (train, test) = train_test_split(10, 0.2, 5).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(train_test_split(10, 0.2, 5).unwrap(), (train, test));
        assert!(train_test_split(10, 1.0, 5).is_err());
        assert!(train_test_split(10, 0.0, 5).is_err());
    }
}
