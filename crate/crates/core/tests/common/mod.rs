#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sdr_core::rng::{stream, Purpose};
use sdr_core::transport::Coupling;
use sdr_core::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    stream(seed, Purpose::Simulation, 7)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Strictly positive feasible coupling with uniform source.
pub fn coupling(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Coupling {
    let raw = Matrix::from_fn(n, m, |_, _| rng.random_range(0.05..1.0));
    let plan = Matrix::from_fn(n, m, |i, j| raw[(i, j)] / raw.row(i).sum() / n as f64);
    Coupling::new(plan, Coupling::uniform_source(n)).unwrap()
}

/// Symmetric nonnegative similarity with zero diagonal.
pub fn similarity(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
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

pub fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    // Every class present at least once.
    let mut l: Vec<usize> = (0..n).map(|i| if i < classes { i } else { rng.random_range(0..classes) }).collect();
    for i in (1..n).rev() {
        l.swap(i, rng.random_range(0..=i));
    }
    l
}

pub fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    Matrix::from_fn(labels.len(), classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 })
}

pub fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(perm[i], j)])
}

pub fn permute_sym(m: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(perm[i], perm[j])])
}

pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
