#![allow(dead_code)]

use std::path::PathBuf;

use deltauq::data::{Dataset, Split};
use deltauq::{LayerSpec, Mlp};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mlp(widths: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Mlp {
    let layers = LayerSpec::chain(widths).unwrap();
    let n = layers.iter().map(LayerSpec::n_params).sum();
    Mlp::new(layers, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_dataset(n: usize, dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let inputs = DMatrix::from_fn(n, dim, |_, _| rng.random_range(-1.5..1.5));
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Dataset::new(inputs, labels, classes, Split::Train).unwrap()
}

pub fn random_spd(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(m, m) * 0.05
}

pub fn random_vector(m: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(m, |_, _| rng.random_range(lo..hi))
}

/// Central difference of a scalar function along every coordinate.
pub fn fd_gradient(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> DVector<f64> {
    let mut probe = x.to_vec();
    DVector::from_fn(x.len(), |i, _| {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        (up - down) / (2.0 * h)
    })
}

/// Central-difference Jacobian of a vector function: entry `(i, m)` is
/// `d f_m / d x_i`.
pub fn fd_jacobian(x: &[f64], h: f64, out: usize, f: impl Fn(&[f64]) -> DVector<f64>) -> DMatrix<f64> {
    let mut probe = x.to_vec();
    let mut jac = DMatrix::zeros(x.len(), out);
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        jac.row_mut(i).copy_from(&((up - down) / (2.0 * h)).transpose());
    }
    jac
}

pub fn rel_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

pub fn mnist_dir() -> PathBuf {
    std::env::var_os("DUQ_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}
