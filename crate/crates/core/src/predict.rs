//! Point predictions, delta-method logit Gaussians and Monte Carlo
//! marginalization over them.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt_factor, symmetrize};
use crate::nn::{argmax, log_softmax, log_sum_exp, softmax, softmax_vec, Mlp, Pmf, TrailingSubset};
use crate::posterior::PosteriorCovariance;

pub const DEFAULT_SAMPLES: usize = 1000;

/// Inputs per batched Jacobian/projection pass.
const PROJECT_CHUNK: usize = 64;

/// Gaussian over the pre-softmax outputs of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LogitGaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::shape(format!(
                "mean has {} entries but covariance is {:?}",
                mean.len(),
                cov.shape()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric("logit Gaussian has non-finite entries"));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Same Gaussian with the covariance multiplied by `factor`.
    pub fn scale_cov(&self, factor: f64) -> Self {
        Self {
            mean: self.mean.clone(),
            cov: &self.cov * factor,
        }
    }
}

/// Monte Carlo estimate of the marginal PMF and its covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct PmfEstimate {
    pub pmf: Pmf,
    /// `(1/K) sum_k (f_k - f)(f_k - f)^T`.
    pub cov: DMatrix<f64>,
    /// `ln` of each entry of `pmf`, computed from the per-sample log-softmax
    /// so it stays finite when an entry underflows.
    pub log_pmf: DVector<f64>,
    pub samples: usize,
    pub seed: u64,
}

/// The individual PMF draws behind a [`PmfEstimate`].
#[derive(Clone, Debug, PartialEq)]
pub struct PmfSamples {
    /// `K x M`, one draw per row.
    pub pmfs: DMatrix<f64>,
    log_pmfs: DMatrix<f64>,
    pub seed: u64,
}

impl PmfSamples {
    /// Wraps explicit PMF draws, e.g. ones loaded from disk.
    pub fn from_rows(rows: &[Vec<f64>], seed: u64) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        for (k, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::shape(format!(
                    "sample {} has {} entries instead of {m}",
                    k + 1,
                    row.len()
                )));
            }
            Pmf::from_slice(row)?;
        }
        let pmfs = DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j]);
        let log_pmfs = pmfs.map(f64::ln);
        Ok(Self { pmfs, log_pmfs, seed })
    }

    pub fn len(&self) -> usize {
        self.pmfs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.pmfs.nrows() == 0
    }

    pub fn estimate(&self) -> PmfEstimate {
        let k = self.pmfs.nrows();
        let m = self.pmfs.ncols();
        let mean = DVector::from_fn(m, |j, _| self.pmfs.column(j).sum() / k as f64);
        let mut cov = DMatrix::zeros(m, m);
        for row in self.pmfs.row_iter() {
            let d = row.transpose() - &mean;
            cov.ger(1.0, &d, &d, 1.0);
        }
        cov /= k as f64;
        symmetrize(&mut cov);
        let ln_k = (k as f64).ln();
        let log_pmf = DVector::from_fn(m, |j, _| {
            let col: Vec<f64> = self.log_pmfs.column(j).iter().copied().collect();
            log_sum_exp(&col) - ln_k
        });
        PmfEstimate {
            pmf: Pmf::from_vector_unchecked(mean),
            cov,
            log_pmf,
            samples: k,
            seed: self.seed,
        }
    }
}

/// Mixes an input index into a base seed so every input gets its own
/// reproducible stream.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `softmax(g(x; theta) / t)`.
pub fn predict_point(model: &Mlp, x: &[f64], t: f64) -> Result<Pmf> {
    softmax(model.forward(x)?.as_slice(), t)
}

/// Most likely class of `x`; ties resolve to the lowest index.
pub fn classify(model: &Mlp, x: &[f64]) -> Result<usize> {
    Ok(argmax(model.forward(x)?.as_slice()))
}

/// `J_i^T (tc P) J_j` given `P J_j` already formed.
pub(crate) fn project_block(j_i: &DMatrix<f64>, p_j: &DMatrix<f64>, tc: f64) -> DMatrix<f64> {
    (j_i.transpose() * p_j) * tc
}

/// Logits, Jacobian `J` and `P J` for one input. Shared by every path that
/// needs `J_i^T (tc P) J_j` so diagonal blocks agree bit for bit.
pub(crate) fn logits_and_projection(
    model: &Mlp,
    post: &PosteriorCovariance,
    subset: &TrailingSubset,
    x: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let acts = model.forward_cached(x)?;
    let jac = model.jacobian_from_cache(&acts, subset);
    let p_j = post.matrix() * &jac;
    Ok((acts.logits().clone(), jac, p_j))
}

/// Delta-method Gaussian over the logits of `x`: mean `g(x; theta)`,
/// covariance `J^T (tc P) J`.
pub fn delta_propagate(model: &Mlp, post: &PosteriorCovariance, x: &[f64]) -> Result<LogitGaussian> {
    let subset = post.subset_for(model)?;
    let (logits, jac, p_j) = logits_and_projection(model, post, &subset, x)?;
    let mut cov = project_block(&jac, &p_j, post.tc());
    symmetrize(&mut cov);
    LogitGaussian::new(logits, cov)
}

/// [`delta_propagate`] for every row of `xs`, batching the front of the
/// network and the `P J` products.
pub fn delta_propagate_batch(model: &Mlp, post: &PosteriorCovariance, xs: &DMatrix<f64>) -> Result<Vec<LogitGaussian>> {
    let subset = post.subset_for(model)?;
    let m = model.n_classes();
    let mut out = Vec::with_capacity(xs.nrows());
    for start in (0..xs.nrows()).step_by(PROJECT_CHUNK) {
        let len = PROJECT_CHUNK.min(xs.nrows() - start);
        let (logits, jacs) = model.jacobians_batch(&xs.rows(start, len).into_owned(), &subset)?;
        let mut stacked = DMatrix::zeros(subset.len(), len * m);
        for (i, j) in jacs.iter().enumerate() {
            stacked.columns_mut(i * m, m).copy_from(j);
        }
        let mut p_stacked = DMatrix::zeros(subset.len(), len * m);
        p_stacked.gemm(1.0, post.matrix(), &stacked, 0.0);
        for (i, j) in jacs.iter().enumerate() {
            let p_j = p_stacked.columns(i * m, m).into_owned();
            let mut cov = project_block(j, &p_j, post.tc());
            symmetrize(&mut cov);
            out.push(LogitGaussian::new(logits.row(i).transpose(), cov)?);
        }
    }
    Ok(out)
}

/// Draws `k` logit vectors from `lg` and maps each through the softmax.
pub fn draw_pmf_samples(lg: &LogitGaussian, k: usize, seed: u64) -> Result<PmfSamples> {
    if k == 0 {
        return Err(Error::domain("sample count K must be at least 1"));
    }
    let m = lg.dim();
    let factor = psd_sqrt_factor(&lg.cov);
    let degenerate = factor.iter().all(|&v| v == 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pmfs = DMatrix::zeros(k, m);
    let mut log_pmfs = DMatrix::zeros(k, m);
    let mut z = DVector::zeros(m);
    for i in 0..k {
        let g = if degenerate {
            lg.mean.clone()
        } else {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            &lg.mean + &factor * &z
        };
        let p = softmax_vec(g.as_slice(), 1.0);
        let lp = log_softmax(g.as_slice(), 1.0);
        for j in 0..m {
            pmfs[(i, j)] = p[j];
            log_pmfs[(i, j)] = lp[j];
        }
    }
    Ok(PmfSamples { pmfs, log_pmfs, seed })
}

/// Monte Carlo marginalization of the softmax over a logit Gaussian.
pub fn mc_marginalize(lg: &LogitGaussian, k: usize, seed: u64) -> Result<PmfEstimate> {
    if lg.cov.iter().all(|&v| v == 0.0) {
        if k == 0 {
            return Err(Error::domain("sample count K must be at least 1"));
        }
        // Every draw equals the mean.
        let m = lg.dim();
        return Ok(PmfEstimate {
            pmf: softmax(lg.mean.as_slice(), 1.0)?,
            cov: DMatrix::zeros(m, m),
            log_pmf: DVector::from_vec(log_softmax(lg.mean.as_slice(), 1.0)),
            samples: k,
            seed,
        });
    }
    Ok(draw_pmf_samples(lg, k, seed)?.estimate())
}

/// Reference marginalization that samples the trailing parameters
/// themselves, `theta_r ~ N(theta_hat_r, tc P)`, and re-runs the trailing
/// layers for each draw.
pub fn mc_full_space(model: &Mlp, post: &PosteriorCovariance, x: &[f64], k: usize, seed: u64) -> Result<PmfEstimate> {
    let logits = full_space_logit_samples(model, post, &[x.to_vec()], k, seed)?;
    let draws = &logits[0];
    let m = model.n_classes();
    let mut pmfs = DMatrix::zeros(k, m);
    let mut log_pmfs = DMatrix::zeros(k, m);
    for (i, row) in draws.row_iter().enumerate() {
        let g: Vec<f64> = row.iter().copied().collect();
        pmfs.row_mut(i).copy_from_slice(&softmax_vec(&g, 1.0));
        log_pmfs.row_mut(i).copy_from_slice(&log_softmax(&g, 1.0));
    }
    Ok(PmfSamples { pmfs, log_pmfs, seed }.estimate())
}

/// Logit draws (`K x M` per input) under shared parameter draws
/// `theta_r ~ N(theta_hat_r, tc P)`; the same `theta_r` is used for every
/// input within a draw.
pub fn full_space_logit_samples(
    model: &Mlp,
    post: &PosteriorCovariance,
    inputs: &[Vec<f64>],
    k: usize,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    if k == 0 {
        return Err(Error::domain("sample count K must be at least 1"));
    }
    let subset: TrailingSubset = post.subset_for(model)?;
    let first = subset.first_layer();
    let mut features = Vec::with_capacity(inputs.len());
    for x in inputs {
        let xs = DMatrix::from_row_slice(1, x.len(), x);
        features.push(model.features(&xs, first)?.row(0).transpose());
    }
    let theta_hat = DVector::from_column_slice(&model.theta()[subset.range()]);
    let factor = psd_sqrt_factor(&post.scaled());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = model.n_classes();
    let mut out = vec![DMatrix::zeros(k, m); inputs.len()];
    let mut z = DVector::zeros(subset.len());
    for i in 0..k {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let theta = &theta_hat + &factor * &z;
        for (c, h) in features.iter().enumerate() {
            let g = model.trailing_logits(first, h, theta.as_slice());
            out[c].row_mut(i).copy_from(&g.transpose());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_model(widths: &[usize], seed: u64) -> Mlp {
        let layers = LayerSpec::chain(widths).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = layers.iter().map(LayerSpec::n_params).sum();
        Mlp::new(layers, (0..n).map(|_| rng.random_range(-0.7..0.7)).collect()).unwrap()
    }

    fn gaussian(mean: &[f64], cov: &[f64]) -> LogitGaussian {
        let m = mean.len();
        LogitGaussian::new(DVector::from_column_slice(mean), DMatrix::from_row_slice(m, m, cov)).unwrap()
    }

    #[test]
    fn zero_last_layer_predicts_uniform() {
        let mut model = random_model(&[3, 4, 5], 0);
        model.weights_mut(1).fill(0.0);
        let p = predict_point(&model, &[0.3, 0.1, -0.2], 1.0).unwrap();
        assert!(p.probs().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn temperature_does_not_change_the_class() {
        let model = random_model(&[3, 6, 4], 1);
        for x in [[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0], [0.0, 0.0, 0.0]] {
            let c = classify(&model, &x).unwrap();
            for t in [0.5, 1.0, 2.0] {
                assert_eq!(predict_point(&model, &x, t).unwrap().argmax(), c);
            }
        }
    }

    #[test]
    fn argmax_tie_break_is_lowest_index() {
        assert_eq!(Pmf::from_slice(&[0.1, 0.8, 0.1]).unwrap().argmax(), 1);
        assert_eq!(Pmf::from_slice(&[0.5, 0.5]).unwrap().argmax(), 0);
        assert_eq!(Pmf::from_slice(&[0.0, 0.0, 1.0]).unwrap().argmax(), 2);
    }

    #[test]
    fn zero_covariance_propagates_to_zero() {
        let model = random_model(&[3, 4, 3], 2);
        let sub = TrailingSubset::new(&model, 2).unwrap();
        let post = PosteriorCovariance::from_parts(DMatrix::zeros(sub.len(), sub.len()), 2, 0, 1.0, 1.0).unwrap();
        let x = [0.2, -0.4, 0.6];
        let lg = delta_propagate(&model, &post, &x).unwrap();
        assert_eq!(lg.cov, DMatrix::zeros(3, 3));
        assert_eq!(lg.mean, model.forward(&x).unwrap());
    }

    #[test]
    fn identity_toy_propagates_identity() {
        // One linear layer with one input feature equal to 0: J is the bias
        // selector, so P = I gives cov = I.
        let model = Mlp::zeros(LayerSpec::chain(&[1, 2]).unwrap()).unwrap();
        let post = PosteriorCovariance::from_parts(DMatrix::identity(4, 4), 1, 0, 1.0, 1.0).unwrap();
        let lg = delta_propagate(&model, &post, &[0.0]).unwrap();
        assert_eq!(lg.cov, DMatrix::identity(2, 2));
    }

    #[test]
    fn scalar_delta_example() {
        // g = w x + b with x = 2 and only the weight uncertain: J = [2, 1],
        // P = diag(0.25, 0) -> cov = 2 * 0.25 * 2 = 1.
        let model = Mlp::zeros(LayerSpec::chain(&[1, 1]).unwrap()).unwrap();
        let p = DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.0, 0.0]);
        let post = PosteriorCovariance::from_parts(p, 1, 0, 1.0, 1.0).unwrap();
        let lg = delta_propagate(&model, &post, &[2.0]).unwrap();
        assert_eq!(lg.cov[(0, 0)], 1.0);
        let scaled = crate::posterior::scale_covariance(post, 3.0).unwrap();
        assert_eq!(delta_propagate(&model, &scaled, &[2.0]).unwrap().cov[(0, 0)], 3.0);
    }

    #[test]
    fn batched_propagation_matches_single() {
        let model = random_model(&[3, 5, 3], 3);
        let sub = TrailingSubset::new(&model, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DMatrix::from_fn(sub.len(), sub.len(), |_, _| rng.random_range(-0.1..0.1));
        let post = PosteriorCovariance::from_parts(&a * a.transpose(), 2, 0, 1.0, 2.0).unwrap();
        let xs = DMatrix::from_fn(70, 3, |i, j| ((i + 3 * j) as f64).sin());
        let batch = delta_propagate_batch(&model, &post, &xs).unwrap();
        for (i, lg) in batch.iter().enumerate().step_by(13) {
            let single = delta_propagate(&model, &post, &xs.row(i).iter().copied().collect::<Vec<_>>()).unwrap();
            assert!((&lg.cov - &single.cov).amax() < 1e-13);
            assert!((&lg.mean - &single.mean).amax() < 1e-13);
        }
    }

    #[test]
    fn degenerate_gaussian_gives_exact_softmax() {
        let lg = gaussian(&[1.0, -0.5, 0.25], &[0.0; 9]);
        for k in [1, 10, 1000] {
            let est = mc_marginalize(&lg, k, 7).unwrap();
            assert_eq!(&est.pmf, &softmax(&[1.0, -0.5, 0.25], 1.0).unwrap());
            assert_eq!(est.cov, DMatrix::zeros(3, 3));
        }
    }

    #[test]
    fn zero_samples_is_a_domain_error() {
        let lg = gaussian(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(mc_marginalize(&lg, 0, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn symmetric_gaussian_gives_even_pmf() {
        let lg = gaussian(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        let est = mc_marginalize(&lg, 100_000, 3).unwrap();
        assert!((est.pmf.probs()[0] - 0.5).abs() < 0.01);
    }

    #[test]
    fn marginalization_is_reproducible_and_records_provenance() {
        let lg = gaussian(&[0.5, 0.0, -0.5], &[1.0, 0.2, 0.0, 0.2, 0.5, 0.1, 0.0, 0.1, 2.0]);
        let a = mc_marginalize(&lg, 500, 99).unwrap();
        let b = mc_marginalize(&lg, 500, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.samples, a.seed), (500, 99));
        let c = mc_marginalize(&lg, 500, 100).unwrap();
        assert_ne!(a.pmf, c.pmf);
    }

    #[test]
    fn log_pmf_matches_log_of_pmf() {
        let lg = gaussian(&[2.0, 0.0, -1.0], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let est = mc_marginalize(&lg, 2000, 5).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(est.log_pmf[j], est.pmf.probs()[j].ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn full_space_with_zero_covariance_is_the_point_prediction() {
        let model = random_model(&[3, 4, 3], 5);
        let sub = TrailingSubset::new(&model, 2).unwrap();
        let post = PosteriorCovariance::from_parts(DMatrix::zeros(sub.len(), sub.len()), 2, 0, 1.0, 1.0).unwrap();
        let x = [0.3, 0.3, -0.9];
        let est = mc_full_space(&model, &post, &x, 50, 1).unwrap();
        let point = predict_point(&model, &x, 1.0).unwrap();
        assert!((est.pmf.probs() - point.probs()).amax() < 1e-15);
        assert!(est.cov.amax() < 1e-30);
    }

    #[test]
    fn shift_invariance_per_sample() {
        let lg = gaussian(&[0.3, -0.2, 1.0], &[0.5, 0.1, 0.0, 0.1, 0.4, 0.0, 0.0, 0.0, 0.3]);
        let mut shifted = lg.clone();
        shifted.mean.add_scalar_mut(5.0);
        let a = mc_marginalize(&lg, 300, 8).unwrap();
        let b = mc_marginalize(&shifted, 300, 8).unwrap();
        assert!((a.pmf.probs() - b.pmf.probs()).amax() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn estimates_stay_on_the_simplex(seed in 0u64..10_000, m in 2usize..6, k in 1usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mean = DVector::from_fn(m, |_, _| rng.random_range(-3.0..3.0));
            let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.5..1.5));
            let lg = LogitGaussian::new(mean, &a * a.transpose()).unwrap();
            let est = mc_marginalize(&lg, k, seed).unwrap();
            prop_assert!((est.pmf.probs().sum() - 1.0).abs() <= 1e-12);
            let ones = DVector::from_element(m, 1.0);
            prop_assert!((ones.transpose() * &est.cov * &ones)[(0, 0)].abs() <= 1e-10);
            for row in est.cov.row_iter() {
                prop_assert!(row.sum().abs() <= 1e-10);
            }
        }
    }
}
