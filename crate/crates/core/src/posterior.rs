//! Laplace covariance of the trailing-layer parameters.
//!
//! The Hessian of the log-likelihood is replaced by the Gauss-Newton form of
//! the Fisher information,
//!
//! ```text
//! I = sum_n sum_m eta_{m,n} J_{m,n} J_{m,n}^T,   eta_{m,n} = f_m (1 - f_m),
//! ```
//!
//! with `J_{m,n} = dg_m(x_n)/dtheta_r`. Writing `U_n = [sqrt(eta_{1,n}) J_{1,n}
//! ... sqrt(eta_{M,n}) J_{M,n}]` gives `I = sum_n U_n U_n^T`, so
//! `P = (I + P0^{-1})^{-1}` can be built one sample at a time:
//!
//! ```text
//! K_n     = P_n U_n (I_M + U_n^T P_n U_n)^{-1}
//! P_{n+1} = P_n - K_n U_n^T P_n
//! ```
//!
//! starting from `P_0 = I / prior_precision`.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, symmetrize};
use crate::nn::{softmax_vec, Mlp, Pmf, TrailingSubset};

/// Diagonal jitter inside the `M x M` (or stacked) inversion.
pub const UPDATE_JITTER: f64 = 1e-12;

/// Samples per stacked update when processing a whole dataset.
pub const DEFAULT_BLOCK: usize = 64;

/// Samples whose scores are stacked into one rank update in
/// [`direct_covariance`].
const DIRECT_STACK: usize = 256;

/// Covariance of the trailing-layer parameters together with its metadata.
///
/// The stored matrix is the unscaled Laplace covariance; the covariance used
/// for prediction is `tc * P` (see [`PosteriorCovariance::scaled`]).
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorCovariance {
    cov: DMatrix<f64>,
    layers: usize,
    n_samples: usize,
    prior_precision: f64,
    tc: f64,
}

impl PosteriorCovariance {
    /// `P_0 = I / prior_precision` over the parameters of `subset`.
    pub fn prior(subset: &TrailingSubset, prior_precision: f64) -> Result<Self> {
        if !(prior_precision > 0.0 && prior_precision.is_finite()) {
            return Err(Error::domain(format!(
                "prior precision must be positive, got {prior_precision}"
            )));
        }
        let n = subset.len();
        Ok(Self {
            cov: DMatrix::from_diagonal_element(n, n, 1.0 / prior_precision),
            layers: subset.layers(),
            n_samples: 0,
            prior_precision,
            tc: 1.0,
        })
    }

    pub fn from_parts(
        cov: DMatrix<f64>,
        layers: usize,
        n_samples: usize,
        prior_precision: f64,
        tc: f64,
    ) -> Result<Self> {
        if !cov.is_square() {
            return Err(Error::shape("posterior covariance must be square"));
        }
        if !(tc > 0.0 && tc.is_finite()) {
            return Err(Error::domain(format!("tc must be positive, got {tc}")));
        }
        if layers == 0 {
            return Err(Error::config("posterior must cover at least one layer"));
        }
        Ok(Self {
            cov,
            layers,
            n_samples,
            prior_precision,
            tc,
        })
    }

    /// The unscaled Laplace covariance.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// `tc * P`, the covariance used when propagating to the logits.
    pub fn scaled(&self) -> DMatrix<f64> {
        &self.cov * self.tc
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn prior_precision(&self) -> f64 {
        self.prior_precision
    }

    pub fn tc(&self) -> f64 {
        self.tc
    }

    /// The trailing subset of `model` this covariance describes.
    pub fn subset_for(&self, model: &Mlp) -> Result<TrailingSubset> {
        let subset = TrailingSubset::new(model, self.layers)?;
        if subset.len() != self.dim() {
            return Err(Error::config(format!(
                "posterior covers {} parameters but the last {} layers of the model have {}",
                self.dim(),
                self.layers,
                subset.len()
            )));
        }
        Ok(subset)
    }
}

/// `U_n`: per-class Jacobian columns weighted by `sqrt(eta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    u: DMatrix<f64>,
}

impl SampleScore {
    pub fn new(u: DMatrix<f64>) -> Self {
        Self { u }
    }

    /// `U = J diag(sqrt(eta(p)))`.
    pub fn from_jacobian(mut jac: DMatrix<f64>, p: &Pmf) -> Self {
        for (m, e) in eta(p).iter().enumerate() {
            jac.column_mut(m).scale_mut(e.sqrt());
        }
        Self { u: jac }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.u
    }
}

/// `eta_m = p_m (1 - p_m)`, always in `[0, 1/4]`.
pub fn eta(p: &Pmf) -> DVector<f64> {
    p.probs().map(|v| v * (1.0 - v))
}

/// `U_n` for input `x` at the current parameters.
pub fn sample_score(model: &Mlp, x: &[f64], subset: &TrailingSubset) -> Result<SampleScore> {
    let acts = model.forward_cached(x)?;
    let p = Pmf::from_vector_unchecked(DVector::from_vec(softmax_vec(acts.logits().as_slice(), 1.0)));
    Ok(SampleScore::from_jacobian(model.jacobian_from_cache(&acts, subset), &p))
}

/// Scores of every row of `xs`, sharing one batched pass through the front
/// of the network.
pub fn sample_scores_batch(model: &Mlp, xs: &DMatrix<f64>, subset: &TrailingSubset) -> Result<Vec<SampleScore>> {
    let (logits, jacs) = model.jacobians_batch(xs, subset)?;
    Ok(jacs
        .into_iter()
        .enumerate()
        .map(|(i, jac)| {
            let z: Vec<f64> = logits.row(i).iter().copied().collect();
            let p = Pmf::from_vector_unchecked(DVector::from_vec(softmax_vec(&z, 1.0)));
            SampleScore::from_jacobian(jac, &p)
        })
        .collect())
}

/// One step of the recursion for a single sample.
pub fn recursive_update(post: PosteriorCovariance, score: &SampleScore) -> Result<PosteriorCovariance> {
    recursive_update_block(post, std::slice::from_ref(score))
}

/// Applies the recursion to several samples at once by stacking their
/// scores, `U = [U_a ... U_b]`. In exact arithmetic this equals the
/// sample-by-sample recursion because the information contributions add.
pub fn recursive_update_block(mut post: PosteriorCovariance, scores: &[SampleScore]) -> Result<PosteriorCovariance> {
    if scores.is_empty() {
        return Ok(post);
    }
    let n = post.dim();
    let m: usize = scores.iter().map(|s| s.u.ncols()).sum();
    let mut u = DMatrix::zeros(n, m);
    let mut col = 0;
    for s in scores {
        if s.u.nrows() != n {
            return Err(Error::shape(format!(
                "score has {} rows, covariance is {n} x {n}",
                s.u.nrows()
            )));
        }
        u.columns_mut(col, s.u.ncols()).copy_from(&s.u);
        col += s.u.ncols();
    }
    let first = post.n_samples;
    let sample_label = || {
        if scores.len() == 1 {
            format!("sample {first}")
        } else {
            format!("samples {first}..{}", first + scores.len())
        }
    };

    // W = P U, S = I + U^T W = L L^T, P <- P - (W L^-T)(W L^-T)^T.
    let mut w = DMatrix::zeros(n, m);
    w.gemm(1.0, &post.cov, &u, 0.0);
    let mut s = u.transpose() * &w;
    symmetrize(&mut s);
    linalg::add_diagonal(&mut s, 1.0 + UPDATE_JITTER);
    let chol = linalg::cholesky(s, &format!("innovation matrix at {}", sample_label()))?;
    let vt = chol
        .l()
        .solve_lower_triangular(&w.transpose())
        .ok_or_else(|| Error::numeric(format!("singular innovation factor at {}", sample_label())))?;
    linalg::syrk_lower(&mut post.cov, -1.0, &vt.transpose());
    linalg::mirror_lower(&mut post.cov);
    if post.cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite covariance after {}",
            sample_label()
        )));
    }
    post.n_samples += scores.len();
    Ok(post)
}

/// Runs the recursion over every sample of `data` in order, `block` samples
/// per stacked update (`block = 1` is the plain per-sample recursion).
pub fn recursive_covariance(
    model: &Mlp,
    data: &Dataset,
    subset: &TrailingSubset,
    prior_precision: f64,
    block: usize,
) -> Result<PosteriorCovariance> {
    data.check_model(model)?;
    let block = block.max(1);
    let mut post = PosteriorCovariance::prior(subset, prior_precision)?;
    for start in (0..data.len()).step_by(block) {
        let len = block.min(data.len() - start);
        let xs = data.inputs().rows(start, len).into_owned();
        let scores = sample_scores_batch(model, &xs, subset)?;
        post = recursive_update_block(post, &scores)?;
        if start / block % 50 == 49 {
            log::debug!("covariance recursion: {} of {} samples", start + len, data.len());
        }
    }
    Ok(post)
}

/// Brute-force assembly `P = (sum_n U_n U_n^T + prior_precision I)^{-1}`.
pub fn direct_covariance(
    model: &Mlp,
    data: &Dataset,
    subset: &TrailingSubset,
    prior_precision: f64,
) -> Result<PosteriorCovariance> {
    data.check_model(model)?;
    let mut post = PosteriorCovariance::prior(subset, prior_precision)?;
    let n = subset.len();
    let mut info = DMatrix::from_diagonal_element(n, n, prior_precision);
    let m = model.n_classes();
    let mut stacked = DMatrix::zeros(n, DIRECT_STACK * m);
    for start in (0..data.len()).step_by(DIRECT_STACK) {
        let len = DIRECT_STACK.min(data.len() - start);
        let xs = data.inputs().rows(start, len).into_owned();
        let scores = sample_scores_batch(model, &xs, subset)?;
        if len < DIRECT_STACK {
            stacked = DMatrix::zeros(n, len * m);
        }
        for (i, score) in scores.iter().enumerate() {
            stacked.columns_mut(i * m, m).copy_from(&score.u);
        }
        linalg::syrk_lower(&mut info, 1.0, &stacked);
    }
    linalg::mirror_lower(&mut info);
    post.cov = linalg::spd_inverse(info, "Fisher information plus prior")?;
    post.n_samples = data.len();
    Ok(post)
}

/// Multiplies the prediction covariance by `tc`. Factors compose: scaling
/// by 2 and then by 3 equals scaling by 6.
pub fn scale_covariance(mut post: PosteriorCovariance, tc: f64) -> Result<PosteriorCovariance> {
    if !(tc > 0.0 && tc.is_finite()) {
        return Err(Error::domain(format!("tc must be positive, got {tc}")));
    }
    if tc < 1.0 {
        log::warn!("covariance scale {tc} < 1 shrinks the parameter uncertainty");
    }
    post.tc *= tc;
    Ok(post)
}
