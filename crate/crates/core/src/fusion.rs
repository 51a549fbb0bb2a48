//! Fusion of logit Gaussians and threshold-exceedance risk.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, spd_inverse, symmetrize, trace_scale};
use crate::nn::Mlp;
use crate::posterior::PosteriorCovariance;
use crate::predict::{
    delta_propagate, draw_pmf_samples, logits_and_projection, project_block, LogitGaussian, PmfEstimate, PmfSamples,
};

/// Relative jitter added to a covariance block before inversion.
pub const FUSION_JITTER: f64 = 1e-10;

/// A block is jittered when one of its Cholesky pivots drops below this
/// fraction of its trace scale.
const WEAK_PIVOT: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct FusedLogit {
    pub gaussian: LogitGaussian,
    /// Identifiers of the fused classifiers or inputs, in input order.
    pub sources: Vec<String>,
}

/// Stacked cross covariance of the logits of several inputs under one
/// posterior. Block `(i, j)` is `J_i^T (tc P) J_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossCovariance {
    pub r: DMatrix<f64>,
    pub n_classes: usize,
}

impl CrossCovariance {
    pub fn n_inputs(&self) -> usize {
        self.r.nrows() / self.n_classes
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let m = self.n_classes;
        self.r.view((i * m, j * m), (m, m)).into_owned()
    }
}

/// Scans an unpivoted Cholesky factorization and returns the first block
/// holding a pivot below `WEAK_PIVOT` times that block's scale.
fn weak_block(a: &DMatrix<f64>, blocks: &[Range<usize>], scales: &[f64]) -> Option<usize> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut owner = vec![0; n];
    for (b, r) in blocks.iter().enumerate() {
        owner[r.clone()].fill(b);
    }
    for k in 0..n {
        let row_k = l.row(k);
        let d = a[(k, k)] - row_k.columns(0, k).norm_squared();
        if !(d > WEAK_PIVOT * scales[owner[k]]) {
            return Some(owner[k]);
        }
        let lkk = d.sqrt();
        l[(k, k)] = lkk;
        for i in k + 1..n {
            let mut s = a[(i, k)];
            for j in 0..k {
                s -= l[(i, j)] * l[(k, j)];
            }
            l[(i, k)] = s / lkk;
        }
    }
    None
}

/// Adds `FUSION_JITTER * scale` to the diagonal of every block that is
/// singular at pivot resolution, returning which blocks were touched.
fn regularize(a: &mut DMatrix<f64>, blocks: &[Range<usize>], names: &dyn Fn(usize) -> String) -> Result<Vec<bool>> {
    let scales: Vec<f64> = blocks
        .iter()
        .map(|r| trace_scale(&a.view((r.start, r.start), (r.len(), r.len())).into_owned()))
        .collect();
    let mut touched = vec![false; blocks.len()];
    while let Some(b) = weak_block(a, blocks, &scales) {
        if touched[b] {
            return Err(Error::numeric(format!("{} is singular even after jitter", names(b))));
        }
        touched[b] = true;
        log::debug!("jittering {}", names(b));
        for k in blocks[b].clone() {
            a[(k, k)] += FUSION_JITTER * scales[b];
        }
    }
    Ok(touched)
}

fn check_dims(inputs: &[&LogitGaussian]) -> Result<usize> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::domain("fusion needs at least one input"))?;
    let m = first.dim();
    if let Some((i, _)) = inputs.iter().enumerate().find(|(_, g)| g.dim() != m) {
        return Err(Error::shape(format!(
            "input {} has dimension {} instead of {m}",
            i + 1,
            inputs[i].dim()
        )));
    }
    Ok(m)
}

/// Precision-weighted fusion of independent classifiers:
/// `P = (sum_c P_c^{-1})^{-1}`, `g = P sum_c P_c^{-1} g_c`.
pub fn fuse_classifiers(inputs: &[LogitGaussian]) -> Result<FusedLogit> {
    let refs: Vec<&LogitGaussian> = inputs.iter().collect();
    let m = check_dims(&refs)?;
    let sources = (1..=inputs.len()).map(|c| format!("classifier {c}")).collect();
    if inputs.len() == 1 {
        return Ok(FusedLogit {
            gaussian: inputs[0].clone(),
            sources,
        });
    }
    let mut info = DMatrix::zeros(m, m);
    let mut info_mean = DVector::zeros(m);
    for (c, lg) in inputs.iter().enumerate() {
        let mut cov = lg.cov.clone();
        regularize(&mut cov, std::slice::from_ref(&(0..m)), &|_| {
            format!("covariance of classifier {}", c + 1)
        })?;
        let precision = spd_inverse(cov, &format!("covariance of classifier {}", c + 1))?;
        info_mean += &precision * &lg.mean;
        info += precision;
    }
    symmetrize(&mut info);
    finish(info, info_mean, sources)
}

fn finish(info: DMatrix<f64>, info_mean: DVector<f64>, sources: Vec<String>) -> Result<FusedLogit> {
    let mut cov = spd_inverse(info, "fused information matrix")?;
    symmetrize(&mut cov);
    let mean = &cov * info_mean;
    Ok(FusedLogit {
        gaussian: LogitGaussian::new(mean, cov)?,
        sources,
    })
}

/// Generalized least squares fusion of `C` estimates of one logit vector with
/// joint error covariance `r` (`CM x CM`):
/// `P = (H^T R^{-1} H)^{-1}`, `g = P H^T R^{-1} z`, `H = [I; ...; I]`.
pub fn gls_fuse(means: &[DVector<f64>], r: &DMatrix<f64>) -> Result<LogitGaussian> {
    let c = means.len();
    let m = means
        .first()
        .ok_or_else(|| Error::domain("fusion needs at least one input"))?
        .len();
    if means.iter().any(|g| g.len() != m) || r.shape() != (c * m, c * m) {
        return Err(Error::shape(format!(
            "{c} means of length {m} need a {0}x{0} cross covariance, got {1:?}",
            c * m,
            r.shape()
        )));
    }
    let blocks: Vec<Range<usize>> = (0..c).map(|i| i * m..(i + 1) * m).collect();
    let mut reg = r.clone();
    symmetrize(&mut reg);
    regularize(&mut reg, &blocks, &|b| {
        format!("block {} of the cross covariance", b + 1)
    })?;
    let chol = cholesky(reg, "cross covariance")?;

    let mut h = DMatrix::zeros(c * m, m);
    let mut z = DVector::zeros(c * m);
    for (i, g) in means.iter().enumerate() {
        h.view_mut((i * m, 0), (m, m)).fill_with_identity();
        z.rows_mut(i * m, m).copy_from(g);
    }
    let l = chol.l();
    let wh = l
        .solve_lower_triangular(&h)
        .ok_or_else(|| Error::numeric("cross covariance factor is singular"))?;
    let wz = l
        .solve_lower_triangular(&z)
        .ok_or_else(|| Error::numeric("cross covariance factor is singular"))?;
    let mut info = wh.transpose() * &wh;
    symmetrize(&mut info);
    let info_mean = wh.transpose() * wz;
    Ok(finish(info, info_mean, Vec::new())?.gaussian)
}

/// Assembles every block `J_i^T (tc P) J_j` for the given inputs.
pub fn cross_covariance(model: &Mlp, post: &PosteriorCovariance, inputs: &[Vec<f64>]) -> Result<CrossCovariance> {
    Ok(logits_and_cross(model, post, inputs)?.1)
}

fn logits_and_cross(
    model: &Mlp,
    post: &PosteriorCovariance,
    inputs: &[Vec<f64>],
) -> Result<(Vec<DVector<f64>>, CrossCovariance)> {
    let subset = post.subset_for(model)?;
    let m = model.n_classes();
    let c = inputs.len();
    let mut logits = Vec::with_capacity(c);
    let mut jacs = Vec::with_capacity(c);
    let mut projected = Vec::with_capacity(c);
    for x in inputs {
        let (g, j, pj) = logits_and_projection(model, post, &subset, x)?;
        logits.push(g);
        jacs.push(j);
        projected.push(pj);
    }
    let mut r = DMatrix::zeros(c * m, c * m);
    for i in 0..c {
        let mut diag = project_block(&jacs[i], &projected[i], post.tc());
        symmetrize(&mut diag);
        r.view_mut((i * m, i * m), (m, m)).copy_from(&diag);
        for j in i + 1..c {
            let block = project_block(&jacs[i], &projected[j], post.tc());
            r.view_mut((i * m, j * m), (m, m)).copy_from(&block);
            r.view_mut((j * m, i * m), (m, m)).copy_from(&block.transpose());
        }
    }
    Ok((logits, CrossCovariance { r, n_classes: m }))
}

/// Fuses several inputs known to share one class, accounting for the
/// correlation induced by the shared parameters.
pub fn fuse_same_class(model: &Mlp, post: &PosteriorCovariance, inputs: &[Vec<f64>]) -> Result<FusedLogit> {
    let sources = (1..=inputs.len()).map(|i| format!("input {i}")).collect();
    match inputs {
        [] => Err(Error::domain("fusion needs at least one input")),
        [x] => Ok(FusedLogit {
            gaussian: delta_propagate(model, post, x)?,
            sources,
        }),
        _ => {
            let (logits, cross) = logits_and_cross(model, post, inputs)?;
            Ok(FusedLogit {
                gaussian: gls_fuse(&logits, &cross.r)?,
                sources,
            })
        }
    }
}

fn check_gamma(class: usize, n_classes: usize, gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::domain(format!("threshold must lie in [0, 1], got {gamma}")));
    }
    if class >= n_classes {
        return Err(Error::domain(format!(
            "class {} out of range 1..={n_classes}",
            class + 1
        )));
    }
    Ok(())
}

/// Fraction of PMF draws whose component `class` (0-based) exceeds `gamma`.
pub fn risk_from_samples(samples: &PmfSamples, class: usize, gamma: f64) -> Result<f64> {
    check_gamma(class, samples.pmfs.ncols(), gamma)?;
    if samples.is_empty() {
        return Err(Error::domain("risk needs at least one sample"));
    }
    let hits = samples.pmfs.column(class).iter().filter(|&&f| f > gamma).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Risk for the draws behind `est`, regenerated from its stored seed and
/// sample count so the value is consistent with the reported PMF.
pub fn risk_assess(lg: &LogitGaussian, est: &PmfEstimate, class: usize, gamma: f64) -> Result<f64> {
    check_gamma(class, lg.dim(), gamma)?;
    let samples = draw_pmf_samples(lg, est.samples, est.seed)?;
    risk_from_samples(&samples, class, gamma)
}
