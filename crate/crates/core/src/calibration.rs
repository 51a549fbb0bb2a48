//! Calibration metrics, reliability binning, and grid tuning of the logit
//! temperature `T` and the covariance scale `tc`.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::psd_sqrt_factor;
use crate::nn::{log_softmax, softmax_vec, Mlp, Pmf};
use crate::posterior::PosteriorCovariance;
use crate::predict::{delta_propagate_batch, derive_seed, mc_marginalize, LogitGaussian, DEFAULT_SAMPLES};

pub const DEFAULT_BINS: usize = 10;
pub const GRID_POINTS: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EceVariant {
    /// `sum_j |acc_j - conf_j| / |B_j|`.
    BinNormalized,
    /// `sum_j (|B_j| / N) |acc_j - conf_j|`.
    Weighted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub accuracy: Option<f64>,
    pub confidence: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinStats {
    pub bins: Vec<Bin>,
}

impl BinStats {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub method: Method,
    pub n: usize,
    pub accuracy: f64,
    /// `sum_n ln p(y_n | x_n)`.
    pub log_likelihood: f64,
    pub brier: f64,
    pub ece: f64,
    pub ece_weighted: f64,
    pub bins: BinStats,
}

impl CalibrationReport {
    /// Log-likelihood in units of 10^3.
    pub fn log_likelihood_k(&self) -> f64 {
        self.log_likelihood / 1e3
    }
}

/// How the PMFs being evaluated are produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    /// `softmax(g / T)`; `T = 1` is the plain point prediction.
    Point { temperature: f64 },
    /// Monte Carlo marginalization of the delta-method logit Gaussian with
    /// covariance scale `tc`.
    Marginalized { tc: f64, samples: usize, seed: u64 },
}

impl Method {
    pub fn standard() -> Self {
        Method::Point { temperature: 1.0 }
    }

    pub fn marginalized(tc: f64) -> Self {
        Method::Marginalized {
            tc,
            samples: DEFAULT_SAMPLES,
            seed: 0,
        }
    }
}

/// Binning and ECE variant used to score grid points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EceSettings {
    pub n_bins: usize,
    pub variant: EceVariant,
}

impl Default for EceSettings {
    fn default() -> Self {
        Self {
            n_bins: DEFAULT_BINS,
            variant: EceVariant::BinNormalized,
        }
    }
}

impl EceSettings {
    fn score(&self, preds: &[Pmf], labels: &[usize]) -> Result<f64> {
        ece(&bin_predictions(preds, labels, self.n_bins)?, self.variant)
    }
}

/// Result of a grid search: the chosen value and the score at every grid
/// point, in grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSearch {
    pub best: f64,
    pub grid: Vec<f64>,
    pub scores: Vec<f64>,
}

fn check_lengths(preds: &[Pmf], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if let Some((i, _)) = preds.iter().zip(labels).enumerate().find(|(_, (p, &y))| y >= p.len()) {
        return Err(Error::shape(format!(
            "label of sample {} exceeds the PMF length",
            i + 1
        )));
    }
    Ok(())
}

/// Mean squared distance between each PMF and the one-hot label.
pub fn brier(preds: &[Pmf], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    if preds.is_empty() {
        return Err(Error::domain("Brier score of an empty set"));
    }
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            p.probs()
                .iter()
                .enumerate()
                .map(|(m, &v)| {
                    let d = if m == y { 1.0 - v } else { v };
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// Index `j` with `j / J <= c < (j + 1) / J`; `c = 1` goes to the last bin.
pub fn bin_index(c: f64, n_bins: usize) -> usize {
    let j = n_bins as f64;
    let mut idx = ((c * j).floor().max(0.0) as usize).min(n_bins - 1);
    if idx > 0 && c < idx as f64 / j {
        idx -= 1;
    } else if idx + 1 < n_bins && c >= (idx + 1) as f64 / j {
        idx += 1;
    }
    idx
}

/// Groups predictions by their maximum probability into `n_bins` equal-width
/// confidence bins.
pub fn bin_predictions(preds: &[Pmf], labels: &[usize], n_bins: usize) -> Result<BinStats> {
    check_lengths(preds, labels)?;
    if n_bins == 0 {
        return Err(Error::config("at least one bin is required"));
    }
    let mut counts = vec![0usize; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    for (p, &y) in preds.iter().zip(labels) {
        let c = p.max_prob();
        let b = bin_index(c, n_bins);
        counts[b] += 1;
        conf[b] += c;
        if p.argmax() == y {
            correct[b] += 1;
        }
    }
    let bins = (0..n_bins)
        .map(|b| {
            let n = counts[b];
            Bin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: n,
                accuracy: (n > 0).then(|| correct[b] as f64 / n as f64),
                confidence: (n > 0).then(|| conf[b] / n as f64),
            }
        })
        .collect();
    Ok(BinStats { bins })
}

/// Expected calibration error over the non-empty bins.
pub fn ece(stats: &BinStats, variant: EceVariant) -> Result<f64> {
    let total = stats.total();
    if total == 0 {
        return Err(Error::domain("every calibration bin is empty"));
    }
    let mut sum = 0.0;
    for b in &stats.bins {
        if let (Some(acc), Some(conf)) = (b.accuracy, b.confidence) {
            let gap = (acc - conf).abs();
            sum += match variant {
                EceVariant::BinNormalized => gap / b.count as f64,
                EceVariant::Weighted => gap * b.count as f64 / total as f64,
            };
        }
    }
    Ok(sum)
}

/// All metrics for a set of PMFs. `log_true[n]` is `ln p(y_n | x_n)`.
pub fn evaluate(
    method: Method,
    preds: &[Pmf],
    log_true: &[f64],
    labels: &[usize],
    n_bins: usize,
) -> Result<CalibrationReport> {
    check_lengths(preds, labels)?;
    if log_true.len() != preds.len() {
        return Err(Error::shape("one log-likelihood per prediction is required"));
    }
    let bins = bin_predictions(preds, labels, n_bins)?;
    let correct = preds.iter().zip(labels).filter(|(p, &y)| p.argmax() == y).count();
    Ok(CalibrationReport {
        method,
        n: preds.len(),
        accuracy: correct as f64 / preds.len().max(1) as f64,
        log_likelihood: log_true.iter().sum(),
        brier: brier(preds, labels)?,
        ece: ece(&bins, EceVariant::BinNormalized)?,
        ece_weighted: ece(&bins, EceVariant::Weighted)?,
        bins,
    })
}

/// `count` log-spaced points from `lo` to `hi`. The exponent is interpolated
/// so that a grid spanning `10^-a .. 10^a` contains exactly 1.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    if count == 1 {
        return vec![lo];
    }
    let steps = (count - 1) as f64;
    (0..count)
        .map(|i| {
            let t = i as f64;
            10f64.powf((a * (steps - t) + b * t) / steps)
        })
        .collect()
}

pub fn temperature_grid() -> Vec<f64> {
    log_grid(0.1, 10.0, GRID_POINTS)
}

pub fn tc_grid() -> Vec<f64> {
    log_grid(1.0, 100.0, GRID_POINTS)
}

/// Grid argmin; ties go to the smallest grid value.
fn pick(grid: Vec<f64>, scores: Vec<f64>) -> Result<GridSearch> {
    let mut best: Option<(f64, f64)> = None;
    for (&v, &s) in grid.iter().zip(&scores) {
        if !s.is_finite() {
            continue;
        }
        best = match best {
            Some((bv, bs)) if bs < s || (bs == s && bv <= v) => Some((bv, bs)),
            _ => Some((v, s)),
        };
    }
    let (best, _) = best.ok_or_else(|| Error::numeric("no grid point produced a finite score"))?;
    Ok(GridSearch { best, grid, scores })
}

fn check_grid(grid: &[f64], name: &str) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::config(format!("{name} grid is empty")));
    }
    if grid.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::config(format!("{name} grid values must be positive")));
    }
    Ok(())
}

/// Point PMFs `softmax(g / T)` and `ln p(y | x)` for every row of `data`.
pub fn point_predictions(model: &Mlp, data: &Dataset, temperature: f64) -> Result<(Vec<Pmf>, Vec<f64>)> {
    let logits = model.logits_batch(data.inputs())?;
    point_from_logits(&logits, data.labels(), temperature)
}

fn point_from_logits(logits: &DMatrix<f64>, labels: &[usize], t: f64) -> Result<(Vec<Pmf>, Vec<f64>)> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::domain(format!("temperature must be positive, got {t}")));
    }
    let mut preds = Vec::with_capacity(labels.len());
    let mut log_true = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let z: Vec<f64> = logits.row(i).iter().copied().collect();
        preds.push(Pmf::from_vector_unchecked(softmax_vec(&z, t).into()));
        log_true.push(log_softmax(&z, t)[y]);
    }
    Ok((preds, log_true))
}

/// Picks the temperature minimizing the ECE of the point predictions on
/// `data`.
pub fn tune_temperature(model: &Mlp, data: &Dataset, grid: &[f64], ece: &EceSettings) -> Result<GridSearch> {
    check_grid(grid, "temperature")?;
    let logits = model.logits_batch(data.inputs())?;
    let mut scores = Vec::with_capacity(grid.len());
    for &t in grid {
        let (preds, _) = point_from_logits(&logits, data.labels(), t)?;
        scores.push(ece.score(&preds, data.labels())?);
    }
    pick(grid.to_vec(), scores)
}

/// Marginalized PMFs for each logit Gaussian with its covariance multiplied
/// by every factor in `scales`, reusing one set of standard-normal draws per
/// input across all scales. Input `i` uses seed `derive_seed(seed, i)`.
pub fn marginalize_scaled(lgs: &[LogitGaussian], scales: &[f64], samples: usize, seed: u64) -> Result<Vec<Vec<Pmf>>> {
    if samples == 0 {
        return Err(Error::domain("sample count K must be at least 1"));
    }
    let mut out = vec![Vec::with_capacity(lgs.len()); scales.len()];
    let roots: Vec<f64> = scales.iter().map(|s| s.sqrt()).collect();
    for (i, lg) in lgs.iter().enumerate() {
        let m = lg.dim();
        let factor = psd_sqrt_factor(&lg.cov);
        let degenerate = factor.iter().all(|&v| v == 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        // Row k holds (A z_k)^T.
        let mut offsets = DMatrix::zeros(samples, m);
        if !degenerate {
            let z = DMatrix::from_fn(m, samples, |_, _| StandardNormal.sample(&mut rng));
            offsets = (&factor * z).transpose();
        }
        let mut g = vec![0.0; m];
        for (s, root) in roots.iter().enumerate() {
            let mut acc = vec![0.0; m];
            for k in 0..samples {
                for j in 0..m {
                    g[j] = lg.mean[j] + root * offsets[(k, j)];
                }
                for (a, p) in acc.iter_mut().zip(softmax_vec(&g, 1.0)) {
                    *a += p;
                }
            }
            let pmf = acc.into_iter().map(|a| a / samples as f64).collect::<Vec<_>>();
            out[s].push(Pmf::from_vector_unchecked(pmf.into()));
        }
    }
    Ok(out)
}

/// Picks the covariance scale minimizing the ECE of the marginalized
/// predictions on `data`. Grid values replace the posterior's
/// own scale.
pub fn tune_tc(
    model: &Mlp,
    post: &PosteriorCovariance,
    data: &Dataset,
    grid: &[f64],
    samples: usize,
    seed: u64,
    ece: &EceSettings,
) -> Result<GridSearch> {
    check_grid(grid, "tc")?;
    let lgs = delta_propagate_batch(model, post, data.inputs())?;
    let scales: Vec<f64> = grid.iter().map(|tc| tc / post.tc()).collect();
    let preds = marginalize_scaled(&lgs, &scales, samples, seed)?;
    let scores = preds
        .iter()
        .map(|p| ece.score(p, data.labels()))
        .collect::<Result<Vec<_>>>()?;
    pick(grid.to_vec(), scores)
}

/// PMFs and `ln p(y | x)` of `method` on every row of `data`.
pub fn predictions(
    model: &Mlp,
    post: Option<&PosteriorCovariance>,
    data: &Dataset,
    method: Method,
) -> Result<(Vec<Pmf>, Vec<f64>)> {
    match method {
        Method::Point { temperature } => point_predictions(model, data, temperature),
        Method::Marginalized { tc, samples, seed } => {
            let post = post.ok_or_else(|| Error::config("marginalized predictions need a posterior covariance"))?;
            if !(tc > 0.0 && tc.is_finite()) {
                return Err(Error::domain(format!("tc must be positive, got {tc}")));
            }
            let lgs = delta_propagate_batch(model, post, data.inputs())?;
            let mut preds = Vec::with_capacity(lgs.len());
            let mut log_true = Vec::with_capacity(lgs.len());
            for (i, (lg, &y)) in lgs.iter().zip(data.labels()).enumerate() {
                let est = mc_marginalize(&lg.scale_cov(tc / post.tc()), samples, derive_seed(seed, i as u64))?;
                log_true.push(est.log_pmf[y]);
                preds.push(est.pmf);
            }
            Ok((preds, log_true))
        }
    }
}

/// Evaluates `method` on `data` and returns all metrics with per-bin rows.
pub fn report(
    model: &Mlp,
    post: Option<&PosteriorCovariance>,
    data: &Dataset,
    method: Method,
    n_bins: usize,
) -> Result<CalibrationReport> {
    let start = std::time::Instant::now();
    let (preds, log_true) = predictions(model, post, data, method)?;
    let rep = evaluate(method, &preds, &log_true, data.labels(), n_bins)?;
    log::info!(
        "{method:?}: evaluated {} samples in {:.2?}",
        data.len(),
        start.elapsed()
    );
    Ok(rep)
}

/// Reliability rows as CSV: `bin_lower,bin_upper,count,accuracy,confidence`,
/// with empty accuracy/confidence fields for empty bins.
pub fn write_reliability_csv<W: Write>(mut w: W, stats: &BinStats) -> Result<()> {
    writeln!(w, "bin_lower,bin_upper,count,accuracy,confidence")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for b in &stats.bins {
        writeln!(
            w,
            "{:.6},{:.6},{},{},{}",
            b.lower,
            b.upper,
            b.count,
            opt(b.accuracy),
            opt(b.confidence)
        )?;
    }
    Ok(())
}

/// Bar chart of per-bin accuracy against the diagonal.
pub fn reliability_svg(stats: &BinStats, title: &str) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    let plot = SIZE - 2.0 * PAD;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        SIZE / 2.0,
        PAD / 2.0,
        escape(title)
    );
    for b in &stats.bins {
        if let Some(acc) = b.accuracy {
            let x = PAD + b.lower * plot;
            let w = (b.upper - b.lower) * plot;
            let h = acc * plot;
            let _ = writeln!(
                svg,
                r##"<rect x="{x:.2}" y="{:.2}" width="{w:.2}" height="{h:.2}" fill="#4a78b5" stroke="#1d3557"/>"##,
                PAD + plot - h
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{PAD}" stroke="gray" stroke-dasharray="4"/>"#,
        PAD + plot,
        PAD + plot
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{PAD}" y="{PAD}" width="{plot}" height="{plot}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">confidence</text>"#,
        SIZE / 2.0,
        SIZE - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="12" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 12 {})">accuracy</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::nn::{LayerSpec, TrailingSubset};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn pmf(v: &[f64]) -> Pmf {
        Pmf::from_slice(v).unwrap()
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&[pmf(&[1.0, 0.0]), pmf(&[0.0, 1.0])], &[0, 1]).unwrap(), 0.0);
        assert_abs_diff_eq!(brier(&[Pmf::uniform(10)], &[3]).unwrap(), 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(brier(&[pmf(&[0.8, 0.2])], &[1]).unwrap(), 1.28, epsilon = 1e-15);
        assert_abs_diff_eq!(brier(&[pmf(&[0.8, 0.2])], &[0]).unwrap(), 0.08, epsilon = 1e-15);
        assert!(matches!(brier(&[], &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 1);
        assert_eq!(bin_index(0.3, 10), 3);
        assert_eq!(bin_index(0.7, 10), 7);
        assert_eq!(bin_index(0.0999999, 10), 0);
        for j in 0..10 {
            let edge = j as f64 / 10.0;
            assert_eq!(bin_index(edge, 10), j, "edge {edge}");
        }
    }

    #[test]
    fn certain_correct_predictions_land_in_the_top_bin() {
        let preds = vec![pmf(&[1.0, 0.0]); 5];
        let stats = bin_predictions(&preds, &[0; 5], 10).unwrap();
        assert_eq!(stats.bins[9].count, 5);
        assert_eq!(stats.bins[9].accuracy, Some(1.0));
        assert_eq!(stats.bins[9].confidence, Some(1.0));
        assert!(stats.bins[..9].iter().all(|b| b.count == 0 && b.accuracy.is_none()));
    }

    #[test]
    fn uniform_predictions_fill_only_one_bin() {
        let preds = vec![Pmf::uniform(10); 7];
        let stats = bin_predictions(&preds, &[0, 1, 2, 3, 4, 5, 6], 20).unwrap();
        let full: Vec<usize> = stats
            .bins
            .iter()
            .enumerate()
            .filter(|(_, b)| b.count > 0)
            .map(|(j, _)| j)
            .collect();
        assert_eq!(full.len(), 1);
        let b = &stats.bins[full[0]];
        assert!(b.lower <= 0.1 && 0.1 < b.upper);
    }

    #[test]
    fn hand_tallied_bins() {
        let preds = [
            pmf(&[0.55, 0.45]),
            pmf(&[0.35, 0.65]),
            pmf(&[0.9, 0.1]),
            pmf(&[0.05, 0.95]),
        ];
        let stats = bin_predictions(&preds, &[0, 0, 0, 0], 2).unwrap();
        assert_eq!(stats.bins[1].count, 4);
        let stats = bin_predictions(&preds, &[0, 0, 0, 0], 4).unwrap();
        assert_eq!(stats.bins[2].count, 2);
        assert_eq!(stats.bins[2].accuracy, Some(0.5));
        assert_abs_diff_eq!(stats.bins[2].confidence.unwrap(), 0.6, epsilon = 1e-15);
        assert_eq!(stats.bins[3].count, 2);
        assert_eq!(stats.bins[3].accuracy, Some(0.5));
        assert_abs_diff_eq!(stats.bins[3].confidence.unwrap(), 0.925, epsilon = 1e-15);
    }

    fn stats(rows: &[(usize, f64, f64)]) -> BinStats {
        BinStats {
            bins: rows
                .iter()
                .map(|&(count, acc, conf)| Bin {
                    lower: 0.0,
                    upper: 1.0,
                    count,
                    accuracy: Some(acc),
                    confidence: Some(conf),
                })
                .collect(),
        }
    }

    #[test]
    fn ece_examples() {
        let one = stats(&[(10, 0.9, 0.7)]);
        assert_abs_diff_eq!(ece(&one, EceVariant::BinNormalized).unwrap(), 0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(ece(&one, EceVariant::Weighted).unwrap(), 0.2, epsilon = 1e-15);
        let two = stats(&[(4, 0.5, 0.75), (8, 1.0, 0.9)]);
        assert_abs_diff_eq!(ece(&two, EceVariant::BinNormalized).unwrap(), 0.075, epsilon = 1e-15);
        assert_abs_diff_eq!(ece(&two, EceVariant::Weighted).unwrap(), 0.15, epsilon = 1e-15);
        let calibrated = stats(&[(3, 0.4, 0.4), (5, 0.8, 0.8)]);
        assert_eq!(ece(&calibrated, EceVariant::BinNormalized).unwrap(), 0.0);
        assert_eq!(ece(&calibrated, EceVariant::Weighted).unwrap(), 0.0);
        let empty = BinStats { bins: Vec::new() };
        assert!(matches!(ece(&empty, EceVariant::BinNormalized), Err(Error::Domain(_))));
    }

    #[test]
    fn grids_contain_one() {
        let t = temperature_grid();
        assert_eq!(t.len(), 25);
        assert_eq!(t[12], 1.0);
        assert_abs_diff_eq!(t[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(t[24], 10.0, epsilon = 1e-13);
        let c = tc_grid();
        assert_eq!(c[0], 1.0);
        assert_abs_diff_eq!(c[24], 100.0, epsilon = 1e-12);
        assert!(t.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn ties_pick_the_smallest_value() {
        let g = pick(vec![3.0, 1.0, 2.0], vec![0.5, 0.5, 0.7]).unwrap();
        assert_eq!(g.best, 1.0);
        let g = pick(vec![1.0, 2.0], vec![f64::NAN, 0.1]).unwrap();
        assert_eq!(g.best, 2.0);
    }

    /// Inputs from N(0, I) in 2-D and labels drawn from a known softmax model
    /// with logits `W x`.
    fn logistic_data(n: usize, weights: &DMatrix<f64>, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = DMatrix::zeros(n, 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let x = nalgebra::DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
            inputs.row_mut(i).copy_from(&x.transpose());
            let z = weights.rows(0, 2).transpose() * &x + weights.row(2).transpose();
            let p = softmax_vec(z.as_slice(), 1.0);
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut y = p.len() - 1;
            for (m, &pm) in p.iter().enumerate() {
                cum += pm;
                if u < cum {
                    y = m;
                    break;
                }
            }
            labels.push(y);
        }
        Dataset::new(inputs, labels, 3, Split::Val).unwrap()
    }

    fn logistic_model(w: &DMatrix<f64>) -> Mlp {
        Mlp::from_matrices(LayerSpec::chain(&[2, 3]).unwrap(), std::slice::from_ref(w)).unwrap()
    }

    fn true_weights() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[1.5, -1.0, 0.0, 0.5, 1.2, -1.0, 0.0, 0.0, 0.0])
    }

    #[test]
    fn overconfident_model_is_cooled_down() {
        let w = true_weights();
        let data = logistic_data(50_000, &w, 1);
        let grid = temperature_grid();
        let step = grid[1] / grid[0];
        let settings = EceSettings::default();
        let calibrated = tune_temperature(&logistic_model(&w), &data, &grid, &settings).unwrap();
        assert!(
            calibrated.best <= step && calibrated.best >= 1.0 / step,
            "T = {}",
            calibrated.best
        );
        let doubled = tune_temperature(&logistic_model(&(&w * 2.0)), &data, &grid, &settings).unwrap();
        assert!(
            doubled.best <= 2.0 * step && doubled.best >= 2.0 / step,
            "T = {}",
            doubled.best
        );
    }

    #[test]
    fn single_point_grids() {
        let w = true_weights();
        let data = logistic_data(200, &w, 2);
        let model = logistic_model(&w);
        assert_eq!(
            tune_temperature(&model, &data, &[1.0], &EceSettings::default())
                .unwrap()
                .best,
            1.0
        );
        let sub = TrailingSubset::new(&model, 1).unwrap();
        let post = PosteriorCovariance::prior(&sub, 10.0).unwrap();
        assert_eq!(
            tune_tc(&model, &post, &data, &[1.0], 20, 0, &EceSettings::default())
                .unwrap()
                .best,
            1.0
        );
    }

    #[test]
    fn zero_covariance_makes_tc_irrelevant() {
        let w = true_weights();
        let data = logistic_data(300, &w, 3);
        let model = logistic_model(&w);
        let post = PosteriorCovariance::from_parts(DMatrix::zeros(9, 9), 1, 0, 1.0, 1.0).unwrap();
        let res = tune_tc(&model, &post, &data, &tc_grid(), 10, 0, &EceSettings::default()).unwrap();
        assert_eq!(res.best, 1.0);
        assert!(res.scores.iter().all(|&s| s == res.scores[0]));
    }

    #[test]
    fn sweep_matches_direct_marginalization() {
        let w = true_weights();
        let data = logistic_data(20, &w, 4);
        let model = logistic_model(&w);
        let sub = TrailingSubset::new(&model, 1).unwrap();
        let post = PosteriorCovariance::prior(&sub, 4.0).unwrap();
        let lgs = delta_propagate_batch(&model, &post, data.inputs()).unwrap();
        let sweep = marginalize_scaled(&lgs, &[1.0, 3.0], 200, 9).unwrap();
        for (i, lg) in lgs.iter().enumerate() {
            let direct = mc_marginalize(&lg.scale_cov(3.0), 200, derive_seed(9, i as u64)).unwrap();
            assert!((sweep[1][i].probs() - direct.pmf.probs()).amax() < 1e-12);
        }
    }

    #[test]
    fn temperature_never_changes_accuracy() {
        let w = true_weights();
        let data = logistic_data(500, &w, 5);
        let model = logistic_model(&(&w * 0.7));
        let base = report(&model, None, &data, Method::standard(), DEFAULT_BINS).unwrap();
        for t in [0.1, 0.5, 3.0, 10.0] {
            let r = report(&model, None, &data, Method::Point { temperature: t }, DEFAULT_BINS).unwrap();
            assert_eq!(r.accuracy, base.accuracy);
        }
    }

    #[test]
    fn perfect_classifier_report() {
        let inputs = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let data = Dataset::new(inputs, vec![0, 1], 2, Split::Train).unwrap();
        let w = DMatrix::from_row_slice(3, 2, &[1000.0, -1000.0, -1000.0, 1000.0, 0.0, 0.0]);
        let model = Mlp::from_matrices(LayerSpec::chain(&[2, 2]).unwrap(), &[w]).unwrap();
        let r = report(&model, None, &data, Method::standard(), DEFAULT_BINS).unwrap();
        assert_eq!((r.accuracy, r.brier, r.ece, r.ece_weighted), (1.0, 0.0, 0.0, 0.0));
        assert_eq!(r.bins.bins[9].count, 2);
        assert_eq!(r.log_likelihood, 0.0);
    }

    #[test]
    fn isotropic_covariance_keeps_the_ranking() {
        let w = true_weights();
        let data = logistic_data(300, &w, 6);
        let model = logistic_model(&w);
        let lgs = delta_propagate_batch(
            &model,
            &PosteriorCovariance::from_parts(DMatrix::zeros(9, 9), 1, 0, 1.0, 1.0).unwrap(),
            data.inputs(),
        )
        .unwrap();
        let mut preds = Vec::new();
        for (i, lg) in lgs.iter().enumerate() {
            let iso = LogitGaussian::new(lg.mean.clone(), DMatrix::identity(3, 3) * 0.5).unwrap();
            preds.push(mc_marginalize(&iso, 20_000, i as u64).unwrap().pmf);
        }
        let (point, _) = point_predictions(&model, &data, 1.0).unwrap();
        let agree = preds
            .iter()
            .zip(&point)
            .filter(|(a, b)| a.argmax() == b.argmax())
            .count();
        // Near-ties can flip under Monte Carlo noise.
        assert!(agree as f64 >= 0.98 * point.len() as f64, "{agree}");
    }

    #[test]
    fn marginalized_report_is_finite_with_underflowing_pmfs() {
        let inputs = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let data = Dataset::new(inputs, vec![1], 2, Split::Val).unwrap();
        let w = DMatrix::from_row_slice(3, 2, &[900.0, -900.0, 0.0, 0.0, 0.0, 0.0]);
        let model = Mlp::from_matrices(LayerSpec::chain(&[2, 2]).unwrap(), &[w]).unwrap();
        let sub = TrailingSubset::new(&model, 1).unwrap();
        let post = PosteriorCovariance::prior(&sub, 1e6).unwrap();
        let r = report(&model, Some(&post), &data, Method::marginalized(1.0), DEFAULT_BINS).unwrap();
        assert!(r.log_likelihood.is_finite() && r.log_likelihood < -1000.0);
    }

    #[test]
    fn reliability_csv_schema() {
        let preds = [pmf(&[0.95, 0.05]), pmf(&[0.6, 0.4])];
        let stats = bin_predictions(&preds, &[0, 1], 2).unwrap();
        let mut out = Vec::new();
        write_reliability_csv(&mut out, &stats).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "bin_lower,bin_upper,count,accuracy,confidence");
        assert_eq!(lines[1], "0.000000,0.500000,0,,");
        assert_eq!(lines[2], "0.500000,1.000000,2,0.500000,0.775000");
        let svg = reliability_svg(&stats, "a < b");
        assert!(svg.starts_with("<svg") && svg.contains("a &lt; b"));
    }

    proptest! {
        #[test]
        fn metric_ranges(seed in 0u64..10_000, n in 1usize..60, m in 2usize..6, j in 1usize..15) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds: Vec<Pmf> = (0..n)
                .map(|_| {
                    let z: Vec<f64> = (0..m).map(|_| rng.random_range(-4.0..4.0)).collect();
                    softmax(&z)
                })
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
            let b = brier(&preds, &labels).unwrap();
            prop_assert!((0.0..=2.0).contains(&b));
            let stats = bin_predictions(&preds, &labels, j).unwrap();
            prop_assert_eq!(stats.total(), n);
            let w = ece(&stats, EceVariant::Weighted).unwrap();
            prop_assert!((0.0..=1.0).contains(&w));
            prop_assert!(ece(&stats, EceVariant::BinNormalized).unwrap() >= 0.0);
            for bin in &stats.bins {
                if let (Some(a), Some(c)) = (bin.accuracy, bin.confidence) {
                    prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&c));
                }
            }
        }
    }

    fn softmax(z: &[f64]) -> Pmf {
        crate::nn::softmax(z, 1.0).unwrap()
    }
}
