//! Labeled datasets: MNIST IDX files, CSV, and synthetic Gaussian mixtures
//! with a closed-form Bayes posterior.
//!
//! Labels are 0-based inside the library. Files and the command line use
//! classes `1..=M`; the conversion happens only in the readers and writers
//! here.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mlp, Pmf};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Rows held out from the end of the MNIST training file for tuning.
pub const MNIST_VALIDATION_SIZE: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: DMatrix<f64>,
    labels: Vec<usize>,
    n_classes: usize,
    split: Split,
}

impl Dataset {
    /// `inputs` holds one sample per row; labels are 0-based.
    pub fn new(inputs: DMatrix<f64>, labels: Vec<usize>, n_classes: usize, split: Split) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::shape(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if n_classes == 0 {
            return Err(Error::domain("dataset needs at least one class"));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::domain(format!("label {} outside 1..={n_classes}", bad + 1)));
        }
        Ok(Self {
            inputs,
            labels,
            n_classes,
            split,
        })
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> Vec<f64> {
        self.inputs.row(i).iter().copied().collect()
    }

    /// Rows `range` as a new dataset tagged `split`.
    pub fn slice(&self, range: std::ops::Range<usize>, split: Split) -> Result<Self> {
        if range.end > self.len() || range.start > range.end {
            return Err(Error::domain(format!(
                "rows {range:?} out of bounds for {} samples",
                self.len()
            )));
        }
        Self::new(
            self.inputs.rows(range.start, range.len()).into_owned(),
            self.labels[range].to_vec(),
            self.n_classes,
            split,
        )
    }

    /// Splits off the last `n_val` rows as the validation set.
    pub fn split_validation(&self, n_val: usize) -> Result<(Self, Self)> {
        if n_val >= self.len() {
            return Err(Error::domain("validation split would leave no training data"));
        }
        let cut = self.len() - n_val;
        Ok((
            self.slice(0..cut, Split::Train)?,
            self.slice(cut..self.len(), Split::Val)?,
        ))
    }

    pub(crate) fn check_model(&self, model: &Mlp) -> Result<()> {
        if model.n_inputs() != self.n_features() {
            return Err(Error::shape(format!(
                "data has {} features, model expects {}",
                self.n_features(),
                model.n_inputs()
            )));
        }
        if model.n_classes() != self.n_classes {
            return Err(Error::shape(format!(
                "data has {} classes, model outputs {}",
                self.n_classes,
                model.n_classes()
            )));
        }
        Ok(())
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::parse(0, format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse(offset as u64, format!("truncated header reading {what}")))
}

/// Parses an IDX image file into `(count, rows, cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::parse(
            0,
            format!("image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::parse(
            bytes.len() as u64,
            format!("image payload truncated: {} of {need} pixel bytes", payload.len()),
        ));
    }
    let pixels = payload[..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((count, rows, cols, pixels))
}

/// Parses an IDX label file; returns the raw `u8` labels.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::parse(
            0,
            format!("label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::parse(
            bytes.len() as u64,
            format!("label payload truncated: {} of {count} bytes", payload.len()),
        ));
    }
    Ok(payload[..count].to_vec())
}

/// Reads an IDX image file (optionally gzip-compressed) as one flattened,
/// row-major image per row.
pub fn load_idx_images(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = read_maybe_gz(path)?;
    let (count, rows, cols, pixels) = parse_idx_images(&bytes)?;
    Ok(DMatrix::from_row_slice(count, rows * cols, &pixels))
}

/// Reads a matching pair of IDX files. Digit `d` becomes internal class `d`
/// (external class `d + 1`).
pub fn load_idx(images: &Path, labels: &Path, n_classes: usize, split: Split) -> Result<Dataset> {
    let inputs = load_idx_images(images)?;
    let raw = parse_idx_labels(&read_maybe_gz(labels)?)?;
    if raw.len() != inputs.nrows() {
        return Err(Error::parse(
            4,
            format!("count mismatch: {} images but {} labels", inputs.nrows(), raw.len()),
        ));
    }
    Dataset::new(inputs, raw.into_iter().map(usize::from).collect(), n_classes, split)
}

/// Writes an uncompressed IDX image file from `u8` pixels.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if rows * cols == 0 || !pixels.len().is_multiple_of(rows * cols) {
        return Err(Error::shape("pixel count is not a multiple of rows * cols"));
    }
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads the MNIST training file and splits it into the training part and
/// the trailing validation rows.
pub fn load_mnist_train_val(dir: &Path) -> Result<(Dataset, Dataset)> {
    let full = load_idx(
        &find_idx(dir, "train-images-idx3-ubyte")?,
        &find_idx(dir, "train-labels-idx1-ubyte")?,
        10,
        Split::Train,
    )?;
    full.split_validation(MNIST_VALIDATION_SIZE)
}

pub fn load_mnist_test(dir: &Path) -> Result<Dataset> {
    load_idx(
        &find_idx(dir, "t10k-images-idx3-ubyte")?,
        &find_idx(dir, "t10k-labels-idx1-ubyte")?,
        10,
        Split::Test,
    )
}

/// Finds `stem` or `stem.gz` in `dir`.
pub fn find_idx(dir: &Path, stem: &str) -> Result<std::path::PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found in {}", dir.display()),
    )))
}

/// Reads a CSV file whose first column is the 1-based class label and the
/// remaining columns are features. A header row is skipped if its first
/// field is not a number.
pub fn load_csv(path: &Path, n_classes: usize, split: Split) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    let mut offset = 0u64;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let Ok(label) = fields[0].parse::<usize>() else {
            if lineno == 0 {
                continue;
            }
            return Err(Error::parse(
                line_offset,
                format!("line {}: bad label {:?}", lineno + 1, fields[0]),
            ));
        };
        if label == 0 {
            return Err(Error::parse(
                line_offset,
                format!("line {}: labels are 1-based", lineno + 1),
            ));
        }
        let n = fields.len() - 1;
        match width {
            None => width = Some(n),
            Some(w) if w != n => {
                return Err(Error::parse(
                    line_offset,
                    format!("line {}: {n} features, expected {w}", lineno + 1),
                ))
            }
            _ => {}
        }
        for f in &fields[1..] {
            values.push(
                f.parse::<f64>()
                    .map_err(|_| Error::parse(line_offset, format!("line {}: bad number {f:?}", lineno + 1)))?,
            );
        }
        labels.push(label - 1);
    }
    let width = width.ok_or_else(|| Error::parse(0, "CSV file has no data rows"))?;
    let inputs = DMatrix::from_row_slice(labels.len(), width, &values);
    Dataset::new(inputs, labels, n_classes, split)
}

pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    write!(out, "label")?;
    for j in 0..data.n_features() {
        write!(out, ",x{}", j + 1)?;
    }
    writeln!(out)?;
    for i in 0..data.len() {
        write!(out, "{}", data.labels()[i] + 1)?;
        for j in 0..data.n_features() {
            write!(out, ",{:?}", data.inputs()[(i, j)])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// A Gaussian mixture with one component per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub means: Vec<Vec<f64>>,
    /// Row-major `d x d` covariance per class.
    pub covariances: Vec<Vec<f64>>,
    pub priors: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Three classes in 2-D with a shared covariance, so the Bayes posterior
    /// is exactly a multinomial logistic model in `x`.
    pub fn three_class_2d(n_samples: usize, seed: u64) -> Self {
        let cov = vec![1.0, 0.3, 0.3, 1.0];
        Self {
            means: vec![vec![0.0, 1.5], vec![-1.3, -0.75], vec![1.3, -0.75]],
            covariances: vec![cov.clone(), cov.clone(), cov],
            priors: vec![0.3, 0.3, 0.4],
            n_samples,
            seed,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }
}

/// Exact class posterior `p(y | x)` of a [`SyntheticSpec`].
#[derive(Clone, Debug)]
pub struct BayesOracle {
    means: Vec<DVector<f64>>,
    chols: Vec<Cholesky<f64, Dyn>>,
    log_norms: Vec<f64>,
}

impl BayesOracle {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        let m = spec.n_classes();
        let d = spec.dim();
        if m == 0 || d == 0 {
            return Err(Error::config("synthetic spec needs classes and a dimension"));
        }
        if spec.covariances.len() != m || spec.priors.len() != m {
            return Err(Error::config("one covariance and prior per class is required"));
        }
        if spec.priors.iter().any(|&p| !(p > 0.0)) || (spec.priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("class priors must be positive and sum to 1"));
        }
        let mut means = Vec::new();
        let mut chols = Vec::new();
        let mut log_norms = Vec::new();
        for c in 0..m {
            if spec.means[c].len() != d || spec.covariances[c].len() != d * d {
                return Err(Error::config(format!("class {} has inconsistent dimensions", c + 1)));
            }
            let cov = DMatrix::from_row_slice(d, d, &spec.covariances[c]);
            if (&cov - cov.transpose()).amax() > 1e-12 {
                return Err(Error::config(format!("class {} covariance is not symmetric", c + 1)));
            }
            let chol = Cholesky::new(cov)
                .ok_or_else(|| Error::config(format!("class {} covariance is not positive definite", c + 1)))?;
            let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            log_norms.push(spec.priors[c].ln() - 0.5 * log_det);
            means.push(DVector::from_column_slice(&spec.means[c]));
            chols.push(chol);
        }
        Ok(Self {
            means,
            chols,
            log_norms,
        })
    }

    /// `ln(prior_c) + ln N(x; mu_c, Sigma_c)` up to a shared constant.
    fn log_joint(&self, x: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(x);
        self.means
            .iter()
            .zip(&self.chols)
            .zip(&self.log_norms)
            .map(|((mu, chol), ln)| {
                let diff = &x - mu;
                let z = chol.l().solve_lower_triangular(&diff).expect("nonsingular factor");
                ln - 0.5 * z.norm_squared()
            })
            .collect()
    }

    pub fn posterior(&self, x: &[f64]) -> Pmf {
        Pmf::from_vector_unchecked(DVector::from_vec(crate::nn::softmax_vec(&self.log_joint(x), 1.0)))
    }
}

/// Draws `spec.n_samples` labeled points and returns them with the exact
/// posterior oracle.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, BayesOracle)> {
    let oracle = BayesOracle::new(spec)?;
    let d = spec.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cdf = Vec::with_capacity(spec.priors.len());
    let mut acc = 0.0;
    for p in &spec.priors {
        acc += p;
        cdf.push(acc);
    }
    let mut inputs = DMatrix::zeros(spec.n_samples, d);
    let mut labels = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let u: f64 = rng.random::<f64>() * acc;
        let c = cdf.iter().position(|&v| u < v).unwrap_or(cdf.len() - 1);
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let x = &oracle.means[c] + oracle.chols[c].l() * z;
        inputs.row_mut(i).copy_from(&x.transpose());
        labels.push(c);
    }
    let data = Dataset::new(inputs, labels, spec.n_classes(), Split::Train)?;
    Ok((data, oracle))
}
