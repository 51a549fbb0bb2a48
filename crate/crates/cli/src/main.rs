//! `deltauq`: command-line front end for the pipeline stages.
//!
//! Every subcommand runs one stage and writes one artifact (or prints one
//! value). Class indices are 1-based on the command line and in files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deltauq::artifact::{
    load_model, load_posterior, load_prediction, save_model, save_posterior, save_prediction, ModelArtifact,
    PredictionArtifact,
};
use deltauq::calibration::{
    evaluate, reliability_svg, report, tc_grid, temperature_grid, tune_tc, tune_temperature, write_reliability_csv,
    CalibrationReport, EceSettings, EceVariant, GridSearch, Method, DEFAULT_BINS,
};
use deltauq::data::{
    gen_synthetic, load_csv, load_idx, load_mnist_test, load_mnist_train_val, write_csv, Dataset, Split, SyntheticSpec,
};
use deltauq::fusion::{fuse_classifiers, fuse_same_class, risk_assess};
use deltauq::posterior::{direct_covariance, recursive_covariance, scale_covariance, DEFAULT_BLOCK};
use deltauq::predict::{delta_propagate_batch, derive_seed, mc_marginalize, DEFAULT_SAMPLES};
use deltauq::train::{accuracy, init_params, train_map, TrainConfig};
use deltauq::{LayerSpec, LogitGaussian, PosteriorCovariance, TrailingSubset};
use nalgebra::DMatrix;
use serde::Deserialize;

const MAX_SEED: u64 = i64::MAX as u64;

#[derive(Parser)]
#[command(
    name = "deltauq",
    version,
    about = "Delta-method predictive uncertainty for MLP classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-mixture data set as CSV.
    Synth(SynthArgs),
    /// Train a MAP network and write a model artifact.
    Train(TrainArgs),
    /// Accumulate the trailing-layer posterior covariance.
    Covariance(CovarianceArgs),
    /// Logit Gaussians and marginal PMF estimates for every input row.
    Predict(PredictArgs),
    /// Fuse logit Gaussians across classifiers or across inputs of one class.
    Fuse(FuseArgs),
    /// Probability that a class probability exceeds a threshold.
    Risk(RiskArgs),
    /// Tune the softmax temperature or the covariance scale on validation data.
    Calibrate(CalibrateArgs),
    /// Accuracy, log-likelihood, Brier score, ECE and reliability diagram of a prediction artifact.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// CSV file: 1-based label, then features.
    #[arg(long, conflicts_with_all = ["mnist", "images"])]
    data: Option<PathBuf>,
    /// Directory holding the four MNIST IDX files (optionally gzipped).
    #[arg(long, conflicts_with = "images")]
    mnist: Option<PathBuf>,
    /// IDX image file.
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
    /// MNIST split; train and val are the first 50000 and last 10000 training rows.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Number of classes (defaults to the model's, or 10 for IDX files).
    #[arg(long)]
    classes: Option<usize>,
    /// Use only the first N rows.
    #[arg(long)]
    limit: Option<usize>,
}

impl DataArgs {
    fn load(&self, default_split: SplitArg, classes: Option<usize>) -> Result<Dataset, CliError> {
        let split = self.split.unwrap_or(default_split);
        let classes = self.classes.or(classes);
        let data = if let Some(path) = &self.data {
            let m = classes.ok_or_else(|| usage("--classes is required with --data"))?;
            load_csv(path, m, split.into())?
        } else if let Some(dir) = &self.mnist {
            match split {
                SplitArg::Train => load_mnist_train_val(dir)?.0,
                SplitArg::Val => load_mnist_train_val(dir)?.1,
                SplitArg::Test => load_mnist_test(dir)?,
            }
        } else if let (Some(images), Some(labels)) = (&self.images, &self.labels) {
            load_idx(images, labels, classes.unwrap_or(10), split.into())?
        } else {
            return Err(usage("no data given; use --data, --mnist or --images/--labels"));
        };
        match self.limit {
            Some(n) if n < data.len() => Ok(data.slice(0..n, split.into())?),
            _ => Ok(data),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u64).range(..=MAX_SEED))]
    seed: u64,
    /// TOML mixture spec (means, covariances, priors); defaults to a 3-class 2-D mixture.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Training configuration file. Flags override every key.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    /// Layer widths from input to output.
    widths: Option<Vec<usize>>,
    train: TrainConfig,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// TOML file with `widths` and a `[train]` table.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Layer widths, e.g. 784,300,100,40,10.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    lr: Option<f64>,
    /// L2 weight of the objective.
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(..=MAX_SEED))]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CovMethod {
    Recursive,
    Direct,
}

#[derive(Args)]
struct CovarianceArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Number of trailing layers treated as random.
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, value_enum, default_value = "recursive")]
    method: CovMethod,
    /// Prior precision; defaults to the L2 weight times the training-set size.
    #[arg(long)]
    prior_precision: Option<f64>,
    /// Samples per recursive update.
    #[arg(long, default_value_t = DEFAULT_BLOCK)]
    block: usize,
    /// Covariance scale stored with the posterior.
    #[arg(long, default_value_t = 1.0)]
    tc: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SamplingArgs {
    /// Monte Carlo samples per input.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u64).range(..=MAX_SEED))]
    seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, required_unless_present = "point")]
    posterior: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Covariance scale; replaces the one stored with the posterior.
    #[arg(long, conflicts_with = "point")]
    tc: Option<f64>,
    /// Plain softmax of the logits, no posterior.
    #[arg(long)]
    point: bool,
    #[arg(long, default_value_t = 1.0, requires = "point")]
    temperature: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FuseMode {
    Classifiers,
    SameClass,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long, value_enum)]
    mode: FuseMode,
    /// Prediction artifacts to fuse row by row (classifiers mode).
    #[arg(long, num_args = 1.., required_if_eq("mode", "classifiers"))]
    inputs: Vec<PathBuf>,
    /// Model artifact (same-class mode).
    #[arg(long, required_if_eq("mode", "same-class"))]
    model: Option<PathBuf>,
    /// Posterior artifact (same-class mode).
    #[arg(long, required_if_eq("mode", "same-class"))]
    posterior: Option<PathBuf>,
    /// Inputs believed to share one class (same-class mode).
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RiskArgs {
    #[arg(long)]
    prediction: PathBuf,
    /// 1-based row of the prediction artifact.
    #[arg(long, default_value_t = 1)]
    index: usize,
    /// 1-based class.
    #[arg(long)]
    class: usize,
    /// Threshold in [0, 1].
    #[arg(long)]
    threshold: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TuneTarget {
    #[value(name = "T")]
    Temperature,
    #[value(name = "tc")]
    Tc,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    BinNormalized,
    Weighted,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, required_if_eq("tune", "tc"))]
    posterior: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    tune: TuneTarget,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// ECE used to score grid points.
    #[arg(long, value_enum, default_value = "bin-normalized")]
    variant: VariantArg,
    /// Also write the posterior rescaled by the tuned tc.
    #[arg(long, requires = "posterior")]
    out_posterior: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Prediction artifact with labels.
    #[arg(long)]
    prediction: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Reliability rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Reliability diagram as SVG.
    #[arg(long)]
    svg: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Run(deltauq::Error),
}

impl From<deltauq::Error> for CliError {
    fn from(e: deltauq::Error) -> Self {
        match e {
            deltauq::Error::Config(msg) => CliError::Usage(msg),
            e => CliError::Run(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn one_based(value: usize, len: usize, what: &str) -> Result<usize, CliError> {
    if value == 0 || value > len {
        return Err(usage(format!("{what} {value} out of range 1..={len}")));
    }
    Ok(value - 1)
}

fn synth(args: SynthArgs) -> Result<(), CliError> {
    let spec = match &args.spec {
        Some(path) => {
            let mut spec: SyntheticSpec =
                toml::from_str(&fs::read_to_string(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            spec.n_samples = args.samples;
            spec.seed = args.seed;
            spec
        }
        None => SyntheticSpec::three_class_2d(args.samples, args.seed),
    };
    let (data, _) = gen_synthetic(&spec)?;
    write_csv(&args.out, &data)?;
    println!(
        "wrote {} samples ({} classes) to {}",
        data.len(),
        data.n_classes(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let file: ConfigFile = match &args.config {
        Some(path) => {
            toml::from_str(&fs::read_to_string(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => ConfigFile::default(),
    };
    let mut cfg = file.train;
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.l2 {
        cfg.l2_weight = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if cfg.seed > MAX_SEED {
        return Err(usage(format!("seed must be at most {MAX_SEED}")));
    }
    cfg.validate()?;
    let widths = args.widths.or(file.widths);
    let data = args
        .data
        .load(SplitArg::Train, widths.as_ref().and_then(|w| w.last().copied()))?;
    let widths = widths.unwrap_or_else(|| vec![data.n_features(), 300, 100, 40, data.n_classes()]);
    let layers = LayerSpec::chain(&widths)?;
    let init = init_params(&layers, cfg.seed)?;
    let (model, rep) = train_map(&init, &data, &cfg)?;
    for (epoch, obj) in rep.objective_trace.iter().enumerate() {
        log::info!("epoch {}: objective {obj:.6}", epoch + 1);
    }
    let acc = accuracy(&model, &data)?;
    let art = ModelArtifact {
        model,
        n_train: data.len(),
        train: Some(cfg),
    };
    save_model(&args.out, &art)?;
    println!(
        "trained {} parameters on {} samples, training accuracy {acc:.4}; wrote {}",
        art.model.n_params(),
        data.len(),
        args.out.display()
    );
    Ok(())
}

fn covariance(args: CovarianceArgs) -> Result<(), CliError> {
    let art = load_model(&args.model)?;
    let data = args.data.load(SplitArg::Train, Some(art.model.n_classes()))?;
    let pp = match (args.prior_precision, &art.train) {
        (Some(pp), _) => pp,
        (None, Some(cfg)) => cfg.prior_precision(art.n_train),
        (None, None) => return Err(usage("model has no training config; pass --prior-precision")),
    };
    let subset = TrailingSubset::new(&art.model, args.layers)?;
    log::info!("posterior over {} parameters, prior precision {pp}", subset.len());
    let post = match args.method {
        CovMethod::Recursive => recursive_covariance(&art.model, &data, &subset, pp, args.block)?,
        CovMethod::Direct => direct_covariance(&art.model, &data, &subset, pp)?,
    };
    let post = if args.tc == 1.0 {
        post
    } else {
        scale_covariance(post, args.tc)?
    };
    save_posterior(&args.out, &post)?;
    println!(
        "posterior covariance {n}x{n} over {} samples; wrote {}",
        post.n_samples(),
        args.out.display(),
        n = post.dim()
    );
    Ok(())
}

fn marginalize_all(lgs: &[LogitGaussian], samples: usize, seed: u64) -> Result<Vec<deltauq::PmfEstimate>, CliError> {
    lgs.iter()
        .enumerate()
        .map(|(i, lg)| Ok(mc_marginalize(lg, samples, derive_seed(seed, i as u64))?))
        .collect()
}

fn rescaled(post: PosteriorCovariance, tc: Option<f64>) -> Result<PosteriorCovariance, CliError> {
    match tc {
        Some(tc) => {
            let ratio = tc / post.tc();
            Ok(scale_covariance(post, ratio)?)
        }
        None => Ok(post),
    }
}

fn predict(args: PredictArgs) -> Result<(), CliError> {
    let art = load_model(&args.model)?;
    let model = &art.model;
    let data = args.data.load(SplitArg::Test, Some(model.n_classes()))?;
    let SamplingArgs { samples, seed } = args.sampling;
    let (method, tc, temperature, logits) = if args.point {
        let t = args.temperature;
        if !(t > 0.0 && t.is_finite()) {
            return Err(usage(format!("temperature must be positive, got {t}")));
        }
        let g = model.logits_batch(data.inputs())?;
        let m = model.n_classes();
        let lgs = (0..data.len())
            .map(|i| LogitGaussian::new(g.row(i).transpose() / t, DMatrix::zeros(m, m)))
            .collect::<Result<Vec<_>, _>>()?;
        ("point", 0.0, t, lgs)
    } else {
        let path = args
            .posterior
            .as_ref()
            .ok_or_else(|| usage("--posterior is required"))?;
        let post = rescaled(load_posterior(path)?, args.tc)?;
        let tc = post.tc();
        (
            "marginalized",
            tc,
            1.0,
            delta_propagate_batch(model, &post, data.inputs())?,
        )
    };
    let estimates = marginalize_all(&logits, samples, seed)?;
    let correct = estimates
        .iter()
        .zip(data.labels())
        .filter(|(e, &y)| e.pmf.argmax() == y)
        .count();
    let out = PredictionArtifact {
        method: method.into(),
        tc,
        temperature,
        samples,
        seed,
        n_classes: model.n_classes(),
        sources: Vec::new(),
        labels: Some(data.labels().to_vec()),
        logits,
        estimates,
    };
    save_prediction(&args.out, &out)?;
    println!(
        "{} predictions, accuracy {:.4}; wrote {}",
        data.len(),
        correct as f64 / data.len() as f64,
        args.out.display()
    );
    Ok(())
}

fn fuse(args: FuseArgs) -> Result<(), CliError> {
    let SamplingArgs { samples, seed } = args.sampling;
    let (fused, sources, labels, n_classes) = match args.mode {
        FuseMode::Classifiers => {
            if args.inputs.len() < 2 {
                return Err(usage("classifiers mode needs at least two --inputs"));
            }
            let arts = args
                .inputs
                .iter()
                .map(|p| load_prediction(p))
                .collect::<Result<Vec<_>, _>>()?;
            let rows = arts[0].logits.len();
            if let Some((i, a)) = arts.iter().enumerate().find(|(_, a)| a.logits.len() != rows) {
                return Err(CliError::Run(deltauq::Error::Shape(format!(
                    "{} has {} rows, {} has {rows}",
                    args.inputs[i].display(),
                    a.logits.len(),
                    args.inputs[0].display()
                ))));
            }
            let mut fused = Vec::with_capacity(rows);
            for row in 0..rows {
                let per: Vec<LogitGaussian> = arts.iter().map(|a| a.logits[row].clone()).collect();
                fused.push(fuse_classifiers(&per)?.gaussian);
            }
            let sources = args.inputs.iter().map(|p| p.display().to_string()).collect();
            let labels = arts[0]
                .labels
                .clone()
                .filter(|l| arts.iter().all(|a| a.labels.as_ref() == Some(l)));
            (fused, sources, labels, arts[0].n_classes)
        }
        FuseMode::SameClass => {
            let (Some(model_path), Some(post_path)) = (&args.model, &args.posterior) else {
                return Err(usage("same-class mode needs --model and --posterior"));
            };
            let art = load_model(model_path)?;
            let post = load_posterior(post_path)?;
            let data = args.data.load(SplitArg::Test, Some(art.model.n_classes()))?;
            let inputs: Vec<Vec<f64>> = (0..data.len()).map(|i| data.input(i)).collect();
            let f = fuse_same_class(&art.model, &post, &inputs)?;
            let first = data.labels()[0];
            let labels = data.labels().iter().all(|&y| y == first).then(|| vec![first]);
            (vec![f.gaussian], f.sources, labels, art.model.n_classes())
        }
    };
    let estimates = marginalize_all(&fused, samples, seed)?;
    let out = PredictionArtifact {
        method: "fused".into(),
        tc: 1.0,
        temperature: 1.0,
        samples,
        seed,
        n_classes,
        sources,
        labels,
        logits: fused,
        estimates,
    };
    save_prediction(&args.out, &out)?;
    println!("{} fused predictions; wrote {}", out.logits.len(), args.out.display());
    Ok(())
}

fn risk(args: RiskArgs) -> Result<(), CliError> {
    let art = load_prediction(&args.prediction)?;
    let row = one_based(args.index, art.logits.len(), "--index")?;
    let class = one_based(args.class, art.n_classes, "--class")?;
    let r = risk_assess(&art.logits[row], &art.estimates[row], class, args.threshold)?;
    println!("{r:.6}");
    Ok(())
}

fn print_metrics(name: &str, r: &CalibrationReport) {
    println!(
        "{name:<28} n {:>6}  acc {:.4}  LL(1e3) {:>9.4}  Brier {:.4}  ECE {:.5}  ECE(weighted) {:.5}",
        r.n,
        r.accuracy,
        r.log_likelihood_k(),
        r.brier,
        r.ece,
        r.ece_weighted
    );
}

fn print_grid(name: &str, g: &GridSearch) {
    for (v, s) in g.grid.iter().zip(&g.scores) {
        log::info!("{name} = {v:.6}: ECE {s:.6}");
    }
}

fn calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    let art = load_model(&args.model)?;
    let model = &art.model;
    let data = args.data.load(SplitArg::Val, Some(model.n_classes()))?;
    let settings = EceSettings {
        n_bins: args.bins,
        variant: match args.variant {
            VariantArg::BinNormalized => EceVariant::BinNormalized,
            VariantArg::Weighted => EceVariant::Weighted,
        },
    };
    let SamplingArgs { samples, seed } = args.sampling;
    match args.tune {
        TuneTarget::Temperature => {
            let g = tune_temperature(model, &data, &temperature_grid(), &settings)?;
            print_grid("T", &g);
            println!("T = {:.6}", g.best);
            print_metrics("standard", &report(model, None, &data, Method::standard(), args.bins)?);
            let tuned = Method::Point { temperature: g.best };
            print_metrics(
                &format!("temperature T={:.4}", g.best),
                &report(model, None, &data, tuned, args.bins)?,
            );
        }
        TuneTarget::Tc => {
            let path = args
                .posterior
                .as_ref()
                .ok_or_else(|| usage("--posterior is required"))?;
            let post = load_posterior(path)?;
            let g = tune_tc(model, &post, &data, &tc_grid(), samples, seed, &settings)?;
            print_grid("tc", &g);
            println!("tc = {:.6}", g.best);
            for tc in [1.0, g.best] {
                let method = Method::Marginalized { tc, samples, seed };
                let r = report(model, Some(&post), &data, method, args.bins)?;
                print_metrics(&format!("marginalized tc={tc:.4}"), &r);
            }
            if let Some(out) = &args.out_posterior {
                let post = rescaled(post, Some(g.best))?;
                save_posterior(out, &post)?;
                println!("wrote {}", out.display());
            }
        }
    }
    Ok(())
}

fn method_of(art: &PredictionArtifact) -> Method {
    if art.method == "point" {
        Method::Point {
            temperature: art.temperature,
        }
    } else {
        Method::Marginalized {
            tc: art.tc,
            samples: art.samples,
            seed: art.seed,
        }
    }
}

fn report_cmd(args: ReportArgs) -> Result<(), CliError> {
    let art = load_prediction(&args.prediction)?;
    let labels = art
        .labels
        .as_ref()
        .ok_or_else(|| CliError::Run(deltauq::Error::Domain("prediction artifact has no labels".into())))?;
    let preds: Vec<_> = art.estimates.iter().map(|e| e.pmf.clone()).collect();
    let log_true: Vec<f64> = art.estimates.iter().zip(labels).map(|(e, &y)| e.log_pmf[y]).collect();
    let rep = evaluate(method_of(&art), &preds, &log_true, labels, args.bins)?;
    print_metrics(&art.method, &rep);
    if let Some(path) = &args.csv {
        let mut buf = Vec::new();
        write_reliability_csv(&mut buf, &rep.bins)?;
        write_atomic(path, &buf)?;
    }
    if let Some(path) = &args.svg {
        let title = format!("{} ({} samples)", art.method, rep.n);
        write_atomic(path, reliability_svg(&rep.bins, &title).as_bytes())?;
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Covariance(a) => covariance(a),
        Command::Predict(a) => predict(a),
        Command::Fuse(a) => fuse(a),
        Command::Risk(a) => risk(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
