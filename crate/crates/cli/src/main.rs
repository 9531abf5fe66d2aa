use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gradreg::corpus::synthetic::{Domain, SyntheticSpec};
use gradreg::corpus::{CorpusFormat, LoadedCorpus, NoiseSpec};
use gradreg::harness::{
    fit_observed, noisy_accuracy, run_crossdomain, run_noise_sweep, run_timing, timing_csv, write_results,
    DatasetSpec, ExperimentSpec, Fitted, Method, ModelTemplate, ReportFormat, ResultRow, ResultsTable, SavedModel,
};
use gradreg::model::gradcheck::{check_gradient, random_tiny_model};
use gradreg::trainer::{AdamConfig, TrainConfig};
use gradreg::{Precision, Real};

#[derive(Parser)]
#[command(name = "gradreg", version, about = "Gradient-norm regularized CNN sentence classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on all of the data and save it.
    Train(Common),
    /// Evaluate a saved model at every noise level.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model written by `train`.
        #[arg(long)]
        model: PathBuf,
    },
    /// Cross-validated noise sweep over the method grid.
    Sweep(Common),
    /// Train on one dataset, test on another.
    Crossdomain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        test_data: Vec<PathBuf>,
        #[arg(long, value_enum)]
        test_format: Option<Format>,
        #[arg(long)]
        test_name: Option<String>,
    },
    /// Per-epoch time and accuracy for each method.
    Timing(Common),
    /// Finite-difference check of the full training gradient on random tiny models.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        models: u64,
        #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.1,1")]
        lambda: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Tsv,
    TwoFilePolarity,
    PresplitDir,
}

impl From<Format> for CorpusFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Tsv => CorpusFormat::Tsv,
            Format::TwoFilePolarity => CorpusFormat::TwoFilePolarity,
            Format::PresplitDir => CorpusFormat::PresplitDir,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Report {
    Csv,
    Markdown,
}

#[derive(Clone, Copy, ValueEnum)]
enum SyntheticDomain {
    Movies,
    Products,
}

#[derive(Args, Clone)]
struct Common {
    /// Corpus file(s); two files for two-file-polarity, a directory for presplit-dir.
    #[arg(long, value_delimiter = ',')]
    data: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "tsv")]
    format: Format,
    /// Generate a synthetic polarity corpus instead of reading --data.
    #[arg(long, value_enum, conflicts_with = "data")]
    synthetic: Option<SyntheticDomain>,
    #[arg(long, default_value_t = 2000)]
    synthetic_size: usize,
    /// Dataset name used in reports; defaults to the first file's stem.
    #[arg(long)]
    name: Option<String>,
    /// Pretrained vectors in word2vec text format.
    #[arg(long)]
    emb: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    dim: usize,
    /// Filter widths and filters per width, e.g. 3,4,5x128.
    #[arg(long, default_value = "3,4,5x128")]
    filters: String,
    #[arg(long)]
    classes: Option<usize>,
    /// Methods to run (sweep, crossdomain, timing).
    #[arg(long, value_delimiter = ',', default_value = "baseline,dropout,robust,combined")]
    methods: Vec<String>,
    /// Dropout rates.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    beta: Vec<f64>,
    /// Penalty weights.
    #[arg(long = "lambda", value_delimiter = ',', default_value = "0.01")]
    lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3")]
    alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    sigma: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Run only the first this-many folds.
    #[arg(long)]
    max_folds: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 50)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 3)]
    noise_draws: usize,
    #[arg(long)]
    freeze_embeddings: bool,
    #[arg(long, value_enum, default_value = "f64")]
    precision: PrecisionArg,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    report: Report,
}

fn parse_filters(s: &str) -> Result<(Vec<usize>, usize)> {
    let (widths, count) = s.split_once('x').context("--filters must look like 3,4,5x128")?;
    let widths = widths
        .split(',')
        .map(|w| w.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .context("bad filter width")?;
    Ok((widths, count.trim().parse().context("bad filter count")?))
}

impl Common {
    fn dataset(&self) -> Result<DatasetSpec> {
        if let Some(d) = self.synthetic {
            let domain = match d {
                SyntheticDomain::Movies => Domain::Movies,
                SyntheticDomain::Products => Domain::Products,
            };
            let name = self.name.clone().unwrap_or_else(|| "synthetic".into());
            let seed = self.seeds.first().copied().unwrap_or(0);
            return Ok(DatasetSpec::synthetic(name, SyntheticSpec::new(domain, self.synthetic_size, seed)));
        }
        dataset_from(&self.data, self.format, self.name.clone())
    }

    fn methods(&self) -> Result<Vec<Method>> {
        let mut out = Vec::new();
        for m in &self.methods {
            match m.as_str() {
                "baseline" => out.push(Method::Baseline),
                "dropout" => out.extend(self.beta.iter().map(|&beta| Method::Dropout { beta })),
                "robust" => out.extend(self.lambda.iter().map(|&lambda| Method::Robust { lambda })),
                "combined" => {
                    for &beta in &self.beta {
                        out.extend(self.lambda.iter().map(|&lambda| Method::Combined { beta, lambda }));
                    }
                }
                other => bail!("unknown method `{other}`"),
            }
        }
        Ok(out)
    }

    /// The single method selected by the first --beta and --lambda values.
    fn single_method(&self) -> Method {
        let beta = self.beta.first().copied().unwrap_or(0.0);
        let lambda = self.lambda.first().copied().unwrap_or(0.0);
        match (beta > 0.0, lambda > 0.0) {
            (false, false) => Method::Baseline,
            (true, false) => Method::Dropout { beta },
            (false, true) => Method::Robust { lambda },
            (true, true) => Method::Combined { beta, lambda },
        }
    }

    fn spec(&self) -> Result<ExperimentSpec> {
        let (filter_widths, filters_per_width) = parse_filters(&self.filters)?;
        let mut spec = ExperimentSpec::new(self.dataset()?, self.methods()?);
        spec.alphas = self.alpha.clone();
        spec.sigmas = self.sigma.clone();
        spec.folds = self.folds;
        spec.max_folds = self.max_folds;
        spec.seeds = self.seeds.clone();
        spec.noise_draws = self.noise_draws;
        spec.model = ModelTemplate {
            embed_dim: self.dim,
            filter_widths,
            filters_per_width,
            num_classes: self.classes,
            pretrained: self.emb.clone(),
            precision: match self.precision {
                PrecisionArg::F32 => Precision::Single,
                PrecisionArg::F64 => Precision::Double,
            },
            ..ModelTemplate::default()
        };
        spec.train = TrainConfig {
            batch_size: self.batch,
            max_epochs: self.epochs,
            patience: self.patience,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            freeze_embeddings: self.freeze_embeddings,
            ..TrainConfig::default()
        };
        Ok(spec)
    }

    fn report(&self) -> ReportFormat {
        match self.report {
            Report::Csv => ReportFormat::Csv,
            Report::Markdown => ReportFormat::Markdown,
        }
    }
}

fn dataset_from(paths: &[PathBuf], format: Format, name: Option<String>) -> Result<DatasetSpec> {
    if paths.is_empty() {
        bail!("--data (or --synthetic) is required");
    }
    let name = name.unwrap_or_else(|| {
        paths[0]
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "data".into())
    });
    Ok(DatasetSpec::files(name, paths.to_vec(), format.into()))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Returns whether every cell completed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(c) => {
            let spec = c.spec()?;
            match spec.model.precision {
                Precision::Double => train_cmd::<f64>(&c, &spec),
                Precision::Single => train_cmd::<f32>(&c, &spec),
            }?;
            Ok(true)
        }
        Command::Eval { common, model } => {
            let spec = common.spec()?;
            let saved = SavedModel::load(&model).with_context(|| format!("reading {}", model.display()))?;
            match spec.model.precision {
                Precision::Double => eval_cmd::<f64>(&common, &spec, saved.into_fitted()?),
                Precision::Single => eval_cmd::<f32>(&common, &spec, saved.into_fitted()?),
            }?;
            Ok(true)
        }
        Command::Sweep(c) => {
            let table = run_noise_sweep(&c.spec()?)?;
            finish(&c, &table)
        }
        Command::Crossdomain {
            common,
            test_data,
            test_format,
            test_name,
        } => {
            let test = dataset_from(&test_data, test_format.unwrap_or(common.format), test_name)?;
            let table = run_crossdomain(&common.spec()?, &test)?;
            finish(&common, &table)
        }
        Command::Timing(c) => {
            let series = run_timing(&c.spec()?)?;
            let text = timing_csv(&series)?;
            match &c.out {
                Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
            Ok(true)
        }
        Command::Gradcheck { models, lambda } => {
            let mut worst: f64 = 0.0;
            for seed in 0..models {
                for &l in &lambda {
                    let beta = if seed % 2 == 0 { 0.0 } else { 0.5 };
                    let report = check_gradient(&random_tiny_model(seed, l, beta, 2)?, 1e-5, seed + 100)?;
                    worst = worst.max(report.max_relative_error);
                }
            }
            println!("max relative error {worst:.3e} over {} checks", models as usize * lambda.len());
            Ok(worst < 1e-5)
        }
    }
}

fn whole_or_train(spec: &ExperimentSpec) -> Result<gradreg::corpus::Corpus> {
    Ok(match spec.dataset.load()? {
        LoadedCorpus::Whole(c) => c,
        LoadedCorpus::Presplit { train, .. } => train,
    })
}

fn train_cmd<T: Real>(c: &Common, spec: &ExperimentSpec) -> Result<()> {
    let out = c.out.as_ref().context("--out is required for train")?;
    spec.validate()?;
    let corpus = whole_or_train(spec)?;
    let method = c.single_method();
    let seed = spec.seeds[0];
    eprintln!("training {method} on {} sentences", corpus.len());
    let fitted = fit_observed::<T>(&corpus, method, &spec.model, &spec.train, seed, seed ^ 0x5eed, &mut |r, _| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  dev {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.dev_accuracy, r.cumulative_seconds
        )
    })?;
    SavedModel::from_fitted(&fitted)
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn eval_cmd<T: Real>(c: &Common, spec: &ExperimentSpec, fitted: Fitted<T>) -> Result<()> {
    let corpus = match spec.dataset.load()? {
        LoadedCorpus::Whole(c) => c,
        LoadedCorpus::Presplit { test, .. } => test,
    };
    let seed = spec.seeds[0];
    let mut table = ResultsTable::default();
    for &sigma in &spec.sigmas {
        for &alpha in &spec.alphas {
            let noise = NoiseSpec::new(alpha, sigma)?;
            let accuracy = noisy_accuracy(&fitted, &corpus, noise, spec.noise_draws, seed)?;
            println!("alpha={alpha} sigma={sigma} accuracy={accuracy:.6}");
            table.rows.push(ResultRow {
                dataset: spec.dataset.name.clone(),
                method: "saved".into(),
                beta: fitted.config.dropout_rate,
                lambda: fitted.config.robust_weight,
                alpha,
                sigma,
                fold: 0,
                seed,
                accuracy,
                train_seconds: 0.0,
            });
        }
    }
    if let Some(out) = &c.out {
        write_results(&table, out, c.report())?;
    }
    Ok(())
}

fn finish(c: &Common, table: &ResultsTable) -> Result<bool> {
    for s in table.summary() {
        println!(
            "{:<10} {:<9} beta={:<5} lambda={:<7} alpha={:<4} sigma={:<4} n={:<3} accuracy={:.4}",
            s.dataset, s.method, s.beta, s.lambda, s.alpha, s.sigma, s.cells, s.accuracy
        );
    }
    for f in &table.failures {
        eprintln!("failed: {} fold {} seed {}: {}", f.method, f.fold, f.seed, f.error);
    }
    if let Some(out) = &c.out {
        if !table.rows.is_empty() {
            write_results(table, out, c.report()).with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(table.is_complete())
}
