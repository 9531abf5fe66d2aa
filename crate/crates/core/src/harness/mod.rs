//! Experiment grids: noise sweeps over cross-validation folds, cross-domain
//! transfer, and per-epoch timing.
//!
//! Every cell draws its randomness from seeds derived from the master seed
//! and the cell's coordinates, so cells can run in any order (or be removed
//! from the grid) without changing each other's results.

mod report;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::synthetic::{generate, SyntheticSpec};
use crate::corpus::{init_embeddings, load_corpus, make_folds, Corpus, CorpusFormat, LoadedCorpus, NoiseSpec, Vocab};
use crate::error::{Error, Result};
use crate::model::{objective_and_grad, Example, ModelConfig, ModelParams, Objective};
use crate::seed::{derive_seed, hash_str};
use crate::tensor::{Precision, Real};
use crate::trainer::{evaluate, train, EpochRecord, TrainConfig};

pub use report::{read_csv, summarize, timing_csv, write_results, ReportFormat, SummaryRow, CSV_HEADER};

/// A training configuration under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Dropout { beta: f64 },
    Robust { lambda: f64 },
    Combined { beta: f64, lambda: f64 },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Dropout { .. } => "dropout",
            Method::Robust { .. } => "robust",
            Method::Combined { .. } => "combined",
        }
    }

    pub fn beta(&self) -> f64 {
        match *self {
            Method::Dropout { beta } | Method::Combined { beta, .. } => beta,
            _ => 0.0,
        }
    }

    pub fn lambda(&self) -> f64 {
        match *self {
            Method::Robust { lambda } | Method::Combined { lambda, .. } => lambda,
            _ => 0.0,
        }
    }

    /// Builds a method from its name and rates, checking that the rates the
    /// name calls for are present and the others are zero.
    pub fn from_parts(name: &str, beta: f64, lambda: f64) -> Result<Self> {
        let m = match name {
            "baseline" => Method::Baseline,
            "dropout" => Method::Dropout { beta },
            "robust" => Method::Robust { lambda },
            "combined" => Method::Combined { beta, lambda },
            other => return Err(Error::invalid(format!("unknown method `{other}`"))),
        };
        if m.beta() != beta || m.lambda() != lambda {
            return Err(Error::invalid(format!("method {name} with beta {beta} and lambda {lambda}")));
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        let lambda_ok = |l: f64| l >= 0.0 && l.is_finite();
        let ok = match *self {
            Method::Baseline => true,
            Method::Dropout { beta } => beta_ok(beta) && beta > 0.0,
            Method::Robust { lambda } => lambda_ok(lambda) && lambda > 0.0,
            Method::Combined { beta, lambda } => beta_ok(beta) && beta > 0.0 && lambda_ok(lambda) && lambda > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid rates for {self}")))
        }
    }

    fn seed_key(&self) -> u64 {
        derive_seed(hash_str(self.name()), &[self.beta().to_bits(), self.lambda().to_bits()])
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Method::Baseline => write!(f, "baseline"),
            Method::Dropout { beta } => write!(f, "dropout beta={beta}"),
            Method::Robust { lambda } => write!(f, "robust lambda={lambda}"),
            Method::Combined { beta, lambda } => write!(f, "combined beta={beta} lambda={lambda}"),
        }
    }
}

/// Where a dataset's sentences come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Files { paths: Vec<PathBuf>, format: CorpusFormat },
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub source: DataSource,
}

impl DatasetSpec {
    pub fn files(name: impl Into<String>, paths: Vec<PathBuf>, format: CorpusFormat) -> Self {
        DatasetSpec {
            name: name.into(),
            source: DataSource::Files { paths, format },
        }
    }

    pub fn synthetic(name: impl Into<String>, spec: SyntheticSpec) -> Self {
        DatasetSpec {
            name: name.into(),
            source: DataSource::Synthetic(spec),
        }
    }

    pub fn load(&self) -> Result<LoadedCorpus> {
        match &self.source {
            DataSource::Files { paths, format } => load_corpus(paths, *format),
            DataSource::Synthetic(spec) => Ok(LoadedCorpus::Whole(generate(spec))),
        }
    }

    /// All sentences as one corpus; presplit data is concatenated.
    pub fn load_whole(&self) -> Result<Corpus> {
        Ok(match self.load()? {
            LoadedCorpus::Whole(c) => c,
            LoadedCorpus::Presplit { mut train, test } => {
                train.examples.extend(test.examples);
                train
            }
        })
    }
}

/// Architecture settings shared by every cell; the penalty weight and
/// dropout rate come from the method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTemplate {
    pub embed_dim: usize,
    pub filter_widths: Vec<usize>,
    pub filters_per_width: usize,
    /// Defaults to the number of labels in the training data.
    pub num_classes: Option<usize>,
    pub norm_eps: f64,
    pub pretrained: Option<PathBuf>,
    pub precision: Precision,
}

impl Default for ModelTemplate {
    fn default() -> Self {
        let d = ModelConfig::new(3, 2);
        ModelTemplate {
            embed_dim: d.embed_dim,
            filter_widths: d.filter_widths,
            filters_per_width: d.filters_per_width,
            num_classes: None,
            norm_eps: d.norm_eps,
            pretrained: None,
            precision: Precision::Double,
        }
    }
}

impl ModelTemplate {
    pub fn config(&self, vocab_size: usize, labels: usize, method: Method) -> Result<ModelConfig> {
        let num_classes = match self.num_classes {
            Some(c) if c < labels => {
                return Err(Error::invalid(format!("{c} classes requested but the data has {labels} labels")))
            }
            Some(c) => c,
            None => labels,
        };
        let config = ModelConfig {
            embed_dim: self.embed_dim,
            filter_widths: self.filter_widths.clone(),
            filters_per_width: self.filters_per_width,
            num_classes,
            vocab_size,
            dropout_rate: method.beta(),
            robust_weight: method.lambda(),
            norm_eps: self.norm_eps,
        };
        config.validate()?;
        Ok(config)
    }
}

/// A full grid: methods × folds × seeds, each evaluated at every noise
/// level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Number of cross-validation folds; ignored for presplit data.
    pub folds: usize,
    /// Run only the first this-many folds.
    pub max_folds: Option<usize>,
    pub seeds: Vec<u64>,
    /// Noise draws averaged per noisy evaluation.
    pub noise_draws: usize,
    pub model: ModelTemplate,
    pub train: TrainConfig,
}

impl ExperimentSpec {
    pub fn new(dataset: DatasetSpec, methods: Vec<Method>) -> Self {
        ExperimentSpec {
            dataset,
            methods,
            alphas: vec![0.0, 0.1, 0.2, 0.3],
            sigmas: vec![0.0],
            folds: 10,
            max_folds: None,
            seeds: vec![0],
            noise_draws: 3,
            model: ModelTemplate::default(),
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.alphas.is_empty() || self.sigmas.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("method, alpha, sigma and seed grids must be non-empty"));
        }
        for m in &self.methods {
            m.validate()?;
        }
        for &a in &self.alphas {
            for &s in &self.sigmas {
                NoiseSpec::new(a, s)?;
            }
        }
        if self.noise_draws < 3 {
            return Err(Error::invalid("at least 3 noise draws are required"));
        }
        if self.max_folds == Some(0) {
            return Err(Error::invalid("max_folds must be at least 1"));
        }
        self.train.validate()
    }
}

/// One completed cell at one noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub method: String,
    pub beta: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub fold: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub train_seconds: f64,
}

/// A cell that did not complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub dataset: String,
    pub method: Method,
    pub fold: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<FailedCell>,
}

impl ResultsTable {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        summarize(&self.rows)
    }

    /// Mean accuracy over the rows matching `method` (by display form) and
    /// the noise level.
    pub fn mean_accuracy(&self, method: &Method, alpha: f64, sigma: f64) -> Option<f64> {
        let acc: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| {
                r.method == method.name()
                    && r.beta == method.beta()
                    && r.lambda == method.lambda()
                    && r.alpha == alpha
                    && r.sigma == sigma
            })
            .map(|r| r.accuracy)
            .collect();
        (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
    }
}

/// Vocabulary from the training sentences only.
pub fn encode_split(train: &Corpus, test: &Corpus) -> Result<(Vocab, Vec<Example>, Vec<Example>)> {
    let test = test.relabel(&train.label_names)?;
    let vocab = Vocab::build(&train.examples);
    let enc = |c: &Corpus| {
        c.examples
            .iter()
            .map(|s| Example::new(vocab.encode(&s.tokens), s.label))
            .collect::<Vec<_>>()
    };
    let (a, b) = (enc(train), enc(&test));
    Ok((vocab, a, b))
}

/// A trained cell, ready for evaluation.
#[derive(Clone, Debug)]
pub struct Fitted<T: Real> {
    pub vocab: Vocab,
    pub label_names: Vec<String>,
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pub train_seconds: f64,
}

impl<T: Real> Fitted<T> {
    /// Accuracy on `test`, whose labels are mapped by name onto the
    /// training labels.
    pub fn accuracy(&self, test: &Corpus, noise: NoiseSpec, seed: u64) -> Result<f64> {
        let test = test.relabel(&self.label_names)?;
        let examples: Vec<Example> = test
            .examples
            .iter()
            .map(|s| Example::new(self.vocab.encode(&s.tokens), s.label))
            .collect();
        evaluate(&self.params, &self.config, &examples, noise, seed)
    }
}

/// A fitted model on disk. Parameters are stored in double precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub label_names: Vec<String>,
    pub vocab: Vocab,
    pub config: ModelConfig,
    pub params: ModelParams<f64>,
}

impl SavedModel {
    pub fn from_fitted<T: Real>(f: &Fitted<T>) -> Self {
        SavedModel {
            label_names: f.label_names.clone(),
            vocab: f.vocab.clone(),
            config: f.config.clone(),
            params: f.params.cast(),
        }
    }

    pub fn into_fitted<T: Real>(self) -> Result<Fitted<T>> {
        self.config.validate()?;
        self.params.check(&self.config)?;
        if self.vocab.len() != self.config.vocab_size {
            return Err(Error::invalid("vocabulary size does not match the model"));
        }
        Ok(Fitted {
            params: self.params.cast(),
            vocab: self.vocab,
            label_names: self.label_names,
            config: self.config,
            train_seconds: 0.0,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

/// Seeds for one cell. Initialization and evaluation noise depend on the
/// dataset, fold and master seed only, so methods are compared on equal
/// footing; the training stream also depends on the method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellSeeds {
    pub init: u64,
    pub train: u64,
    pub noise: u64,
}

pub fn cell_seeds(master: u64, dataset: &str, method: &Method, fold: usize) -> CellSeeds {
    let d = hash_str(dataset);
    CellSeeds {
        init: derive_seed(master, &[d, fold as u64, 1]),
        train: derive_seed(master, &[d, method.seed_key(), fold as u64, 2]),
        noise: derive_seed(master, &[d, fold as u64, 3]),
    }
}

fn fold_seed(master: u64, dataset: &str) -> u64 {
    derive_seed(master, &[hash_str(dataset), 4])
}

/// Trains one method on `train`, with labels and vocabulary taken from it.
pub fn fit<T: Real>(
    train_corpus: &Corpus,
    method: Method,
    template: &ModelTemplate,
    tc: &TrainConfig,
    init_seed: u64,
    train_seed: u64,
) -> Result<Fitted<T>> {
    fit_observed(train_corpus, method, template, tc, init_seed, train_seed, &mut |_, _| {})
}

/// As [`fit`], reporting each epoch to `observer`.
pub fn fit_observed<T: Real>(
    train_corpus: &Corpus,
    method: Method,
    template: &ModelTemplate,
    tc: &TrainConfig,
    init_seed: u64,
    train_seed: u64,
    observer: &mut dyn FnMut(&EpochRecord, &ModelParams<T>),
) -> Result<Fitted<T>> {
    let vocab = Vocab::build(&train_corpus.examples);
    let examples: Vec<Example> = train_corpus
        .examples
        .iter()
        .map(|s| Example::new(vocab.encode(&s.tokens), s.label))
        .collect();
    let config = template.config(vocab.len(), train_corpus.num_classes(), method)?;
    let embedding = init_embeddings::<T>(&vocab, config.embed_dim, init_seed, template.pretrained.as_deref())?;
    let params = ModelParams::init(&config, embedding, derive_seed(init_seed, &[5]))?;
    let tc = TrainConfig {
        seed: train_seed,
        ..tc.clone()
    };
    let outcome = train(&config, params, &examples, &tc, observer)?;
    let train_seconds = outcome.history.last().map_or(0.0, |r| r.cumulative_seconds);
    Ok(Fitted {
        vocab,
        label_names: train_corpus.label_names.clone(),
        config,
        params: outcome.params,
        train_seconds,
    })
}

/// Mean accuracy at one noise level: a single clean pass when the noise is
/// zero, otherwise the mean over `draws` independently seeded draws.
pub fn noisy_accuracy<T: Real>(fitted: &Fitted<T>, test: &Corpus, noise: NoiseSpec, draws: usize, seed: u64) -> Result<f64> {
    if noise.is_clean() {
        return fitted.accuracy(test, noise, seed);
    }
    let key = derive_seed(seed, &[noise.alpha.to_bits(), noise.sigma.to_bits()]);
    let mut total = 0.0;
    for d in 0..draws {
        total += fitted.accuracy(test, noise, derive_seed(key, &[d as u64]))?;
    }
    Ok(total / draws as f64)
}

struct Cell {
    method: Method,
    fold: usize,
    seed: u64,
}

fn splits(spec: &ExperimentSpec, master: u64) -> Result<Vec<(Corpus, Corpus)>> {
    let limit = |n: usize| spec.max_folds.map_or(n, |m| m.min(n));
    Ok(match spec.dataset.load()? {
        LoadedCorpus::Presplit { train, test } => vec![(train, test)],
        LoadedCorpus::Whole(corpus) => {
            let plan = make_folds(&corpus, spec.folds, fold_seed(master, &spec.dataset.name))?;
            (0..limit(spec.folds))
                .map(|f| (corpus.subset(&plan.train_indices(f)), corpus.subset(&plan.test_indices(f))))
                .collect()
        }
    })
}

/// Trains every method on every fold for every seed and evaluates each at
/// every noise level. Cells that fail are recorded and the run continues.
pub fn run_noise_sweep(spec: &ExperimentSpec) -> Result<ResultsTable> {
    spec.validate()?;
    match spec.model.precision {
        Precision::Double => sweep::<f64>(spec),
        Precision::Single => sweep::<f32>(spec),
    }
}

fn sweep<T: Real>(spec: &ExperimentSpec) -> Result<ResultsTable> {
    let mut cells = Vec::new();
    let mut data = Vec::new();
    for &seed in &spec.seeds {
        let s = splits(spec, seed)?;
        for fold in 0..s.len() {
            for &method in &spec.methods {
                cells.push((Cell { method, fold, seed }, data.len() + fold));
            }
        }
        data.extend(s);
    }
    let name = &spec.dataset.name;
    let outcomes: Vec<std::result::Result<Vec<ResultRow>, FailedCell>> = cells
        .par_iter()
        .map(|(cell, split)| {
            let (train_c, test_c) = &data[*split];
            run_cell::<T>(spec, cell, train_c, test_c).map_err(|e| FailedCell {
                dataset: name.clone(),
                method: cell.method,
                fold: cell.fold,
                seed: cell.seed,
                error: e.to_string(),
            })
        })
        .collect();
    let mut table = ResultsTable::default();
    for o in outcomes {
        match o {
            Ok(rows) => table.rows.extend(rows),
            Err(f) => table.failures.push(f),
        }
    }
    Ok(table)
}

fn run_cell<T: Real>(spec: &ExperimentSpec, cell: &Cell, train_c: &Corpus, test_c: &Corpus) -> Result<Vec<ResultRow>> {
    let name = &spec.dataset.name;
    let seeds = cell_seeds(cell.seed, name, &cell.method, cell.fold);
    let fitted = fit::<T>(train_c, cell.method, &spec.model, &spec.train, seeds.init, seeds.train)?;
    let mut rows = Vec::new();
    for &sigma in &spec.sigmas {
        for &alpha in &spec.alphas {
            let noise = NoiseSpec::new(alpha, sigma)?;
            let accuracy = noisy_accuracy(&fitted, test_c, noise, spec.noise_draws, seeds.noise)?;
            rows.push(row(name, &cell.method, noise, cell.fold, cell.seed, accuracy, fitted.train_seconds));
        }
    }
    Ok(rows)
}

fn row(dataset: &str, method: &Method, noise: NoiseSpec, fold: usize, seed: u64, accuracy: f64, secs: f64) -> ResultRow {
    ResultRow {
        dataset: dataset.to_string(),
        method: method.name().to_string(),
        beta: method.beta(),
        lambda: method.lambda(),
        alpha: noise.alpha,
        sigma: noise.sigma,
        fold,
        seed,
        accuracy,
        train_seconds: secs,
    }
}

/// Trains on all of `spec.dataset` and evaluates on `test` without noise.
/// Rows are labelled `train->test` with fold 0.
pub fn run_crossdomain(spec: &ExperimentSpec, test: &DatasetSpec) -> Result<ResultsTable> {
    spec.validate()?;
    match spec.model.precision {
        Precision::Double => crossdomain::<f64>(spec, test),
        Precision::Single => crossdomain::<f32>(spec, test),
    }
}

fn crossdomain<T: Real>(spec: &ExperimentSpec, test: &DatasetSpec) -> Result<ResultsTable> {
    let train_c = spec.dataset.load_whole()?;
    let test_c = test.load_whole()?.relabel(&train_c.label_names)?;
    let name = format!("{}->{}", spec.dataset.name, test.name);
    let mut cells = Vec::new();
    for &seed in &spec.seeds {
        for &method in &spec.methods {
            cells.push(Cell { method, fold: 0, seed });
        }
    }
    let outcomes: Vec<_> = cells
        .par_iter()
        .map(|cell| {
            let seeds = cell_seeds(cell.seed, &spec.dataset.name, &cell.method, 0);
            fit::<T>(&train_c, cell.method, &spec.model, &spec.train, seeds.init, seeds.train)
                .and_then(|f| {
                    let acc = f.accuracy(&test_c, NoiseSpec::default(), seeds.noise)?;
                    Ok(row(&name, &cell.method, NoiseSpec::default(), 0, cell.seed, acc, f.train_seconds))
                })
                .map_err(|e| FailedCell {
                    dataset: name.clone(),
                    method: cell.method,
                    fold: 0,
                    seed: cell.seed,
                    error: e.to_string(),
                })
        })
        .collect();
    let mut table = ResultsTable::default();
    for o in outcomes {
        match o {
            Ok(r) => table.rows.push(r),
            Err(f) => table.failures.push(f),
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingPoint {
    pub epoch: usize,
    pub epoch_seconds: f64,
    pub cumulative_seconds: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSeries {
    pub method: Method,
    pub points: Vec<TimingPoint>,
}

/// Per-epoch time and accuracy for each method on the first fold and first
/// seed. Methods run one after another so their clocks do not overlap.
pub fn run_timing(spec: &ExperimentSpec) -> Result<Vec<TimingSeries>> {
    spec.validate()?;
    match spec.model.precision {
        Precision::Double => timing::<f64>(spec),
        Precision::Single => timing::<f32>(spec),
    }
}

fn timing<T: Real>(spec: &ExperimentSpec) -> Result<Vec<TimingSeries>> {
    let master = spec.seeds[0];
    let (train_c, test_c) = splits(spec, master)?.swap_remove(0);
    let (vocab, train_ex, test_ex) = encode_split(&train_c, &test_c)?;
    let mut out = Vec::new();
    for &method in &spec.methods {
        let seeds = cell_seeds(master, &spec.dataset.name, &method, 0);
        let config = spec.model.config(vocab.len(), train_c.num_classes(), method)?;
        let embedding = init_embeddings::<T>(&vocab, config.embed_dim, seeds.init, spec.model.pretrained.as_deref())?;
        let params = ModelParams::init(&config, embedding, derive_seed(seeds.init, &[5]))?;
        let tc = TrainConfig {
            seed: seeds.train,
            track_train_accuracy: true,
            ..spec.train.clone()
        };
        // Untimed pass so that the first method does not absorb cold-start costs.
        let warm = &train_ex[..tc.batch_size.min(train_ex.len())];
        let objective = tc.objective.unwrap_or_else(|| Objective::for_config(&config));
        objective_and_grad(&params, &config, warm, objective, &mut ChaCha8Rng::seed_from_u64(0))?;

        let mut points = Vec::new();
        let mut failure = None;
        train(&config, params, &train_ex, &tc, &mut |r, p| {
            match evaluate(p, &config, &test_ex, NoiseSpec::default(), seeds.noise) {
                Ok(test_accuracy) => points.push(TimingPoint {
                    epoch: r.epoch,
                    epoch_seconds: r.epoch_seconds,
                    cumulative_seconds: r.cumulative_seconds,
                    train_accuracy: r.train_accuracy.unwrap_or(f64::NAN),
                    test_accuracy,
                }),
                Err(e) => failure = Some(e),
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        out.push(TimingSeries { method, points });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
