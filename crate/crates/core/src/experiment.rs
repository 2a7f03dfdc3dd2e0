//! Experiment configs, named presets, run artifacts and run comparison.
//!
//! A run directory holds `config.resolved.json`, `metrics.csv`,
//! `theory_report.json` and `final_models/`, where each model is a raw
//! little-endian `f64` array (`*.f64`) next to a JSON header (`*.json`).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::comms::GammaSchedule;
use crate::data::{load_idx, partition_noniid, synthetic_blobs, synthetic_strongly_convex, LabeledDataset, PartitionSpec, QuadraticFamily};
use crate::error::{Error, Result};
use crate::federation::{
    run_training_with, Algorithm, ClientTask, HyperParams, MetricsLog, MetricsRecord, TrainingConfig, TrainingOutcome,
    METRICS_HEADER,
};
use crate::math::{sparsity_ratio, ParamVector};
use crate::models::{init_params, InitScheme, ModelKind, ModelPreset, ModelSpec};
use crate::rng::{stream, Purpose};
use crate::theory::{
    estimate_noise_terms, first_order_residuals, measure_envelope_curvature, penalty_grad_bound, smoothness_constants,
    stationarity_series, synthetic_bounds, ResidualSummary, TheoryReport,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const DATA_DIR_ENV: &str = "FEDHIER_DATA_DIR";

const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// MNIST IDX files (train and test pooled before partitioning). Without
    /// `dir`, looks in `$FEDHIER_DATA_DIR/mnist`.
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
    },
    Blobs {
        input_dim: usize,
        classes: usize,
        per_class: usize,
        noise: f64,
        seed: u64,
    },
    /// Quadratic clients `1/2 ||theta - a_k||^2`; no model, no partition.
    Quadratic { dim: usize, heterogeneity: f64, seed: u64 },
}

impl DatasetConfig {
    pub fn mnist_dir(dir: &Option<PathBuf>) -> PathBuf {
        match dir {
            Some(d) => d.clone(),
            None => std::env::var_os(DATA_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("data"))
                .join("mnist"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryOptions {
    /// Mini-batch repeats for the noise estimates; 0 skips them.
    #[serde(default = "two")]
    pub noise_repeats: usize,
    /// Window for the stationarity summary; capped at the log length.
    #[serde(default = "fifty")]
    pub stationarity_window: usize,
    /// Curvature probes on quadratic tasks.
    #[serde(default = "hundred")]
    pub curvature_probes: usize,
}

fn two() -> usize {
    2
}

fn fifty() -> usize {
    50
}

fn hundred() -> usize {
    100
}

impl Default for TheoryOptions {
    fn default() -> Self {
        TheoryOptions {
            noise_repeats: 2,
            stationarity_window: 50,
            curvature_probes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub name: String,
    pub dataset: DatasetConfig,
    /// Architecture; input and output widths follow the dataset.
    #[serde(default)]
    pub model: Option<ModelPreset>,
    #[serde(default)]
    pub l2_reg: f64,
    #[serde(default = "glorot")]
    pub init: InitScheme,
    #[serde(default)]
    pub partition: Option<PartitionSpec>,
    pub training: TrainingConfig,
    pub output_dir: PathBuf,
    /// Also dump every client's personalized model.
    #[serde(default)]
    pub save_client_models: bool,
    #[serde(default)]
    pub theory: TheoryOptions,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn glorot() -> InitScheme {
    InitScheme::GlorotUniform
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            problems.push(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if let Err(Error::Config(p)) = self.training.validate() {
            problems.extend(p);
        }
        if !(self.l2_reg >= 0.0) {
            problems.push(format!("l2_reg must be nonnegative, got {}", self.l2_reg));
        }
        let clients = self.training.hp.total_clients();
        match &self.dataset {
            DatasetConfig::Quadratic { dim, heterogeneity, .. } => {
                if *dim == 0 {
                    problems.push("quadratic dim must be positive".into());
                }
                if !(*heterogeneity >= 0.0) {
                    problems.push("quadratic heterogeneity must be nonnegative".into());
                }
            }
            other => {
                if self.model.is_none() {
                    problems.push("model is required for labeled datasets".into());
                }
                match &self.partition {
                    None => problems.push("partition is required for labeled datasets".into()),
                    Some(p) => {
                        if p.num_clients != clients {
                            problems.push(format!(
                                "partition has {} clients but edges x clients_per_edge = {clients}",
                                p.num_clients
                            ));
                        }
                        let classes = match other {
                            DatasetConfig::Blobs { classes, .. } => *classes,
                            _ => 10,
                        };
                        if let Err(Error::Config(pp)) = p.validate(classes) {
                            problems.extend(pp);
                        }
                    }
                }
                if let DatasetConfig::Mnist { dir } = other {
                    let dir = DatasetConfig::mnist_dir(dir);
                    for f in MNIST_FILES {
                        if !dir.join(f).is_file() {
                            problems.push(format!(
                                "missing dataset file {} (set {DATA_DIR_ENV} or dataset.dir)",
                                dir.join(f).display()
                            ));
                        }
                    }
                }
                if let DatasetConfig::Blobs {
                    input_dim,
                    classes,
                    per_class,
                    ..
                } = other
                {
                    if *input_dim == 0 || *classes == 0 || *per_class == 0 {
                        problems.push("blob sizes must be positive".into());
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Hash of the config with seeds, name and output location blanked, so
    /// runs that differ only by seed share it.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("name");
            obj.remove("output_dir");
            if let Some(t) = obj.get_mut("training").and_then(|t| t.as_object_mut()) {
                t.remove("seed");
                t.remove("workers");
            }
        }
        let hash = Sha256::digest(v.to_string().as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn setting1_partition(num_clients: usize) -> PartitionSpec {
    PartitionSpec {
        num_clients,
        labels_per_client: 2,
        train_per_class: 200,
        test_per_class: 800,
        size_jitter: 0.25,
        seed: 1,
    }
}

pub const PRESETS: &[&str] = &[
    "mnist-sfedhp-setting1",
    "mnist-mlr-strongcvx",
    "mnist-sparse-fig6",
    "synthetic-quadratic",
    "synthetic-blobs",
];

/// Named configurations; outputs go to `runs/<name>` unless overridden.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base_hp = HyperParams::default();
    let cfg = match name {
        // MNIST setting 1: 4 edges x 5 clients, all edges every round.
        "mnist-sfedhp-setting1" => {
            let hp = HyperParams {
                edges: 4,
                clients_per_edge: 5,
                edges_sampled: 4,
                rounds: 800,
                ..base_hp
            };
            let mut training = TrainingConfig::new(Algorithm::Sfedhp, hp, 1);
            training.objective_iters = 0;
            ExperimentConfig {
                schema_version: SCHEMA_VERSION,
                name: name.into(),
                dataset: DatasetConfig::Mnist { dir: None },
                model: Some(ModelPreset::PaperCount),
                l2_reg: 0.0,
                init: InitScheme::GlorotUniform,
                partition: Some(setting1_partition(20)),
                training,
                output_dir: PathBuf::from("runs").join(name),
                save_client_models: false,
                theory: TheoryOptions::default(),
            }
        }
        // Strongly convex comparison: 2 edges x 10 clients, one edge per round.
        "mnist-mlr-strongcvx" => {
            let hp = HyperParams {
                edges: 2,
                clients_per_edge: 10,
                edges_sampled: 1,
                rounds: 200,
                ..base_hp
            };
            ExperimentConfig {
                schema_version: SCHEMA_VERSION,
                name: name.into(),
                dataset: DatasetConfig::Mnist { dir: None },
                model: Some(ModelPreset::Mlr),
                l2_reg: 1e-3,
                init: InitScheme::Zeros,
                partition: Some(setting1_partition(20)),
                training: TrainingConfig::new(Algorithm::Sfedhp, hp, 1),
                output_dir: PathBuf::from("runs").join(name),
                save_client_models: false,
                theory: TheoryOptions::default(),
            }
        }
        // Nonconvex sparse run with the penalty schedule and sparse upload coding.
        "mnist-sparse-fig6" => {
            let hp = HyperParams {
                edges: 2,
                clients_per_edge: 10,
                edges_sampled: 1,
                rounds: 200,
                ..base_hp
            };
            let mut training = TrainingConfig::new(Algorithm::Sfedhp, hp, 1);
            training.gamma_schedule = Some(GammaSchedule::default());
            training.sparse_coding = true;
            training.objective_iters = 0;
            ExperimentConfig {
                schema_version: SCHEMA_VERSION,
                name: name.into(),
                dataset: DatasetConfig::Mnist { dir: None },
                model: Some(ModelPreset::PaperCount),
                l2_reg: 0.0,
                init: InitScheme::GlorotUniform,
                partition: Some(setting1_partition(20)),
                training,
                output_dir: PathBuf::from("runs").join(name),
                save_client_models: false,
                theory: TheoryOptions::default(),
            }
        }
        "synthetic-quadratic" => {
            let hp = HyperParams {
                edges: 4,
                clients_per_edge: 5,
                edges_sampled: 2,
                rounds: 50,
                edge_rounds: 5,
                inner_iters: 20,
                eta1: 0.01,
                inner_step: Some(0.03),
                ..base_hp
            };
            let mut training = TrainingConfig::new(Algorithm::Sfedhp, hp, 1);
            training.objective_step = 0.05;
            ExperimentConfig {
                schema_version: SCHEMA_VERSION,
                name: name.into(),
                dataset: DatasetConfig::Quadratic {
                    dim: 20,
                    heterogeneity: 1.0,
                    seed: 7,
                },
                model: None,
                l2_reg: 0.0,
                init: InitScheme::Zeros,
                partition: None,
                training,
                output_dir: PathBuf::from("runs").join(name),
                save_client_models: false,
                theory: TheoryOptions::default(),
            }
        }
        "synthetic-blobs" => {
            let hp = HyperParams {
                edges: 2,
                clients_per_edge: 3,
                edges_sampled: 1,
                rounds: 20,
                edge_rounds: 5,
                ..base_hp
            };
            ExperimentConfig {
                schema_version: SCHEMA_VERSION,
                name: name.into(),
                dataset: DatasetConfig::Blobs {
                    input_dim: 16,
                    classes: 4,
                    per_class: 150,
                    noise: 0.15,
                    seed: 5,
                },
                model: Some(ModelPreset::Mlr),
                l2_reg: 1e-3,
                init: InitScheme::Zeros,
                partition: Some(PartitionSpec {
                    num_clients: 6,
                    labels_per_client: 2,
                    train_per_class: 20,
                    test_per_class: 10,
                    size_jitter: 0.0,
                    seed: 3,
                }),
                training: TrainingConfig::new(Algorithm::Sfedhp, hp, 1),
                output_dir: PathBuf::from("runs").join(name),
                save_client_models: false,
                theory: TheoryOptions::default(),
            }
        }
        other => {
            return Err(Error::config(format!(
                "unknown preset '{other}' (known: {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(cfg)
}

/// Client tasks and the starting model of an experiment.
pub struct Prepared {
    pub tasks: Vec<Arc<ClientTask>>,
    pub init: ParamVector,
    pub spec: Option<ModelSpec>,
    pub quadratic: Option<QuadraticFamily>,
}

pub fn load_mnist(dir: &Path) -> Result<LabeledDataset> {
    let train = load_idx(dir.join(MNIST_FILES[0]), dir.join(MNIST_FILES[1]))?;
    let test = load_idx(dir.join(MNIST_FILES[2]), dir.join(MNIST_FILES[3]))?;
    train.concat(&test, "mnist")
}

fn model_spec(preset: ModelPreset, input_dim: usize, classes: usize, l2_reg: f64) -> ModelSpec {
    let mut spec = ModelSpec::preset(preset, l2_reg);
    spec.input_dim = input_dim;
    spec.num_classes = classes;
    if spec.kind == ModelKind::Mlp {
        spec.l2_reg = l2_reg;
    }
    spec
}

/// Loads data, partitions it and draws the initial model.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let hp = &cfg.training.hp;
    let seed = cfg.training.seed;
    if let DatasetConfig::Quadratic {
        dim,
        heterogeneity,
        seed: data_seed,
    } = &cfg.dataset
    {
        let family = synthetic_strongly_convex(*dim, hp.total_clients(), *heterogeneity, *data_seed)?;
        let tasks = family
            .targets
            .iter()
            .map(|t| Arc::new(ClientTask::Quadratic { target: t.clone() }))
            .collect();
        return Ok(Prepared {
            tasks,
            init: ParamVector::zeros(*dim),
            spec: None,
            quadratic: Some(family),
        });
    }
    let data = match &cfg.dataset {
        DatasetConfig::Mnist { dir } => load_mnist(&DatasetConfig::mnist_dir(dir))?,
        DatasetConfig::Blobs {
            input_dim,
            classes,
            per_class,
            noise,
            seed,
        } => synthetic_blobs(*input_dim, *classes, *per_class, *noise, *seed)?,
        DatasetConfig::Quadratic { .. } => unreachable!(),
    };
    let data = Arc::new(data);
    let preset = cfg.model.expect("validated");
    let spec = model_spec(preset, data.input_dim(), data.num_classes, cfg.l2_reg);
    spec.validate()?;
    let partition = cfg.partition.as_ref().expect("validated");
    let shards = partition_noniid(&data, partition)?;
    let shared = Arc::new(spec.clone());
    let tasks = shards
        .into_iter()
        .map(|s| {
            Arc::new(ClientTask::Supervised {
                spec: Arc::clone(&shared),
                train: s.train,
                test: s.test,
            })
        })
        .collect();
    let mut rng = stream(seed, Purpose::Init, 0, 0);
    let init = init_params(&spec, cfg.init, &mut rng);
    Ok(Prepared {
        tasks,
        init,
        spec: Some(spec),
        quadratic: None,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub round: usize,
    #[serde(default)]
    pub spec: Option<ModelSpec>,
}

/// Writes `<stem>.f64` (little-endian) and `<stem>.json`.
pub fn write_model(dir: &Path, stem: &str, params: &ParamVector, header: &ModelHeader) -> Result<()> {
    let mut bytes = Vec::with_capacity(params.dim() * 8);
    for v in params.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join(format!("{stem}.f64")), bytes)?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(header)?)?;
    Ok(())
}

pub fn read_model(dir: &Path, stem: &str) -> Result<(ModelHeader, ParamVector)> {
    let header: ModelHeader = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    let bytes = fs::read(dir.join(format!("{stem}.f64")))?;
    let expected: usize = header.shape.iter().product();
    if bytes.len() != expected * 8 {
        return Err(Error::Schema(format!(
            "{stem}.f64 holds {} bytes, header declares {expected} values",
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, ParamVector::new(values)?))
}

pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub outcome: TrainingOutcome,
    pub report: TheoryReport,
}

/// Validates, loads data, then writes all artifacts under `cfg.output_dir`.
/// Nothing is created on disk if validation or data loading fails.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let prepared = prepare(cfg)?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(out.join("final_models"))?;
    fs::write(out.join("config.resolved.json"), cfg.to_json()?)?;

    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(out.join("metrics.csv"))?;
    writer.write_record(METRICS_HEADER.split(','))?;
    writer.flush()?;
    let outcome = run_training_with(&cfg.training, &prepared.tasks, &prepared.init, |r: &MetricsRecord| {
        writer.serialize(r)?;
        writer.flush()?;
        Ok(())
    })?;
    drop(writer);

    let report = theory_report(cfg, &prepared, &outcome)?;
    fs::write(out.join("theory_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;

    let models = out.join("final_models");
    let w = outcome.state.global();
    let header = ModelHeader {
        dtype: "f64le".into(),
        shape: vec![w.dim()],
        round: outcome.state.round(),
        spec: prepared.spec.clone(),
    };
    write_model(&models, "global", w, &header)?;
    if cfg.save_client_models {
        for c in outcome.state.clients() {
            write_model(&models, &format!("client_{:03}", c.gid), &c.theta, &header)?;
        }
    }
    Ok(RunArtifacts {
        output_dir: out,
        outcome,
        report,
    })
}

fn theory_report(cfg: &ExperimentConfig, prepared: &Prepared, outcome: &TrainingOutcome) -> Result<TheoryReport> {
    let hp = &cfg.training.hp;
    let mu = match (&prepared.quadratic, &prepared.spec) {
        (Some(_), _) => 1.0,
        (None, Some(s)) if s.kind == ModelKind::Mlr => s.l2_reg,
        _ => 0.0,
    };
    let mut constants = smoothness_constants(hp, mu)?;
    let w = outcome.state.global();
    let nonzero = sparsity_ratio(w.as_slice(), cfg.training.eps_zero)?.nonzero;
    constants.d_s = Some(nonzero);
    let gamma1 = match &outcome.gamma_switched_at {
        Some(_) => cfg.training.gamma_schedule.as_ref().map_or(hp.gamma1, |s| s.gamma_tiny),
        None => cfg.training.gamma_schedule.as_ref().map_or(hp.gamma1, |s| s.gamma_init),
    };
    let noise = if cfg.theory.noise_repeats >= 2 && outcome.state.round() > 0 {
        let seeds: Vec<u64> = (0..cfg.theory.noise_repeats as u64).map(|r| cfg.training.seed ^ (r + 1) << 32).collect();
        let n = estimate_noise_terms(&outcome.state, hp, gamma1, &seeds)?;
        constants.delta_sq_est = Some(n.delta_sq);
        constants.gamma_ell_sq_est = Some(n.gamma_ell_sq);
        constants.sigma_ell_sq_est = Some(n.sigma_ell_sq);
        Some(n)
    } else {
        None
    };
    let residuals = ResidualSummary::from_residuals(&first_order_residuals(&outcome.state, hp)?);
    let usable = outcome.log.records.iter().all(|r| r.grad_norm_sq_est.is_finite());
    let stationarity = if usable && !outcome.log.records.is_empty() {
        let window = cfg.theory.stationarity_window.min(outcome.log.records.len() / 2).max(1);
        Some(stationarity_series(&outcome.log, window)?)
    } else {
        None
    };
    let (curvature, bounds) = match &prepared.quadratic {
        Some(family) => (
            Some(measure_envelope_curvature(family, hp, cfg.theory.curvature_probes.max(1), cfg.training.seed)?),
            synthetic_bounds(family, hp, &prepared.init, noise.map_or(0.0, |n| n.delta_sq), nonzero)?,
        ),
        None => (None, None),
    };
    Ok(TheoryReport {
        constants,
        residuals,
        noise,
        stationarity,
        penalty_grad: Some(penalty_grad_bound(w, hp.rho, cfg.training.eps_zero)?),
        curvature,
        synthetic_bounds: bounds,
    })
}

/// Whether larger values of a metric are better.
fn higher_is_better(metric: &str) -> bool {
    matches!(metric, "global_test_acc" | "mean_personal_acc")
}

fn metric_value(r: &MetricsRecord, metric: &str) -> Option<f64> {
    Some(match metric {
        "global_test_acc" => r.global_test_acc,
        "mean_personal_acc" => r.mean_personal_acc,
        "objective_est" => r.objective_est,
        "grad_norm_sq_est" => r.grad_norm_sq_est,
        "sparsity_w" => r.sparsity_w,
        "cumulative_bits" => r.cumulative_bits as f64,
        "wall_ms" => r.wall_ms as f64,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub run: String,
    pub config_hash: String,
    pub rounds: usize,
    pub final_value: f64,
    pub best_value: f64,
    /// `final_value` minus the first run's.
    pub diff_vs_first: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub config_hash: String,
    pub n: usize,
    pub mean_final: f64,
    pub std_final: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub metric: String,
    pub runs: Vec<RunRow>,
    pub groups: Vec<GroupRow>,
}

/// Final and best value of `metric` for every run, plus mean and sample
/// standard deviation of the final value per config hash.
pub fn compare_runs(run_dirs: &[PathBuf], metric: &str) -> Result<Comparison> {
    if run_dirs.len() < 2 {
        return Err(Error::invalid("comparison needs at least two run directories"));
    }
    if metric == "round" || !METRICS_HEADER.split(',').any(|c| c == metric) {
        return Err(Error::Schema(format!("'{metric}' is not a metrics column")));
    }
    let mut runs = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let log = MetricsLog::load(dir.join("metrics.csv"))?;
        let cfg = ExperimentConfig::load(dir.join("config.resolved.json"))?;
        let values: Vec<f64> = log.records.iter().filter_map(|r| metric_value(r, metric)).collect();
        let final_value = values.last().copied().unwrap_or(f64::NAN);
        let best_value = if higher_is_better(metric) {
            values.iter().copied().fold(f64::NAN, f64::max)
        } else {
            values.iter().copied().fold(f64::NAN, f64::min)
        };
        runs.push(RunRow {
            run: dir.display().to_string(),
            config_hash: cfg.config_hash(),
            rounds: log.records.last().map_or(0, |r| r.round),
            final_value,
            best_value,
            diff_vs_first: 0.0,
        });
    }
    let first = runs[0].final_value;
    for r in &mut runs {
        r.diff_vs_first = r.final_value - first;
    }
    let mut by_hash: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &runs {
        by_hash.entry(&r.config_hash).or_default().push(r.final_value);
    }
    let groups = by_hash
        .into_iter()
        .map(|(h, v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            GroupRow {
                config_hash: h.to_string(),
                n,
                mean_final: mean,
                std_final: std,
            }
        })
        .collect();
    Ok(Comparison {
        metric: metric.to_string(),
        runs,
        groups,
    })
}

impl Comparison {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.runs {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_group_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for g in &self.groups {
            w.serialize(g)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "metric: {}", self.metric)?;
        writeln!(f, "{:<40} {:>16} {:>7} {:>12} {:>12} {:>12}", "run", "config", "rounds", "final", "best", "diff")?;
        for r in &self.runs {
            writeln!(
                f,
                "{:<40} {:>16} {:>7} {:>12.6} {:>12.6} {:>12.6}",
                r.run, r.config_hash, r.rounds, r.final_value, r.best_value, r.diff_vs_first
            )?;
        }
        writeln!(f)?;
        writeln!(f, "{:<16} {:>3} {:>24}", "config", "n", "final mean ± std")?;
        for g in &self.groups {
            writeln!(f, "{:<16} {:>3} {:>12.6} ± {:<10.6}", g.config_hash, g.n, g.mean_final, g.std_final)?;
        }
        Ok(())
    }
}
