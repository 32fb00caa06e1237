//! Command implementations behind the `graphflow` binary: training runs,
//! checkpoint evaluation, sampling, and l1 sweeps. Everything is a plain
//! function over a resolved [`RunConfig`] so tests can drive commands
//! without spawning processes.

use graphflow::conditioners::{autoregressive_adjacency, coupling_adjacency, ConditionerKind};
use graphflow::data::{
    self, load_csv, permute_features, DatasetBundle, SemSpec, ToyName,
};
use graphflow::error::{Error, Result};
use graphflow::graph::{BinaryDag, GraphExport};
use graphflow::normalizers::NormalizerKind;
use graphflow::trainer::{train, Topology, TrainConfig, TrainRun};
use graphflow::{FlowModel, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Dataset section of a run configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Generator name: tree | 8pairs | pairs:<k> | arith_circuit | toy:<name>.
    #[serde(default)]
    pub generator: Option<String>,
    /// CSV path, alternative to a generator.
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub permute: bool,
    #[serde(default = "default_true")]
    pub standardize: bool,
    /// Train/val/test fractions for CSV data.
    #[serde(default = "default_fractions")]
    pub fractions: (f64, f64, f64),
    /// Optional SEM spec path for the arithmetic-circuit generator.
    #[serde(default)]
    pub sem_spec: Option<PathBuf>,
}

fn default_n() -> usize {
    15_000
}

fn default_true() -> bool {
    true
}

fn default_fractions() -> (f64, f64, f64) {
    (0.6, 0.0667, 0.3333)
}

/// Model section.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_conditioner")]
    pub conditioner: String,
    #[serde(default = "default_normalizer")]
    pub normalizer: String,
    /// learn | ground-truth | autoregressive | coupling[:k] | prescribed:<file>
    #[serde(default = "default_topology")]
    pub topology: String,
    #[serde(default = "default_embed")]
    pub embed_size: usize,
    #[serde(default = "default_cond_hidden")]
    pub conditioner_hidden: Vec<usize>,
    #[serde(default = "default_integrand_hidden")]
    pub integrand_hidden: Vec<usize>,
    #[serde(default = "default_quad")]
    pub quad_points: usize,
    #[serde(default = "default_steps")]
    pub flow_steps: usize,
}

fn default_conditioner() -> String {
    "graphical".into()
}
fn default_normalizer() -> String {
    "affine".into()
}
fn default_topology() -> String {
    "learn".into()
}
fn default_embed() -> usize {
    30
}
fn default_cond_hidden() -> Vec<usize> {
    vec![100, 100, 100]
}
fn default_integrand_hidden() -> Vec<usize> {
    vec![50, 50, 50]
}
fn default_quad() -> usize {
    50
}
fn default_steps() -> usize {
    1
}

/// Training section; mirrors the trainer configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(default)]
    pub l1: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_min_delta")]
    pub patience_min_delta: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub lambda0: f64,
    #[serde(default = "default_mu0")]
    pub mu0: f64,
    #[serde(default = "default_adj_decay")]
    pub adjacency_lr_decay: f64,
    #[serde(default)]
    pub double_square_gate: bool,
}

fn default_batch() -> usize {
    100
}
fn default_lr() -> f64 {
    1e-3
}
fn default_wd() -> f64 {
    1e-5
}
fn default_epochs() -> usize {
    1000
}
fn default_patience() -> usize {
    10
}
fn default_min_delta() -> f64 {
    0.01
}
fn default_temperature() -> f64 {
    0.5
}
fn default_mu0() -> f64 {
    0.1
}
fn default_adj_decay() -> f64 {
    0.25
}

impl Default for TrainingConfig {
    fn default() -> Self {
        toml::from_str("").expect("all training fields have defaults")
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        toml::from_str("").expect("all model fields have defaults")
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        toml::from_str("").expect("all dataset fields have defaults")
    }
}

/// A full run configuration, as parsed from TOML.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Seed resolution: explicit config beats the GRAPHFLOW_SEED environment
    /// variable, which beats zero.
    pub fn resolved_seed(&self) -> u64 {
        self.training.seed.unwrap_or_else(|| {
            std::env::var("GRAPHFLOW_SEED")
                .ok()
                .and_then(|s| s.parse().ok())
                .unwrap_or(0)
        })
    }
}

pub fn parse_conditioner(name: &str, d: usize, topology: &str) -> Result<ConditionerKind> {
    match name {
        "graphical" => Ok(ConditionerKind::Graphical),
        "autoregressive" => Ok(ConditionerKind::Autoregressive),
        "coupling" => {
            let k = topology
                .strip_prefix("coupling:")
                .and_then(|s| s.parse().ok())
                .unwrap_or(d / 2);
            Ok(ConditionerKind::Coupling { k })
        }
        other => Err(Error::Config(format!(
            "unknown conditioner '{other}'; expected one of graphical, autoregressive, coupling"
        ))),
    }
}

pub fn parse_normalizer(name: &str) -> Result<NormalizerKind> {
    match name {
        "affine" => Ok(NormalizerKind::Affine),
        "monotonic" => Ok(NormalizerKind::Monotonic),
        other => Err(Error::Config(format!(
            "unknown normalizer '{other}'; expected affine or monotonic"
        ))),
    }
}

/// Resolve the topology string against the dataset.
pub fn parse_topology(spec: &str, d: usize, bundle: &DatasetBundle) -> Result<Topology> {
    if spec == "learn" {
        return Ok(Topology::Learn);
    }
    let dag: BinaryDag = if spec == "ground-truth" {
        bundle
            .ground_truth
            .clone()
            .ok_or_else(|| Error::Config("dataset has no ground-truth adjacency".into()))?
    } else if spec == "autoregressive" {
        BinaryDag::from_matrix(autoregressive_adjacency(d))?
    } else if spec == "coupling" {
        BinaryDag::from_matrix(coupling_adjacency(d, d / 2))?
    } else if let Some(k) = spec.strip_prefix("coupling:") {
        let k: usize = k
            .parse()
            .map_err(|_| Error::Config(format!("bad coupling split '{spec}'")))?;
        BinaryDag::from_matrix(coupling_adjacency(d, k))?
    } else if let Some(path) = spec.strip_prefix("prescribed:") {
        let text = std::fs::read_to_string(path)?;
        let export: GraphExport = serde_json::from_str(&text)?;
        let dag = export.to_dag()?;
        if dag.dim() != d {
            return Err(Error::Config(format!(
                "prescribed graph has d={}, dataset has d={d}",
                dag.dim()
            )));
        }
        dag
    } else {
        return Err(Error::Config(format!(
            "unknown topology '{spec}'; expected learn, ground-truth, autoregressive, \
             coupling[:k], or prescribed:<file>"
        )));
    };
    Ok(Topology::Prescribed(GraphExport::from_dag(&dag)))
}

/// Build the dataset named by the configuration.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<DatasetBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bundle = match (&cfg.generator, &cfg.csv) {
        (Some(name), None) => {
            let mut b = match name.as_str() {
                "tree" => data::gen_tree(cfg.n, &mut rng)?,
                "8pairs" => data::gen_8pairs(cfg.n, &mut rng)?,
                "arith_circuit" => {
                    let spec = match &cfg.sem_spec {
                        Some(path) => {
                            let text = std::fs::read_to_string(path)?;
                            serde_json::from_str(&text)?
                        }
                        None => SemSpec::default_arith_circuit(),
                    };
                    data::gen_arith_circuit(cfg.n, &mut rng, &spec)?
                }
                other => {
                    if let Some(k) = other.strip_prefix("pairs:") {
                        let k: usize = k
                            .parse()
                            .map_err(|_| Error::Config(format!("bad pair count in '{other}'")))?;
                        data::gen_pairs(k, cfg.n, &mut rng)?
                    } else if let Some(toy) = other.strip_prefix("toy:") {
                        let matrix = data::gen_2d_toy(ToyName::parse(toy)?, cfg.n, &mut rng)?;
                        let rows: Vec<Vec<f64>> =
                            (0..matrix.rows()).map(|r| matrix.row(r).to_vec()).collect();
                        let n_test = rows.len() / 3;
                        let n_tr = rows.len() - n_test;
                        let n_val = n_tr / 10;
                        DatasetBundle {
                            train: Tensor::from_rows(&rows[..n_tr - n_val]),
                            val: Tensor::from_rows(&rows[n_tr - n_val..n_tr]),
                            test: Tensor::from_rows(&rows[n_tr..]),
                            columns: vec!["x1".into(), "x2".into()],
                            ground_truth: None,
                            permutation: vec![0, 1],
                            standardization: None,
                            seed: Some(cfg.seed),
                        }
                    } else {
                        return Err(Error::Config(format!(
                            "unknown generator '{other}'; expected tree, 8pairs, pairs:<k>, \
                             arith_circuit, or toy:<name>"
                        )));
                    }
                }
            };
            b.seed = Some(cfg.seed);
            b
        }
        (None, Some(path)) => load_csv(path, cfg.fractions, false, &mut rng)?,
        (Some(_), Some(_)) => {
            return Err(Error::Config("specify either a generator or a csv path, not both".into()))
        }
        (None, None) => {
            return Err(Error::Config("dataset needs a generator name or a csv path".into()))
        }
    };
    if cfg.permute {
        bundle = permute_features(&bundle, &mut rng);
    }
    if cfg.standardize {
        bundle.standardize();
    }
    Ok(bundle)
}

pub fn to_train_config(run: &RunConfig, bundle: &DatasetBundle) -> Result<TrainConfig> {
    let d = bundle.d();
    let conditioner = parse_conditioner(&run.model.conditioner, d, &run.model.topology)?;
    let normalizer = parse_normalizer(&run.model.normalizer)?;
    let topology = parse_topology(&run.model.topology, d, bundle)?;
    Ok(TrainConfig {
        conditioner,
        normalizer,
        topology,
        l1: run.training.l1,
        batch_size: run.training.batch_size,
        learning_rate: run.training.learning_rate,
        weight_decay: run.training.weight_decay,
        embed_size: run.model.embed_size,
        conditioner_hidden: run.model.conditioner_hidden.clone(),
        integrand_hidden: run.model.integrand_hidden.clone(),
        quad_points: run.model.quad_points,
        max_epochs: run.training.max_epochs,
        patience: run.training.patience,
        patience_min_delta: run.training.patience_min_delta,
        seed: run.resolved_seed(),
        temperature: run.training.temperature,
        alpha: run.training.alpha,
        lambda0: run.training.lambda0,
        mu0: run.training.mu0,
        double_square_gate: run.training.double_square_gate,
        adjacency_init: (0.35, 0.65),
        adjacency_lr_decay: run.training.adjacency_lr_decay,
        flow_steps: run.model.flow_steps,
    })
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Metrics {
    pub schema_version: u32,
    pub test_loglik_nats: f64,
    pub edges: usize,
    pub depth: usize,
    pub epochs: usize,
    pub wall_seconds: f64,
}

/// Mean log density over a split, evaluated in chunks.
pub fn mean_loglik(model: &FlowModel, split: &Tensor) -> Result<f64> {
    let n = split.rows();
    if n == 0 {
        return Err(Error::Contract("empty evaluation split".into()));
    }
    let mut total = 0.0;
    let mut r = 0;
    while r < n {
        let hi = (r + 512).min(n);
        let idx: Vec<usize> = (r..hi).collect();
        total += model
            .log_density_batch(&split.gather_rows(&idx))?
            .logp
            .iter()
            .sum::<f64>();
        r = hi;
    }
    Ok(total / n as f64)
}

pub struct TrainOutcome {
    pub metrics: Metrics,
    pub run: TrainRun,
    pub out_dir: PathBuf,
}

/// Train per configuration and write checkpoint, history, graph exports and
/// metrics under `out_dir`.
pub fn cmd_train(run_config: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    let started = std::time::Instant::now();
    let bundle = build_dataset(&run_config.dataset)?;
    let train_config = to_train_config(run_config, &bundle)?;
    let run = train(&train_config, &bundle)?;

    std::fs::create_dir_all(out_dir.join("checkpoint"))?;
    run.model.save(
        &out_dir.join("checkpoint/model.json"),
        &out_dir.join("checkpoint/params.bin"),
        Some(bundle.columns.clone()),
        bundle.standardization.clone(),
        Some(train_config.seed),
    )?;
    std::fs::write(
        out_dir.join("checkpoint/state.json"),
        serde_json::to_string_pretty(&run.state)?,
    )?;
    std::fs::write(
        out_dir.join("checkpoint/config.json"),
        serde_json::to_string_pretty(&run_config)?,
    )?;
    std::fs::write(
        out_dir.join("dataset.json"),
        serde_json::to_string_pretty(&bundle.manifest())?,
    )?;

    let mut history = String::new();
    for rec in &run.history {
        history.push_str(&serde_json::to_string(rec)?);
        history.push('\n');
    }
    std::fs::write(out_dir.join("history.jsonl"), history)?;

    if run.model.is_binarized() {
        for (i, (dot, json)) in run.model.export_bn(Some(&bundle.columns))?.iter().enumerate() {
            std::fs::write(out_dir.join(format!("graph.step{i}.dot")), dot)?;
            std::fs::write(
                out_dir.join(format!("graph.step{i}.json")),
                serde_json::to_string_pretty(json)?,
            )?;
        }
    }

    if let Some(diag) = &run.diverged {
        std::fs::write(out_dir.join("DIVERGED"), diag)?;
        return Ok(TrainOutcome {
            metrics: Metrics {
                schema_version: METRICS_SCHEMA_VERSION,
                test_loglik_nats: f64::NAN,
                edges: 0,
                depth: 0,
                epochs: run.epochs_run,
                wall_seconds: started.elapsed().as_secs_f64(),
            },
            run,
            out_dir: out_dir.to_path_buf(),
        });
    }

    let metrics = Metrics {
        schema_version: METRICS_SCHEMA_VERSION,
        test_loglik_nats: mean_loglik(&run.model, &bundle.test)?,
        edges: run.model.edge_count(),
        depth: run.model.depth(),
        epochs: run.epochs_run,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    std::fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    Ok(TrainOutcome { metrics, run, out_dir: out_dir.to_path_buf() })
}

/// Load a checkpoint directory back into a model.
pub fn load_checkpoint(dir: &Path) -> Result<(FlowModel, graphflow::flow::ModelManifest)> {
    let manifest_path = dir.join("model.json");
    let params_path = dir.join("params.bin");
    if !manifest_path.exists() || !params_path.exists() {
        return Err(Error::Config(format!(
            "checkpoint at {} is missing model.json or params.bin",
            dir.display()
        )));
    }
    FlowModel::load(&manifest_path, &params_path)
}

fn apply_standardization(split: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let mut out = split.clone();
    let (rows, cols) = (out.rows(), out.cols());
    for r in 0..rows {
        for j in 0..cols {
            let v = (out.at(r, j) - mean[j]) / std[j];
            out.set(r, j, v);
        }
    }
    out
}

/// Evaluate a checkpoint on a dataset: test log likelihood, edges, depth.
pub fn cmd_eval(checkpoint: &Path, dataset: &DatasetConfig) -> Result<Metrics> {
    let started = std::time::Instant::now();
    let (model, manifest) = load_checkpoint(checkpoint)?;
    let mut cfg = dataset.clone();
    cfg.standardize = false; // the checkpoint's statistics take precedence
    let bundle = build_dataset(&cfg)?;
    if bundle.d() != model.d {
        return Err(Error::Shape {
            op: "eval",
            lhs: vec![bundle.d()],
            rhs: vec![model.d],
        });
    }
    let test = match &manifest.standardization {
        Some((mean, std)) => apply_standardization(&bundle.test, mean, std),
        None => bundle.test.clone(),
    };
    Ok(Metrics {
        schema_version: METRICS_SCHEMA_VERSION,
        test_loglik_nats: mean_loglik(&model, &test)?,
        edges: model.edge_count(),
        depth: model.depth(),
        epochs: 0,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Draw samples from a post-processed checkpoint and write them as CSV,
/// destandardized when the checkpoint carries statistics.
pub fn cmd_sample(checkpoint: &Path, n: usize, out_csv: &Path, seed: u64) -> Result<()> {
    let (model, manifest) = load_checkpoint(checkpoint)?;
    if !model.is_binarized() {
        return Err(Error::Contract(
            "checkpoint is not post-processed; train to completion before sampling".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = model.sample_n(n, &mut rng)?;
    if let Some((mean, std)) = &manifest.standardization {
        let rows = samples.rows();
        for r in 0..rows {
            for j in 0..model.d {
                let v = samples.at(r, j) * std[j] + mean[j];
                samples.set(r, j, v);
            }
        }
    }
    let columns = manifest
        .columns
        .clone()
        .unwrap_or_else(|| (1..=model.d).map(|i| format!("x{i}")).collect());
    data::write_csv(out_csv, &columns, &samples)?;
    Ok(())
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct SweepRow {
    pub lambda: f64,
    pub test_loglik_nats: Option<f64>,
    pub edges: Option<usize>,
    /// Learned edges whose skeleton pair is absent from the ground truth.
    pub extra_structure_edges: Option<usize>,
    pub diverged: bool,
}

/// Count learned edges not supported by the ground-truth skeleton.
pub fn extra_structure_edges(model: &FlowModel, truth: &BinaryDag) -> usize {
    let mut count = 0;
    for step in &model.steps {
        if let Some(dag) = step.mask.binary() {
            for (p, c) in dag.edges() {
                let in_truth =
                    truth.adjacency.at(c, p) != 0.0 || truth.adjacency.at(p, c) != 0.0;
                if !in_truth {
                    count += 1;
                }
            }
        }
    }
    count
}

/// One training run per l1 weight; emits sweep.json and a plot-data CSV.
pub fn cmd_sweep_l1(run_config: &RunConfig, lambdas: &[f64], out_dir: &Path) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::Config("sweep needs at least one lambda".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(lambdas.len());
    for (i, &lambda) in lambdas.iter().enumerate() {
        let mut cfg = run_config.clone();
        cfg.training.l1 = lambda;
        let sub_dir = out_dir.join(format!("run{i:02}_l1_{lambda}"));
        std::fs::create_dir_all(&sub_dir)?;
        let result = cmd_train(&cfg, &sub_dir);
        let row = match result {
            Ok(outcome) if outcome.run.diverged.is_none() => {
                let truth = build_dataset(&cfg.dataset)?.ground_truth;
                SweepRow {
                    lambda,
                    test_loglik_nats: Some(outcome.metrics.test_loglik_nats),
                    edges: Some(outcome.metrics.edges),
                    extra_structure_edges: truth
                        .map(|t| extra_structure_edges(&outcome.run.model, &t)),
                    diverged: false,
                }
            }
            Ok(_) => SweepRow {
                lambda,
                test_loglik_nats: None,
                edges: None,
                extra_structure_edges: None,
                diverged: true,
            },
            Err(Error::Numeric(_)) | Err(Error::Divergence(_)) => SweepRow {
                lambda,
                test_loglik_nats: None,
                edges: None,
                extra_structure_edges: None,
                diverged: true,
            },
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    std::fs::write(out_dir.join("sweep.json"), serde_json::to_string_pretty(&rows)?)?;
    let mut csv_text = String::from("lambda,test_loglik_nats,edges,extra_structure_edges,diverged\n");
    for row in &rows {
        csv_text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.lambda,
            row.test_loglik_nats.map_or(String::new(), |v| v.to_string()),
            row.edges.map_or(String::new(), |v| v.to_string()),
            row.extra_structure_edges.map_or(String::new(), |v| v.to_string()),
            row.diverged
        ));
    }
    std::fs::write(out_dir.join("sweep.csv"), csv_text)?;
    Ok(rows)
}
