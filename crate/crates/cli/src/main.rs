use clap::{Args, Parser, Subcommand};
use graphflow::error::Error;
use graphflow_cli::{cmd_eval, cmd_sample, cmd_sweep_l1, cmd_train, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "graphflow",
    about = "Density estimation with graphical normalizing flows",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset generator (tree | 8pairs | pairs:<k> | arith_circuit | toy:<name>).
    #[arg(long)]
    dataset: Option<String>,
    /// CSV file instead of a generator.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Number of samples to generate.
    #[arg(long)]
    n: Option<usize>,
    /// Dataset seed.
    #[arg(long)]
    dataset_seed: Option<u64>,
    /// Randomly permute features before training.
    #[arg(long)]
    permute: bool,
    /// Conditioner kind (graphical | autoregressive | coupling).
    #[arg(long)]
    conditioner: Option<String>,
    /// Normalizer kind (affine | monotonic).
    #[arg(long)]
    normalizer: Option<String>,
    /// Topology (learn | ground-truth | autoregressive | coupling[:k] | prescribed:<file>).
    #[arg(long)]
    topology: Option<String>,
    /// Sparsity weight on the relaxed adjacency.
    #[arg(long)]
    l1: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    embed_size: Option<usize>,
    #[arg(long)]
    quad_points: Option<usize>,
    /// Training seed (falls back to GRAPHFLOW_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_toml_path(path)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.dataset {
            cfg.dataset.generator = Some(d.clone());
            cfg.dataset.csv = None;
        }
        if let Some(p) = &self.csv {
            cfg.dataset.csv = Some(p.clone());
            cfg.dataset.generator = None;
        }
        if let Some(n) = self.n {
            cfg.dataset.n = n;
        }
        if let Some(s) = self.dataset_seed {
            cfg.dataset.seed = s;
        }
        if self.permute {
            cfg.dataset.permute = true;
        }
        if let Some(v) = &self.conditioner {
            cfg.model.conditioner = v.clone();
        }
        if let Some(v) = &self.normalizer {
            cfg.model.normalizer = v.clone();
        }
        if let Some(v) = &self.topology {
            cfg.model.topology = v.clone();
        }
        if let Some(v) = self.l1 {
            cfg.training.l1 = v;
        }
        if let Some(v) = self.batch_size {
            cfg.training.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.training.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.training.weight_decay = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.training.max_epochs = v;
        }
        if let Some(v) = self.embed_size {
            cfg.model.embed_size = v;
        }
        if let Some(v) = self.quad_points {
            cfg.model.quad_points = v;
        }
        if let Some(v) = self.seed {
            cfg.training.seed = Some(v);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a flow and write checkpoint, history, graph exports and metrics.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        /// Checkpoint directory (contains model.json and params.bin).
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Where to write metrics JSON (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples from a post-processed checkpoint into a CSV file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train once per l1 value and collect test likelihood and structure counts.
    SweepL1 {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated l1 weights, e.g. 0.5,1,2,4.
        #[arg(long)]
        lambdas: String,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Contract(_) | Error::Parse { .. } | Error::Shape { .. } => 2,
        Error::Divergence(_) | Error::Numeric(_) => 3,
        _ => 1,
    }
}

fn run() -> Result<u8, Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, out } => {
            let cfg = config.resolve()?;
            std::fs::create_dir_all(&out)?;
            let outcome = cmd_train(&cfg, &out)?;
            if let Some(diag) = &outcome.run.diverged {
                eprintln!("training diverged: {diag}");
                return Ok(3);
            }
            println!("{}", serde_json::to_string_pretty(&outcome.metrics).map_err(Error::from)?);
            Ok(0)
        }
        Command::Eval { checkpoint, config, out } => {
            let cfg = config.resolve()?;
            let metrics = cmd_eval(&checkpoint, &cfg.dataset)?;
            let text = serde_json::to_string_pretty(&metrics).map_err(Error::from)?;
            match out {
                Some(path) => std::fs::write(path, &text)?,
                None => println!("{text}"),
            }
            Ok(0)
        }
        Command::Sample { checkpoint, n, out, seed } => {
            cmd_sample(&checkpoint, n, &out, seed)?;
            Ok(0)
        }
        Command::SweepL1 { config, lambdas, out } => {
            let cfg = config.resolve()?;
            let lambdas: Vec<f64> = lambdas
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad lambda '{s}'")))
                })
                .collect::<Result<_, _>>()?;
            let rows = cmd_sweep_l1(&cfg, &lambdas, &out)?;
            println!("{}", serde_json::to_string_pretty(&rows).map_err(Error::from)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
