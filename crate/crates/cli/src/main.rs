mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use daffnet_core::data::Domain;
use daffnet_core::training::TrainConfig;

use crate::config::{load_config, DaffRun, EvalRun, GenRun, GradRun, MapRun, Part, PseudoRun, PseudoSource};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "daffnet", version, about = "White-blood-cell classification with fused morphological attributes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled synthetic dataset.
    GenSynthetic(GenArgs),
    /// Train the attribute predictor.
    TrainMap(MapArgs),
    /// Write pseudo attribute labels for the training split of unlabeled datasets.
    PseudoLabel(PseudoArgs),
    /// Train the classifier on top of a trained attribute predictor.
    TrainDaffnet(DaffArgs),
    /// Score a checkpoint on one split of a dataset.
    Evaluate(EvalArgs),
    /// Gradient-check every op, layer, block and loss.
    Gradcheck(GradArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default 1).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
            cfg.patience = cfg.patience.min(v);
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.adam.lr = v;
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Probability that a sample carries one off-recipe attribute.
    #[arg(long)]
    noise: Option<f64>,
    /// Background tint and noise style.
    #[arg(long, value_parser = parse_domain)]
    domain: Option<Domain>,
}

fn parse_domain(s: &str) -> Result<Domain, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Args)]
struct MapArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Attribute schema JSON; defaults to the dataset's schema.json.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    lambda_ap: Option<f64>,
    #[arg(long)]
    lambda_cls: Option<f64>,
    /// Train without the auxiliary class term.
    #[arg(long)]
    ablate_dsl: bool,
    /// Extra training data as `DATASET_DIR,LABELS_CSV`; repeatable.
    #[arg(long, value_parser = parse_pseudo)]
    pseudo: Vec<PseudoSource>,
}

fn parse_pseudo(s: &str) -> Result<PseudoSource, String> {
    let (data, labels) = s.split_once(',').ok_or("expected DATASET_DIR,LABELS_CSV")?;
    Ok(PseudoSource {
        data: data.into(),
        labels: labels.into(),
    })
}

#[derive(Args)]
struct PseudoArgs {
    #[command(flatten)]
    common: Common,
    /// Attribute-predictor checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory to label; repeatable.
    #[arg(long)]
    data: Vec<PathBuf>,
}

#[derive(Args)]
struct DaffArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Attribute-predictor checkpoint directory.
    #[arg(long)]
    map_checkpoint: Option<PathBuf>,
    #[arg(long)]
    no_epsa: bool,
    #[arg(long)]
    no_sa: bool,
    /// Drop the attribute branch (and with it the attribute encoder).
    #[arg(long)]
    no_mfe: bool,
    /// Feed raw attribute probabilities to the decoder instead of the encoder output.
    #[arg(long)]
    no_mae: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Which split to score.
    #[arg(long, value_enum)]
    split: Option<Part>,
}

#[derive(Args)]
struct GradArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    /// Break the backward rule of this op to exercise failure reporting.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if value.is_some() {
        *slot = value;
    }
}

fn init_threads(n: usize) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Usage("`--threads` must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Failed(format!("thread pool: {e}")))
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenSynthetic(a) => {
            let mut run: GenRun = load_config(a.common.config.as_deref())?;
            set_path(&mut run.out, a.common.out);
            set(&mut run.threads, a.common.threads);
            set(&mut run.synth.seed, a.common.seed);
            set(&mut run.synth.per_class, a.per_class);
            set(&mut run.synth.image_size, a.image_size);
            set(&mut run.synth.noise, a.noise);
            set(&mut run.synth.domain, a.domain);
            init_threads(run.threads)?;
            commands::cmd_gen_synthetic(run)
        }
        Command::TrainMap(a) => {
            let mut run: MapRun = load_config(a.common.config.as_deref())?;
            set_path(&mut run.out, a.common.out);
            set(&mut run.threads, a.common.threads);
            set(&mut run.seed, a.common.seed);
            set_path(&mut run.data, a.data);
            set_path(&mut run.schema, a.schema);
            set(&mut run.loss.lambda_ap, a.lambda_ap);
            set(&mut run.loss.lambda_cls, a.lambda_cls);
            run.ablate_dsl |= a.ablate_dsl;
            run.pseudo.extend(a.pseudo);
            a.train.apply(&mut run.train);
            init_threads(run.threads)?;
            commands::cmd_train_map(run)
        }
        Command::PseudoLabel(a) => {
            let mut run: PseudoRun = load_config(a.common.config.as_deref())?;
            set_path(&mut run.out, a.common.out);
            set(&mut run.threads, a.common.threads);
            set(&mut run.seed, a.common.seed);
            set_path(&mut run.checkpoint, a.checkpoint);
            run.data.extend(a.data);
            init_threads(run.threads)?;
            commands::cmd_pseudo_label(run)
        }
        Command::TrainDaffnet(a) => {
            let mut run: DaffRun = load_config(a.common.config.as_deref())?;
            set_path(&mut run.out, a.common.out);
            set(&mut run.threads, a.common.threads);
            set(&mut run.seed, a.common.seed);
            set_path(&mut run.data, a.data);
            set_path(&mut run.schema, a.schema);
            set_path(&mut run.map_checkpoint, a.map_checkpoint);
            run.model.backbone.epsa &= !a.no_epsa;
            run.model.backbone.sa &= !a.no_sa;
            run.model.use_mfe &= !a.no_mfe;
            run.model.use_mae &= !a.no_mae;
            a.train.apply(&mut run.train);
            init_threads(run.threads)?;
            commands::cmd_train_daffnet(run)
        }
        Command::Evaluate(a) => {
            let mut run: EvalRun = load_config(a.common.config.as_deref())?;
            set_path(&mut run.out, a.common.out);
            set(&mut run.threads, a.common.threads);
            set(&mut run.seed, a.common.seed);
            set_path(&mut run.checkpoint, a.checkpoint);
            set_path(&mut run.data, a.data);
            set(&mut run.part, a.split);
            init_threads(run.threads)?;
            commands::cmd_evaluate(run)
        }
        Command::Gradcheck(a) => {
            let mut run: GradRun = load_config(a.common.config.as_deref())?;
            set_path(&mut run.out, a.common.out);
            set(&mut run.threads, a.common.threads);
            set(&mut run.seed, a.common.seed);
            set(&mut run.tol, a.tol);
            set(&mut run.eps, a.eps);
            if a.corrupt.is_some() {
                run.corrupt = a.corrupt;
            }
            init_threads(run.threads)?;
            commands::cmd_gradcheck(run)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
