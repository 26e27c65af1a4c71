//! `asdformer` command-line tool. Reports go to stdout as one JSON object per
//! line; errors go to stderr. Exit status is 0 on success, 1 when a
//! computation or check fails and 2 for usage and I/O problems.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use asdformer_core::interpret::{HeadMode, ReportFormat};
use asdformer_core::model::Decoder;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Subset;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] asdformer_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use asdformer_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
            CliError::Core(e) => match e {
                E::Shape { .. } | E::Contract(_) | E::Divergence { .. } | E::Metric(_) => 1,
                _ => 2,
            },
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "asdformer",
    version,
    about = "Connectome classification with a transformer and a mixture of pooling experts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct Common {
    /// JSON file layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset manifest or the directory holding `manifest.json`.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct ModelFlags {
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    reduced_dim: Option<usize>,
    /// Top-k per expert; the expert count follows the list length.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    decoder: Option<DecoderArg>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DecoderArg {
    Moe,
    Cls,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum HeadModeArg {
    Mean,
    PerHead,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-signal dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        rois: Option<usize>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Split, train with early stopping and save the best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Metrics of a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Which part of the seeded split to score.
        #[arg(long, value_enum)]
        subset: Option<Subset>,
        /// ASD probability threshold; argmax of the logits when unset.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Per-subject ROI scores and attention summaries.
    Interpret {
        #[command(flatten)]
        common: Common,
        /// Subject id; repeat for several. All subjects when omitted.
        #[arg(long = "subject")]
        subjects: Vec<String>,
        #[arg(long, value_enum)]
        head_mode: Option<HeadModeArg>,
        /// Encoder layer for attention rows; the last by default.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Train CLS, single-expert and mixture decoders over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tolerance: Option<f64>,
        /// Lower bound on the relative-error denominator.
        #[arg(long)]
        floor: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

impl ModelFlags {
    fn apply(&self, m: &mut asdformer_core::model::ModelConfig) {
        if let Some(v) = self.embed_dim {
            m.embed_dim = v;
        }
        if let Some(v) = self.heads {
            m.heads = v;
        }
        if let Some(v) = self.layers {
            m.encoder_layers = v;
        }
        if let Some(v) = self.reduced_dim {
            m.reduced_dim = v;
        }
        if let Some(k) = &self.k {
            m.num_experts = k.len();
            m.k_per_expert = k.clone();
        }
        if let Some(v) = self.lambda {
            m.lambda = v;
        }
        if let Some(d) = self.decoder {
            m.decoder = match d {
                DecoderArg::Moe => Decoder::Moe,
                DecoderArg::Cls => Decoder::Cls,
            };
        }
    }
}

impl TrainFlags {
    fn apply(&self, t: &mut asdformer_core::training::TrainConfig) {
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.epochs {
            t.max_epochs = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
    }
}

fn resolve(common: &Common) -> Result<config::Resolved, CliError> {
    let mut r = config::load(common.config.as_deref())?;
    let c = &mut r.config;
    if common.seed.is_some() {
        c.seed = common.seed;
    }
    if let Some(p) = &common.out {
        c.paths.out = Some(p.clone());
    }
    if let Some(p) = &common.dataset {
        c.paths.dataset = Some(p.clone());
    }
    if let Some(p) = &common.checkpoint {
        c.paths.checkpoint = Some(p.clone());
    }
    Ok(r)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            common,
            subjects,
            rois,
            delta,
            noise,
        } => {
            let mut r = resolve(&common)?;
            let s = &mut r.config.synth;
            if let Some(v) = subjects {
                s.n_subjects = v;
            }
            if let Some(v) = rois {
                s.n_rois = v;
            }
            if let Some(v) = delta {
                s.effect = v;
            }
            if let Some(v) = noise {
                s.noise = v;
            }
            commands::synth(r.config)
        }
        Command::Train { common, model, train } => {
            let mut r = resolve(&common)?;
            model.apply(&mut r.config.model);
            train.apply(&mut r.config.train);
            commands::train(r)
        }
        Command::Eval {
            common,
            subset,
            threshold,
        } => {
            let mut r = resolve(&common)?;
            if let Some(s) = subset {
                r.config.eval.subset = s;
            }
            if threshold.is_some() {
                r.config.eval.threshold = threshold;
            }
            commands::eval(r.config)
        }
        Command::Interpret {
            common,
            subjects,
            head_mode,
            layer,
            format,
        } => {
            let mut r = resolve(&common)?;
            let i = &mut r.config.interpret;
            if !subjects.is_empty() {
                i.subjects = subjects;
            }
            if let Some(m) = head_mode {
                i.head_mode = match m {
                    HeadModeArg::Mean => HeadMode::Mean,
                    HeadModeArg::PerHead => HeadMode::PerHead,
                };
            }
            if layer.is_some() {
                i.layer = layer;
            }
            if let Some(f) = format {
                i.format = match f {
                    FormatArg::Json => ReportFormat::Json,
                    FormatArg::Csv => ReportFormat::Csv,
                };
            }
            commands::interpret(r.config)
        }
        Command::Ablate {
            common,
            model,
            train,
            seeds,
        } => {
            let mut r = resolve(&common)?;
            model.apply(&mut r.config.model);
            train.apply(&mut r.config.train);
            if let Some(n) = seeds {
                r.config.ablate.seeds = n;
            }
            commands::ablate(r)
        }
        Command::Gradcheck {
            common,
            tolerance,
            floor,
            step,
            inject_fault,
        } => {
            let mut r = resolve(&common)?;
            let g = &mut r.config.gradcheck;
            if let Some(v) = tolerance {
                g.tolerance = v;
            }
            if let Some(v) = floor {
                g.floor = v;
            }
            if let Some(v) = step {
                g.step = v;
            }
            commands::gradcheck(r.config, inject_fault)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.exit_code() {
                1 => "failure",
                _ => "usage",
            };
            eprintln!("{}", serde_json::json!({ "error": e.to_string(), "kind": kind }));
            ExitCode::from(e.exit_code())
        }
    }
}
