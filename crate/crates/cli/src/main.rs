mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use config::{extract_dotted, ConfigError, Overrides, RunConfig};

const DOTTED_HELP: &str = "\
Any configuration key can also be given as a dotted flag, for example
--model.emb_dim 32, --train.alpha 0.0005 or --decode.beam_size 5. Values
parse as JSON where possible. Precedence: defaults, --config file, dotted
flags, then the named flags above.";

#[derive(Parser)]
#[command(name = "seass", version, about = "Selective-encoding sentence summarization", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize an aligned corpus and build vocabularies.
    #[command(after_help = DOTTED_HELP)]
    Preprocess(PreprocessArgs),
    /// Generate a synthetic copy or selection corpus.
    #[command(name = "gen-synth", after_help = DOTTED_HELP)]
    GenSynth(GenSynthArgs),
    /// Train a model, or resume from a checkpoint.
    #[command(after_help = DOTTED_HELP)]
    Train(TrainArgs),
    /// Summarize source sentences with a trained model.
    #[command(after_help = DOTTED_HELP)]
    Decode(DecodeArgs),
    /// Score candidate summaries with ROUGE.
    #[command(after_help = DOTTED_HELP)]
    Evaluate(EvaluateArgs),
    /// Gate-gradient saliency of each source word.
    #[command(after_help = DOTTED_HELP)]
    Saliency(SaliencyArgs),
}

#[derive(Args)]
struct Common {
    /// JSON file of flat dotted keys.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    F1,
    Recall,
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    tgt: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenSynthArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    tgt: Option<PathBuf>,
    #[arg(long)]
    dev_src: Option<PathBuf>,
    #[arg(long)]
    dev_tgt: Option<PathBuf>,
    #[arg(long)]
    vocab_src: Option<PathBuf>,
    #[arg(long)]
    vocab_tgt: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for logs, checkpoints and vocabularies.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `off` trains the plain attention baseline.
    #[arg(long)]
    gate: Option<Switch>,
}

#[derive(Args)]
struct DecodeFlags {
    #[arg(long, value_name = "SIZE")]
    beam: Option<usize>,
    #[arg(long)]
    greedy: bool,
    #[arg(long, value_name = "WORDS")]
    fixed_len: Option<usize>,
    /// `off` replaces every gate value with 1.
    #[arg(long)]
    gate: Option<Switch>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    vocab_src: Option<PathBuf>,
    #[arg(long)]
    vocab_tgt: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output file, one summary per line.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Candidate summaries, one per line.
    #[arg(long)]
    cand: Option<PathBuf>,
    /// Reference file, or a directory of ref0.txt..refK.txt.
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Comma-separated subset of rouge1, rouge2, rougeL.
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<String>>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long, value_name = "BYTES")]
    byte_cap: Option<usize>,
    #[arg(long)]
    stem: bool,
    /// Write ROUGE-2 by source length to this CSV file (needs --src).
    #[arg(long, value_name = "FILE")]
    buckets: Option<PathBuf>,
    /// Source sentences, used for length buckets.
    #[arg(long)]
    src: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SaliencyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    src: Option<PathBuf>,
    /// Summaries to explain; decoded from the model when omitted.
    #[arg(long)]
    tgt: Option<PathBuf>,
    #[arg(long)]
    vocab_src: Option<PathBuf>,
    #[arg(long)]
    vocab_tgt: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeFlags,
}

fn path(ov: &mut Overrides, key: &str, p: &Option<PathBuf>) {
    if let Some(p) = p {
        ov.set(format!("paths.{key}"), json!(p));
    }
}

fn common(c: &Common, dotted: Overrides) -> Result<Overrides, ConfigError> {
    let mut ov = match &c.config {
        Some(file) => Overrides::from_file(file)?,
        None => Overrides::default(),
    };
    ov.extend(dotted);
    if let Some(seed) = c.seed {
        ov.set("seed", json!(seed));
    }
    Ok(ov)
}

fn gate(ov: &mut Overrides, g: Option<Switch>) {
    if let Some(g) = g {
        ov.set("model.selective_gate", Value::Bool(matches!(g, Switch::On)));
    }
}

fn decode_flags(ov: &mut Overrides, d: &DecodeFlags) {
    if let Some(b) = d.beam {
        ov.set("decode.beam_size", json!(b));
    }
    if d.greedy {
        ov.set("greedy", json!(true));
    }
    if let Some(n) = d.fixed_len {
        ov.set("decode.fixed_len", json!(n));
    }
    gate(ov, d.gate);
}

/// Merges the file, dotted and named settings for one subcommand. The
/// returned flag tells whether `--gate` was given explicitly.
fn resolve(cmd: &Command, dotted: Overrides) -> Result<(RunConfig, bool), ConfigError> {
    let mut gate_set = false;
    let ov = match cmd {
        Command::Preprocess(a) => {
            let mut ov = common(&a.common, dotted)?;
            path(&mut ov, "src", &a.src);
            path(&mut ov, "tgt", &a.tgt);
            path(&mut ov, "out", &a.out);
            ov
        }
        Command::GenSynth(a) => {
            let mut ov = common(&a.common, dotted)?;
            path(&mut ov, "out", &a.out);
            ov
        }
        Command::Train(a) => {
            let mut ov = common(&a.common, dotted)?;
            path(&mut ov, "src", &a.src);
            path(&mut ov, "tgt", &a.tgt);
            path(&mut ov, "dev_src", &a.dev_src);
            path(&mut ov, "dev_tgt", &a.dev_tgt);
            path(&mut ov, "vocab_src", &a.vocab_src);
            path(&mut ov, "vocab_tgt", &a.vocab_tgt);
            path(&mut ov, "checkpoint", &a.checkpoint);
            path(&mut ov, "out", &a.out);
            gate(&mut ov, a.gate);
            ov
        }
        Command::Decode(a) => {
            let mut ov = common(&a.common, dotted)?;
            path(&mut ov, "src", &a.src);
            path(&mut ov, "vocab_src", &a.vocab_src);
            path(&mut ov, "vocab_tgt", &a.vocab_tgt);
            path(&mut ov, "checkpoint", &a.checkpoint);
            path(&mut ov, "out", &a.out);
            decode_flags(&mut ov, &a.decode);
            gate_set = a.decode.gate.is_some();
            ov
        }
        Command::Evaluate(a) => {
            let mut ov = common(&a.common, dotted)?;
            path(&mut ov, "cand", &a.cand);
            path(&mut ov, "refs", &a.refs);
            path(&mut ov, "src", &a.src);
            path(&mut ov, "out", &a.out);
            path(&mut ov, "buckets", &a.buckets);
            if let Some(m) = &a.metrics {
                ov.set("eval.metrics", json!(m));
            }
            if let Some(m) = a.mode {
                ov.set("eval.mode", json!(if matches!(m, Mode::F1) { "f1" } else { "recall" }));
            }
            if let Some(b) = a.byte_cap {
                ov.set("eval.byte_cap", json!(b));
            }
            if a.stem {
                ov.set("eval.stem", json!(true));
            }
            ov
        }
        Command::Saliency(a) => {
            let mut ov = common(&a.common, dotted)?;
            path(&mut ov, "src", &a.src);
            path(&mut ov, "tgt", &a.tgt);
            path(&mut ov, "vocab_src", &a.vocab_src);
            path(&mut ov, "vocab_tgt", &a.vocab_tgt);
            path(&mut ov, "checkpoint", &a.checkpoint);
            path(&mut ov, "out", &a.out);
            decode_flags(&mut ov, &a.decode);
            gate_set = a.decode.gate.is_some();
            ov
        }
    };
    Ok((ov.resolve()?, gate_set))
}

fn usage_error(msg: impl std::fmt::Display) -> ExitCode {
    let mut cmd = Cli::command();
    eprintln!("error: {msg}\n\n{}", cmd.render_usage());
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let (args, dotted) = match extract_dotted(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => return usage_error(e),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let (cfg, gate_set) = match resolve(&cli.command, dotted) {
        Ok(x) => x,
        Err(e @ ConfigError::File { .. }) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
        Err(e) => return usage_error(e),
    };
    let result = match cli.command {
        Command::Preprocess(_) => commands::preprocess(&cfg),
        Command::GenSynth(_) => commands::gen_synth(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Decode(_) => commands::decode(&cfg, gate_set),
        Command::Evaluate(_) => commands::evaluate(&cfg),
        Command::Saliency(_) => commands::saliency(&cfg, gate_set),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<commands::MissingPath>() => usage_error(e),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
