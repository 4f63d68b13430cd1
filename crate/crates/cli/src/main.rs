use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gemma_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use gemma_core::config::{count_params, ConfigError, Preset};
use gemma_core::evals::{
    bundled_rules, memorization_audit, read_corpus, read_ratings, win_rate, win_rate_ci,
    AuditParams, DistanceLevel, EvalError, Interval, MatchLevel, RatingTally,
};
use gemma_core::generation::{generate, generate_with, GenerationError, SamplerParams, SamplingMode};
use gemma_core::model::{GemmaModel, ModelError};
use gemma_core::text::{encode_dialogue, format_dialogue, TextError, TokenId, Turn, Vocab};

#[derive(Parser)]
#[command(name = "gemma", version, about = "Small Gemma-style decoder: inference, formatting and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print embedding and non-embedding parameter counts for a preset.
    Params {
        #[arg(long)]
        preset: Preset,
        #[arg(long)]
        json: bool,
    },
    /// Write a randomly initialised checkpoint.
    Init {
        #[arg(long)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the built-in vocabulary file.
    Vocab {
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue a raw text prompt.
    Generate {
        #[command(flatten)]
        files: ModelFiles,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 32)]
        max_tokens: usize,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Interactive dialogue on standard input.
    Chat {
        #[command(flatten)]
        files: ModelFiles,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
        #[command(flatten)]
        sampling: Sampling,
    },
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Render a JSONL dialogue (`{"role": ..., "content": ...}` per line).
    Fmt {
        #[arg(long)]
        dialogue: PathBuf,
        /// Append an open model turn.
        #[arg(long)]
        open: bool,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Discoverable memorization audit over a JSONL corpus.
    Mem {
        #[command(flatten)]
        files: ModelFiles,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 50)]
        prompt_len: usize,
        #[arg(long, default_value_t = 50)]
        cont_len: usize,
        #[arg(long, default_value_t = 0.10)]
        threshold: f64,
        #[arg(long, default_value_t = 10_000)]
        sample_n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ExactArg::Token)]
        exact_match: ExactArg,
        #[arg(long, value_enum, default_value_t = DistanceArg::Char)]
        distance: DistanceArg,
        #[arg(long)]
        json: bool,
    },
    /// Tie-split win rate with a Wilson interval from an `item_id,outcome` CSV.
    Winrate {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct ModelFiles {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args)]
struct Sampling {
    /// Sample at this temperature instead of decoding greedily.
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExactArg {
    Token,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistanceArg {
    Char,
    Token,
}

/// Failure with its process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

const EXIT_CONFIG: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_CHECKPOINT: u8 = 5;
const EXIT_INPUT: u8 = 6;
const EXIT_RUNTIME: u8 = 7;
const EXIT_EVAL: u8 = 8;

impl Failure {
    fn new(code: u8, message: impl ToString) -> Self {
        Self { code, message: message.to_string() }
    }

    fn io(path: &Path, e: io::Error) -> Self {
        Self::new(EXIT_IO, format!("{}: {e}", path.display()))
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::new(EXIT_CONFIG, e)
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(e) => Self::new(EXIT_IO, e),
            CheckpointError::Config(e) => e.into(),
            other => Self::new(EXIT_CHECKPOINT, other),
        }
    }
}

impl From<TextError> for Failure {
    fn from(e: TextError) -> Self {
        match e {
            TextError::Io(e) => Self::new(EXIT_IO, e),
            other => Self::new(EXIT_INPUT, other),
        }
    }
}

impl From<GenerationError> for Failure {
    fn from(e: GenerationError) -> Self {
        match e {
            GenerationError::Model(ModelError::TokenOutOfRange { .. }) => Self::new(EXIT_INPUT, e),
            other => Self::new(EXIT_RUNTIME, other),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Corpus(_) | EvalError::Ratings(_) => Self::new(EXIT_INPUT, e),
            EvalError::Generation(g) => g.into(),
            EvalError::Text(t) => t.into(),
            other => Self::new(EXIT_EVAL, other),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            print!("{}", e.render());
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            println!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Params { preset, json } => params(preset, json),
        Command::Init { preset, seed, out } => init(preset, seed, &out),
        Command::Vocab { out } => {
            let file = File::create(&out).map_err(|e| Failure::io(&out, e))?;
            Vocab::default_english().write_to(io::BufWriter::new(file)).map_err(|e| Failure::io(&out, e))?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Generate { files, prompt, max_tokens, sampling } => {
            let (model, vocab) = load(&files)?;
            let mut ids = vec![TokenId::BOS];
            ids.extend(vocab.encode(&prompt));
            let params = sampler(&sampling, max_tokens, vec![TokenId::EOS])?;
            let out = generate(&model, &ids, &params)?;
            println!("{}", vocab.decode_lossy(&out));
            Ok(())
        }
        Command::Chat { files, max_tokens, sampling } => {
            let (model, vocab) = load(&files)?;
            let params = sampler(&sampling, max_tokens, vec![TokenId::END_OF_TURN, TokenId::EOS])?;
            chat(&model, &vocab, &params)
        }
        Command::Eval(EvalCommand::Mem {
            files,
            corpus,
            prompt_len,
            cont_len,
            threshold,
            sample_n,
            seed,
            exact_match,
            distance,
            json,
        }) => {
            let (model, vocab) = load(&files)?;
            let file = File::open(&corpus).map_err(|e| Failure::io(&corpus, e))?;
            let docs = read_corpus(BufReader::new(file))?;
            let params = AuditParams {
                prompt_len,
                cont_len,
                threshold,
                sample_n,
                seed,
                exact_match: match exact_match {
                    ExactArg::Token => MatchLevel::Token,
                    ExactArg::Text => MatchLevel::Text,
                },
                distance: match distance {
                    DistanceArg::Char => DistanceLevel::Char,
                    DistanceArg::Token => DistanceLevel::Token,
                },
            };
            let report = memorization_audit(&model, &vocab, &docs, &params, &bundled_rules())?;
            if json {
                print_json(&report);
            } else {
                println!("documents       {}", report.n_docs);
                println!("long enough     {}", report.n_long_enough);
                println!("audited         {}", report.n_eligible);
                println!("exact           {} ({:.4})", report.n_exact, report.exact_rate);
                println!("approximate     {} ({:.4})", report.n_approx, report.approx_rate);
                println!("personal        {}", report.n_personal);
                println!("sensitive       {}", report.n_sensitive);
                for (name, c) in &report.per_category {
                    println!(
                        "  {name:<14}{} audited, exact {:.4}, approximate {:.4}",
                        c.n_eligible, c.exact_rate, c.approx_rate
                    );
                }
            }
            Ok(())
        }
        Command::Eval(EvalCommand::Winrate { ratings, level, json }) => winrate(&ratings, level, json),
        Command::Fmt { dialogue, open } => {
            let file = File::open(&dialogue).map_err(|e| Failure::io(&dialogue, e))?;
            let mut turns = Vec::new();
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Failure::io(&dialogue, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let turn: Turn = serde_json::from_str(&line)
                    .map_err(|e| Failure::new(EXIT_INPUT, format!("line {}: {e}", i + 1)))?;
                turns.push(turn);
            }
            print!("{}", format_dialogue(&turns, open)?);
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct ParamsOut {
    preset: String,
    embedding: u64,
    non_embedding: u64,
    total: u64,
}

fn params(preset: Preset, json: bool) -> Result<(), Failure> {
    let counts = count_params(&preset.config())?;
    let out = ParamsOut {
        preset: preset.name().to_string(),
        embedding: counts.embedding,
        non_embedding: counts.non_embedding,
        total: counts.total(),
    };
    if json {
        print_json(&out);
    } else {
        println!("preset          {}", out.preset);
        println!("embedding       {}", out.embedding);
        println!("non_embedding   {}", out.non_embedding);
        println!("total           {}", out.total);
    }
    Ok(())
}

fn init(preset: Preset, seed: u64, out: &Path) -> Result<(), Failure> {
    let cfg = preset.config();
    let counts = count_params(&cfg)?;
    // an f32 copy of the weights plus the serialised file must fit in memory
    if counts.total() > 1 << 28 {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("{preset} has {} parameters; refusing to materialise it", counts.total()),
        ));
    }
    let model = GemmaModel::random_init(cfg, seed).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    save_checkpoint(&model, out)?;
    println!("wrote {} ({} parameters, sha256 {})", out.display(), model.num_params(), model.checksum());
    Ok(())
}

fn load(files: &ModelFiles) -> Result<(GemmaModel, Vocab), Failure> {
    let model = load_checkpoint(&files.model).map_err(|e| match e {
        CheckpointError::Io(io) => Failure::io(&files.model, io),
        other => other.into(),
    })?;
    let f = File::open(&files.vocab).map_err(|e| Failure::io(&files.vocab, e))?;
    let vocab = Vocab::read_from(BufReader::new(f))?;
    if vocab.len() > model.config().vocab_size {
        return Err(Failure::new(
            EXIT_INPUT,
            format!("vocabulary has {} ids but the model only {}", vocab.len(), model.config().vocab_size),
        ));
    }
    Ok((model, vocab))
}

fn sampler(s: &Sampling, max_new_tokens: usize, stop_ids: Vec<TokenId>) -> Result<SamplerParams, Failure> {
    let params = SamplerParams {
        mode: s.temperature.map_or(SamplingMode::Greedy, SamplingMode::Temperature),
        top_k: s.top_k,
        seed: s.seed,
        max_new_tokens,
        stop_ids,
    };
    params.check().map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    Ok(params)
}

fn chat(model: &GemmaModel, vocab: &Vocab, params: &SamplerParams) -> Result<(), Failure> {
    let max_context = model.config().max_context;
    let mut history: Vec<Turn> = Vec::new();
    let stdin = io::stdin();
    let mut stdout = io::stdout();
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| Failure::new(EXIT_IO, e))?;
        history.push(Turn::user(line));
        let prompt = loop {
            let mut ids = vec![TokenId::BOS];
            ids.extend(encode_dialogue(vocab, &history, true)?);
            if ids.len() + params.max_new_tokens <= max_context || history.len() == 1 {
                break ids;
            }
            // drop the oldest exchange until the prompt fits
            let drop = (history.len() - 1).min(2);
            history.drain(..drop);
        };

        let mut reply = Vec::new();
        let mut shown = 0;
        let result = generate_with(model, &prompt, params, |tok| {
            reply.push(tok);
            let text = vocab.decode_lossy(&reply);
            // hold back a partially decoded UTF-8 sequence
            if !text.ends_with('\u{FFFD}') {
                print!("{}", &text[shown..]);
                let _ = stdout.flush();
                shown = text.len();
            }
            true
        });
        match result {
            Ok(_) => {
                let text = vocab.decode_lossy(&reply);
                print!("{}", &text[shown.min(text.len())..]);
                println!();
                history.push(Turn::model(text));
            }
            Err(e) => {
                println!("error: {e}");
                history.pop();
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct WinrateOut {
    wins: f64,
    ties: f64,
    losses: f64,
    win_rate: f64,
    level: f64,
    interval: Interval,
}

fn winrate(path: &Path, level: f64, json: bool) -> Result<(), Failure> {
    let file = File::open(path).map_err(|e| Failure::io(path, e))?;
    let tally: RatingTally = read_ratings(file)?;
    let rate = win_rate(&tally)?;
    let interval = win_rate_ci(&tally, tally.total() as u64, level)?;
    let out = WinrateOut { wins: tally.wins, ties: tally.ties, losses: tally.losses, win_rate: rate, level, interval };
    if json {
        print_json(&out);
    } else {
        println!("wins {} ties {} losses {}", out.wins, out.ties, out.losses);
        println!("win rate        {:.4}", out.win_rate);
        println!("{:.0}% interval    [{:.4}, {:.4}]", level * 100.0, interval.lower, interval.upper);
    }
    Ok(())
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serialisable"));
}
