use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use faceforge::corpus::{read_pairs, Vocabulary};
use faceforge::frequency::{FreqMode, FrequencyTable};
use faceforge::harness::{
    analyze, evaluate, load_dataset, read_responses, refine, train, write_synth, Phase, SplitSizes, TrainConfig,
};
use faceforge::seq2seq::Checkpoint;
use faceforge::{Error, Result};

#[derive(Parser)]
#[command(name = "faceforge", version, about = "Frequency-aware cross-entropy training for seq2seq dialogue models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch (CE unless --face-from-scratch).
    Train(RunArgs),
    /// Fine-tune a trained checkpoint with any loss variant.
    Refine(RunArgs),
    /// Greedy-decode a test set and report d-1, d-2 and BLEU.
    Eval(EvalArgs),
    /// Leading-token and following-token rank tables, plus a frequency/weight dump.
    Analyze(AnalyzeArgs),
    /// Write a Zipf-skewed synthetic dialogue corpus.
    Synth(SynthArgs),
}

/// Flags mirror the configuration keys; any flag overrides the config file.
#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// ce, face-opr, face-opo, face-gpr, face-gpo, cp, cp-free, face-cp, face-cp-free.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    entropy_floor: Option<String>,
    #[arg(long)]
    clip: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    factor: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    plateau_threshold: Option<String>,
    #[arg(long)]
    max_reductions: Option<String>,
    /// Batches between evaluations; 0 evaluates once per epoch.
    #[arg(long)]
    eval_every: Option<String>,
    #[arg(long)]
    max_epochs: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    valid_cap: Option<String>,
    #[arg(long)]
    max_len: Option<String>,
    #[arg(long)]
    max_vocab: Option<String>,
    #[arg(long)]
    embed: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    min_tokens: Option<String>,
    #[arg(long)]
    filter_after_unk: bool,
    #[arg(long)]
    resume_optimizer: bool,
    #[arg(long)]
    face_from_scratch: bool,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Checkpoint to refine.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self, phase: Phase) -> Result<TrainConfig> {
        let mut c = TrainConfig::new(phase);
        if let Some(path) = &self.config {
            c.apply_file(path)?;
        }
        let text = [
            ("loss", &self.loss),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("beta", &self.beta),
            ("entropy_floor", &self.entropy_floor),
            ("clip", &self.clip),
            ("dropout", &self.dropout),
            ("factor", &self.factor),
            ("patience", &self.patience),
            ("plateau_threshold", &self.plateau_threshold),
            ("max_reductions", &self.max_reductions),
            ("eval_every", &self.eval_every),
            ("max_epochs", &self.max_epochs),
            ("max_steps", &self.max_steps),
            ("seed", &self.seed),
            ("valid_cap", &self.valid_cap),
            ("max_len", &self.max_len),
            ("max_vocab", &self.max_vocab),
            ("embed", &self.embed),
            ("hidden", &self.hidden),
            ("layers", &self.layers),
            ("min_tokens", &self.min_tokens),
        ];
        for (key, value) in text {
            if let Some(v) = value {
                c.set(key, v)?;
            }
        }
        for (key, on) in [
            ("filter_after_unk", self.filter_after_unk),
            ("resume_optimizer", self.resume_optimizer),
            ("face_from_scratch", self.face_from_scratch),
        ] {
            if on {
                c.set(key, "true")?;
            }
        }
        for (key, value) in [
            ("train", &self.train),
            ("valid", &self.valid),
            ("vocab", &self.vocab),
            ("base", &self.base),
            ("out_dir", &self.out_dir),
        ] {
            if let Some(p) = value {
                c.set(key, &p.display().to_string())?;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Defaults to vocab.txt beside the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    /// Where report.txt and responses.txt go; defaults to the checkpoint's directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// One response per line.
    #[arg(long)]
    responses: Option<PathBuf>,
    /// Decode the messages of this pair file instead of reading responses.
    #[arg(long, requires = "checkpoint")]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Also tabulate the tokens that follow this one; repeatable.
    #[arg(long)]
    after: Vec<String>,
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// `token<TAB>count` frequency dump; needs --vocab or --checkpoint.
    #[arg(long)]
    freq: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 5000)]
    train_size: usize,
    #[arg(long, default_value_t = 500)]
    valid_size: usize,
    #[arg(long, default_value_t = 500)]
    test_size: usize,
    /// Zipf exponent over the ranked response templates.
    #[arg(long, default_value_t = 1.0)]
    exponent: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn vocab_for(explicit: &Option<PathBuf>, checkpoint: Option<&Path>) -> Result<Vocabulary> {
    let path = match (explicit, checkpoint) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => c.with_file_name("vocab.txt"),
        (None, None) => return Err(Error::Usage("a vocabulary file is required".into())),
    };
    Vocabulary::load(&path)
}

fn run_train(args: &RunArgs, phase: Phase) -> Result<()> {
    let mut config = args.resolve(phase)?;
    let base = match phase {
        Phase::Train => None,
        Phase::Refine => {
            let path = config
                .base
                .clone()
                .ok_or_else(|| Error::Usage("refine needs --base".into()))?;
            if config.vocab.is_none() {
                config.vocab = Some(path.with_file_name("vocab.txt"));
            }
            Some(Checkpoint::load(&path)?)
        }
    };
    let data = load_dataset(&config)?;
    let out = config.out_dir.clone();
    let outcome = match base {
        None => train(&config, &data, Some(&out))?,
        Some(b) => refine(&config, &data, b, Some(&out))?,
    };
    println!(
        "steps = {}\nepochs = {}\nbest_d1 = {}\nlr = {}\nstopped_early = {}\nbest = {}",
        outcome.steps,
        outcome.epochs,
        outcome.best_d1,
        outcome.scheduler.lr,
        outcome.stopped_early,
        out.join("best.ckpt").display()
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let vocab = vocab_for(&args.vocab, Some(&args.checkpoint))?;
    let test = read_pairs(&args.test)?;
    let evaluation = evaluate(&ckpt.params, &vocab, &test, args.max_len)?;
    let dir = args
        .out_dir
        .clone()
        .unwrap_or_else(|| args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    evaluation.save(&dir)?;
    info!("wrote {}", dir.join("report.txt").display());
    print!("{}", evaluation.report.to_kv());
    println!("{}", evaluation.report.to_record());
    Ok(())
}

fn run_analyze(args: &AnalyzeArgs) -> Result<()> {
    let ckpt_path = args.checkpoint.as_deref();
    let responses = match (&args.responses, &args.data, ckpt_path) {
        (Some(path), _, _) => read_responses(path)?,
        (None, Some(data), Some(ckpt)) => {
            let params = Checkpoint::load(ckpt)?.params;
            let vocab = vocab_for(&args.vocab, Some(ckpt))?;
            let pairs = read_pairs(data)?;
            evaluate(&params, &vocab, &pairs, args.max_len)?
                .responses
                .iter()
                .map(|r| faceforge::corpus::tokenize(r))
                .collect()
        }
        _ => return Err(Error::Usage("give --responses, or --data with --checkpoint".into())),
    };
    let table = match &args.freq {
        Some(path) => {
            let vocab = vocab_for(&args.vocab, ckpt_path)?;
            let table = FrequencyTable::load(path, &vocab, FreqMode::Output)?;
            Some((table, vocab))
        }
        None => None,
    };
    let text = analyze(&responses, &args.after, args.top, table.as_ref().map(|(t, v)| (t, v)))?;
    print!("{text}");
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let sizes = SplitSizes {
        train: args.train_size,
        valid: args.valid_size,
        test: args.test_size,
    };
    write_synth(&args.out_dir, args.exponent, sizes, args.seed)?;
    println!("wrote {}/{{train,valid,test}}.txt", args.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => run_train(a, Phase::Train),
        Command::Refine(a) => run_train(a, Phase::Refine),
        Command::Eval(a) => run_eval(a),
        Command::Analyze(a) => run_analyze(a),
        Command::Synth(a) => run_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
