use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gummp::checkpoint::Checkpoint;
use gummp::data::{gen_synthetic, ingest, records_to_jsonl, Limits, SyntheticTaskSpec};
use gummp::decoder::StepTrace;
use gummp::experiment::{self, TrainOptions};
use gummp::{Ablation, Error, ExperimentConfig, ModelConfig, Result};

#[derive(Parser)]
#[command(name = "gummp", version, about = "Multi-passage answer generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint after every epoch.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and print the JSON report.
    Eval(EvalArgs),
    /// Write one answer per input record plus a per-step trace file.
    Generate(GenerateArgs),
    /// Generate the synthetic cross-passage task as JSONL.
    Synth(SynthArgs),
    /// Train full, no-neg and no-um over several seeds and compare them.
    Ablate(AblateArgs),
}

/// Flags that override fields of the config file.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON). Defaults to the small desk configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// full, no-neg or no-um
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Width of the passage alignment memory.
    #[arg(long)]
    pam_width: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_json(&read(path)?)?,
            None => ExperimentConfig {
                model: ModelConfig::desk(),
                ..Default::default()
            },
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(a) = self.ablation {
            cfg.model.ablation = a;
        }
        if let Some(l) = self.pam_width {
            cfg.model.pam_width = l;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training data (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Optional dev data, scored with greedy decoding after each epoch.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Where to write the checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Continue from this checkpoint instead of starting fresh. Only
    /// --epochs is honored from the override flags.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Append one JSON object per epoch to this file.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    beam_size: usize,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    /// Seed for drawing negative passages; defaults to the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Answers file, one JSON object per input record.
    #[arg(long)]
    out: PathBuf,
    /// Trace file; defaults to the answers path with `.trace.jsonl` appended.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    beam_size: usize,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Task description (JSON); missing fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    examples: Option<usize>,
    /// Number of passages containing the key entity.
    #[arg(long)]
    cooccurrence: Option<usize>,
    #[arg(long)]
    passages: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training data (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Test data (JSONL).
    #[arg(long)]
    eval_data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 20)]
    beam_size: usize,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    /// Also write the table as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let (mut trainer, init_seed, data) = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut t = ck.to_trainer()?;
            if let Some(e) = args.cfg.epochs {
                t.train.epochs = e;
            }
            let data = ingest(&args.data, &Limits::from(&t.model.config))?;
            (t, ck.metadata.init_seed, data)
        }
        None => {
            let cfg = args.cfg.load()?;
            let data = ingest(&args.data, &Limits::from(&cfg.model))?;
            (experiment::new_trainer(&cfg, &data)?, cfg.train.seed, data)
        }
    };
    let limits = Limits::from(&trainer.model.config);
    let dev = args.dev.as_deref().map(|p| ingest(p, &limits)).transpose()?;
    let mut log_file = match &args.log {
        Some(p) => Some(fs::OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let opts = TrainOptions {
        eval_every: 1,
        max_len: args.max_len,
        target_loss: None,
    };
    // checkpoints are written from inside the loop, so drive epochs one at a time
    let budget = trainer.train.epochs;
    while trainer.epoch < budget {
        trainer.train.epochs = trainer.epoch + 1;
        let logs = experiment::train_model(&mut trainer, &data, dev.as_deref(), &opts, |_| {})?;
        trainer.train.epochs = budget;
        for l in &logs {
            match (l.dev_bleu1, l.dev_rouge_l) {
                (Some(b), Some(r)) => {
                    eprintln!("epoch {}: loss {:.4}, dev BLEU-1 {b:.4}, ROUGE-L {r:.4}", l.epoch, l.loss)
                }
                _ => eprintln!("epoch {}: loss {:.4}", l.epoch, l.loss),
            }
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(l).expect("log serializes"))?;
            }
        }
        Checkpoint::from_trainer(&trainer, init_seed).save(&args.checkpoint)?;
    }
    if !args.checkpoint.exists() {
        Checkpoint::from_trainer(&trainer, init_seed).save(&args.checkpoint)?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(gummp::model::GumMp, u64)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.to_model()?, ck.metadata.config.train.seed))
}

fn eval(args: &EvalArgs) -> Result<()> {
    let (model, train_seed) = load_model(&args.checkpoint)?;
    let data = ingest(&args.data, &Limits::from(&model.config))?;
    let seed = args.seed.unwrap_or(train_seed);
    let report = experiment::evaluate(&model, &data, args.beam_size, args.max_len, seed)?;
    let json = report.to_json();
    if let Some(out) = &args.out {
        write(out, &json)?;
    }
    // a closed pipe on stdout is not an error worth reporting
    let _ = writeln!(std::io::stdout(), "{json}");
    Ok(())
}

#[derive(Serialize)]
struct AnswerLine<'a> {
    id: &'a str,
    answer: String,
    finished: bool,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    id: &'a str,
    steps: &'a [StepTrace],
}

fn generate(args: &GenerateArgs) -> Result<()> {
    let (model, train_seed) = load_model(&args.checkpoint)?;
    let data = ingest(&args.data, &Limits::from(&model.config))?;
    let seed = args.seed.unwrap_or(train_seed);
    let preds = experiment::predict(&model, &data, args.beam_size, args.max_len, seed)?;
    let (mut answers, mut traces) = (String::new(), String::new());
    for p in &preds {
        let line = AnswerLine {
            id: &p.id,
            answer: p.tokens.join(" "),
            finished: p.finished,
        };
        answers.push_str(&serde_json::to_string(&line).expect("answer serializes"));
        answers.push('\n');
        let trace = TraceLine {
            id: &p.id,
            steps: &p.trace,
        };
        traces.push_str(&serde_json::to_string(&trace).expect("trace serializes"));
        traces.push('\n');
    }
    let trace_path = args.trace.clone().unwrap_or_else(|| {
        let mut s = args.out.clone().into_os_string();
        s.push(".trace.jsonl");
        PathBuf::from(s)
    });
    write(&args.out, &answers)?;
    write(&trace_path, &traces)?;
    eprintln!("wrote {} answers to {}", preds.len(), args.out.display());
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut spec: SyntheticTaskSpec = match &args.spec {
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| Error::Config(format!("task spec: {e}")))?,
        None => SyntheticTaskSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(n) = args.examples {
        spec.examples = n;
    }
    if let Some(m) = args.cooccurrence {
        spec.cooccurrence = m;
    }
    if let Some(k) = args.passages {
        spec.passages = k;
    }
    let records = gen_synthetic(&spec)?;
    write(&args.out, &records_to_jsonl(&records))?;
    eprintln!("wrote {} examples to {}", records.len(), args.out.display());
    Ok(())
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let cfg = args.cfg.load()?;
    let limits = Limits::from(&cfg.model);
    let train = ingest(&args.data, &limits)?;
    let test = ingest(&args.eval_data, &limits)?;
    let table = experiment::run_ablation(
        &cfg,
        &Ablation::ALL,
        &args.seeds,
        &train,
        &test,
        args.beam_size,
        args.max_len,
        |line| eprintln!("{line}"),
    )?;
    if let Some(out) = &args.out {
        write(out, &serde_json::to_string_pretty(&table).expect("table serializes"))?;
    }
    let _ = write!(std::io::stdout(), "{}", table.render());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Generate(a) => generate(a),
        Command::Synth(a) => synth(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
