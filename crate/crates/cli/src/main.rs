//! Command-line front end: vocabulary learning, shard preparation,
//! training, evaluation and example inspection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use albert_wop::corpus::{ingest, make_segment_pairs};
use albert_wop::corruption::{build_examples, write_shard, Shard};
use albert_wop::model::{init_params, AlbertConfig, ObjectiveMetrics, Objectives};
use albert_wop::tokenizer::{build_vocab, Vocab};
use albert_wop::trainer::{
    evaluate_checkpoint, evaluate_intrinsic, load_checkpoint, load_shards, run_ablation, train, RunConfig,
    TrainError, TrainOptions, FINAL_CHECKPOINT, METRICS_FILE,
};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "albert-wop", version, about = "Shared-layer encoder pretraining with MLM, SOP and WOP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a subword vocabulary from text files.
    Vocab {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokenize, pair and corrupt text into a training shard.
    Prepare {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a model on one or more shards.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Shards to train on; defaults to `trainer.data` in the config.
        #[arg(long, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Intrinsic accuracy of a checkpoint, or of a fresh initialization.
    Eval {
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the untrained model described by this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long)]
        json: bool,
    },
    /// Train one model per objective combination and compare them.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        /// Objective sets such as `mlm+sop`; defaults to MLM+SOP,
        /// MLM+SOP+WOP and MLM+WOP.
        #[arg(long, num_args = 1..)]
        combo: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print one example of a shard position by position.
    Inspect {
        #[arg(long)]
        shard: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Print a built-in configuration as JSON.
    Config {
        #[arg(value_enum)]
        preset: Preset,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Base,
    Large,
    Tiny,
}

fn preset(p: Preset) -> RunConfig {
    let mut cfg = RunConfig::default();
    match p {
        Preset::Base => {}
        Preset::Large => cfg.model = AlbertConfig::large(),
        Preset::Tiny => {
            cfg.model = AlbertConfig {
                seq_len: 32,
                max_positions: 32,
                ..AlbertConfig::tiny(512)
            };
            cfg.trainer.micro_batch_size = 8;
            cfg.trainer.accumulation_steps = 1;
            cfg.trainer.total_steps = 10;
            cfg.trainer.metrics_every = 1;
            cfg.trainer.checkpoint_every = 0;
            cfg.optimizer.peak_lr = 5e-3;
            cfg.optimizer.warmup_ratio = 0.1;
        }
    }
    cfg
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?;
    cfg.validate().with_context(|| format!("config {}", path.display()))?;
    Ok(cfg)
}

fn load_vocab(path: &Path) -> Result<Vocab> {
    Vocab::load(path).with_context(|| format!("reading vocabulary {}", path.display()))
}

fn cmd_vocab(input: &[PathBuf], size: usize, out: &Path) -> Result<()> {
    let docs = ingest(input)?;
    let vocab = build_vocab(docs.iter().flat_map(|d| &d.sentences), size)?;
    vocab.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("tokens: {}", vocab.len());
    let top: Vec<&str> = vocab.merged_tokens().take(10).collect();
    println!("first merges: {}", top.join(" "));
    Ok(())
}

fn cmd_prepare(input: &[PathBuf], vocab: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let vocab = load_vocab(vocab)?;
    if vocab.len() > cfg.model.vocab_size {
        bail!(
            "vocabulary has {} tokens but the model embeds only {}",
            vocab.len(),
            cfg.model.vocab_size
        );
    }
    let seq_len = cfg.model.seq_len;
    let docs = ingest(input)?;
    let pairs: Vec<_> = docs.iter().flat_map(|d| make_segment_pairs(d, &vocab, seq_len)).collect();
    if pairs.is_empty() {
        bail!("no sentence pairs in the input");
    }
    let (examples, stats) = build_examples(&pairs, vocab.len(), seq_len, &cfg.corruption)?;
    write_shard(out, seq_len, &examples).with_context(|| format!("writing {}", out.display()))?;
    let (mask, random, keep) = stats.action_split();
    println!("examples: {}", examples.len());
    println!("masked fraction: {:.4}", stats.masked_fraction());
    println!("mlm actions (mask/random/keep): {mask:.4}/{random:.4}/{keep:.4}");
    println!("wop fraction: {:.4}", stats.wop_fraction());
    println!("swapped fraction: {:.4}", stats.swapped_fraction());
    Ok(())
}

fn cmd_train(config: &Path, data: &[PathBuf], out: &Path, resume: Option<&Path>, stop_after: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let paths = if data.is_empty() { &cfg.trainer.data } else { data };
    if paths.is_empty() {
        bail!("no training data given");
    }
    let examples = load_shards(paths, cfg.model.seq_len)?;
    let resume = resume
        .map(|p| load_checkpoint(p).with_context(|| format!("reading checkpoint {}", p.display())))
        .transpose()?;
    let opts = TrainOptions {
        out_dir: Some(out.to_owned()),
        resume,
        stop_after,
    };
    let outcome = train(&cfg, &examples, &opts)?;
    println!("steps: {}", outcome.checkpoint.step);
    if let Some(last) = outcome.metrics.last() {
        println!("final loss: {:.6}", last.metrics.loss_total);
    }
    println!("metrics: {}", out.join(METRICS_FILE).display());
    println!("checkpoint: {}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn print_metrics(m: &ObjectiveMetrics) {
    let rows = [
        ("loss_total", Some(m.loss_total)),
        ("loss_mlm", m.loss_mlm),
        ("loss_sop", m.loss_sop),
        ("loss_wop", m.loss_wop),
        ("acc_mlm", m.acc_mlm),
        ("acc_sop", m.acc_sop),
        ("acc_wop", m.acc_wop),
    ];
    for (name, v) in rows {
        match v {
            Some(v) => println!("{name:<10} {v:>10.4}"),
            None => println!("{name:<10} {:>10}", "-"),
        }
    }
}

fn cmd_eval(checkpoint: Option<&Path>, config: Option<&Path>, data: &[PathBuf], batch_size: usize, json: bool) -> Result<()> {
    let metrics = match (checkpoint, config) {
        (Some(path), _) => {
            let ck = load_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
            let examples = load_shards(data, ck.config.model.seq_len)?;
            evaluate_checkpoint(&ck, &examples)?
        }
        (None, Some(path)) => {
            let cfg = load_config(path)?;
            let examples = load_shards(data, cfg.model.seq_len)?;
            let params = init_params(&cfg.model, cfg.trainer.seed)?;
            evaluate_intrinsic(&params, &cfg.model, &examples, batch_size)?
        }
        (None, None) => bail!("either --checkpoint or --config is required"),
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&metrics)?);
    } else {
        print_metrics(&metrics);
    }
    Ok(())
}

fn parse_combo(s: &str) -> Result<Objectives> {
    let mut o = Objectives::new(false, false, false);
    for part in s.split('+') {
        match part.trim().to_ascii_lowercase().as_str() {
            "mlm" => o.mlm = true,
            "sop" => o.sop = true,
            "wop" => o.wop = true,
            other => bail!("unknown objective {other:?} in {s:?}"),
        }
    }
    Ok(o)
}

fn cmd_ablate(config: &Path, input: &[PathBuf], vocab: &Path, combos: &[String], out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let vocab = load_vocab(vocab)?;
    let combos: Vec<Objectives> = if combos.is_empty() {
        vec![
            Objectives::new(true, true, false),
            Objectives::ALL,
            Objectives::new(true, false, true),
        ]
    } else {
        combos.iter().map(|c| parse_combo(c)).collect::<Result<_>>()?
    };
    let docs = ingest(input)?;
    let pairs: Vec<_> = docs
        .iter()
        .flat_map(|d| make_segment_pairs(d, &vocab, cfg.model.seq_len))
        .collect();
    let table = run_ablation(&cfg, &pairs, vocab.len(), &combos)?;
    print!("{table}");
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_string_pretty(&table)?)?;
    }
    Ok(())
}

fn cmd_inspect(shard: &Path, index: usize, vocab: &Path) -> Result<()> {
    let shard = Shard::open(shard).with_context(|| format!("reading shard {}", shard.display()))?;
    let vocab = load_vocab(vocab)?;
    let ex = shard.get(index)?;
    let piece = |id: i64| -> Result<String> { Ok(vocab.token(id as u32)?.to_owned()) };
    println!("example {index} of {}  sop_label {}", shard.len(), ex.sop_label);
    println!("{:>4}  {:<16} {:<16} {:>5} {:>3} {:>4}", "pos", "piece", "mlm", "wop", "seg", "mask");
    for i in 0..ex.seq_len() {
        if ex.attention_mask[i] == 0 {
            continue;
        }
        let mlm = if ex.mlm_labels[i] >= 0 { piece(ex.mlm_labels[i])? } else { "·".into() };
        let wop = if ex.wop_labels[i] >= 0 {
            format!("←{}", ex.wop_labels[i])
        } else {
            "·".into()
        };
        println!(
            "{:>4}  {:<16} {:<16} {:>5} {:>3} {:>4}",
            i,
            piece(ex.input_ids[i] as i64)?,
            mlm,
            wop,
            ex.token_type_ids[i],
            ex.attention_mask[i]
        );
    }
    let padding = ex.attention_mask.iter().filter(|&&m| m == 0).count();
    if padding > 0 {
        println!("({padding} padding positions)");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Vocab { input, size, out } => cmd_vocab(&input, size, &out),
        Command::Prepare {
            input,
            vocab,
            config,
            out,
        } => cmd_prepare(&input, &vocab, &config, &out),
        Command::Train {
            config,
            data,
            out,
            resume,
            stop_after,
        } => cmd_train(&config, &data, &out, resume.as_deref(), stop_after),
        Command::Eval {
            checkpoint,
            config,
            data,
            batch_size,
            json,
        } => cmd_eval(checkpoint.as_deref(), config.as_deref(), &data, batch_size, json),
        Command::Ablate {
            config,
            input,
            vocab,
            combo,
            out,
        } => cmd_ablate(&config, &input, &vocab, &combo, out.as_deref()),
        Command::Inspect { shard, index, vocab } => cmd_inspect(&shard, index, &vocab),
        Command::Config { preset: p } => {
            println!("{}", preset(p).to_json());
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<TrainError>(), Some(TrainError::NonFiniteLoss { .. })));
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_DATA
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
