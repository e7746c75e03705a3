//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Runtime
//! failures print exactly one line starting with `error: ` to stderr.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ColorChoice, Parser, Subcommand};

use crate::analysis::{benchmark_scaling, entropy_profile, export_attention, fit_loglog_slope, fmt_g17};
use crate::autograd::gradcheck::{run_suite, GRADCHECK_INSTANCES, GRADCHECK_TOLERANCE, SUITES};
use crate::autograd::{run_all, SuiteReport};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::tasks::{parse_tokens, TaskKind, TaskSpec};
use crate::training::{evaluate, held_out_set, train, TrainConfig};
use crate::transformer::config::{ModelConfig, BOS, EOS};
use crate::transformer::model::{attention_maps, greedy_generate};
use crate::transformer::params::ModelParams;
use crate::transformer::pe::sinusoidal_pe;
use crate::transformer::{load_checkpoint, save_checkpoint};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "attnlab",
    about = "Train, verify and inspect a small encoder-decoder Transformer",
    arg_required_else_help = true,
    color = ColorChoice::Never
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct TaskArgs {
    /// copy, reverse or sort
    #[arg(long)]
    task: TaskKind,
    /// Number of distinct payload symbols
    #[arg(long, default_value_t = 16)]
    vocab: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on a synthetic task
    Train {
        #[command(flatten)]
        task: TaskArgs,
        /// key=value file with model and training settings
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to write when training ends
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON-lines metrics log, one object per step
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Overrides the config file's seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Greedy-decoding token accuracy on the held-out set of a task
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value_t = 200)]
        n_examples: usize,
        /// Seed the model was trained with
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Greedy decoding of one source sequence
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Space-separated token ids; BOS and EOS are added unless present
        #[arg(long, allow_hyphen_values = true)]
        src: String,
        /// Longest output; defaults to the model's max_len
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Finite-difference gradient checks
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = gradcheck_modules())]
        module: String,
        #[arg(long, default_value_t = GRADCHECK_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Attention forward timing against sequence length
    Benchmark {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        ns: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 9)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export attention maps and print per-head entropies
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        /// Space-separated token ids; BOS and EOS are added unless present
        #[arg(long)]
        src: String,
        /// Decoder prefix; defaults to BOS followed by the greedy output
        #[arg(long)]
        tgt: Option<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the sinusoidal position table as CSV
    PeDump {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
    },
}

fn gradcheck_modules() -> Vec<&'static str> {
    std::iter::once("all").chain(SUITES).collect()
}

/// Parses `key=value` lines onto fresh configurations. Blank lines and
/// lines starting with `#` are ignored. Returns the keys that were set.
pub fn parse_config(text: &str) -> Result<(ModelConfig, TrainConfig, Vec<String>)> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    let mut seen: Vec<String> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |msg: String| Error::Config(format!("line {}: {msg}", i + 1));
        let (key, value) = line.split_once('=').ok_or_else(|| at(format!("expected key=value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let canonical = if key == "h" { "heads" } else { key };
        if seen.iter().any(|k| k == canonical) {
            return Err(at(format!("key {key:?} given twice")));
        }
        if ModelConfig::KEYS.contains(&canonical) {
            model.set(canonical, value).map_err(|e| at(e.to_string()))?;
        } else if TrainConfig::KEYS.contains(&canonical) {
            train.set(canonical, value).map_err(|e| at(e.to_string()))?;
        } else {
            return Err(at(format!("unknown key {key:?}")));
        }
        seen.push(canonical.to_string());
    }
    Ok((model, train, seen))
}

/// Seeds for parameter init, the data stream and dropout, all derived from
/// one run seed so the three streams never coincide.
pub fn run_seeds(seed: u64) -> (u64, u64, u64) {
    let mut r = Rng::seed(seed);
    (r.next_u64(), r.next_u64(), r.next_u64())
}

fn task_spec(t: &TaskArgs, seed: u64) -> Result<TaskSpec> {
    TaskSpec::new(t.task, t.vocab, t.min_len, t.max_len, run_seeds(seed).1)
}

/// Token ids with BOS/EOS framing added when the input lacks it.
fn framed_tokens(text: &str) -> Result<Vec<usize>> {
    let mut toks = parse_tokens(text)?;
    if toks.first() != Some(&BOS) {
        toks.insert(0, BOS);
    }
    if toks.last() != Some(&EOS) || toks.len() == 1 {
        toks.push(EOS);
    }
    Ok(toks)
}

fn join(tokens: &[usize]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

fn cmd_train(
    task: &TaskArgs,
    config: Option<&Path>,
    out: Option<&Path>,
    metrics: Option<&Path>,
    seed: Option<u64>,
    stdout: &mut dyn Write,
) -> Result<()> {
    let text = match config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let (mut model, mut tcfg, seen) = parse_config(&text)?;
    let seed = seed.unwrap_or(tcfg.seed);
    let spec = task_spec(task, seed)?;
    if !seen.iter().any(|k| k == "vocab_size") {
        model.vocab_size = spec.model_vocab_size();
    }
    model.validate()?;
    let (init, _, dropout) = run_seeds(seed);
    tcfg.seed = dropout;
    let params = ModelParams::<f64>::init(&model, &mut Rng::seed(init))?;
    let outcome = match metrics {
        Some(p) => {
            let mut w = BufWriter::new(fs::File::create(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?);
            let res = train(params, &model, &tcfg, &spec, Some(&mut w))?;
            w.flush()?;
            res
        }
        None => train(params, &model, &tcfg, &spec, None)?,
    };
    if let Some(p) = out {
        save_checkpoint(p, &model, &outcome.params)?;
    }
    writeln!(stdout, "steps\t{}", outcome.records.len())?;
    if let Some(last) = outcome.records.last() {
        writeln!(stdout, "final_loss\t{}", last.loss)?;
    }
    if let Some(acc) = outcome.final_accuracy {
        writeln!(stdout, "accuracy\t{acc}")?;
    }
    Ok(())
}

/// Prints the suite table and returns the names of failing suites.
fn cmd_gradcheck(module: &str, instances: usize, seed: u64, stdout: &mut dyn Write) -> Result<Vec<&'static str>> {
    let reports: Vec<SuiteReport> = if module == "all" && instances == GRADCHECK_INSTANCES {
        run_all(seed)?
    } else if module == "all" {
        SUITES.iter().map(|s| run_suite(s, instances, seed)).collect::<Result<_>>()?
    } else {
        vec![run_suite(module, instances, seed)?]
    };
    writeln!(stdout, "suite\tinstances\tmax_rel_err\tmax_rel_err_f64\tstatus")?;
    for r in &reports {
        writeln!(stdout, "{r}")?;
    }
    Ok(reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect())
}

fn cmd_benchmark(ns: &[usize], d: usize, repeats: usize, seed: u64, stdout: &mut dyn Write) -> Result<()> {
    let rows = benchmark_scaling(ns, d, repeats, seed)?;
    writeln!(stdout, "n\tmedian_secs\tflops")?;
    for r in &rows {
        writeln!(stdout, "{}\t{:.6e}\t{}", r.n, r.median_secs, r.flops)?;
    }
    if rows.len() >= 2 {
        let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.median_secs).collect();
        writeln!(stdout, "slope\t{:.4}", fit_loglog_slope(&xs, &ys)?)?;
    }
    Ok(())
}

fn cmd_inspect(ckpt: &Path, src: &str, tgt: Option<&str>, out_dir: &Path, stdout: &mut dyn Write) -> Result<()> {
    let (cfg, params) = load_checkpoint(ckpt)?;
    let src = framed_tokens(src)?;
    let tgt = match tgt {
        Some(t) => parse_tokens(t)?,
        None => {
            let mut t = vec![BOS];
            t.extend(greedy_generate(&src, &params, &cfg, cfg.max_len)?);
            t
        }
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::Io(format!("{}: {e}", out_dir.display())))?;
    let maps = attention_maps(&src, &tgt, &params, &cfg)?;
    let blocks = [
        ("encoder_self", &maps.encoder_self),
        ("decoder_self", &maps.decoder_self),
        ("decoder_cross", &maps.decoder_cross),
    ];
    for (kind, layers) in blocks {
        for (l, heads) in layers.iter().enumerate() {
            export_attention(heads.as_slice(), out_dir, &format!("{kind}_layer{l}"))?;
        }
    }
    let profile = entropy_profile(&params, &cfg, &src, &tgt)?;
    writeln!(stdout, "block\tlayer\thead\tmean_entropy")?;
    let rows = [
        ("encoder_self", &profile.encoder_self),
        ("decoder_self", &profile.decoder_self),
        ("decoder_cross", &profile.decoder_cross),
    ];
    for (kind, layers) in rows {
        for (l, heads) in layers.iter().enumerate() {
            for (h, e) in heads.iter().enumerate() {
                writeln!(stdout, "{kind}\t{l}\t{h}\t{e:.6}")?;
            }
        }
    }
    Ok(())
}

fn cmd_pe_dump(n: usize, d: usize, stdout: &mut dyn Write) -> Result<()> {
    let pe = sinusoidal_pe::<f64>(n, d)?;
    for i in 0..pe.rows() {
        let row: Vec<String> = pe.row(i).iter().map(|&v| fmt_g17(v)).collect();
        writeln!(stdout, "{}", row.join(","))?;
    }
    Ok(())
}

fn run(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::Train {
            task,
            config,
            out,
            metrics,
            seed,
        } => cmd_train(&task, config.as_deref(), out.as_deref(), metrics.as_deref(), seed, stdout)?,
        Command::Eval {
            ckpt,
            task,
            n_examples,
            seed,
        } => {
            let (cfg, params) = load_checkpoint(&ckpt)?;
            let spec = task_spec(&task, seed)?;
            spec.validate_for(&cfg)?;
            let acc = evaluate(&params, &cfg, &held_out_set(&spec, n_examples))?;
            writeln!(stdout, "{acc}")?;
        }
        Command::Generate { ckpt, src, max_steps } => {
            let (cfg, params) = load_checkpoint(&ckpt)?;
            let out = greedy_generate(&framed_tokens(&src)?, &params, &cfg, max_steps.unwrap_or(cfg.max_len))?;
            writeln!(stdout, "{}", join(&out))?;
        }
        Command::Gradcheck { module, instances, seed } => {
            let failed = cmd_gradcheck(&module, instances, seed, stdout)?;
            if !failed.is_empty() {
                writeln!(stderr, "error: gradient check above {GRADCHECK_TOLERANCE:e} in {}", failed.join(", "))?;
                return Ok(EXIT_FAILURE);
            }
        }
        Command::Benchmark { ns, d, repeats, seed } => cmd_benchmark(&ns, d, repeats, seed, stdout)?,
        Command::Inspect { ckpt, src, tgt, out_dir } => cmd_inspect(&ckpt, &src, tgt.as_deref(), &out_dir, stdout)?,
        Command::PeDump { n, d } => cmd_pe_dump(n, d, stdout)?,
    }
    Ok(EXIT_OK)
}

/// Runs one command line (program name first) against the given streams.
pub fn dispatch_to<I, S>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(stderr, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(stdout, "{text}");
                EXIT_OK
            };
        }
    };
    match run(cli, stdout, stderr) {
        Ok(code) => {
            let _ = stdout.flush();
            code
        }
        Err(e) => {
            let _ = stdout.flush();
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(stderr, "error: {msg}");
            EXIT_FAILURE
        }
    }
}

/// [`dispatch_to`] on the process's standard streams.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    dispatch_to(argv, &mut stdout.lock(), &mut stderr.lock())
}
