//! Command line front end: `synth`, `train`, `eval`, `generate`, `inspect`
//! and `bench`.
//!
//! A training run directory holds `model.ckpt`, `config.txt` (the resolved
//! configuration), `vocab.txt` and `train.log`. Commands taking `--ckpt`
//! read the sidecars next to the checkpoint file.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::{bench_heads, BenchSpec};
use crate::config::RunConfig;
use crate::data::records::{read_records, records_vocab, vocab_path, write_records};
use crate::data::synth::{generate_bundled, SyntheticSpec, TargetMode, Task};
use crate::data::{load_corpus, tokenize, EncodedRecord, Vocab};
use crate::error::{Error, Result};
use crate::eval::{generate_topk, inspect_topn, perplexity, repeat_prob, synthetic_kl, EvalReport};
use crate::heads::{HeadConfig, HeadKind};
use crate::model::Model;
use crate::params::ParamStore;
use crate::train::{load_checkpoint, save_checkpoint, AdamState, TrainData, Trainer};
use crate::transformer::BOS;

pub const CKPT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LOG_FILE: &str = "train.log";

#[derive(Parser, Debug)]
#[command(name = "scpr", version, about = "Partitioned softmax heads: train, evaluate, sample and benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Diagonal,
    Edge,
    Both,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic records and their vocabulary sidecar.
    Synth {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Quadruples (parallelogram) or prompts per template (list, choice).
        #[arg(long, default_value_t = 40)]
        groups: usize,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        target_mode: ModeArg,
    },
    /// Train a model and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a corpus or a record file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Sample a continuation with top-K sampling.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Defaults to the run's `eval.topk`.
        #[arg(long)]
        topk: Option<usize>,
        /// Defaults to the run's `eval.len`.
        #[arg(long = "len")]
        length: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the most probable next words for a prompt.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 5)]
        n: usize,
    },
    /// Time output heads on random hidden states.
    Bench {
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

/// Parses arguments, runs the command and returns the process exit status.
pub fn main_with_args<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match run(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Synth {
            task,
            seed,
            out: path,
            groups,
            items,
            target_mode,
        } => synth(&task, seed, &path, groups, items, target_mode, out),
        Command::Train { config, out: dir, overrides } => {
            let mut cfg = RunConfig::load(&config)?;
            for o in &overrides {
                cfg.set_pair(o)?;
            }
            train(&cfg, &dir, out, err)
        }
        Command::Eval { ckpt, data } => {
            let (model, store, vocab) = load_run(&ckpt)?;
            write!(out, "{}", evaluate(&model, &store, &vocab, &data)?.lines(&split_name(&data)))?;
            Ok(())
        }
        Command::Generate {
            ckpt,
            prompt,
            topk,
            length,
            seed,
        } => {
            let (model, store, vocab) = load_run(&ckpt)?;
            let cfg = RunConfig::load(&run_dir(&ckpt).join(CONFIG_FILE))?;
            let topk = topk.map_or_else(|| cfg.parsed("eval.topk"), Ok)?;
            let length = length.map_or_else(|| cfg.parsed("eval.len"), Ok)?;
            let ids = generate_topk(&model, &store, &prompt_ids(&vocab, &prompt), topk, length, seed)?;
            writeln!(out, "{}", vocab.decode(&ids))?;
            Ok(())
        }
        Command::Inspect { ckpt, prompt, n } => {
            let (model, store, vocab) = load_run(&ckpt)?;
            for (id, p) in inspect_topn(&model, &store, &prompt_ids(&vocab, &prompt), n)? {
                writeln!(out, "{}\t{p:.4}", vocab.word(id))?;
            }
            Ok(())
        }
        Command::Bench { spec } => {
            let spec = match spec {
                Some(p) => parse_bench_spec(&fs::read_to_string(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)?,
                None => BenchSpec::default(),
            };
            for r in bench_heads(&spec)? {
                writeln!(out, "{r}")?;
            }
            Ok(())
        }
    }
}

fn split_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned())
}

fn prompt_ids(vocab: &Vocab, prompt: &str) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(prompt));
    ids
}

fn synth(task: &str, seed: u64, path: &Path, groups: usize, items: Option<usize>, mode: ModeArg, out: &mut dyn Write) -> Result<()> {
    let task: Task = task.parse()?;
    let modes: &[TargetMode] = match (task, mode) {
        (Task::Parallelogram, ModeArg::Both) => &[TargetMode::Diagonal, TargetMode::Edge],
        (_, ModeArg::Edge) => &[TargetMode::Edge],
        _ => &[TargetMode::Diagonal],
    };
    let mut records = Vec::new();
    for &m in modes {
        let mut spec = SyntheticSpec::new(task, groups, seed);
        spec.target_mode = m;
        if let Some(n) = items {
            spec.items_per_prompt = n;
        }
        records.extend(generate_bundled(&spec)?);
    }
    let vocab = records_vocab(&records)?;
    write_records(path, &records, &vocab)?;
    writeln!(out, "wrote {} records to {} (vocab {})", records.len(), path.display(), vocab.len())?;
    Ok(())
}

/// Loads training data named by the config; returns it with its vocabulary.
pub fn load_train_data(cfg: &RunConfig) -> Result<(TrainData, Vocab)> {
    let path = cfg.get("data.train");
    if path.is_empty() {
        return Err(Error::Config("data.train is not set".into()));
    }
    match cfg.get("data.kind") {
        "corpus" => {
            let docs = load_corpus(Path::new(path))?;
            let vocab = Vocab::build(docs.iter().map(String::as_str), Some(cfg.parsed("data.vocab_cap")?))?;
            let batch = tokenize(&docs, &vocab, cfg.parsed("data.seq_len")?)?;
            Ok((TrainData::Lm(batch.seqs), vocab))
        }
        "records" => {
            let (records, vocab) = read_records(Path::new(path))?;
            Ok((TrainData::Records(records), vocab))
        }
        other => Err(Error::Config(format!("data.kind = `{other}`; expected corpus or records"))),
    }
}

fn train(cfg: &RunConfig, dir: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    // Record the seed actually used, including an SCPR_SEED override.
    let mut cfg = cfg.clone();
    cfg.set("train.seed", &cfg.seed()?.to_string())?;
    let cfg = &cfg;
    write!(err, "{}", cfg.render())?;
    let (data, vocab) = load_train_data(cfg)?;
    let mcfg = cfg.model(vocab.len())?;
    let hcfg = cfg.head()?;
    let tcfg = cfg.train()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.render())?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let model = Model::new(mcfg, hcfg, &mut store, &mut rng)?;
    let ckpt = dir.join(CKPT_FILE);
    if tcfg.steps == 0 {
        save_checkpoint(&ckpt, &store, &AdamState::new(&store))?;
        writeln!(out, "wrote untrained checkpoint {}", ckpt.display())?;
        return Ok(());
    }
    let mut trainer = Trainer::new(model, store, tcfg)?;
    let mut log = fs::File::create(dir.join(LOG_FILE))?;
    let mut tee = Tee(&mut log, out);
    trainer.run(&data, &mut tee, Some(&ckpt))?;
    let valid = cfg.get("data.valid");
    if !valid.is_empty() {
        let report = evaluate(&trainer.model, &trainer.store, &vocab, Path::new(valid))?;
        write!(out, "{}", report.lines("valid"))?;
    }
    Ok(())
}

struct Tee<'a>(&'a mut dyn Write, &'a mut dyn Write);

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write_all(buf)?;
        self.1.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()?;
        self.1.flush()
    }
}

fn run_dir(ckpt: &Path) -> &Path {
    ckpt.parent().unwrap_or(Path::new("."))
}

/// Rebuilds the model described by a run directory and loads its weights.
pub fn load_run(ckpt: &Path) -> Result<(Model, ParamStore<f32>, Vocab)> {
    fs::metadata(ckpt)?;
    let dir = run_dir(ckpt);
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::new(cfg.model(vocab.len())?, cfg.head()?, &mut store, &mut rng)?;
    load_checkpoint(ckpt, &mut store)?;
    Ok((model, store, vocab))
}

/// Maps records encoded with `from` onto `to` by word.
fn remap(records: Vec<EncodedRecord>, from: &Vocab, to: &Vocab) -> Vec<EncodedRecord> {
    let m = |x: usize| to.id(from.word(x));
    records
        .into_iter()
        .map(|r| EncodedRecord {
            context: r.context.iter().map(|&x| if x == BOS { BOS } else { m(x) }).collect(),
            target: r.target.iter().map(|&(x, p)| (m(x), p)).collect(),
            forbidden: r.forbidden.iter().map(|&x| m(x)).collect(),
            split: r.split,
        })
        .collect()
}

/// Record files (with a `.vocab` sidecar) get KL and repetition metrics;
/// anything else is treated as a corpus and gets perplexity.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, vocab: &Vocab, data: &Path) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    if vocab_path(data).exists() {
        let (records, rv) = read_records(data)?;
        let records = remap(records, &rv, vocab);
        report.mean_kl = synthetic_kl(model, store, &records)?;
        if records.iter().any(|r| !r.forbidden.is_empty()) {
            report.repeat_prob = Some(repeat_prob(model, store, &records)?);
        }
    } else {
        let docs = load_corpus(data)?;
        let seq_len = model.transformer.cfg.max_seq_len;
        let batch = tokenize(&docs, vocab, seq_len)?;
        report.perplexity = Some(perplexity(model, store, &batch.seqs)?);
    }
    Ok(report)
}

/// Bench spec file: `key = value` lines with keys `vocab_sizes`, `d_models`
/// (comma lists), `heads` (comma list of head kinds), `k1`, `k2`, `mi`,
/// `mos_components`, `context_len`, `n_seqs`, `reps`, `warmup`, `seed`.
pub fn parse_bench_spec(text: &str) -> Result<BenchSpec> {
    let mut spec = BenchSpec::default();
    let (mut kinds, mut k1, mut k2, mut mi, mut mos) = (vec![HeadKind::Softmax, HeadKind::Mos, HeadKind::Cpr], 20, 100, false, 3);
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::Config(format!("bench {k} = `{v}` is not valid")))
    }
    fn list(k: &str, v: &str) -> Result<Vec<usize>> {
        v.split(',').map(|x| num(k, x.trim())).collect()
    }
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("bench spec line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "vocab_sizes" => spec.vocab_sizes = list(k, v)?,
            "d_models" => spec.d_models = list(k, v)?,
            "heads" => kinds = v.split(',').map(|x| x.trim().parse()).collect::<Result<_>>()?,
            "k1" => k1 = num(k, v)?,
            "k2" => k2 = num(k, v)?,
            "mi" => mi = num(k, v)?,
            "mos_components" => mos = num(k, v)?,
            "context_len" => spec.context_len = num(k, v)?,
            "n_seqs" => spec.n_seqs = num(k, v)?,
            "reps" => spec.reps = num(k, v)?,
            "warmup" => spec.warmup = num(k, v)?,
            "seed" => spec.seed = num(k, v)?,
            _ => return Err(Error::Config(format!("unknown bench key `{k}`"))),
        }
    }
    spec.heads = kinds
        .into_iter()
        .map(|kind| {
            let mut h = HeadConfig::new(kind, spec.d_models[0]).with_k(k1, k2);
            h.mos_components = mos;
            if mi {
                h = h.with_mi(3, 3);
            }
            h
        })
        .collect();
    Ok(spec)
}
