//! The `metacrs` command line.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::catalog::{
    generate_catalog, load_catalog, pretrain_stage, save_catalog, synthesize_stage, Catalog, Dataset, EmbeddingTable,
    FmReport, Role, SplitAssignment, EMBEDDINGS_FILE, INTERACTIONS_FILE,
};
use crate::error::{Error, Result};
use crate::metalearn::{
    baseline_finetune, baseline_maxe, meta_test, meta_train, train_global, Env, EvalReport, FinetuneMode, MetaParams,
    TrainOptions,
};
use crate::rng::{purpose, stream};
use rand::seq::SliceRandom;

use super::chat::chat_repl;
use super::config::{Mode, RunConfig};
use super::trace::{load_trace, render_episodes, save_trace};
use super::MetricsReport;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "metacrs", version, about = "Meta-learned conversational recommendation for cold-start users")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory holding the raw catalog.
    #[arg(long, global = true)]
    pub dataset_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// meta, maxe, global, ft or ia.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[arg(long, global = true)]
    pub episodes: Option<usize>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split users and pretrain embeddings (generating a catalog if none exists).
    Pretrain,
    /// Build preference sets and synthesize interactions.
    Synthesize,
    /// Meta-train (mode meta) or train the global policy (global, ft, ia).
    Train,
    /// Adapt the meta policy to each test user and evaluate it.
    Adapt,
    /// Evaluate a comparison method on the test users.
    Baseline,
    /// Compute metrics from a saved trace.
    Eval { trace: PathBuf },
    /// Converse with the meta policy, answering in place of the simulator.
    Chat,
    /// Print the transcript of a saved trace.
    Replay { trace: PathBuf },
}

/// Standard streams of one invocation.
pub struct Io<'a> {
    pub stdin: &'a mut dyn BufRead,
    pub stdout: &'a mut dyn Write,
    pub stderr: &'a mut dyn Write,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) | Error::Config(_) | Error::Parse { .. } | Error::Json(_) => EXIT_INPUT,
        _ => EXIT_RUNTIME,
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

pub fn run<I, T>(args: I, io: &mut Io<'_>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(io.stderr, "{text}")
            } else {
                write!(io.stdout, "{text}")
            };
            return code;
        }
    };
    match execute(&cli, io) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(io.stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(d) = &cli.dataset_dir {
        cfg.run.dataset_dir = d.clone();
    }
    if let Some(o) = &cli.out {
        cfg.run.out_dir = o.clone();
    }
    if let Some(m) = &cli.mode {
        cfg.run.mode = m.parse()?;
    }
    if cli.episodes.is_some() {
        cfg.run.episodes = cli.episodes;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli, io: &mut Io<'_>) -> Result<()> {
    let cfg = resolve_config(cli)?;
    if cli.print_config {
        write!(io.stdout, "{}", cfg.to_toml()?).map_err(io_err)?;
        return Ok(());
    }
    match &cli.command {
        Command::Pretrain => pretrain(&cfg, io),
        Command::Synthesize => synthesize(&cfg, io),
        Command::Train => train(&cfg, io),
        Command::Adapt => {
            if cfg.run.mode != Mode::Meta {
                return Err(Error::Config(format!("adapt runs the meta policy; use baseline for mode {}", cfg.run.mode)));
            }
            evaluate(&cfg, io)
        }
        Command::Baseline => {
            if cfg.run.mode == Mode::Meta {
                return Err(Error::Config("baseline needs --mode maxe, global, ft or ia".into()));
            }
            evaluate(&cfg, io)
        }
        Command::Eval { trace } => {
            let episodes = load_trace(trace)?;
            let report = MetricsReport::from_episodes(&episodes, cfg.meta.rollout.max_turns)?;
            write!(io.stdout, "{}", report.to_json()?).map_err(io_err)
        }
        Command::Chat => chat(&cfg, io),
        Command::Replay { trace } => {
            let episodes = load_trace(trace)?;
            write!(io.stdout, "{}", render_episodes(&episodes)).map_err(io_err)
        }
    }
}

const SPLIT_FILE: &str = "split.json";
const FM_REPORT_FILE: &str = "fm_report.json";

fn pretrain_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run.out_dir.join("pretrain")
}

fn dataset_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run.out_dir.join("dataset")
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn raw_catalog(cfg: &RunConfig, io: &mut Io<'_>, create: bool) -> Result<Catalog> {
    let dir = &cfg.run.dataset_dir;
    if dir.join(INTERACTIONS_FILE).exists() || !create {
        return load_catalog(dir);
    }
    let catalog = generate_catalog(&cfg.synthetic, cfg.run.seed)?;
    save_catalog(&catalog, dir)?;
    writeln!(io.stderr, "generated a synthetic catalog in {}", dir.display()).map_err(io_err)?;
    Ok(catalog)
}

fn pretrain(cfg: &RunConfig, io: &mut Io<'_>) -> Result<()> {
    let raw = raw_catalog(cfg, io, true)?;
    let (split, emb, report) = pretrain_stage(&raw, &cfg.data)?;
    let dir = pretrain_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    emb.save(&dir.join(EMBEDDINGS_FILE))?;
    write_json(&dir.join(SPLIT_FILE), &split)?;
    write_json(&dir.join(FM_REPORT_FILE), &report)?;
    writeln!(
        io.stdout,
        "pretrained {} users, {} items, {} attributes: training auc {:.4}",
        raw.n_users(),
        raw.n_items(),
        raw.n_attrs(),
        report.train_auc
    )
    .map_err(io_err)
}

fn synthesize(cfg: &RunConfig, io: &mut Io<'_>) -> Result<()> {
    let raw = raw_catalog(cfg, io, false)?;
    let dir = pretrain_dir(cfg);
    let split: SplitAssignment = read_json(&dir.join(SPLIT_FILE))?;
    let emb = EmbeddingTable::load(&dir.join(EMBEDDINGS_FILE))?;
    let mut ds = synthesize_stage(&raw, split, emb, &cfg.data)?;
    ds.fm_report = read_json::<FmReport>(&dir.join(FM_REPORT_FILE)).ok();
    let out = dataset_dir(cfg);
    ds.save(&out)?;
    let stats = ds.catalog.stats(Some(&ds.profiles));
    write_json(&out.join("stats.json"), &stats)?;
    writeln!(
        io.stdout,
        "synthesized {} interactions for {} users into {}",
        stats.interactions,
        stats.users,
        out.display()
    )
    .map_err(io_err)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::load(&dataset_dir(cfg))
}

fn family(mode: Mode) -> &'static str {
    match mode {
        Mode::Meta => "meta",
        _ => "global",
    }
}

fn checkpoint_root(cfg: &RunConfig) -> PathBuf {
    cfg.run.out_dir.join("checkpoints").join(family(cfg.run.mode))
}

fn checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.run.checkpoint.clone().unwrap_or_else(|| checkpoint_root(cfg).join("best"))
}

fn train(cfg: &RunConfig, io: &mut Io<'_>) -> Result<()> {
    if cfg.run.mode == Mode::Maxe {
        return Err(Error::Config("maxe has nothing to train".into()));
    }
    let ds = load_dataset(cfg)?;
    let env = Env::new(&ds, cfg.meta.clone())?;
    let init = MetaParams::init(&cfg.meta, env.dim(), cfg.run.seed);
    let root = checkpoint_root(cfg);
    let mut log_epoch = |s: &crate::metalearn::EpochStats| {
        let _ = writeln!(
            io.stderr,
            "epoch {:4} query sr {:.3} support sr {:.3}",
            s.epoch, s.query_sr, s.support_sr
        );
    };
    let mut points = Vec::new();
    let mut log_valid = |p: &crate::metalearn::ValidationPoint| points.push(p.clone());
    let opts = TrainOptions {
        checkpoint_dir: Some(root.clone()),
        on_epoch: Some(&mut log_epoch),
        on_validation: Some(&mut log_valid),
    };
    let run = match cfg.run.mode {
        Mode::Meta => meta_train(&env, init, opts)?,
        _ => train_global(&env, init, opts)?,
    };
    for p in &points {
        writeln!(io.stdout, "validation epoch {:4} sr@t {:.4} at {:.3}", p.epoch, p.sr_at, p.at).map_err(io_err)?;
    }
    writeln!(io.stdout, "best epoch {} saved to {}", run.best_epoch, root.join("best").display()).map_err(io_err)
}

fn evaluate(cfg: &RunConfig, io: &mut Io<'_>) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let mut meta = cfg.meta.clone();
    match (cfg.run.mode, cfg.run.episodes) {
        (Mode::Meta, Some(n)) => meta.budget.support = n,
        (Mode::Ft | Mode::Ia, Some(n)) => meta.finetune_episodes = n,
        _ => {}
    }
    let env = Env::new(&ds, meta)?;
    let users = ds.users(Role::Test);
    let seed = cfg.run.eval_seed;
    let report: EvalReport = match cfg.run.mode {
        Mode::Maxe => baseline_maxe(&env, &users, &cfg.maxe, seed)?,
        mode => {
            let params = MetaParams::load(&checkpoint(cfg))?;
            match mode {
                Mode::Meta => meta_test(&env, &params, &users, seed)?,
                Mode::Global => baseline_finetune(&env, &params, &users, FinetuneMode::Global, seed)?,
                Mode::Ft => baseline_finetune(&env, &params, &users, FinetuneMode::Ft, seed)?,
                _ => baseline_finetune(&env, &params, &users, FinetuneMode::Ia, seed)?,
            }
        }
    };
    let dir = cfg.run.out_dir.join(cfg.run.mode.as_str());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let json = report.metrics.to_json()?;
    let path = dir.join("metrics.json");
    std::fs::write(&path, &json).map_err(|e| Error::io(&path, e))?;
    save_trace(&dir.join("trace.jsonl"), &report.query)?;
    let m = report.metrics.metrics();
    writeln!(
        io.stdout,
        "{}: sr@{} {:.4} at {:.3} over {} conversations",
        cfg.run.mode, cfg.meta.rollout.max_turns, m.sr_at, m.at, m.n
    )
    .map_err(io_err)
}

fn chat(cfg: &RunConfig, io: &mut Io<'_>) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let params = MetaParams::load(&checkpoint(cfg))?;
    let test = ds.users(Role::Test);
    let user = *test
        .choose(&mut stream(cfg.run.seed, &[purpose::SPLIT]))
        .ok_or_else(|| Error::Validation("dataset has no test users".into()))?;
    let n = cfg.run.episodes.unwrap_or(1);
    let episodes = chat_repl(&ds, &cfg.meta, &params, n, user, io.stdin, io.stdout, io.stderr)?;
    let dir = cfg.run.out_dir.join("chat");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("trace.jsonl");
    save_trace(&path, &episodes)?;
    writeln!(io.stderr, "trace saved to {}", path.display()).map_err(io_err)
}
