//! The `kgmeta` command line.
//!
//! Exit codes: 0 success, 2 I/O or parse, 3 configuration, 4 data
//! ineligibility, 5 protocol violation, 1 anything else (a non-finite loss,
//! say).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::encoding::Vocabulary;
use crate::episodes::{load_support_file, load_task_list, sample_episode, Corpus};
use crate::error::{Error, Result};
use crate::kb_embedding::{train_kb, KbEmbeddings, KbTrainConfig, KnowledgeBase};
use crate::meta_training::{check_disjoint, evaluate, loss_csv, train_meta, Knowledge, TrainConfig};
use crate::model::Variant;
use crate::retrieval::SurfaceIndex;
use crate::rng::episode_rng;
use crate::synth::{generate, SynthConfig};

pub const SEED_ENV: &str = "KGMETA_SEED";

#[derive(Debug, Parser)]
#[command(name = "kgmeta", version, about = "Knowledge-guided metric meta-learning for few-shot text classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train DistMult embeddings on a triple file.
    KbTrain(KbTrainArgs),
    /// Meta-train a relation model on the training tasks of a corpus.
    Train(TrainArgs),
    /// Score a checkpoint on fixed-support test tasks.
    Eval(EvalArgs),
    /// Write a synthetic diverse-task benchmark.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct KbTrainArgs {
    /// Tab-separated `subject<TAB>relation<TAB>object` file.
    pub triples: PathBuf,
    /// Embedding file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss-curve CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub d2: usize,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub negatives: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Falls back to $KGMETA_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Every knob here can also be set in the `--config` file under the same
/// name with underscores (`freeze-kb` becomes `freeze_kb`).
#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// KB embedding file written by `kb-train`.
    #[arg(long)]
    pub kb: PathBuf,
    /// The triple file the embeddings were trained on.
    #[arg(long)]
    pub triples: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// One task id per line; defaults to every task in the corpus.
    #[arg(long)]
    pub train_split: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,

    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub d1: Option<usize>,
    #[arg(long)]
    pub d2: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub replacement_hidden: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub freeze_kb: Option<bool>,
    #[arg(long)]
    pub generator_bias: Option<bool>,
    #[arg(long)]
    pub balanced_queries: Option<bool>,
    #[arg(long)]
    pub episodes_per_step: Option<usize>,
    #[arg(long)]
    pub encoder_init: Option<f64>,
    #[arg(long)]
    pub generator_init: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `vocab.txt` next to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub triples: PathBuf,
    /// Test task ids, one per line.
    #[arg(long)]
    pub split: PathBuf,
    /// `task<TAB>line,line,...` fixed support sets.
    #[arg(long)]
    pub support: PathBuf,
    /// Report CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub tasks: usize,
    #[arg(long, default_value_t = 4)]
    pub test_tasks: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Examples per class per task.
    #[arg(long, default_value_t = 40)]
    pub examples: usize,
    /// Feature words per family and class.
    #[arg(long, default_value_t = 4)]
    pub vocab: usize,
    /// Filler triples beyond the task and family facts.
    #[arg(long, default_value_t = 40)]
    pub kb_size: usize,
    #[arg(long, default_value_t = 4)]
    pub families: usize,
    #[arg(long, default_value_t = 2)]
    pub words_per_group: usize,
    #[arg(long, default_value_t = 5)]
    pub shots: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Io { .. } | Error::Parse { .. } => 2,
        Error::Config(_) | Error::Dimension { .. } | Error::Lookup { .. } => 3,
        Error::Encoding(_)
        | Error::EpisodeConstruction(_)
        | Error::Data(_)
        | Error::Sampling(_)
        | Error::Validation(_)
        | Error::CannotCorrupt(_) => 4,
        Error::Protocol(_) => 5,
        Error::Evaluation(_) | Error::AtEpisode { .. } => 1,
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code. Errors go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::KbTrain(a) => cmd_kb_train(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Synth(a) => cmd_synth(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("kgmeta: {e}");
            exit_code(&e)
        }
    }
}

/// Seed from the flag, else `$KGMETA_SEED`, else 0, with where it came from.
fn resolve_seed(flag: Option<u64>) -> Result<(u64, Provenance)> {
    if let Some(s) = flag {
        return Ok((s, Provenance::Flag));
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(|s| (s, Provenance::Env))
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok((0, Provenance::Default)),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_kb_train(args: &KbTrainArgs) -> Result<()> {
    let (seed, _) = resolve_seed(args.seed)?;
    let kb = KnowledgeBase::load(&args.triples)?;
    let cfg = KbTrainConfig {
        dim: args.d2,
        gamma: args.gamma,
        epochs: args.epochs,
        lr: args.lr,
        negatives_per_positive: args.negatives,
        batch_size: args.batch_size,
    };
    let out = train_kb(&kb, &cfg, seed)?;
    write_file(&args.out, &out.embeddings.to_text())?;
    let loss_path = args.loss_out.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".loss.csv");
        p.into()
    });
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in out.epoch_losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l:.17e}");
    }
    write_file(&loss_path, &csv)?;
    println!(
        "entities={} relations={} triples={} d2={} final_loss={:.6}",
        kb.entities().len(),
        kb.relations().len(),
        kb.triples().len(),
        cfg.dim,
        out.epoch_losses.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

/// Where a resolved setting came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Default,
    Env,
    File,
    Flag,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Default => "default",
            Provenance::Env => "env",
            Provenance::File => "file",
            Provenance::Flag => "flag",
        }
    }
}

/// Settings by name, in the textual form they were given.
fn config_pairs(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("variant", cfg.variant.to_string()),
        ("classes", cfg.classes.to_string()),
        ("shots", cfg.shots.to_string()),
        ("queries", cfg.queries.to_string()),
        ("episodes", cfg.episodes.to_string()),
        ("lr", cfg.lr.to_string()),
        ("d1", cfg.d1.to_string()),
        ("d2", cfg.d2.to_string()),
        ("hidden", cfg.hidden.to_string()),
        (
            "replacement_hidden",
            cfg.replacement_hidden.map_or_else(|| "auto".to_owned(), |h| h.to_string()),
        ),
        ("seed", cfg.seed.to_string()),
        ("freeze_kb", cfg.freeze_kb.to_string()),
        ("generator_bias", cfg.generator_bias.to_string()),
        ("balanced_queries", cfg.balanced_queries.to_string()),
        ("episodes_per_step", cfg.episodes_per_step.to_string()),
        ("encoder_init", cfg.encoder_init.to_string()),
        ("generator_init", cfg.generator_init.to_string()),
    ]
}

fn apply_setting(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
    }
    match key {
        "variant" => cfg.variant = value.parse()?,
        "classes" => cfg.classes = num(key, value)?,
        "shots" => cfg.shots = num(key, value)?,
        "queries" => cfg.queries = num(key, value)?,
        "episodes" => cfg.episodes = num(key, value)?,
        "lr" => cfg.lr = num(key, value)?,
        "d1" => cfg.d1 = num(key, value)?,
        "d2" => cfg.d2 = num(key, value)?,
        "hidden" => cfg.hidden = num(key, value)?,
        "replacement_hidden" => {
            cfg.replacement_hidden = if value == "auto" { None } else { Some(num(key, value)?) }
        }
        "seed" => cfg.seed = num(key, value)?,
        "freeze_kb" => cfg.freeze_kb = num(key, value)?,
        "generator_bias" => cfg.generator_bias = num(key, value)?,
        "balanced_queries" => cfg.balanced_queries = num(key, value)?,
        "episodes_per_step" => cfg.episodes_per_step = num(key, value)?,
        "encoder_init" => cfg.encoder_init = num(key, value)?,
        "generator_init" => cfg.generator_init = num(key, value)?,
        _ => return Err(Error::Config(format!("unknown setting `{key}`"))),
    }
    Ok(())
}

/// Reads `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config_file(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(origin, i + 1, format!("expected `key = value`, got `{line}`")))?;
        out.push((key.trim().replace('-', "_"), value.trim().to_owned()));
    }
    Ok(out)
}

fn flag_pairs(args: &TrainArgs) -> Vec<(&'static str, String)> {
    fn s<T: ToString>(v: &Option<T>) -> Option<String> {
        v.as_ref().map(ToString::to_string)
    }
    [
        ("variant", s(&args.variant)),
        ("classes", s(&args.classes)),
        ("shots", s(&args.shots)),
        ("queries", s(&args.queries)),
        ("episodes", s(&args.episodes)),
        ("lr", s(&args.lr)),
        ("d1", s(&args.d1)),
        ("d2", s(&args.d2)),
        ("hidden", s(&args.hidden)),
        ("replacement_hidden", s(&args.replacement_hidden)),
        ("seed", s(&args.seed)),
        ("freeze_kb", s(&args.freeze_kb)),
        ("generator_bias", s(&args.generator_bias)),
        ("balanced_queries", s(&args.balanced_queries)),
        ("episodes_per_step", s(&args.episodes_per_step)),
        ("encoder_init", s(&args.encoder_init)),
        ("generator_init", s(&args.generator_init)),
    ]
    .into_iter()
    .filter_map(|(k, v)| v.map(|v| (k, v)))
    .collect()
}

/// A training config with the origin of each setting.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub config: TrainConfig,
    pub settings: BTreeMap<&'static str, (String, Provenance)>,
}

/// Defaults, then `$KGMETA_SEED`, then the file, then flags; later wins.
pub fn resolve_config(
    file: &[(String, String)],
    flags: &[(&'static str, String)],
    env_seed: Option<&str>,
) -> Result<ResolvedConfig> {
    let mut config = TrainConfig::default();
    let mut settings: BTreeMap<&'static str, (String, Provenance)> = config_pairs(&config)
        .into_iter()
        .map(|(k, v)| (k, (v, Provenance::Default)))
        .collect();
    let known: Vec<&'static str> = settings.keys().copied().collect();
    let mut layers: Vec<(&'static str, String, Provenance)> = Vec::new();
    if let Some(seed) = env_seed {
        layers.push(("seed", seed.trim().to_owned(), Provenance::Env));
    }
    for (key, value) in file {
        let key = known
            .iter()
            .copied()
            .find(|k| k == key)
            .ok_or_else(|| Error::Config(format!("unknown setting `{key}` in config file")))?;
        layers.push((key, value.clone(), Provenance::File));
    }
    layers.extend(flags.iter().map(|(k, v)| (*k, v.clone(), Provenance::Flag)));
    for (key, value, provenance) in layers {
        apply_setting(&mut config, key, &value)?;
        settings.insert(key, (value, provenance));
    }
    config.validate()?;
    Ok(ResolvedConfig { config, settings })
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Everything needed to repeat a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub resolved: ResolvedConfig,
    /// `(role, path, sha256)`.
    pub inputs: Vec<(&'static str, PathBuf, String)>,
    pub artifacts: Vec<(&'static str, PathBuf)>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::from("# kgmeta run manifest\n");
        let _ = writeln!(out, "kgmeta_version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(out, "seed = {}\n\n[config]", self.resolved.config.seed);
        for (key, (value, provenance)) in &self.resolved.settings {
            let _ = writeln!(out, "{key} = {value}  # {}", provenance.as_str());
        }
        out.push_str("\n[inputs]\n");
        for (role, path, digest) in &self.inputs {
            let _ = writeln!(out, "{role} = {}  # sha256:{digest}", path.display());
        }
        out.push_str("\n[artifacts]\n");
        for (role, path) in &self.artifacts {
            let _ = writeln!(out, "{role} = {}", path.display());
        }
        out
    }
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LOSS_FILE: &str = "loss.csv";
pub const TUNED_KB_FILE: &str = "kb_tuned.txt";

/// Loads the triple file and the embeddings, reordering the embedding rows
/// to the triple file's entity ids.
fn load_knowledge(triples: &Path, kb_path: &Path) -> Result<(KnowledgeBase, KbEmbeddings, SurfaceIndex)> {
    let kb = KnowledgeBase::load(triples)?;
    let embeddings = KbEmbeddings::load(kb_path)?.align_to(&kb)?;
    let index = SurfaceIndex::build(&kb);
    for w in index.warnings() {
        eprintln!("kgmeta: warning: {w}");
    }
    Ok((kb, embeddings, index))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => parse_config_file(&read_file(path)?, path)?,
        None => Vec::new(),
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let resolved = resolve_config(&file, &flag_pairs(args), env_seed.as_deref())?;
    let cfg = &resolved.config;

    let corpus = Corpus::load(&args.corpus)?;
    let (kb, embeddings, index) = load_knowledge(&args.triples, &args.kb)?;
    if embeddings.dim() != cfg.d2 {
        return Err(Error::Config(format!(
            "KB embeddings in {} have d2 = {}, but the run is configured with d2 = {}",
            args.kb.display(),
            embeddings.dim(),
            cfg.d2
        )));
    }
    let train_tasks = match &args.train_split {
        Some(path) => load_task_list(path)?,
        None => corpus.task_ids().map(str::to_owned).collect(),
    };
    corpus.validate_tasks(&train_tasks)?;
    if cfg.episodes > 0 {
        // Fails early, before any output, when no task can fill an episode.
        sample_episode(&corpus, &train_tasks, cfg.episode_shape(), &mut episode_rng(cfg.seed, 0))?;
    }

    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let dir = &args.out_dir;
    let mut inputs = vec![
        ("corpus", args.corpus.clone()),
        ("kb", args.kb.clone()),
        ("triples", args.triples.clone()),
    ];
    if let Some(p) = &args.config {
        inputs.push(("config", p.clone()));
    }
    if let Some(p) = &args.train_split {
        inputs.push(("train_split", p.clone()));
    }
    let mut artifacts = vec![
        ("manifest", dir.join(MANIFEST_FILE)),
        ("checkpoint", dir.join(CHECKPOINT_FILE)),
        ("vocab", dir.join(VOCAB_FILE)),
        ("loss", dir.join(LOSS_FILE)),
    ];
    if !cfg.freeze_kb && cfg.variant == Variant::Full {
        artifacts.push(("kb_tuned", dir.join(TUNED_KB_FILE)));
    }
    let manifest = RunManifest {
        inputs: inputs
            .into_iter()
            .map(|(role, p)| sha256_file(&p).map(|d| (role, p, d)))
            .collect::<Result<_>>()?,
        artifacts,
        resolved: resolved.clone(),
    };
    write_file(&dir.join(MANIFEST_FILE), &manifest.to_text())?;

    let knowledge = Knowledge {
        kb: &kb,
        embeddings: &embeddings,
        index: &index,
    };
    let out = train_meta(&corpus, &train_tasks, knowledge, cfg)?;
    let checkpoint = Checkpoint {
        model: out.model,
        knowledge_dim: cfg.d2,
        max_classes: cfg.classes,
        train_tasks,
    };
    write_file(&dir.join(CHECKPOINT_FILE), &checkpoint.to_text())?;
    write_file(&dir.join(VOCAB_FILE), &out.vocab.to_text())?;
    write_file(&dir.join(LOSS_FILE), &loss_csv(&out.losses))?;
    if let Some(tuned) = &out.tuned_embeddings {
        write_file(&dir.join(TUNED_KB_FILE), &tuned.to_text())?;
    }
    let tail = &out.losses[out.losses.len().saturating_sub(50)..];
    let recent = if tail.is_empty() { 0.0 } else { tail.iter().sum::<f64>() / tail.len() as f64 };
    println!(
        "variant={} episodes={} relation_params={} recent_loss={recent:.6}",
        cfg.variant,
        cfg.episodes,
        checkpoint.model.relation_param_count()
    );
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let vocab_path = args.vocab.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(VOCAB_FILE)
    });
    let vocab = Vocabulary::parse(&read_file(&vocab_path)?, &vocab_path)?;
    if vocab.len() != checkpoint.model.encoder.vocab_size() {
        return Err(Error::Config(format!(
            "vocabulary {} has {} entries but the checkpoint's token table has {} rows",
            vocab_path.display(),
            vocab.len(),
            checkpoint.model.encoder.vocab_size()
        )));
    }
    let test_tasks = load_task_list(&args.split)?;
    check_disjoint(&checkpoint.train_tasks, &test_tasks)?;

    let corpus = Corpus::load(&args.corpus)?;
    let (kb, embeddings, index) = load_knowledge(&args.triples, &args.kb)?;
    if let Some(d2) = checkpoint.model.knowledge_dim() {
        if d2 != embeddings.dim() {
            return Err(Error::Config(format!(
                "checkpoint expects d2 = {d2}, but KB embeddings in {} have d2 = {}",
                args.kb.display(),
                embeddings.dim()
            )));
        }
    }
    let all_supports = load_support_file(&args.support)?;
    let supports = test_tasks
        .iter()
        .map(|t| {
            all_supports
                .iter()
                .find(|s| &s.task_id == t)
                .cloned()
                .ok_or_else(|| Error::Validation(format!("no support set for test task `{t}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let knowledge = Knowledge {
        kb: &kb,
        embeddings: &embeddings,
        index: &index,
    };
    let report = evaluate(
        &checkpoint.model,
        &vocab,
        knowledge,
        &corpus,
        &checkpoint.train_tasks,
        &supports,
    )?;
    write_file(&args.out, &report.to_csv())?;
    println!("mean_acc={:.6}", report.mean_acc);
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let (seed, _) = resolve_seed(args.seed)?;
    let cfg = SynthConfig {
        tasks: args.tasks,
        test_tasks: args.test_tasks,
        classes: args.classes,
        examples: args.examples,
        vocab: args.vocab,
        kb_size: args.kb_size,
        families: args.families,
        words_per_group: args.words_per_group,
        shots: args.shots,
        seed,
    };
    let data = generate(&cfg)?;
    data.write_to(&args.out_dir)?;
    println!("wrote {} tasks to {}", cfg.tasks, args.out_dir.display());
    Ok(())
}
