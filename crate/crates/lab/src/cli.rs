//! The `enclab` command line: one invocation runs one pipeline stage inside
//! a run directory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context as _};
use clap::{Args, Parser, Subcommand, ValueEnum};
use enclab_core::analysis::{layerwise_mask_similarity, prefix_triple_similarity};
use enclab_core::gradcheck::{grad_check, GradCheckConfig, Sampling};
use enclab_core::graph::AttentionMode;
use enclab_core::lora::{attach_lora, init_adapter_from, merge_lora};
use enclab_core::objectives::{
    apply_masking, check_stage_order, mntp_loss_graph, supervised_inputs, train_stage, Stage, StageData, StageOptions,
};
use enclab_core::pool::{echo_input, embed_input, pool_inputs, EmbedInput, PoolingMode};
use enclab_core::probe::{probe_task, spearman_eval};
use enclab_core::tensor::cosine_similarity;
use enclab_core::tokenizer::{train_bpe, TokenId, Vocab};
use enclab_core::transformer::{Encoder, LineageStep, Model};
use enclab_core::Rng;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{ConfigError, RunConfig};
use crate::loaders;
use crate::manifest::{RunManifest, StageEntry};
use crate::reports::{self, ProbeReport, StsReport};
use crate::vocab_file;

pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Parser)]
#[command(name = "enclab", version, about = "Train and probe small decoder-turned-encoder models")]
pub struct Cli {
    /// Run configuration; defaults to `<out>/config.json` written by an
    /// earlier command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory holding checkpoints, curves and reports.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the BPE vocabulary and write `vocab.txt`.
    TokenizerTrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Initialize the base model (training the vocabulary if needed).
    Init,
    #[command(subcommand)]
    Train(TrainCommand),
    /// Fold the adapters of a LoRA checkpoint into its base weights.
    MergeLora {
        #[arg(long)]
        from: Option<PathBuf>,
    },
    Embed(EmbedArgs),
    /// Echo-embedding baseline under causal attention.
    EmbedEcho(EchoArgs),
    /// Linear probe on frozen word representations.
    Probe(ProbeArgs),
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Spearman correlation between cosine similarities and gold scores.
    EvalSts(StsArgs),
    /// Finite-difference check of the MNTP gradients of a checkpoint.
    Gradcheck(GradArgs),
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    Mntp(TrainArgs),
    Simcse(TrainArgs),
    Supervised(SupervisedArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Input checkpoint; defaults to the latest one in the run.
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Train even if the checkpoint's lineage does not allow this stage.
    #[arg(long)]
    pub allow_skip: bool,
}

#[derive(Debug, Args)]
pub struct SupervisedArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Start the adapters from those of a LoRA checkpoint, e.g. the SimCSE one.
    #[arg(long)]
    pub init_adapters: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PoolingArg {
    Eos,
    Mean,
    WeightedMean,
}

impl From<PoolingArg> for PoolingMode {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Eos => PoolingMode::Eos,
            PoolingArg::Mean => PoolingMode::Mean,
            PoolingArg::WeightedMean => PoolingMode::WeightedMean,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Causal,
    Bidirectional,
}

impl From<ModeArg> for AttentionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Causal => AttentionMode::Causal,
            ModeArg::Bidirectional => AttentionMode::Bidirectional,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    F32,
}

#[derive(Debug, Args)]
pub struct EmbedSource {
    /// Text to embed; repeatable.
    #[arg(long)]
    pub text: Vec<String>,
    /// Sentence file, one input per line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "")]
    pub instruction: String,
    #[arg(long, value_enum, default_value = "mean")]
    pub pooling: PoolingArg,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    #[arg(long)]
    pub from: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub source: EmbedSource,
    #[arg(long, value_enum, default_value = "bidirectional")]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct EchoArgs {
    #[command(flatten)]
    pub source: EmbedSource,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Token-label corpus; defaults to `paths.probe_corpus`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "bidirectional")]
    pub mode: ModeArg,
    /// Read each word from the position before its first token.
    #[arg(long)]
    pub shifted: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub from: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Prefix-pooled similarity of query/positive/negative sentence triples.
    Triples {
        #[arg(long)]
        triples: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "mean")]
        pooling: PoolingArg,
        #[arg(long, value_enum, default_value = "bidirectional")]
        mode: ModeArg,
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Per-layer, per-position cosine between causal and bidirectional states.
    Layers {
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        from: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct StsArgs {
    /// TSV of `sentence1, sentence2, score`; defaults to `paths.sts`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mean")]
    pub pooling: PoolingArg,
    #[arg(long, value_enum, default_value = "bidirectional")]
    pub mode: ModeArg,
    #[arg(long)]
    pub from: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradArgs {
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Coordinates checked per weight matrix, largest gradients first.
    #[arg(long, default_value_t = 5)]
    pub coords: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    #[arg(long, value_enum, default_value = "bidirectional")]
    pub mode: ModeArg,
}

/// Usage errors exit with 2, everything else with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Domain(anyhow::Error),
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(anyhow!(msg.into()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) => write!(f, "usage error: {e:#}"),
            CliError::Domain(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.into())
    }
}

macro_rules! domain_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Domain(e.into())
            }
        }
    )*};
}

domain_from!(
    enclab_core::Error,
    checkpoint::CheckpointError,
    loaders::LoadError,
    vocab_file::VocabFileError,
    std::io::Error,
    anyhow::Error
);

type CliResult<T = ()> = Result<T, CliError>;

/// An opened run directory.
struct Run {
    dir: PathBuf,
    cfg: RunConfig,
    hash: String,
    manifest: RunManifest,
}

fn stage_seed(run_seed: u64, tag: u64, extra: u64) -> u64 {
    Rng::new(run_seed).fork(tag).next_u64() ^ extra
}

impl Run {
    fn open(cli_config: Option<&Path>, dir: &Path) -> CliResult<Self> {
        let stored = dir.join("config.json");
        let path = match cli_config {
            Some(p) => p.to_path_buf(),
            None if stored.is_file() => stored.clone(),
            None => return Err(CliError::usage("no config: pass --config or run `init` in this run directory first")),
        };
        let cfg = RunConfig::load(&path)?;
        for sub in ["checkpoints", "curves", "reports"] {
            fs::create_dir_all(dir.join(sub)).with_context(|| format!("creating {}", dir.join(sub).display()))?;
        }
        reports::write_json(&stored, &cfg)?;
        let hash = cfg.hash();
        let manifest = RunManifest::load(dir)?.unwrap_or_else(|| RunManifest::new(hash.clone(), cfg.seed));
        Ok(Self { dir: dir.to_path_buf(), cfg, hash, manifest })
    }

    fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().into_owned()
    }

    fn vocab(&self) -> CliResult<Vocab> {
        let path = self.cfg.tokenizer.vocab.clone().unwrap_or_else(|| self.dir.join(VOCAB_FILE));
        if !path.is_file() {
            return Err(CliError::usage(format!("no vocabulary at {}; run `tokenizer-train` or `init`", path.display())));
        }
        let vocab = vocab_file::parse_vocab(&fs::read_to_string(&path)?)?;
        if vocab.vocab_size() != self.cfg.model.vocab_size {
            return Err(CliError::usage(format!(
                "vocabulary has {} ids but model.vocab_size is {}",
                vocab.vocab_size(),
                self.cfg.model.vocab_size
            )));
        }
        Ok(vocab)
    }

    fn checkpoint_path(&self, from: Option<&Path>) -> CliResult<PathBuf> {
        match from {
            Some(p) => Ok(p.to_path_buf()),
            None => self
                .manifest
                .latest
                .as_ref()
                .map(|l| self.dir.join(l))
                .ok_or_else(|| CliError::usage("no checkpoint in this run yet; run `init` or pass --from")),
        }
    }

    fn load_checkpoint(&self, from: Option<&Path>) -> CliResult<(PathBuf, Checkpoint)> {
        let path = self.checkpoint_path(from)?;
        if !path.is_file() {
            return Err(CliError::usage(format!("checkpoint {} does not exist", path.display())));
        }
        let ck = checkpoint::load(&path)?;
        if ck.meta().model != self.cfg.model {
            return Err(CliError::Domain(anyhow!("checkpoint {} was built for a different model config", path.display())));
        }
        Ok((path, ck))
    }

    fn data_path(&self, flag: Option<&Path>, configured: Option<&PathBuf>, key: &str) -> CliResult<PathBuf> {
        let p = flag
            .map(Path::to_path_buf)
            .or_else(|| configured.cloned())
            .ok_or_else(|| CliError::usage(format!("no input: pass a flag or set {key} in the config")))?;
        if !p.is_file() {
            return Err(CliError::usage(format!("{} does not exist", p.display())));
        }
        Ok(p)
    }

    fn finish(&mut self, entry: StageEntry) -> CliResult {
        self.manifest.record(entry);
        self.manifest.save(&self.dir)?;
        Ok(())
    }

    fn entry(&self, command: &str, input: Option<&Path>, output: Option<&Path>, seed: u64, started: Instant) -> StageEntry {
        StageEntry {
            command: command.into(),
            input: input.map(|p| self.relative(p)),
            output: output.map(|p| self.relative(p)),
            seed,
            config_hash: self.hash.clone(),
            wall_clock_secs: started.elapsed().as_secs_f64(),
            overrides: Vec::new(),
        }
    }
}

fn tokenizer_train(run: &mut Run, corpus: Option<&Path>, vocab_size: Option<usize>) -> CliResult {
    let started = Instant::now();
    let corpus = run.data_path(corpus, run.cfg.tokenizer_corpus().map(Path::to_path_buf).as_ref(), "tokenizer.corpus")?;
    let size = vocab_size.unwrap_or(run.cfg.model.vocab_size);
    let base = run.dir.join("checkpoints/base.ckpt");
    if base.is_file() {
        return Err(CliError::Domain(anyhow!(
            "{} already exists and depends on the current vocabulary; train the tokenizer in a new run directory",
            base.display()
        )));
    }
    if size != run.cfg.model.vocab_size {
        log::warn!("stage=tokenizer-train vocab_size={size} differs from model.vocab_size={}", run.cfg.model.vocab_size);
    }
    let sentences = loaders::load_sentences(&corpus)?;
    let vocab = train_bpe(sentences.iter().map(String::as_str), size, run.cfg.seed)?;
    let out = run.dir.join(VOCAB_FILE);
    fs::write(&out, vocab_file::write_vocab(&vocab))?;
    log::info!("stage=tokenizer-train merges={} vocab_size={size} out={}", vocab.merges().len(), out.display());
    let mut entry = run.entry("tokenizer-train", Some(&corpus), None, run.cfg.seed, started);
    if vocab_size.is_some() {
        entry.overrides.push(format!("vocab_size={size}"));
    }
    run.finish(entry)
}

fn init(run: &mut Run) -> CliResult {
    let started = Instant::now();
    if run.cfg.tokenizer.vocab.is_none() && !run.dir.join(VOCAB_FILE).is_file() {
        tokenizer_train(run, None, None)?;
    }
    run.vocab()?;
    let seed = stage_seed(run.cfg.seed, 0, 0);
    let mut model = Model::init(run.cfg.model.clone(), seed)?;
    for r in &mut model.lineage {
        r.config_hash.clone_from(&run.hash);
    }
    let out = run.dir.join("checkpoints/base.ckpt");
    checkpoint::save(&out, &Checkpoint::Plain(model))?;
    log::info!("stage=init params={} out={}", run.cfg.model.param_count(), out.display());
    let entry = run.entry("init", None, Some(&out), seed, started);
    run.finish(entry)
}

fn truncated_rows(vocab: &Vocab, sentences: &[String], max: usize) -> Vec<Vec<TokenId>> {
    let mut cut = 0;
    let rows: Vec<Vec<TokenId>> = sentences
        .iter()
        .map(|s| {
            let mut ids = vocab.encode(s, true, false).ids;
            if ids.len() > max {
                ids.truncate(max);
                cut += 1;
            }
            ids
        })
        .filter(|r| r.len() >= 2)
        .collect();
    if cut > 0 {
        log::warn!("truncated {cut} sentences to {max} tokens");
    }
    rows
}

fn fitting_inputs(inputs: Vec<EmbedInput>, max: usize) -> Vec<EmbedInput> {
    let n = inputs.len();
    let kept: Vec<EmbedInput> = inputs.into_iter().filter(|i| i.tokens.len() <= max).collect();
    if kept.len() < n {
        log::warn!("skipped {} inputs longer than {max} tokens", n - kept.len());
    }
    kept
}

fn train(run: &mut Run, cmd: &TrainCommand) -> CliResult {
    let started = Instant::now();
    let (stage, args, init_adapters) = match cmd {
        TrainCommand::Mntp(a) => (Stage::Mntp, a, None),
        TrainCommand::Simcse(a) => (Stage::Simcse, a, None),
        TrainCommand::Supervised(s) => (Stage::Supervised, &s.train, s.init_adapters.as_deref()),
    };
    let (name, tag, mut train) = match stage {
        Stage::Mntp => ("mntp", 1, run.cfg.mntp.train.clone()),
        Stage::Simcse => ("simcse", 2, run.cfg.simcse.train.clone()),
        Stage::Supervised => ("supervised", 3, run.cfg.supervised.train.clone()),
    };
    let mut overrides = Vec::new();
    if let Some(s) = args.steps {
        train.steps = s;
        overrides.push(format!("steps={s}"));
    }
    if let Some(b) = args.batch_size {
        train.batch_size = b;
        overrides.push(format!("batch_size={b}"));
    }
    if let Some(lr) = args.lr {
        train.lr = lr;
        overrides.push(format!("lr={lr}"));
    }
    train.validate().map_err(|e| CliError::Usage(e.into()))?;
    train.seed = stage_seed(run.cfg.seed, tag, train.seed);

    let vocab = run.vocab()?;
    let (input, ck) = run.load_checkpoint(args.from.as_deref())?;
    let base = match ck {
        Checkpoint::Plain(m) => m,
        Checkpoint::Adapted(_) => {
            return Err(CliError::Domain(anyhow!("{} carries unmerged adapters; run `merge-lora` first", input.display())))
        }
    };
    if args.allow_skip {
        overrides.push("allow-skip".into());
        if let Err(e) = check_stage_order(&base.lineage, stage) {
            log::warn!("stage={name} lineage check bypassed: {e}");
        }
    } else {
        check_stage_order(&base.lineage, stage)?;
    }

    let max = run.cfg.model.max_seq_len;
    let rows;
    let inputs;
    let examples;
    let data = match stage {
        Stage::Mntp => {
            let p = run.data_path(None, run.cfg.paths.mntp_corpus.as_ref(), "paths.mntp_corpus")?;
            rows = truncated_rows(&vocab, &loaders::load_sentences(&p)?, max);
            StageData::Mntp { rows: &rows, masking: run.cfg.mntp.masking, random_ids: vocab.regular_ids() }
        }
        Stage::Simcse => {
            let p = run.data_path(None, run.cfg.paths.simcse_corpus.as_ref(), "paths.simcse_corpus")?;
            let pooling = run.cfg.simcse.contrastive.pooling;
            let all = loaders::load_sentences(&p)?
                .iter()
                .map(|s| embed_input(&vocab, "", s, pooling))
                .collect::<Result<Vec<_>, _>>()?;
            inputs = fitting_inputs(all, max);
            StageData::Simcse { inputs: &inputs, contrastive: run.cfg.simcse.contrastive, dropout_p: run.cfg.simcse.dropout_p }
        }
        Stage::Supervised => {
            let p = run.data_path(None, run.cfg.paths.supervised_data.as_ref(), "paths.supervised_data")?;
            let all = loaders::load_contrastive(&p)?;
            let pooling = run.cfg.supervised.contrastive.pooling;
            let n = all.len();
            examples = all
                .into_iter()
                .filter(|ex| {
                    supervised_inputs(&vocab, &[ex], pooling)
                        .map(|i| i.queries.iter().chain(&i.docs).all(|x| x.tokens.len() <= max))
                        .unwrap_or(false)
                })
                .collect::<Vec<_>>();
            if examples.len() < n {
                log::warn!("skipped {} examples longer than {max} tokens", n - examples.len());
            }
            StageData::Supervised {
                examples: &examples,
                vocab: &vocab,
                contrastive: run.cfg.supervised.contrastive,
                dropout_p: run.cfg.supervised.dropout_p,
            }
        }
    };

    let lora_seed = stage_seed(run.cfg.seed, 100 + tag, train.seed);
    let mut adapted = attach_lora(base, run.cfg.lora.clone(), lora_seed)?;
    if let Some(src) = init_adapters {
        match checkpoint::load(src)? {
            Checkpoint::Adapted(a) => init_adapter_from(&mut adapted, a.adapters())?,
            Checkpoint::Plain(_) => return Err(CliError::usage(format!("{} has no adapters", src.display()))),
        }
        overrides.push(format!("init-adapters={}", run.relative(src)));
    }
    log::info!(
        "stage={name} steps={} batch_size={} lr={} trainable={}",
        train.steps,
        train.batch_size,
        train.lr,
        adapted.trainable_names().len()
    );
    let opts = StageOptions { allow_skip: args.allow_skip, config_hash: run.hash.clone() };
    let curve = train_stage(&mut adapted, &data, &train, &opts)?;
    let window = (train.steps / 10).max(1);
    log::info!("stage={name} first_loss={:.4} last_loss={:.4}", curve.first_mean(window), curve.last_mean(window));

    let out = run.dir.join(format!("checkpoints/{name}.ckpt"));
    checkpoint::save(&out, &Checkpoint::Adapted(adapted))?;
    fs::write(run.dir.join(format!("curves/{name}.csv")), reports::curve_csv(&curve))?;
    let mut entry = run.entry(&format!("train {name}"), Some(&input), Some(&out), train.seed, started);
    entry.overrides = overrides;
    run.finish(entry)
}

fn merge(run: &mut Run, from: Option<&Path>) -> CliResult {
    let started = Instant::now();
    let (input, ck) = run.load_checkpoint(from)?;
    let adapted = match ck {
        Checkpoint::Adapted(a) => a,
        Checkpoint::Plain(_) => return Err(CliError::Domain(anyhow!("{} has no adapters to merge", input.display()))),
    };
    let mut merged = merge_lora(adapted)?;
    if let Some(last) = merged.lineage.last_mut() {
        if last.step == LineageStep::Merge {
            last.config_hash.clone_from(&run.hash);
        }
    }
    let stem = input.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    let out = run.dir.join(format!("checkpoints/{stem}-merged.ckpt"));
    checkpoint::save(&out, &Checkpoint::Plain(merged))?;
    log::info!("stage=merge-lora out={}", out.display());
    let entry = run.entry("merge-lora", Some(&input), Some(&out), 0, started);
    run.finish(entry)
}

fn texts(src: &EmbedSource) -> CliResult<Vec<String>> {
    let mut out = src.text.clone();
    if let Some(p) = &src.input {
        if !p.is_file() {
            return Err(CliError::usage(format!("{} does not exist", p.display())));
        }
        out.extend(loaders::load_sentences(p)?);
    }
    if out.is_empty() {
        return Err(CliError::usage("nothing to embed: pass --text or --input"));
    }
    Ok(out)
}

fn embed_prepared(enc: &dyn Encoder<f32>, inputs: &[EmbedInput], pooling: PoolingMode, mode: AttentionMode) -> CliResult<Vec<Vec<f32>>> {
    let max = enc.config().max_seq_len;
    if let Some(i) = inputs.iter().position(|x| x.tokens.len() > max) {
        return Err(enclab_core::Error::SequenceTooLong { len: inputs[i].tokens.len(), max }.into());
    }
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(64) {
        out.extend(pool_inputs(enc, chunk, pooling, mode)?.into_iter().map(|p| p.vector));
    }
    Ok(out)
}

fn write_embeddings(run: &Run, name: &str, format: FormatArg, vectors: &[Vec<f32>]) -> CliResult<PathBuf> {
    match format {
        FormatArg::Csv => {
            let text = reports::embeddings_csv(vectors);
            let out = run.dir.join(format!("reports/{name}.csv"));
            fs::write(&out, &text)?;
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(out)
        }
        FormatArg::F32 => {
            let out = run.dir.join(format!("reports/{name}.f32"));
            let side = reports::write_embeddings_f32(&out, vectors)?;
            println!("{} {} {}", out.display(), side.count, side.dim);
            Ok(out)
        }
    }
}

fn embed_cmd(run: &mut Run, src: &EmbedSource, mode: Option<AttentionMode>) -> CliResult {
    let started = Instant::now();
    let vocab = run.vocab()?;
    let (input, ck) = run.load_checkpoint(src.from.as_deref())?;
    let pooling = PoolingMode::from(src.pooling);
    let texts = texts(src)?;
    let (name, mode, inputs) = match mode {
        Some(m) => ("embeddings", m, texts.iter().map(|t| embed_input(&vocab, &src.instruction, t, pooling)).collect::<Result<Vec<_>, _>>()?),
        None => (
            "embeddings-echo",
            AttentionMode::Causal,
            texts.iter().map(|t| echo_input(&vocab, &src.instruction, t, pooling)).collect::<Result<Vec<_>, _>>()?,
        ),
    };
    let vectors = embed_prepared(ck.encoder(), &inputs, pooling, mode)?;
    let out = write_embeddings(run, name, src.format, &vectors)?;
    log::info!("stage={name} count={} out={}", vectors.len(), out.display());
    let command = if name == "embeddings" { "embed" } else { "embed-echo" };
    let entry = run.entry(command, Some(&input), None, 0, started);
    run.finish(entry)
}

fn probe(run: &mut Run, args: &ProbeArgs) -> CliResult {
    let started = Instant::now();
    let vocab = run.vocab()?;
    let (input, ck) = run.load_checkpoint(args.from.as_deref())?;
    let corpus_path = run.data_path(args.corpus.as_deref(), run.cfg.paths.probe_corpus.as_ref(), "paths.probe_corpus")?;
    let corpus = loaders::load_token_labels(&corpus_path)?;
    let mut cfg = run.cfg.probe.clone();
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let mode = AttentionMode::from(args.mode);
    let outcome = probe_task(ck.encoder(), &vocab, &corpus, mode, args.shifted, &cfg)?;
    let report = ProbeReport {
        task: corpus_path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
        mode,
        shifted: args.shifted,
        accuracy: outcome.accuracy,
        n_test: outcome.n_test,
        seed: cfg.seed,
        majority_baseline: outcome.majority_baseline,
    };
    let out = run.dir.join("reports/probe.json");
    reports::write_json(&out, &report)?;
    log::info!("stage=probe accuracy={:.4} majority={:.4} n_test={}", report.accuracy, report.majority_baseline, report.n_test);
    let entry = run.entry("probe", Some(&input), None, cfg.seed, started);
    run.finish(entry)
}

fn analyze(run: &mut Run, cmd: &AnalyzeCommand) -> CliResult {
    let started = Instant::now();
    let vocab = run.vocab()?;
    match cmd {
        AnalyzeCommand::Triples { triples, pooling, mode, from } => {
            let (input, ck) = run.load_checkpoint(from.as_deref())?;
            let path = run.data_path(triples.as_deref(), run.cfg.paths.triples.as_ref(), "paths.triples")?;
            let triples = loaders::load_triples(&path)?;
            let report = match prefix_triple_similarity(ck.encoder(), &vocab, &triples, (*pooling).into(), (*mode).into()) {
                Err(enclab_core::Error::EmptyBatch) => {
                    let max = run.cfg.model.max_seq_len;
                    return Err(CliError::Domain(anyhow!("none of the {} triples fits in max_seq_len {max}", triples.len())));
                }
                r => r?,
            };
            reports::write_json(&run.dir.join("reports/triples.json"), &report)?;
            log::info!(
                "stage=analyze-triples separation={:.6} fraction_correct={:.3} skipped={}",
                report.separation,
                report.fraction_correct,
                report.skipped
            );
            let entry = run.entry("analyze triples", Some(&input), None, 0, started);
            run.finish(entry)
        }
        AnalyzeCommand::Layers { text, from } => {
            let (input, ck) = run.load_checkpoint(from.as_deref())?;
            let text = match text {
                Some(t) => t.clone(),
                None => {
                    let p = run.data_path(None, run.cfg.paths.mntp_corpus.as_ref(), "paths.mntp_corpus or --text")?;
                    loaders::load_sentences(&p)?.into_iter().next().ok_or_else(|| CliError::usage("corpus is empty"))?
                }
            };
            let m = layerwise_mask_similarity(ck.encoder(), &vocab, &text)?;
            let out = run.dir.join("reports/layers.csv");
            fs::write(&out, reports::layer_matrix_csv(&m))?;
            log::info!("stage=analyze-layers layers={} positions={} out={}", m.n_layers(), m.n_positions(), out.display());
            let entry = run.entry("analyze layers", Some(&input), None, 0, started);
            run.finish(entry)
        }
    }
}

fn eval_sts(run: &mut Run, args: &StsArgs) -> CliResult {
    let started = Instant::now();
    let vocab = run.vocab()?;
    let (input, ck) = run.load_checkpoint(args.from.as_deref())?;
    let path = run.data_path(args.data.as_deref(), run.cfg.paths.sts.as_ref(), "paths.sts")?;
    let pairs = loaders::load_sts(&path)?;
    let pooling = PoolingMode::from(args.pooling);
    let mut inputs = Vec::with_capacity(2 * pairs.len());
    for (a, b, _) in &pairs {
        inputs.push(embed_input(&vocab, "", a, pooling)?);
        inputs.push(embed_input(&vocab, "", b, pooling)?);
    }
    let z = embed_prepared(ck.encoder(), &inputs, pooling, args.mode.into())?;
    let pred = z.chunks(2).map(|p| cosine_similarity(&p[0], &p[1])).collect::<Result<Vec<_>, _>>()?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let report = StsReport { spearman: spearman_eval(&pred, &gold)?, n_pairs: pairs.len() };
    reports::write_json(&run.dir.join("reports/sts.json"), &report)?;
    log::info!("stage=eval-sts spearman={:.4} n={}", report.spearman, report.n_pairs);
    println!("{}", report.spearman);
    let entry = run.entry("eval-sts", Some(&input), None, 0, started);
    run.finish(entry)
}

#[derive(serde::Serialize)]
struct GradRow {
    param: String,
    max_rel_err: f64,
    pass: bool,
}

fn gradcheck(run: &mut Run, args: &GradArgs) -> CliResult {
    let started = Instant::now();
    let vocab = run.vocab()?;
    let (input, ck) = run.load_checkpoint(args.from.as_deref())?;
    let model = match ck {
        Checkpoint::Plain(m) => m,
        Checkpoint::Adapted(a) => merge_lora(a)?,
    }
    .cast::<f64>();
    let p = run.data_path(None, run.cfg.paths.mntp_corpus.as_ref(), "paths.mntp_corpus")?;
    let rows: Vec<_> = truncated_rows(&vocab, &loaders::load_sentences(&p)?, run.cfg.model.max_seq_len).into_iter().take(4).collect();
    let mut rng = Rng::new(stage_seed(run.cfg.seed, 9, 0));
    let masked = (0..100)
        .map(|_| apply_masking(&rows, &run.cfg.mntp.masking, vocab.regular_ids(), &mut rng))
        .find(|m| m.as_ref().map_or(true, |m| !m.supervision.is_empty()))
        .ok_or_else(|| CliError::Domain(anyhow!("masking never selected a position")))??;
    let mode = AttentionMode::from(args.mode);
    let cfg = GradCheckConfig::new(1e-5, args.tolerance).sampling(Sampling::LargestGradient { count: args.coords });
    let mut rows_out = Vec::new();
    for (i, (name, w)) in model.named().enumerate() {
        if w.shape().len() != 2 {
            continue;
        }
        let report = grad_check(
            |g, x| {
                let mut b = model.bind(g, false)?;
                b.weights[i] = x;
                mntp_loss_graph(g, model.config(), &b, &masked, mode, None, &[])
            },
            w,
            &cfg,
        )?;
        rows_out.push(GradRow { param: name.to_string(), max_rel_err: report.max_rel_err, pass: report.pass });
    }
    reports::write_json(&run.dir.join("reports/gradcheck.json"), &rows_out)?;
    let failed: Vec<&str> = rows_out.iter().filter(|r| !r.pass).map(|r| r.param.as_str()).collect();
    let worst = rows_out.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    log::info!("stage=gradcheck matrices={} max_rel_err={worst:.3e}", rows_out.len());
    let entry = run.entry("gradcheck", Some(&input), None, 0, started);
    run.finish(entry)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Domain(anyhow!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn run(cli: &Cli) -> CliResult {
    let mut run = Run::open(cli.config.as_deref(), &cli.out)?;
    match &cli.command {
        Command::TokenizerTrain { corpus, vocab_size } => tokenizer_train(&mut run, corpus.as_deref(), *vocab_size),
        Command::Init => init(&mut run),
        Command::Train(t) => train(&mut run, t),
        Command::MergeLora { from } => merge(&mut run, from.as_deref()),
        Command::Embed(a) => embed_cmd(&mut run, &a.source, Some(a.mode.into())),
        Command::EmbedEcho(a) => embed_cmd(&mut run, &a.source, None),
        Command::Probe(a) => probe(&mut run, a),
        Command::Analyze(a) => analyze(&mut run, a),
        Command::EvalSts(a) => eval_sts(&mut run, a),
        Command::Gradcheck(a) => gradcheck(&mut run, a),
    }
}

fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("info");
    let _ = env_logger::Builder::from_env(env)
        .format(|buf, rec| writeln!(buf, "ts={} level={} target={} {}", buf.timestamp(), rec.level(), rec.target(), rec.args()))
        .try_init();
}

pub fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
