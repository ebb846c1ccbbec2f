//! Command-line pipeline: data generation, training, finetuning, rescoring,
//! lambda tuning, and evaluation, each leaving behind a run manifest that
//! freezes the resolved configuration and checksums of every artifact so the
//! run can be reproduced byte for byte with `rerun`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::corpus::generate::{generate, DatasetSizes, Utterance};
use crate::corpus::grammar::{default_grammar, GrammarSpec, OTHER_LABEL};
use crate::corpus::io::{
    load_dataset, load_grammar_spec, load_meta, load_nbest, save_dataset, save_grammar_spec,
    save_meta, save_nbest, save_rescored, DatasetMeta,
};
use crate::corpus::simulate::{simulate_corpus, NoiseConfig};
use crate::corpus::{encode_dataset, EncodedUtterance};
use crate::error::{Error, Result};
use crate::metrics::{self, Report, ReportRow};
use crate::model::{EncoderVariant, Model, ModelConfig};
use crate::rescore::{first_pass_choice, rescore, tune_lambda, NBestList, RescoreConfig, Rescored};
use crate::train::{train, LossWeights, Schedule, TrainConfig, TrainLog};

#[derive(Parser, Debug)]
#[command(
    name = "mtlm",
    version,
    about = "Multi-task LSTM language modeling and n-best rescoring pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset splits and simulated n-best lists.
    GenData(GenDataArgs),
    /// Train a model from scratch on a dataset split.
    Train(TrainArgs),
    /// Continue training a checkpoint on annotated data with fresh heads.
    Finetune(FinetuneArgs),
    /// Rescore an n-best file with a trained checkpoint.
    Rescore(RescoreArgs),
    /// Grid-search the rescoring interpolation weight on a dev n-best file.
    TuneLambda(TuneLambdaArgs),
    /// Score a checkpoint on test sets and write a metrics report.
    Eval(EvalArgs),
    /// Re-execute a recorded run and verify byte-identical artifacts.
    Rerun(RerunArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    Stlm,
    MtlmLinear,
    MtlmRwma,
}

impl TrainMode {
    fn name(self) -> &'static str {
        match self {
            TrainMode::Stlm => "stlm",
            TrainMode::MtlmLinear => "mtlm-linear",
            TrainMode::MtlmRwma => "mtlm-rwma",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "stlm" => Ok(TrainMode::Stlm),
            "mtlm-linear" => Ok(TrainMode::MtlmLinear),
            "mtlm-rwma" => Ok(TrainMode::MtlmRwma),
            other => Err(Error::Config(format!(
                "unknown training mode {other:?} (expected stlm, mtlm-linear, or mtlm-rwma)"
            ))),
        }
    }

    fn schedule(self) -> Schedule {
        match self {
            TrainMode::Stlm => Schedule::Fixed { weights: LossWeights::lm_only() },
            TrainMode::MtlmLinear => Schedule::LinearRamp,
            TrainMode::MtlmRwma => Schedule::Rwma,
        }
    }

    fn multitask(self) -> bool {
        self != TrainMode::Stlm
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Grammar spec JSON; the built-in grammar is used when omitted.
    #[arg(long)]
    pub grammar: Option<PathBuf>,
    /// Overrides the grammar's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_nlu: Option<usize>,
    #[arg(long)]
    pub train_trans: Option<usize>,
    #[arg(long)]
    pub test_gen: Option<usize>,
    #[arg(long)]
    pub test_rare: Option<usize>,
    /// Training utterances reused as the lambda-tuning dev n-best set.
    #[arg(long)]
    pub dev_nbest: Option<usize>,
    #[arg(long)]
    pub nbest_size: Option<usize>,
    #[arg(long)]
    pub sub_rate: Option<f64>,
    #[arg(long)]
    pub del_rate: Option<f64>,
    #[arg(long)]
    pub ins_rate: Option<f64>,
    #[arg(long)]
    pub rare_multiplier: Option<f64>,
    #[arg(long)]
    pub oracle_inclusion: Option<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub mode: TrainMode,
    /// Directory produced by gen-data (training file and meta.json).
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Training split file, relative to the data dir unless absolute.
    #[arg(long, default_value = "train_nlu.jsonl")]
    pub train_file: PathBuf,
    /// Validation split for per-epoch perplexity, relative to the data dir.
    #[arg(long)]
    pub val_file: Option<PathBuf>,
    /// JSON config file with optional "train" and "model" sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// no-attention, weighted-attention, or projected-attention.
    #[arg(long)]
    pub encoder: Option<String>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log TSV; defaults to the checkpoint path + ".log.tsv".
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Annotated utterances to finetune on.
    #[arg(long)]
    pub nlu_data: PathBuf,
    #[arg(long)]
    pub val_file: Option<PathBuf>,
    /// Multi-task schedule for the finetuning stage.
    #[arg(long, value_enum, default_value = "mtlm-rwma")]
    pub mode: TrainMode,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Seed for the fresh classifier heads; defaults to the training seed.
    #[arg(long)]
    pub head_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RescoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub nbest: PathBuf,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Score with the raw (unnormalized) language-model log probability.
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TuneLambdaArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Development n-best file to tune on.
    #[arg(long)]
    pub nbest: PathBuf,
    /// Comma-separated lambda grid.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory holding <set>.jsonl and optional nbest_<set>.jsonl files.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Comma-separated set names.
    #[arg(long, default_value = "test_gen,test_rare")]
    pub sets: String,
    /// Interpolation weight used for the rescoring WER column.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Baseline report TSV; normalized columns are computed against it.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RerunArgs {
    /// Manifest of the run to reproduce.
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Model hyperparameters as they appear in config files; label inventories
/// are joined in from the dataset meta at build time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub encoder: EncoderVariant,
    pub pool_dim: usize,
    pub tie_embeddings: bool,
    pub init_scale: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            embed_dim: 32,
            hidden_dim: 32,
            layers: 2,
            encoder: EncoderVariant::NoAttention,
            pool_dim: 16,
            tie_embeddings: false,
            init_scale: 0.1,
        }
    }
}

impl ModelSettings {
    fn to_model_config(&self, meta: &DatasetMeta) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            layers: self.layers,
            intent_labels: meta.intent_labels.clone(),
            slot_labels: meta.slot_labels.clone(),
            encoder: self.encoder,
            pool_dim: self.pool_dim,
            tie_embeddings: self.tie_embeddings,
            init_scale: self.init_scale,
        }
    }
}

/// Frozen record of one command invocation: what ran, with which fully
/// resolved configuration, over which files. `rerun` re-executes from this
/// and verifies the checksums.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub input_checksums: BTreeMap<String, String>,
    pub output_checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenDataPlan {
    pub grammar: GrammarSpec,
    pub sizes: DatasetSizes,
    pub noise: NoiseConfig,
    pub dev_nbest: usize,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainPlan {
    pub mode: String,
    pub train: TrainConfig,
    pub model: ModelSettings,
    pub train_file: PathBuf,
    pub meta_file: PathBuf,
    pub val_file: Option<PathBuf>,
    pub out_checkpoint: PathBuf,
    pub out_log: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetunePlan {
    pub mode: String,
    pub train: TrainConfig,
    pub head_seed: u64,
    pub base_checkpoint: PathBuf,
    pub nlu_file: PathBuf,
    pub val_file: Option<PathBuf>,
    pub out_checkpoint: PathBuf,
    pub out_log: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RescorePlan {
    pub rescore: RescoreConfig,
    pub checkpoint: PathBuf,
    pub nbest_file: PathBuf,
    pub out_file: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneLambdaPlan {
    pub grid: Vec<f64>,
    pub normalize_lm: bool,
    pub checkpoint: PathBuf,
    pub nbest_file: PathBuf,
    pub out_report: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPlan {
    pub lambda: f64,
    pub normalize_lm: bool,
    pub sets: Vec<String>,
    pub checkpoint: PathBuf,
    pub data_dir: PathBuf,
    pub baseline_report: Option<PathBuf>,
    pub out_report: PathBuf,
}

/// Lambda grid searched when none is given.
pub const DEFAULT_LAMBDA_GRID: &[f64] =
    &[0.0, 0.001, 0.002, 0.003, 0.004, 0.005, 0.006, 0.008, 0.01, 0.02, 0.05, 0.1];

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::GenData(args) => run_gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Finetune(args) => run_finetune(args),
        Command::Rescore(args) => run_rescore(args),
        Command::TuneLambda(args) => run_tune_lambda(args),
        Command::Eval(args) => run_eval(args),
        Command::Rerun(args) => run_rerun(args),
    }
}

/// One-line machine-parseable rendering for stderr.
pub fn error_line(err: &Error) -> String {
    serde_json::json!({ "error": err.kind(), "message": err.to_string() }).to_string()
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn checksum_all(paths: &BTreeMap<String, PathBuf>) -> Result<BTreeMap<String, String>> {
    paths.iter().map(|(k, p)| Ok((k.clone(), sha256_file(p)?))).collect()
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Data(format!("cannot serialize manifest: {e}")))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Parse { line: e.line(), message: format!("bad manifest: {e}") })
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Data(format!("cannot serialize config: {e}")))
}

/// Recursive JSON merge: objects merge key-wise, everything else is replaced
/// by the overlay. Drives the defaults < config-file < flags precedence.
fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn resolve_in_dir(dir: &Path, file: &Path) -> PathBuf {
    if file.is_absolute() {
        file.to_path_buf()
    } else {
        dir.join(file)
    }
}

fn run_to_completion(manifest_path: &Path, mut manifest: RunManifest, exec: impl FnOnce() -> Result<()>) -> Result<()> {
    manifest.input_checksums = checksum_all(&manifest.inputs)?;
    write_manifest(manifest_path, &manifest)?;
    exec()?;
    manifest.output_checksums = checksum_all(&manifest.outputs)?;
    write_manifest(manifest_path, &manifest)?;
    Ok(())
}

// gen-data

fn run_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut grammar = match &args.grammar {
        Some(path) => load_grammar_spec(path)?,
        None => default_grammar(),
    };
    if let Some(seed) = args.seed {
        grammar.seed = seed;
    }
    let defaults = DatasetSizes::default();
    let sizes = DatasetSizes {
        train_nlu: args.train_nlu.unwrap_or(defaults.train_nlu),
        train_trans: args.train_trans.unwrap_or(defaults.train_trans),
        test_gen: args.test_gen.unwrap_or(defaults.test_gen),
        test_rare: args.test_rare.unwrap_or(defaults.test_rare),
    };
    let noise_defaults = NoiseConfig::default();
    let noise = NoiseConfig {
        n: args.nbest_size.unwrap_or(noise_defaults.n),
        sub_rate: args.sub_rate.unwrap_or(noise_defaults.sub_rate),
        del_rate: args.del_rate.unwrap_or(noise_defaults.del_rate),
        ins_rate: args.ins_rate.unwrap_or(noise_defaults.ins_rate),
        rare_multiplier: args.rare_multiplier.unwrap_or(noise_defaults.rare_multiplier),
        oracle_inclusion: args.oracle_inclusion.unwrap_or(noise_defaults.oracle_inclusion),
        ..noise_defaults
    };
    let plan = GenDataPlan {
        grammar,
        sizes,
        noise,
        dev_nbest: args.dev_nbest.unwrap_or(300),
        out_dir: args.out_dir.clone(),
    };

    fs::create_dir_all(&plan.out_dir)?;
    let mut inputs = BTreeMap::new();
    if let Some(path) = &args.grammar {
        inputs.insert("grammar".to_string(), path.clone());
    }
    let manifest = RunManifest {
        command: "gen-data".into(),
        seed: plan.grammar.seed,
        config: to_value(&plan)?,
        inputs,
        outputs: gen_data_outputs(&plan),
        input_checksums: BTreeMap::new(),
        output_checksums: BTreeMap::new(),
    };
    let manifest_path = plan.out_dir.join("manifest.json");
    run_to_completion(&manifest_path, manifest, || execute_gen_data(&plan))
}

fn gen_data_outputs(plan: &GenDataPlan) -> BTreeMap<String, PathBuf> {
    let d = &plan.out_dir;
    let mut out = BTreeMap::new();
    out.insert("grammar".into(), d.join("grammar.json"));
    out.insert("meta".into(), d.join("meta.json"));
    out.insert("train_nlu".into(), d.join("train_nlu.jsonl"));
    out.insert("train_trans".into(), d.join("train_trans.jsonl"));
    out.insert("test_gen".into(), d.join("test_gen.jsonl"));
    out.insert("test_rare".into(), d.join("test_rare.jsonl"));
    out.insert("nbest_dev".into(), d.join("nbest_dev.jsonl"));
    out.insert("nbest_test_gen".into(), d.join("nbest_test_gen.jsonl"));
    out.insert("nbest_test_rare".into(), d.join("nbest_test_rare.jsonl"));
    out
}

fn execute_gen_data(plan: &GenDataPlan) -> Result<()> {
    let compiled = plan.grammar.compile()?;
    let bundle = generate(&plan.grammar, &plan.sizes)?;
    let out = gen_data_outputs(plan);

    save_grammar_spec(&out["grammar"], &plan.grammar)?;
    let meta = DatasetMeta {
        intent_labels: compiled.intent_labels(),
        slot_labels: compiled.slot_labels(),
        vocab: compiled.vocab.surface_tokens().to_vec(),
    };
    save_meta(&out["meta"], &meta)?;
    save_dataset(&out["train_nlu"], &bundle.train_nlu)?;
    save_dataset(&out["train_trans"], &bundle.train_trans)?;
    save_dataset(&out["test_gen"], &bundle.test_gen)?;
    save_dataset(&out["test_rare"], &bundle.test_rare)?;

    let seed = plan.grammar.seed;
    let dev: Vec<Utterance> =
        bundle.train_nlu.iter().take(plan.dev_nbest).cloned().collect();
    save_nbest(&out["nbest_dev"], &simulate_corpus(&dev, &compiled, &plan.noise, seed)?)?;
    save_nbest(
        &out["nbest_test_gen"],
        &simulate_corpus(&bundle.test_gen, &compiled, &plan.noise, seed)?,
    )?;
    save_nbest(
        &out["nbest_test_rare"],
        &simulate_corpus(&bundle.test_rare, &compiled, &plan.noise, seed)?,
    )?;

    println!(
        "wrote {} nlu / {} trans / {} gen / {} rare utterances to {}",
        bundle.train_nlu.len(),
        bundle.train_trans.len(),
        bundle.test_gen.len(),
        bundle.test_rare.len(),
        plan.out_dir.display()
    );
    Ok(())
}

// train

#[derive(Debug, Default, Deserialize)]
struct TrainFileConfig {
    train: Option<serde_json::Value>,
    model: Option<serde_json::Value>,
}

fn load_file_config(path: Option<&PathBuf>) -> Result<TrainFileConfig> {
    match path {
        None => Ok(TrainFileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Parse { line: e.line(), message: format!("bad config file: {e}") })
        }
    }
}

fn overlay<T: Serialize + for<'de> Deserialize<'de>>(
    base: &T,
    patch: Option<serde_json::Value>,
) -> Result<T> {
    let mut value = to_value(base)?;
    if let Some(patch) = patch {
        merge_json(&mut value, patch);
    }
    serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("invalid config value: {e}")))
}

fn ensure_annotated(data: &[Utterance], what: &str) -> Result<()> {
    for utt in data {
        if utt.intent.is_none() || utt.slots.is_none() {
            return Err(Error::Data(format!(
                "multi-task training on transcription-only data: utterance {:?} in {what} has no annotations"
            , utt.id)));
        }
    }
    Ok(())
}

fn print_train_log(log: &TrainLog) {
    for (i, r) in log.records.iter().enumerate() {
        let updates = log
            .weight_updates
            .get(i)
            .map(|u| format!(", {u} weight updates"))
            .unwrap_or_default();
        let ppl = r.val_ppl.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into());
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "epoch {:>3}: lm {} intent {} slot {} | alpha {:.3}/{:.3}/{:.3} | val ppl {}{}",
            r.epoch,
            fmt(r.lm_loss),
            fmt(r.intent_loss),
            fmt(r.slot_loss),
            r.weights.lm,
            r.weights.intent,
            r.weights.slot,
            ppl,
            updates
        );
    }
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let file_cfg = load_file_config(args.config.as_ref())?;
    let mut train_cfg: TrainConfig = overlay(&TrainConfig::default(), file_cfg.train)?;
    let mut model_settings: ModelSettings = overlay(&ModelSettings::default(), file_cfg.model)?;

    if let Some(v) = args.epochs {
        train_cfg.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        train_cfg.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        train_cfg.batch_size = v;
    }
    if let Some(v) = args.seed {
        train_cfg.seed = v;
    }
    if let Some(v) = args.clip_norm {
        train_cfg.clip_norm = v;
    }
    train_cfg.schedule = args.mode.schedule();
    if let Some(v) = &args.encoder {
        model_settings.encoder = EncoderVariant::parse(v)?;
    }
    if let Some(v) = args.embed_dim {
        model_settings.embed_dim = v;
    }
    if let Some(v) = args.hidden_dim {
        model_settings.hidden_dim = v;
    }
    if let Some(v) = args.layers {
        model_settings.layers = v;
    }

    let plan = TrainPlan {
        mode: args.mode.name().into(),
        train: train_cfg,
        model: model_settings,
        train_file: resolve_in_dir(&args.data_dir, &args.train_file),
        meta_file: args.data_dir.join("meta.json"),
        val_file: args.val_file.as_ref().map(|f| resolve_in_dir(&args.data_dir, f)),
        out_checkpoint: args.out.clone(),
        out_log: args
            .log
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("{}.log.tsv", args.out.display()))),
    };

    let mut inputs = BTreeMap::new();
    inputs.insert("train".to_string(), plan.train_file.clone());
    inputs.insert("meta".to_string(), plan.meta_file.clone());
    if let Some(v) = &plan.val_file {
        inputs.insert("val".to_string(), v.clone());
    }
    if let Some(c) = &args.config {
        inputs.insert("config".to_string(), c.clone());
    }
    let mut outputs = BTreeMap::new();
    outputs.insert("checkpoint".to_string(), plan.out_checkpoint.clone());
    outputs.insert("log".to_string(), plan.out_log.clone());

    let manifest = RunManifest {
        command: "train".into(),
        seed: plan.train.seed,
        config: to_value(&plan)?,
        inputs,
        outputs,
        input_checksums: BTreeMap::new(),
        output_checksums: BTreeMap::new(),
    };
    let manifest_path = PathBuf::from(format!("{}.manifest.json", args.out.display()));
    run_to_completion(&manifest_path, manifest, || execute_train(&plan))
}

fn load_encoded(
    path: &Path,
    meta: &DatasetMeta,
) -> Result<(Vec<Utterance>, Vec<EncodedUtterance>)> {
    let utts = load_dataset(path)?;
    let vocab = meta.vocabulary()?;
    let encoded = encode_dataset(&utts, &vocab, &meta.intent_labels, &meta.slot_labels)?;
    Ok((utts, encoded))
}

fn execute_train(plan: &TrainPlan) -> Result<()> {
    let mode = TrainMode::parse(&plan.mode)?;
    let meta = load_meta(&plan.meta_file)?;
    let (raw, data) = load_encoded(&plan.train_file, &meta)?;
    if mode.multitask() {
        ensure_annotated(&raw, &plan.train_file.display().to_string())?;
    }
    let val = match &plan.val_file {
        Some(path) => load_encoded(path, &meta)?.1,
        None => Vec::new(),
    };

    let config = plan.model.to_model_config(&meta);
    let vocab = meta.vocabulary()?;
    let mut model = Model::new(config, vocab, plan.train.seed)?;
    let log = train(&mut model, &data, &val, &plan.train)?;
    print_train_log(&log);

    checkpoint::save_model(&model, &plan.out_checkpoint)?;
    fs::write(&plan.out_log, log.to_tsv())?;
    println!("checkpoint written to {}", plan.out_checkpoint.display());
    Ok(())
}

// finetune

fn run_finetune(args: &FinetuneArgs) -> Result<()> {
    if !args.mode.multitask() {
        return Err(Error::Config(
            "finetune is a multi-task stage; use train --mode stlm for LM-only runs".into(),
        ));
    }
    let file_cfg = load_file_config(args.config.as_ref())?;
    let mut train_cfg: TrainConfig = overlay(&TrainConfig::default(), file_cfg.train)?;
    if file_cfg.model.is_some() {
        return Err(Error::Config(
            "finetune keeps the checkpoint's model shape; drop the \"model\" config section".into(),
        ));
    }
    if let Some(v) = args.epochs {
        train_cfg.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        train_cfg.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        train_cfg.batch_size = v;
    }
    if let Some(v) = args.seed {
        train_cfg.seed = v;
    }
    if let Some(v) = args.clip_norm {
        train_cfg.clip_norm = v;
    }
    train_cfg.schedule = args.mode.schedule();

    let plan = FinetunePlan {
        mode: args.mode.name().into(),
        head_seed: args.head_seed.unwrap_or(train_cfg.seed),
        train: train_cfg,
        base_checkpoint: args.base.clone(),
        nlu_file: args.nlu_data.clone(),
        val_file: args.val_file.clone(),
        out_checkpoint: args.out.clone(),
        out_log: args
            .log
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("{}.log.tsv", args.out.display()))),
    };

    let mut inputs = BTreeMap::new();
    inputs.insert("base".to_string(), plan.base_checkpoint.clone());
    inputs.insert("nlu".to_string(), plan.nlu_file.clone());
    if let Some(v) = &plan.val_file {
        inputs.insert("val".to_string(), v.clone());
    }
    if let Some(c) = &args.config {
        inputs.insert("config".to_string(), c.clone());
    }
    let mut outputs = BTreeMap::new();
    outputs.insert("checkpoint".to_string(), plan.out_checkpoint.clone());
    outputs.insert("log".to_string(), plan.out_log.clone());

    let manifest = RunManifest {
        command: "finetune".into(),
        seed: plan.train.seed,
        config: to_value(&plan)?,
        inputs,
        outputs,
        input_checksums: BTreeMap::new(),
        output_checksums: BTreeMap::new(),
    };
    let manifest_path = PathBuf::from(format!("{}.manifest.json", args.out.display()));
    run_to_completion(&manifest_path, manifest, || execute_finetune(&plan))
}

fn meta_of_model(model: &Model) -> DatasetMeta {
    DatasetMeta {
        intent_labels: model.config().intent_labels.clone(),
        slot_labels: model.config().slot_labels.clone(),
        vocab: model.vocab().surface_tokens().to_vec(),
    }
}

fn execute_finetune(plan: &FinetunePlan) -> Result<()> {
    let mut model = checkpoint::load_model(&plan.base_checkpoint)?;
    let meta = meta_of_model(&model);
    let (raw, data) = load_encoded(&plan.nlu_file, &meta)?;
    ensure_annotated(&raw, &plan.nlu_file.display().to_string())?;
    let val = match &plan.val_file {
        Some(path) => load_encoded(path, &meta)?.1,
        None => Vec::new(),
    };

    model.reinit_heads(plan.head_seed)?;
    let log = train(&mut model, &data, &val, &plan.train)?;
    print_train_log(&log);

    checkpoint::save_model(&model, &plan.out_checkpoint)?;
    fs::write(&plan.out_log, log.to_tsv())?;
    println!("checkpoint written to {}", plan.out_checkpoint.display());
    Ok(())
}

// rescore

fn run_rescore(args: &RescoreArgs) -> Result<()> {
    let defaults = RescoreConfig::default();
    let plan = RescorePlan {
        rescore: RescoreConfig {
            lambda: args.lambda.unwrap_or(defaults.lambda),
            normalize_lm: !args.no_normalize,
        },
        checkpoint: args.checkpoint.clone(),
        nbest_file: args.nbest.clone(),
        out_file: args.out.clone(),
    };

    let mut inputs = BTreeMap::new();
    inputs.insert("checkpoint".to_string(), plan.checkpoint.clone());
    inputs.insert("nbest".to_string(), plan.nbest_file.clone());
    let mut outputs = BTreeMap::new();
    outputs.insert("rescored".to_string(), plan.out_file.clone());

    let manifest = RunManifest {
        command: "rescore".into(),
        seed: 0,
        config: to_value(&plan)?,
        inputs,
        outputs,
        input_checksums: BTreeMap::new(),
        output_checksums: BTreeMap::new(),
    };
    let manifest_path = PathBuf::from(format!("{}.manifest.json", args.out.display()));
    run_to_completion(&manifest_path, manifest, || execute_rescore(&plan))
}

fn first_pass_wer(lists: &[NBestList]) -> Result<metrics::WerBreakdown> {
    let pairs: Vec<(Vec<String>, Vec<String>)> = lists
        .iter()
        .map(|l| {
            let top = first_pass_choice(l)?;
            Ok((l.reference.clone(), l.hypotheses[top].tokens.clone()))
        })
        .collect::<Result<_>>()?;
    metrics::corpus_wer(&pairs)
}

fn chosen_wer(lists: &[NBestList], outcomes: &[Rescored]) -> Result<metrics::WerBreakdown> {
    let pairs: Vec<(Vec<String>, Vec<String>)> = lists
        .iter()
        .zip(outcomes)
        .map(|(l, o)| (l.reference.clone(), l.hypotheses[o.chosen].tokens.clone()))
        .collect();
    metrics::corpus_wer(&pairs)
}

fn execute_rescore(plan: &RescorePlan) -> Result<()> {
    let model = checkpoint::load_model(&plan.checkpoint)?;
    let lists = load_nbest(&plan.nbest_file)?;
    if lists.is_empty() {
        return Err(Error::Data(format!("no n-best lists in {}", plan.nbest_file.display())));
    }
    let outcomes = lists
        .iter()
        .map(|l| rescore(&model, l, &plan.rescore))
        .collect::<Result<Vec<_>>>()?;
    save_rescored(&plan.out_file, &lists, &outcomes)?;

    let before = first_pass_wer(&lists)?.wer();
    let after = chosen_wer(&lists, &outcomes)?.wer();
    println!(
        "rescored {} lists at lambda {}: wer {:.4} -> {:.4}",
        lists.len(),
        plan.rescore.lambda,
        before,
        after
    );
    Ok(())
}

// tune-lambda

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaReport {
    pub grid: Vec<f64>,
    pub wer_by_lambda: Vec<f64>,
    pub best_lambda: f64,
    pub best_wer: f64,
    pub first_pass_wer: f64,
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| Error::Config(format!("bad lambda {s:?} in grid: {e}")))
        })
        .collect()
}

fn run_tune_lambda(args: &TuneLambdaArgs) -> Result<()> {
    let grid = match &args.grid {
        Some(text) => parse_grid(text)?,
        None => DEFAULT_LAMBDA_GRID.to_vec(),
    };
    let plan = TuneLambdaPlan {
        grid,
        normalize_lm: !args.no_normalize,
        checkpoint: args.checkpoint.clone(),
        nbest_file: args.nbest.clone(),
        out_report: args.out.clone(),
    };

    let mut inputs = BTreeMap::new();
    inputs.insert("checkpoint".to_string(), plan.checkpoint.clone());
    inputs.insert("nbest".to_string(), plan.nbest_file.clone());
    let mut outputs = BTreeMap::new();
    outputs.insert("report".to_string(), plan.out_report.clone());

    let manifest = RunManifest {
        command: "tune-lambda".into(),
        seed: 0,
        config: to_value(&plan)?,
        inputs,
        outputs,
        input_checksums: BTreeMap::new(),
        output_checksums: BTreeMap::new(),
    };
    let manifest_path = PathBuf::from(format!("{}.manifest.json", args.out.display()));
    run_to_completion(&manifest_path, manifest, || execute_tune_lambda(&plan))
}

fn execute_tune_lambda(plan: &TuneLambdaPlan) -> Result<()> {
    let model = checkpoint::load_model(&plan.checkpoint)?;
    let lists = load_nbest(&plan.nbest_file)?;
    let (best_lambda, best_wer) = tune_lambda(&model, &lists, &plan.grid)?;
    let mut wer_by_lambda = Vec::with_capacity(plan.grid.len());
    for &lambda in &plan.grid {
        let cfg = RescoreConfig { lambda, normalize_lm: plan.normalize_lm };
        let outcomes =
            lists.iter().map(|l| rescore(&model, l, &cfg)).collect::<Result<Vec<_>>>()?;
        wer_by_lambda.push(chosen_wer(&lists, &outcomes)?.wer());
    }
    let report = LambdaReport {
        grid: plan.grid.clone(),
        wer_by_lambda,
        best_lambda,
        best_wer,
        first_pass_wer: first_pass_wer(&lists)?.wer(),
    };
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Data(format!("cannot serialize report: {e}")))?;
    fs::write(&plan.out_report, text + "\n")?;
    println!(
        "best lambda {} (wer {:.4}, first pass {:.4})",
        report.best_lambda, report.best_wer, report.first_pass_wer
    );
    Ok(())
}

// eval

fn run_eval(args: &EvalArgs) -> Result<()> {
    let sets: Vec<String> = args
        .sets
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    if sets.is_empty() {
        return Err(Error::Config("no evaluation sets named".into()));
    }
    let plan = EvalPlan {
        lambda: args.lambda.unwrap_or_else(|| RescoreConfig::default().lambda),
        normalize_lm: true,
        sets,
        checkpoint: args.checkpoint.clone(),
        data_dir: args.data_dir.clone(),
        baseline_report: args.baseline.clone(),
        out_report: args.out.clone(),
    };

    let mut inputs = BTreeMap::new();
    inputs.insert("checkpoint".to_string(), plan.checkpoint.clone());
    for set in &plan.sets {
        inputs.insert(set.clone(), plan.data_dir.join(format!("{set}.jsonl")));
        let nbest = plan.data_dir.join(format!("nbest_{set}.jsonl"));
        if nbest.exists() {
            inputs.insert(format!("nbest_{set}"), nbest);
        }
    }
    if let Some(b) = &plan.baseline_report {
        inputs.insert("baseline".to_string(), b.clone());
    }
    let mut outputs = BTreeMap::new();
    outputs.insert("report".to_string(), plan.out_report.clone());

    let manifest = RunManifest {
        command: "eval".into(),
        seed: 0,
        config: to_value(&plan)?,
        inputs,
        outputs,
        input_checksums: BTreeMap::new(),
        output_checksums: BTreeMap::new(),
    };
    let manifest_path = PathBuf::from(format!("{}.manifest.json", args.out.display()));
    run_to_completion(&manifest_path, manifest, || execute_eval(&plan))
}

fn ratio_or(candidate: f64, baseline: Option<f64>) -> f64 {
    match baseline {
        Some(b) if b > 0.0 => candidate / b,
        Some(b) if b == 0.0 && candidate == 0.0 => 1.0,
        Some(_) => f64::INFINITY,
        None => 1.0,
    }
}

fn execute_eval(plan: &EvalPlan) -> Result<()> {
    let model = checkpoint::load_model(&plan.checkpoint)?;
    let meta = meta_of_model(&model);
    let other_id = model.config().slot_id(OTHER_LABEL)?;
    let baseline = match &plan.baseline_report {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
            })?;
            Some(Report::from_tsv(&text)?)
        }
        None => None,
    };

    let mut report = Report::default();
    for set in &plan.sets {
        let data_path = plan.data_dir.join(format!("{set}.jsonl"));
        let (_, encoded) = load_encoded(&data_path, &meta)?;
        if encoded.is_empty() {
            return Err(Error::Data(format!("evaluation set {set:?} is empty")));
        }
        let seqs: Vec<_> = encoded.iter().map(|u| u.seq.clone()).collect();
        let ppl = model.perplexity(&seqs)?;

        let mut gold_intents = Vec::new();
        let mut pred_intents = Vec::new();
        let mut gold_slots = Vec::new();
        let mut pred_slots = Vec::new();
        for utt in &encoded {
            let (Some(intent), Some(slots)) = (utt.intent, utt.slots.as_ref()) else {
                return Err(Error::Data(format!(
                    "utterance {:?} in {set:?} lacks gold annotations",
                    utt.id
                )));
            };
            gold_intents.push(intent);
            pred_intents.push(model.predict_intent(&utt.seq)?);
            gold_slots.push(slots.clone());
            pred_slots.push(model.predict_slots(&utt.seq)?);
        }
        let intent_error = metrics::intent_error_rate(&gold_intents, &pred_intents)?;
        let slot_f1 = metrics::slot_f1(&gold_slots, &pred_slots, other_id)?;

        let nbest_path = plan.data_dir.join(format!("nbest_{set}.jsonl"));
        let wer = if nbest_path.exists() {
            let lists = load_nbest(&nbest_path)?;
            let cfg = RescoreConfig { lambda: plan.lambda, normalize_lm: plan.normalize_lm };
            let outcomes =
                lists.iter().map(|l| rescore(&model, l, &cfg)).collect::<Result<Vec<_>>>()?;
            Some((chosen_wer(&lists, &outcomes)?.wer(), first_pass_wer(&lists)?.wer()))
        } else {
            None
        };

        let base_row = baseline.as_ref().and_then(|b| b.row(set));
        let werr = match (wer, base_row) {
            (Some((w, _)), Some(row)) => match row.wer {
                Some(bw) if bw > 0.0 => Some(metrics::werr(bw, w)?),
                Some(bw) if bw == 0.0 && w == 0.0 => Some(0.0),
                _ => None,
            },
            (Some((w, first)), None) if first > 0.0 => Some(metrics::werr(first, w)?),
            _ => None,
        };
        report.rows.push(ReportRow {
            corpus: set.clone(),
            ppl,
            ppl_norm: ratio_or(ppl, base_row.map(|r| r.ppl)),
            wer: wer.map(|(w, _)| w),
            werr,
            intent_error,
            er_norm: ratio_or(intent_error, base_row.map(|r| r.intent_error)),
            slot_f1,
            f1_norm: ratio_or(slot_f1, base_row.map(|r| r.slot_f1)),
        });
    }

    fs::write(&plan.out_report, report.to_tsv())?;
    print!("{}", report.to_tsv());
    Ok(())
}

// rerun

fn run_rerun(args: &RerunArgs) -> Result<()> {
    let manifest = read_manifest(&args.manifest)?;
    for (role, path) in &manifest.inputs {
        let expected = manifest.input_checksums.get(role).ok_or_else(|| {
            Error::Data(format!("manifest has no checksum for input {role:?}"))
        })?;
        let actual = sha256_file(path)?;
        if &actual != expected {
            return Err(Error::Data(format!(
                "input {role:?} ({}) changed since the recorded run",
                path.display()
            )));
        }
    }

    let config = manifest.config.clone();
    match manifest.command.as_str() {
        "gen-data" => execute_gen_data(&from_config(config)?),
        "train" => execute_train(&from_config(config)?),
        "finetune" => execute_finetune(&from_config(config)?),
        "rescore" => execute_rescore(&from_config(config)?),
        "tune-lambda" => execute_tune_lambda(&from_config(config)?),
        "eval" => execute_eval(&from_config(config)?),
        other => Err(Error::Config(format!("manifest names unknown command {other:?}"))),
    }?;

    for (role, path) in &manifest.outputs {
        let expected = manifest.output_checksums.get(role).ok_or_else(|| {
            Error::Data(format!("manifest has no checksum for output {role:?}"))
        })?;
        let actual = sha256_file(path)?;
        if &actual != expected {
            return Err(Error::Evaluation(format!(
                "rerun produced different bytes for output {role:?} ({})",
                path.display()
            )));
        }
    }
    println!(
        "reproduced {} outputs of {:?} byte-identically",
        manifest.outputs.len(),
        manifest.command
    );
    Ok(())
}

fn from_config<T: for<'de> Deserialize<'de>>(value: serde_json::Value) -> Result<T> {
    serde_json::from_value(value)
        .map_err(|e| Error::Parse { line: 0, message: format!("bad manifest config: {e}") })
}
