//! Experiment driver for the two-stage pipeline: reference training, preference
//! pair mining, DPO refinement, guided sampling and routing-entropy reports.

pub mod config;
pub mod error;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use traitmix::diffusion::{
    ddim_sample_traced, train_stage1, Checkpoint, DenoiserModel, DiffusionSchedule, Mode, TwoModeTask,
};
use traitmix::dpo::dpo_train;
use traitmix::lora_attention::ConditionSet;
use traitmix::mpo::{
    read_dataset, run_mpo, write_dataset, write_score_csv, CommandScorer, Evaluators, LinearEmbedder, QualityScorer,
    RuleScorer,
};
use traitmix::numerics::derive_seed;
use traitmix::trait_router::TraceLog;
use traitmix::SeededRng;

pub use config::{ExperimentConfig, CONFIG_SCHEMA_VERSION, OUTPUT_ROOT_ENV};
pub use error::CliError;

pub const STAGE1_CHECKPOINT: &str = "stage1.json";
pub const STAGE1_LOSS: &str = "stage1_loss.csv";
pub const STAGE1_SUMMARY: &str = "stage1_summary.json";
pub const DATASET_DIR: &str = "dataset";
pub const SCORES_CSV: &str = "scores.csv";
pub const STAGE2_CHECKPOINT: &str = "stage2.json";
pub const DPO_METRICS: &str = "dpo_metrics.csv";
pub const DPO_SUMMARY: &str = "dpo_summary.json";
pub const SAMPLE_FILE: &str = "sample.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const ENTROPY_FILE: &str = "entropy.csv";
pub const ENTROPY_STEPS_FILE: &str = "entropy_steps.csv";

// Independent random streams per pipeline stage, derived from the run seed.
const STREAM_MODEL: u64 = 1;
const STREAM_STAGE1: u64 = 2;
const STREAM_CONDITIONS: u64 = 3;
const STREAM_MPO: u64 = 4;
const STREAM_DPO: u64 = 5;
const STREAM_SAMPLE: u64 = 6;
const STREAM_EMBED: u64 = 7;

#[derive(Debug, Parser)]
#[command(name = "traitmix", version, about = "Multi-condition denoiser with routed experts and DPO refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the reference model with the noise-prediction MSE.
    TrainStage1(CommonArgs),
    /// Sample candidates from a checkpoint, score them and write preference pairs.
    Mpo {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Refine a reference checkpoint on a preference dataset.
    TrainDpo {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Draw one guided DDIM sample.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the condition dataset.
        #[arg(long, default_value_t = 0, conflicts_with = "unconditional")]
        condition: usize,
        #[arg(long)]
        unconditional: bool,
        /// Also write the routing decisions of every step.
        #[arg(long)]
        write_trace: bool,
    },
    /// Per-layer routing entropy of one or more trace files.
    Entropy {
        #[command(flatten)]
        common: CommonArgs,
        /// Trace CSV, optionally labelled as `label=path`. Repeatable.
        #[arg(long = "trace", required = true)]
        traces: Vec<String>,
        /// Expert count `n`; defaults to the configured value.
        #[arg(long)]
        experts: Option<usize>,
        /// Also write a per-sampling-step breakdown.
        #[arg(long)]
        per_step: bool,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `<output root>/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl CommonArgs {
    /// Loads and validates the configuration before anything is written.
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Paths of the files a command wrote.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    pub files: Vec<PathBuf>,
}

pub fn run(cli: Cli) -> Result<Outputs, CliError> {
    match cli.command {
        Command::TrainStage1(common) => {
            let config = common.resolve()?;
            cmd_train_stage1(&config, &config.output_dir(common.out.as_deref(), "stage1"))
        }
        Command::Mpo { common, checkpoint } => {
            let config = common.resolve()?;
            cmd_mpo(&config, &checkpoint, &config.output_dir(common.out.as_deref(), "mpo"))
        }
        Command::TrainDpo { common, checkpoint, dataset } => {
            let config = common.resolve()?;
            cmd_train_dpo(&config, &checkpoint, &dataset, &config.output_dir(common.out.as_deref(), "dpo"))
        }
        Command::Sample { common, checkpoint, condition, unconditional, write_trace } => {
            let config = common.resolve()?;
            let condition = (!unconditional).then_some(condition);
            let out = config.output_dir(common.out.as_deref(), "sample");
            cmd_sample(&config, &checkpoint, condition, write_trace, &out)
        }
        Command::Entropy { common, traces, experts, per_step } => {
            let config = common.resolve()?;
            let inputs = traces.iter().map(|t| parse_trace_arg(t)).collect::<Vec<_>>();
            let out = config.output_dir(common.out.as_deref(), "entropy");
            cmd_entropy(&inputs, experts.unwrap_or(config.experts), per_step, &out)
        }
    }
}

/// The randomly initialized model a run starts from.
pub fn initial_model(config: &ExperimentConfig) -> Result<DenoiserModel, CliError> {
    Ok(DenoiserModel::new(config.model(), derive_seed(config.seed, STREAM_MODEL))?)
}

/// The first `count` conditions of the run's condition dataset.
pub fn condition_dataset(
    config: &ExperimentConfig,
    model: &DenoiserModel,
    count: usize,
) -> Result<Vec<ConditionSet>, CliError> {
    let task = TwoModeTask::new(config.task(&model.config))?;
    let mut rng = SeededRng::new(derive_seed(config.seed, STREAM_CONDITIONS));
    Ok((0..count).map(|_| task.sample_condition(&mut rng).0).collect())
}

#[derive(Debug, Serialize)]
struct Stage1Summary {
    steps: usize,
    initial_eval_loss: f64,
    final_eval_loss: f64,
    initial_hash: String,
    final_hash: String,
    frozen_hash: String,
}

pub fn cmd_train_stage1(config: &ExperimentConfig, out: &Path) -> Result<Outputs, CliError> {
    let schedule = DiffusionSchedule::from_config(config.schedule())?;
    let mut model = initial_model(config)?;
    let initial_hash = model.param_hash();
    let task = TwoModeTask::new(config.task(&model.config))?;
    let mut rng = SeededRng::new(derive_seed(config.seed, STREAM_STAGE1));
    let report = train_stage1(&mut model, &schedule, &task, &config.stage1(), &mut rng)?;

    fs::create_dir_all(out)?;
    let mut outputs = Outputs::default();
    let ckpt_path = out.join(STAGE1_CHECKPOINT);
    let summary = Stage1Summary {
        steps: config.stage1_steps,
        initial_eval_loss: report.initial_eval_loss,
        final_eval_loss: report.final_eval_loss,
        initial_hash,
        final_hash: model.param_hash(),
        frozen_hash: model.frozen_hash(),
    };
    Checkpoint::new("stage1", config.stage1_steps, &schedule, model).save(&ckpt_path)?;
    outputs.files.push(ckpt_path);
    let loss_path = out.join(STAGE1_LOSS);
    report.write_csv(BufWriter::new(fs::File::create(&loss_path)?))?;
    outputs.files.push(loss_path);
    outputs.files.push(write_json(&out.join(STAGE1_SUMMARY), &summary)?);
    Ok(outputs)
}

pub fn cmd_mpo(config: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<Outputs, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let schedule = ckpt.schedule()?;
    let reference = ckpt.model;
    let dataset = condition_dataset(config, &reference, config.mpo_bundles)?;

    let dim = reference.config.dim;
    let embed_seed = |i: u64| derive_seed(derive_seed(config.seed, STREAM_EMBED), i);
    let content = LinearEmbedder::new("linear-content", dim, dim, embed_seed(0));
    let image = LinearEmbedder::new("linear-image", dim, dim, embed_seed(1));
    let text = LinearEmbedder::new("linear-text", dim, dim, embed_seed(2));
    let scorer: Box<dyn QualityScorer> = match config.scorer_command.split_first() {
        None => Box::new(RuleScorer::default()),
        Some((program, args)) => {
            Box::new(CommandScorer { name: program.clone(), program: program.clone(), args: args.to_vec() })
        }
    };
    let evaluators = Evaluators {
        content: &content,
        image: &image,
        text: &text,
        scorer: scorer.as_ref(),
        task: config.scoring_task,
        retries: config.scorer_retries,
    };
    let result = run_mpo(
        &reference,
        &schedule,
        &dataset,
        config.mpo_bundles,
        config.mpo_candidates,
        &config.sampler(),
        &evaluators,
        derive_seed(config.seed, STREAM_MPO),
    )?;

    let dir = out.join(DATASET_DIR);
    fs::create_dir_all(&dir)?;
    write_dataset(&dir, &result.pairs, &result.manifest)?;
    let scores = out.join(SCORES_CSV);
    write_score_csv(&result.rows, BufWriter::new(fs::File::create(&scores)?))?;
    Ok(Outputs { files: vec![dir, scores] })
}

#[derive(Debug, Serialize)]
struct DpoSummary {
    steps: usize,
    pairs: usize,
    first_loss: Option<f64>,
    final_loss: Option<f64>,
    loss_slope: f64,
    reference_hash: String,
    final_hash: String,
    frozen_hash: String,
}

pub fn cmd_train_dpo(
    config: &ExperimentConfig,
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
) -> Result<Outputs, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let schedule = ckpt.schedule()?;
    let (pairs, _) = read_dataset(dataset)?;
    if pairs.is_empty() {
        return Err(CliError::Validation(format!("dataset {} holds no preference pairs", dataset.display())));
    }
    let reference = ckpt.model;
    let mut theta = reference.clone();
    let dpo = traitmix::dpo::DpoConfig { schedule_steps: schedule.len(), ..config.dpo() };
    let mut rng = SeededRng::new(derive_seed(config.seed, STREAM_DPO));
    let report = dpo_train(&mut theta, &reference, &pairs, &schedule, &dpo, &mut rng)?;

    fs::create_dir_all(out)?;
    let summary = DpoSummary {
        steps: dpo.steps,
        pairs: pairs.len(),
        first_loss: report.records.first().map(|r| r.loss),
        final_loss: report.records.last().map(|r| r.loss),
        loss_slope: report.loss_slope(),
        reference_hash: report.reference_hash.clone(),
        final_hash: theta.param_hash(),
        frozen_hash: theta.frozen_hash(),
    };
    let ckpt_path = out.join(STAGE2_CHECKPOINT);
    Checkpoint::new("stage2", dpo.steps, &schedule, theta).save(&ckpt_path)?;
    let metrics = out.join(DPO_METRICS);
    report.write_csv(BufWriter::new(fs::File::create(&metrics)?))?;
    let summary_path = write_json(&out.join(DPO_SUMMARY), &summary)?;
    Ok(Outputs { files: vec![ckpt_path, metrics, summary_path] })
}

#[derive(Debug, Serialize)]
struct SampleFile {
    stage: String,
    seed: u64,
    steps: usize,
    omega: f64,
    condition: Option<usize>,
    nearest_mode: Mode,
    latent: traitmix::Matrix2D,
}

pub fn cmd_sample(
    config: &ExperimentConfig,
    checkpoint: &Path,
    condition: Option<usize>,
    write_trace: bool,
    out: &Path,
) -> Result<Outputs, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let schedule = ckpt.schedule()?;
    if config.ddim_steps > schedule.len() {
        return Err(CliError::Validation(format!(
            "ddim_steps = {} exceeds the checkpoint schedule length {}",
            config.ddim_steps,
            schedule.len()
        )));
    }
    let model = ckpt.model;
    let cond = match condition {
        Some(i) => Some(condition_dataset(config, &model, i + 1)?.pop().expect("i + 1 conditions")),
        None => None,
    };
    let mut rng = SeededRng::new(derive_seed(config.seed, STREAM_SAMPLE));
    let (latent, steps) =
        ddim_sample_traced(&model, cond.as_ref(), &schedule, config.ddim_steps, config.guidance, &mut rng)?;
    let task = TwoModeTask::new(config.task(&model.config))?;

    fs::create_dir_all(out)?;
    let mut outputs = Outputs::default();
    let file = SampleFile {
        stage: ckpt.stage,
        seed: config.seed,
        steps: config.ddim_steps,
        omega: config.guidance,
        condition,
        nearest_mode: task.nearest_mode(&latent),
        latent,
    };
    outputs.files.push(write_json(&out.join(SAMPLE_FILE), &file)?);
    if write_trace {
        let mut log = TraceLog::new();
        for s in &steps {
            for trace in &s.traces {
                log.push(Some(s.step), trace);
            }
        }
        let path = out.join(TRACE_FILE);
        log.write_csv(BufWriter::new(fs::File::create(&path)?))?;
        outputs.files.push(path);
    }
    Ok(outputs)
}

/// A trace input with the column label it reports under.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceInput {
    pub label: String,
    pub path: PathBuf,
}

/// `label=path`, or a bare path labelled by its file stem.
pub fn parse_trace_arg(arg: &str) -> TraceInput {
    match arg.split_once('=') {
        Some((label, path)) if !label.is_empty() => TraceInput { label: label.into(), path: path.into() },
        _ => {
            let path = PathBuf::from(arg);
            let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| arg.into());
            TraceInput { label, path }
        }
    }
}

/// Writes `layer, H_<label>..., bound_ln_n`. Entropy pools every token and
/// step of a file; a layer missing from one file leaves its cell empty.
pub fn cmd_entropy(inputs: &[TraceInput], experts: usize, per_step: bool, out: &Path) -> Result<Outputs, CliError> {
    if inputs.is_empty() {
        return Err(CliError::Validation("entropy needs at least one trace file".into()));
    }
    if experts == 0 {
        return Err(CliError::Validation("experts must be positive".into()));
    }
    let mut logs = Vec::with_capacity(inputs.len());
    for input in inputs {
        let file = fs::File::open(&input.path).map_err(|e| CliError::Io(format!("{}: {e}", input.path.display())))?;
        let log = TraceLog::read_csv(file)?;
        if log.records.is_empty() {
            return Err(CliError::Validation(format!(
                "insufficient data: trace {} has no assignments",
                input.path.display()
            )));
        }
        logs.push(log);
    }
    let layers: std::collections::BTreeSet<usize> = logs.iter().flat_map(|l| l.layers()).collect();

    fs::create_dir_all(out)?;
    let labels: Vec<String> = inputs.iter().map(|i| format!("H_{}", i.label)).collect();
    let bound = (experts as f64).ln();
    // a missing (layer, step) leaves its cell empty
    let cell = |log: &TraceLog, layer: usize, step: Option<usize>| -> Result<String, CliError> {
        let present = log.records.iter().any(|r| r.layer == layer && (step.is_none() || r.step == step));
        Ok(if present { format!("{:?}", log.entropy(layer, step, experts)?) } else { String::new() })
    };

    let mut lines = vec![format!("layer,{},bound_ln_n", labels.join(","))];
    for &layer in &layers {
        let cells = logs.iter().map(|log| cell(log, layer, None)).collect::<Result<Vec<_>, _>>()?;
        lines.push(format!("{layer},{},{bound:?}", cells.join(",")));
    }
    let path = out.join(ENTROPY_FILE);
    fs::write(&path, lines.join("\n") + "\n")?;
    let mut files = vec![path];

    if per_step {
        let steps: std::collections::BTreeSet<usize> = logs.iter().flat_map(|l| l.steps()).collect();
        if steps.is_empty() {
            return Err(CliError::Validation("insufficient data: no trace carries a step column".into()));
        }
        let mut lines = vec![format!("step,layer,{},bound_ln_n", labels.join(","))];
        for &step in &steps {
            for &layer in &layers {
                let cells = logs.iter().map(|log| cell(log, layer, Some(step))).collect::<Result<Vec<_>, _>>()?;
                lines.push(format!("{step},{layer},{},{bound:?}", cells.join(",")));
            }
        }
        let path = out.join(ENTROPY_STEPS_FILE);
        fs::write(&path, lines.join("\n") + "\n")?;
        files.push(path);
    }
    Ok(Outputs { files })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf, CliError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(path.to_path_buf())
}
