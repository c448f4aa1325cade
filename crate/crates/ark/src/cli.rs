//! Command-line front end: strict JSON run configuration, stable artifact
//! layout under one output directory, and the orchestration harnesses that
//! span modules (ablation table, data-efficiency sweep, significance report).
//!
//! Exit codes are a stable contract: 0 success, 2 configuration error,
//! 3 numerical divergence, 4 missing prerequisite artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bias::{build_exclusive_folds, run_bias_experiment, BiasError, FoldConfig};
use crate::data::{
    generate_synthetic_suite, load_manifest, save_manifest, stream_seed, DataError,
    DatasetManifest, Split, SyntheticConfig,
};
use crate::eval::{
    export_embeddings, finetune, linear_probe, load_embeddings, save_embeddings, EmbeddingRecord,
    EmbeddingSource, EmbeddingStage, EvalError, FinetuneConfig, MetricReport, ProbeConfig,
    TrainBudget,
};
use crate::nn::{
    build_model, read_checkpoint, write_checkpoint, EncoderConfig, ModelError, ModelPair,
    ProjectorConfig,
};
use crate::pretrain::{run_concurrent, run_cyclic_with, PretrainConfig, PretrainError, PretrainMode};
use crate::stats::{compare_conditions, ConditionStanding, StatsError, TrialSet};
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

// Artifact names, fixed so commands can find each other's outputs.
pub const MANIFEST_INDEX: &str = "manifest.json";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const ROUND_LOG: &str = "round_log.csv";
pub const DATA_EFFICIENCY: &str = "data_efficiency.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const SIGNIFICANCE_CSV: &str = "significance.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("divergence: {0}")]
    Diverged(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Missing(_) => EXIT_MISSING,
            CliError::Other(_) => 1,
        }
    }
}

impl From<PretrainError> for CliError {
    fn from(e: PretrainError) -> Self {
        match e {
            PretrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            PretrainError::Config(m) => CliError::Config(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(m) => CliError::Config(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(m) => CliError::Config(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<BiasError> for CliError {
    fn from(e: BiasError) -> Self {
        match e {
            BiasError::Config(m) => CliError::Config(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::Config(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
}

fn default_n_trials() -> usize {
    10
}
fn default_source() -> EmbeddingSource {
    EmbeddingSource::Teacher
}
fn default_stage() -> EmbeddingStage {
    EmbeddingStage::Projector
}
fn default_fractions() -> Vec<f64> {
    vec![0.01, 0.1, 0.5, 1.0]
}
fn default_fnr_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
    /// Seeded trials per report; the protocol default is 10.
    #[serde(default = "default_n_trials")]
    pub n_trials: usize,
    #[serde(default = "default_source")]
    pub source: EmbeddingSource,
    #[serde(default = "default_stage")]
    pub stage: EmbeddingStage,
    /// Task the probe/finetune reports target.
    #[serde(default)]
    pub target_task: usize,
    /// Train-budget sweep for the data-efficiency curve.
    #[serde(default = "default_fractions")]
    pub train_fractions: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSection {
    pub folds: FoldConfig,
    pub probe: ProbeConfig,
    #[serde(default = "default_fnr_threshold")]
    pub fnr_threshold: f64,
    /// Task audited for subgroup bias (must be multilabel).
    #[serde(default)]
    pub target_task: usize,
}

/// One strict JSON document drives every command; unknown keys are rejected
/// and the resolved form is persisted beside the outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: SyntheticConfig,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub eval: EvalSection,
    pub bias: BiasSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.encoder.validate()?;
        self.pretrain.validate()?;
        self.eval.probe.validate()?;
        self.eval.finetune.validate()?;
        self.bias.probe.validate()?;
        if self.eval.n_trials == 0 {
            return Err(CliError::Config("eval.n_trials must be >= 1".into()));
        }
        for &f in &self.eval.train_fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(CliError::Config(format!(
                    "eval.train_fractions entries must be in (0, 1], got {f}"
                )));
            }
        }
        if self.data.n_tasks == 0 {
            return Err(CliError::Config("data.n_tasks must be >= 1".into()));
        }
        if self.eval.target_task >= self.data.n_tasks {
            return Err(CliError::Config(format!(
                "eval.target_task {} out of range for {} tasks",
                self.eval.target_task, self.data.n_tasks
            )));
        }
        if self.bias.target_task >= self.data.n_tasks {
            return Err(CliError::Config(format!(
                "bias.target_task {} out of range for {} tasks",
                self.bias.target_task, self.data.n_tasks
            )));
        }
        Ok(())
    }
}

/// Load a config file and apply command-line overrides. A `--seed` override
/// rewrites every section seed deterministically so one flag reseeds the whole
/// run; the resolved config that gets persisted reflects the final values.
pub fn load_config(
    path: &Path,
    seed: Option<u64>,
    output_dir: Option<&Path>,
) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Missing(format!("config file {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::Config(format!("{}: at {}: {}", path.display(), e.path(), e.inner())))?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.data.seed = stream_seed(s, 1, 0);
        cfg.pretrain.seed = stream_seed(s, 2, 0);
        cfg.eval.probe.seed = stream_seed(s, 3, 0);
        cfg.eval.finetune.seed = stream_seed(s, 4, 0);
        cfg.bias.folds.seed = stream_seed(s, 5, 0);
        cfg.bias.probe.seed = stream_seed(s, 6, 0);
    }
    if let Some(d) = output_dir {
        cfg.output_dir = d.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn persist_resolved(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(format!("{command}.resolved.json")), cfg)
}

// ---------------------------------------------------------------------------
// Artifact access
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestIndexEntry {
    task_id: usize,
    path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestIndex {
    tasks: Vec<ManifestIndexEntry>,
    data: SyntheticConfig,
}

fn embeddings_path(out: &Path, task_id: usize) -> PathBuf {
    out.join(format!("task{task_id}.embeddings.jsonl"))
}

fn load_suite(out: &Path) -> Result<Vec<DatasetManifest>, CliError> {
    let index_path = out.join(MANIFEST_INDEX);
    let text = std::fs::read_to_string(&index_path).map_err(|_| {
        CliError::Missing(format!(
            "manifest index {} (run gen-data first)",
            index_path.display()
        ))
    })?;
    let index: ManifestIndex =
        serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{index_path:?}: {e}")))?;
    index
        .tasks
        .iter()
        .map(|t| {
            let p = out.join(&t.path);
            if !p.exists() {
                return Err(CliError::Missing(format!("dataset manifest {}", p.display())));
            }
            load_manifest(&p).map_err(CliError::from)
        })
        .collect()
}

fn load_model(cfg: &RunConfig, suite: &[DatasetManifest]) -> Result<ModelPair, CliError> {
    let path = cfg.output_dir.join(MODEL_CKPT);
    if !path.exists() {
        return Err(CliError::Missing(format!(
            "checkpoint {} (run pretrain first)",
            path.display()
        )));
    }
    let tensors = read_checkpoint(&path)?;
    let tasks: Vec<_> = suite.iter().map(|m| m.task.clone()).collect();
    let mut pair = build_model(
        &cfg.model.encoder,
        &cfg.model.projector,
        &tasks,
        cfg.pretrain.seed,
    )?;
    pair.load_named_tensors(&tensors)?;
    Ok(pair)
}

fn load_task_embeddings(
    out: &Path,
    task_id: usize,
) -> Result<Vec<EmbeddingRecord>, CliError> {
    let path = embeddings_path(out, task_id);
    if !path.exists() {
        return Err(CliError::Missing(format!(
            "embedding file {} (run export first)",
            path.display()
        )));
    }
    load_embeddings(&path).map_err(CliError::from)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    persist_resolved(cfg, "gen-data")?;
    let suite = generate_synthetic_suite(&cfg.data)?;
    let mut entries = Vec::new();
    for m in &suite {
        let name = format!("task{}.manifest", m.task.task_id);
        save_manifest(m, &cfg.output_dir.join(&name))?;
        entries.push(ManifestIndexEntry {
            task_id: m.task.task_id,
            path: name,
        });
    }
    let index = ManifestIndex {
        tasks: entries,
        data: cfg.data.clone(),
    };
    write_json(&cfg.output_dir.join(MANIFEST_INDEX), &index)?;
    println!("gen-data: {} tasks under {}", suite.len(), cfg.output_dir.display());
    Ok(())
}

/// Split the full named-tensor list into per-branch views so the teacher and
/// student land in separate checkpoint files as well as the combined one.
fn branch_tensors(all: &[(String, Tensor)], prefix: &str) -> Vec<(String, Tensor)> {
    all.iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .cloned()
        .collect()
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    persist_resolved(cfg, "pretrain")?;
    let suite = load_suite(&cfg.output_dir)?;
    let tasks: Vec<_> = suite.iter().map(|m| m.task.clone()).collect();
    let mut pair = build_model(
        &cfg.model.encoder,
        &cfg.model.projector,
        &tasks,
        cfg.pretrain.seed,
    )?;
    let log = match cfg.pretrain.mode {
        PretrainMode::Cyclic => {
            let out = cfg.output_dir.clone();
            let every = cfg.pretrain.checkpoint_every;
            let last_task = suite.len() - 1;
            run_cyclic_with(&mut pair, &suite, &cfg.pretrain, |round, ti, p| {
                if ti == last_task && every > 0 && (round + 1) % every == 0 {
                    let _ = write_checkpoint(
                        &out.join(format!("round{round:03}.ckpt")),
                        &p.named_tensors(),
                    );
                }
            })?
        }
        PretrainMode::Concurrent => {
            let (trained, log) = run_concurrent(pair, &suite, &cfg.pretrain)?;
            pair = trained;
            log
        }
    };
    let all = pair.named_tensors();
    write_checkpoint(&cfg.output_dir.join(MODEL_CKPT), &all)?;
    write_checkpoint(&cfg.output_dir.join(TEACHER_CKPT), &branch_tensors(&all, "teacher."))?;
    write_checkpoint(&cfg.output_dir.join(STUDENT_CKPT), &branch_tensors(&all, "student."))?;
    std::fs::write(cfg.output_dir.join(ROUND_LOG), log.to_csv())?;
    println!(
        "pretrain: {:?} mode, {} log entries, checkpoints under {}",
        cfg.pretrain.mode,
        log.entries.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

pub fn cmd_export(cfg: &RunConfig) -> Result<(), CliError> {
    persist_resolved(cfg, "export")?;
    let suite = load_suite(&cfg.output_dir)?;
    let pair = load_model(cfg, &suite)?;
    for m in &suite {
        let records = export_embeddings(&pair, m, cfg.eval.source, cfg.eval.stage)?;
        save_embeddings(&records, &embeddings_path(&cfg.output_dir, m.task.task_id))?;
    }
    println!("export: {} embedding files under {}", suite.len(), cfg.output_dir.display());
    Ok(())
}

/// Run `n_trials` independently seeded probe trials and merge them by trial
/// index, so the report does not depend on scheduling.
fn probe_trials(
    train: &[EmbeddingRecord],
    test: &[EmbeddingRecord],
    task: &crate::data::TaskSpec,
    base: &ProbeConfig,
    n_trials: usize,
    budget: Option<TrainBudget>,
) -> Result<Vec<MetricReport>, CliError> {
    use rayon::prelude::*;
    let trials: Vec<Result<MetricReport, EvalError>> = (0..n_trials)
        .into_par_iter()
        .map(|t| {
            let mut cfg = base.clone();
            cfg.seed = stream_seed(base.seed, t as u64, 0);
            cfg.budget = budget;
            linear_probe(train, test, task, &cfg)
        })
        .collect();
    trials
        .into_iter()
        .map(|r| r.map_err(CliError::from))
        .collect()
}

fn split_embeddings(
    records: &[EmbeddingRecord],
) -> (Vec<EmbeddingRecord>, Vec<EmbeddingRecord>) {
    let train: Vec<_> = records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let test: Vec<_> = records.iter().filter(|r| r.split == Split::Test).cloned().collect();
    (train, test)
}

fn write_trial_artifacts(
    out: &Path,
    label: &str,
    trials: &[MetricReport],
) -> Result<MetricReport, CliError> {
    let merged = MetricReport::aggregate_trials(trials)?;
    std::fs::write(out.join(format!("{label}_report.csv")), merged.to_csv())?;
    write_json(&out.join(format!("{label}_report.json")), &merged)?;
    let set = TrialSet {
        label: label.to_string(),
        samples: trials.iter().map(|t| t.aggregate).collect(),
    };
    write_json(&out.join(format!("{label}.trials.json")), &set)?;
    Ok(merged)
}

pub fn cmd_probe(cfg: &RunConfig) -> Result<(), CliError> {
    persist_resolved(cfg, "probe")?;
    let suite = load_suite(&cfg.output_dir)?;
    let target = &suite[cfg.eval.target_task];
    let records = load_task_embeddings(&cfg.output_dir, target.task.task_id)?;
    let (train, test) = split_embeddings(&records);

    let trials = probe_trials(
        &train,
        &test,
        &target.task,
        &cfg.eval.probe,
        cfg.eval.n_trials,
        cfg.eval.probe.budget,
    )?;
    let merged = write_trial_artifacts(&cfg.output_dir, "probe", &trials)?;

    // Data-efficiency sweep: same protocol at shrinking train budgets.
    let mut curve = String::from("train_fraction,n_trials,mean,std\n");
    for &f in &cfg.eval.train_fractions {
        let ts = probe_trials(
            &train,
            &test,
            &target.task,
            &cfg.eval.probe,
            cfg.eval.n_trials,
            Some(TrainBudget::Fraction(f)),
        )?;
        let m = MetricReport::aggregate_trials(&ts)?;
        curve.push_str(&format!("{f},{},{},{}\n", m.n_trials, m.mean, m.std));
    }
    std::fs::write(cfg.output_dir.join(DATA_EFFICIENCY), curve)?;
    println!(
        "probe: task {} {} = {:.4} ± {:.4} over {} trials",
        target.task.task_id, merged.metric, merged.mean, merged.std, merged.n_trials
    );
    Ok(())
}

pub fn cmd_finetune(cfg: &RunConfig) -> Result<(), CliError> {
    use rayon::prelude::*;
    persist_resolved(cfg, "finetune")?;
    let suite = load_suite(&cfg.output_dir)?;
    let target = &suite[cfg.eval.target_task];
    let ckpt_path = cfg.output_dir.join(MODEL_CKPT);
    if !ckpt_path.exists() {
        return Err(CliError::Missing(format!(
            "checkpoint {} (run pretrain first)",
            ckpt_path.display()
        )));
    }
    let tensors = read_checkpoint(&ckpt_path)?;
    let trials: Vec<Result<MetricReport, EvalError>> = (0..cfg.eval.n_trials)
        .into_par_iter()
        .map(|t| {
            let mut fcfg = cfg.eval.finetune.clone();
            fcfg.seed = stream_seed(cfg.eval.finetune.seed, t as u64, 0);
            finetune(
                Some(&tensors),
                &cfg.model.encoder,
                &cfg.model.projector,
                target,
                &fcfg,
            )
        })
        .collect();
    let trials: Vec<MetricReport> = trials
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(CliError::from)?;
    let merged = write_trial_artifacts(&cfg.output_dir, "finetune", &trials)?;
    println!(
        "finetune: task {} {} = {:.4} ± {:.4} over {} trials",
        target.task.task_id, merged.metric, merged.mean, merged.std, merged.n_trials
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct BiasSummary {
    significant_classes: Vec<String>,
    fnr: Vec<(String, String, f64)>,
}

pub fn cmd_bias(cfg: &RunConfig) -> Result<(), CliError> {
    persist_resolved(cfg, "bias")?;
    let suite = load_suite(&cfg.output_dir)?;
    let target = &suite[cfg.bias.target_task];
    let records = load_task_embeddings(&cfg.output_dir, target.task.task_id)?;
    let (plans, reduced, kept) = build_exclusive_folds(&records, &target.task, &cfg.bias.folds)?;
    let report = run_bias_experiment(
        &records,
        &plans,
        &reduced,
        &kept,
        &cfg.bias.probe,
        cfg.bias.fnr_threshold,
    )?;
    std::fs::write(cfg.output_dir.join("bias_report.csv"), report.to_csv())?;
    let summary = BiasSummary {
        significant_classes: report.significant_classes(),
        fnr: report.fnr.clone(),
    };
    write_json(&cfg.output_dir.join("bias_summary.json"), &summary)?;
    println!(
        "bias: task {}, {} folds, significant classes: {:?}",
        target.task.task_id,
        plans.len(),
        summary.significant_classes
    );
    Ok(())
}

/// The four ablation conditions, in table order: which branch is evaluated
/// and whether the projector / consistency loss are active during pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AblationRow {
    pub label: &'static str,
    pub source: EmbeddingSource,
    pub use_projector: bool,
    pub use_consistency: bool,
}

pub const ABLATION_PLAN: [AblationRow; 4] = [
    AblationRow {
        label: "teacher_noproj_nocons",
        source: EmbeddingSource::Teacher,
        use_projector: false,
        use_consistency: false,
    },
    AblationRow {
        label: "teacher_noproj_cons",
        source: EmbeddingSource::Teacher,
        use_projector: false,
        use_consistency: true,
    },
    AblationRow {
        label: "student_proj_cons",
        source: EmbeddingSource::Student,
        use_projector: true,
        use_consistency: true,
    },
    AblationRow {
        label: "teacher_proj_cons",
        source: EmbeddingSource::Teacher,
        use_projector: true,
        use_consistency: true,
    },
];

/// Pretrain under one ablation condition and probe every task, returning one
/// trial set per task, keyed by task id.
fn run_ablation_condition(
    suite: &[DatasetManifest],
    enc: &EncoderConfig,
    proj: &ProjectorConfig,
    pretrain: &PretrainConfig,
    probe: &ProbeConfig,
    stage: EmbeddingStage,
    n_trials: usize,
    row: &AblationRow,
) -> Result<BTreeMap<usize, Vec<f64>>, CliError> {
    let tasks: Vec<_> = suite.iter().map(|m| m.task.clone()).collect();
    let mut pcfg = pretrain.clone();
    pcfg.use_projector = row.use_projector;
    pcfg.use_consistency = row.use_consistency;
    pcfg.checkpoint_every = 0;
    let mut pair = build_model(enc, proj, &tasks, pcfg.seed)?;
    match pcfg.mode {
        PretrainMode::Cyclic => {
            run_cyclic_with(&mut pair, suite, &pcfg, |_, _, _| {})?;
        }
        PretrainMode::Concurrent => {
            let (trained, _) = run_concurrent(pair, suite, &pcfg)?;
            pair = trained;
        }
    }
    let mut out = BTreeMap::new();
    for m in suite {
        let records = export_embeddings(&pair, m, row.source, stage)?;
        let (train, test) = split_embeddings(&records);
        let trials = probe_trials(&train, &test, &m.task, probe, n_trials, probe.budget)?;
        out.insert(m.task.task_id, trials.iter().map(|t| t.aggregate).collect());
    }
    Ok(out)
}

/// Per-task standings for the four ablation conditions, plus the raw trial
/// samples (indexed like [`ABLATION_PLAN`]) they were computed from.
#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub per_task: BTreeMap<usize, Vec<ConditionStanding>>,
    pub samples: Vec<BTreeMap<usize, Vec<f64>>>,
}

/// Run the whole four-condition ablation: one pretraining run per condition,
/// the identical probe protocol on every task, and a best-vs-others
/// comparison per task.
pub fn run_ablation_table(
    suite: &[DatasetManifest],
    enc: &EncoderConfig,
    proj: &ProjectorConfig,
    pretrain: &PretrainConfig,
    probe_seed: u64,
    n_trials: usize,
) -> Result<AblationOutcome, CliError> {
    run_ablation_table_with(
        suite,
        enc,
        proj,
        pretrain,
        &ProbeConfig::new(probe_seed),
        EmbeddingStage::Projector,
        n_trials,
    )
}

fn run_ablation_table_with(
    suite: &[DatasetManifest],
    enc: &EncoderConfig,
    proj: &ProjectorConfig,
    pretrain: &PretrainConfig,
    probe: &ProbeConfig,
    stage: EmbeddingStage,
    n_trials: usize,
) -> Result<AblationOutcome, CliError> {
    use rayon::prelude::*;
    let samples: Vec<Result<BTreeMap<usize, Vec<f64>>, CliError>> = ABLATION_PLAN
        .par_iter()
        .map(|row| run_ablation_condition(suite, enc, proj, pretrain, probe, stage, n_trials, row))
        .collect();
    let samples: Vec<BTreeMap<usize, Vec<f64>>> = samples.into_iter().collect::<Result<_, _>>()?;
    let mut per_task = BTreeMap::new();
    for m in suite {
        let conditions: Vec<TrialSet> = ABLATION_PLAN
            .iter()
            .zip(&samples)
            .map(|(row, s)| TrialSet {
                label: row.label.to_string(),
                samples: s[&m.task.task_id].clone(),
            })
            .collect();
        per_task.insert(m.task.task_id, compare_conditions(&conditions, 0.05)?);
    }
    Ok(AblationOutcome { per_task, samples })
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<(), CliError> {
    persist_resolved(cfg, "ablate")?;
    let suite = load_suite(&cfg.output_dir)?;
    let outcome = run_ablation_table_with(
        &suite,
        &cfg.model.encoder,
        &cfg.model.projector,
        &cfg.pretrain,
        &cfg.eval.probe,
        cfg.eval.stage,
        cfg.eval.n_trials,
    )?;
    let mut csv = String::from(
        "task_id,condition,source,use_projector,use_consistency,n_trials,mean,std,standing,p_vs_best\n",
    );
    for (task_id, table) in &outcome.per_task {
        for (row, standing) in ABLATION_PLAN.iter().zip(table) {
            csv.push_str(&format!(
                "{},{},{:?},{},{},{},{},{},{:?},{}\n",
                task_id,
                row.label,
                row.source,
                row.use_projector,
                row.use_consistency,
                cfg.eval.n_trials,
                standing.mean,
                standing.std,
                standing.standing,
                standing.p_vs_best
            ));
        }
    }
    std::fs::write(cfg.output_dir.join(ABLATION_CSV), csv)?;
    write_json(&cfg.output_dir.join("ablation.json"), &outcome.per_task)?;
    println!(
        "ablate: {} conditions x {} tasks under {}",
        ABLATION_PLAN.len(),
        suite.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

pub fn cmd_report(cfg: &RunConfig) -> Result<(), CliError> {
    persist_resolved(cfg, "report")?;
    let mut sets = Vec::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&cfg.output_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".trials.json"))
        })
        .collect();
    paths.sort();
    for p in &paths {
        let text = std::fs::read_to_string(p)?;
        let set: TrialSet =
            serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{p:?}: {e}")))?;
        sets.push(set);
    }
    if sets.is_empty() {
        return Err(CliError::Missing(format!(
            "no *.trials.json trial sets under {} (run probe or finetune first)",
            cfg.output_dir.display()
        )));
    }
    let table = compare_conditions(&sets, 0.05)?;
    let mut csv = String::from("condition,mean,std,standing,p_vs_best\n");
    for s in &table {
        csv.push_str(&format!(
            "{},{},{},{:?},{}\n",
            s.label, s.mean, s.std, s.standing, s.p_vs_best
        ));
    }
    std::fs::write(cfg.output_dir.join(SIGNIFICANCE_CSV), csv)?;
    write_json(&cfg.output_dir.join("significance.json"), &table)?;
    println!("report: {} conditions compared under {}", table.len(), cfg.output_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the run seed (reseeds every section deterministically).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset suite and manifest index.
    GenData(CommonArgs),
    /// Run cyclic or concurrent pretraining; writes checkpoints and round log.
    Pretrain(CommonArgs),
    /// Export frozen embeddings for every task from the checkpoint.
    Export(CommonArgs),
    /// Linear-probe the target task's embeddings over seeded trials.
    Probe(CommonArgs),
    /// Fine-tune the full model on the target task over seeded trials.
    Finetune(CommonArgs),
    /// Subgroup-exclusive fold audit with per-class significance tests.
    Bias(CommonArgs),
    /// Run the four-condition ablation end to end.
    Ablate(CommonArgs),
    /// Merge trial sets in the output directory into a significance table.
    Report(CommonArgs),
}

#[derive(Debug, Parser)]
#[command(name = "ark", version, about = "Student-teacher multi-task pretraining and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Worker-thread cap from ARK_THREADS; 0 means fully single-threaded
/// deterministic mode, unset leaves the default pool size.
fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var("ARK_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| CliError::Config(format!("ARK_THREADS must be an integer, got {v:?}")))?;
            Ok(Some(if n == 0 { 1 } else { n }))
        }
        Err(_) => Ok(None),
    }
}

fn dispatch(cmd: &Command) -> Result<(), CliError> {
    let (name, args) = match cmd {
        Command::GenData(a) => ("gen-data", a),
        Command::Pretrain(a) => ("pretrain", a),
        Command::Export(a) => ("export", a),
        Command::Probe(a) => ("probe", a),
        Command::Finetune(a) => ("finetune", a),
        Command::Bias(a) => ("bias", a),
        Command::Ablate(a) => ("ablate", a),
        Command::Report(a) => ("report", a),
    };
    let cfg = load_config(&args.config, args.seed, args.output_dir.as_deref())?;
    let run = || match name {
        "gen-data" => cmd_gen_data(&cfg),
        "pretrain" => cmd_pretrain(&cfg),
        "export" => cmd_export(&cfg),
        "probe" => cmd_probe(&cfg),
        "finetune" => cmd_finetune(&cfg),
        "bias" => cmd_bias(&cfg),
        "ablate" => cmd_ablate(&cfg),
        "report" => cmd_report(&cfg),
        _ => unreachable!(),
    };
    match thread_cap()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Other(e.to_string()))?
            .install(run),
        None => run(),
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // Help/version requests are successes; usage mistakes are config
            // errors under the exit-code contract.
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_json(out: &Path) -> String {
        format!(
            r#"{{
  "seed": 7,
  "output_dir": {out:?},
  "data": {{ "n_tasks": 2, "sizes": [160], "image_size": 16, "vocab_overlap": 0.34,
             "subgroup_skew": 0.0, "seed": 11 }},
  "model": {{
    "encoder": {{ "kind": "mlp", "hidden": [16], "input_shape": [1, 16, 16], "feature_dim": 8 }},
    "projector": {{ "embed_dim": 6 }}
  }},
  "pretrain": {{ "mode": "cyclic", "rounds": 1, "lr0": 0.3, "momentum": 0.9,
                "batch_size": 16, "consistency_weight": 1.0, "seed": 21 }},
  "eval": {{ "probe": {{ "seed": 31, "epochs": 20 }},
            "finetune": {{ "epochs": 1, "lr0": 0.05, "batch_size": 16, "seed": 41 }},
            "n_trials": 2, "train_fractions": [0.5, 1.0] }},
  "bias": {{ "folds": {{ "n_folds_per_subgroup": 2, "seed": 51 }},
            "probe": {{ "seed": 61, "epochs": 10 }} }}
}}"#,
            out = out.display().to_string()
        )
    }

    fn write_config(dir: &Path) -> PathBuf {
        let out = dir.join("out");
        let path = dir.join("config.json");
        std::fs::write(&path, config_json(&out)).unwrap();
        path
    }

    fn loaded(dir: &Path) -> RunConfig {
        load_config(&write_config(dir), None, None).unwrap()
    }

    #[test]
    fn unknown_field_is_config_error_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let text = config_json(dir.path()).replace(r#""rounds": 1"#, r#""rounds": 1, "bogus": 2"#);
        std::fs::write(&path, text).unwrap();
        match load_config(&path, None, None) {
            Err(CliError::Config(msg)) => {
                assert!(msg.contains("pretrain"), "{msg}");
                assert!(msg.contains("bogus"), "{msg}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn seed_override_reseeds_all_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path());
        let a = load_config(&path, Some(99), None).unwrap();
        let b = load_config(&path, Some(99), None).unwrap();
        assert_eq!(a.seed, 99);
        assert_eq!(a.data.seed, b.data.seed);
        assert_ne!(a.data.seed, 11);
        assert_ne!(a.pretrain.seed, a.data.seed);
    }

    #[test]
    fn output_dir_override_applies() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path());
        let other = dir.path().join("elsewhere");
        let cfg = load_config(&path, None, Some(&other)).unwrap();
        assert_eq!(cfg.output_dir, other);
    }

    #[test]
    fn invalid_section_value_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let text = config_json(dir.path()).replace(r#""n_tasks": 2"#, r#""n_tasks": 0"#);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_config(&path, None, None), Err(CliError::Config(_))));
    }

    #[test]
    fn gen_data_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = loaded(dir.path());
        cmd_gen_data(&cfg).unwrap();
        let first = std::fs::read(cfg.output_dir.join("task0.manifest")).unwrap();
        cmd_gen_data(&cfg).unwrap();
        let second = std::fs::read(cfg.output_dir.join("task0.manifest")).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn generated_suite_reloads_through_manifest_loader() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = loaded(dir.path());
        cmd_gen_data(&cfg).unwrap();
        let suite = load_suite(&cfg.output_dir).unwrap();
        assert_eq!(suite.len(), 2);
        for m in &suite {
            m.validate().unwrap();
        }
    }

    #[test]
    fn pretrain_without_manifests_is_missing_prerequisite() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = loaded(dir.path());
        match cmd_pretrain(&cfg) {
            Err(CliError::Missing(msg)) => assert!(msg.contains("manifest"), "{msg}"),
            other => panic!("expected missing prerequisite, got {other:?}"),
        }
    }

    #[test]
    fn probe_without_embeddings_names_the_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = loaded(dir.path());
        cmd_gen_data(&cfg).unwrap();
        match cmd_probe(&cfg) {
            Err(CliError::Missing(msg)) => {
                assert!(msg.contains("task0.embeddings.jsonl"), "{msg}")
            }
            other => panic!("expected missing prerequisite, got {other:?}"),
        }
    }

    #[test]
    fn pipeline_writes_expected_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = loaded(dir.path());
        cmd_gen_data(&cfg).unwrap();
        cmd_pretrain(&cfg).unwrap();
        cmd_export(&cfg).unwrap();
        cmd_probe(&cfg).unwrap();
        cmd_finetune(&cfg).unwrap();
        cmd_report(&cfg).unwrap();
        for name in [
            MODEL_CKPT,
            TEACHER_CKPT,
            STUDENT_CKPT,
            ROUND_LOG,
            "probe_report.csv",
            "probe.trials.json",
            DATA_EFFICIENCY,
            "finetune_report.csv",
            SIGNIFICANCE_CSV,
            "probe.resolved.json",
        ] {
            assert!(cfg.output_dir.join(name).exists(), "missing {name}");
        }
        // The significance report over {probe, finetune} compares 2 conditions.
        let csv = std::fs::read_to_string(cfg.output_dir.join(SIGNIFICANCE_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 3, "{csv}");
        // Data-efficiency curve has one row per requested fraction.
        let curve = std::fs::read_to_string(cfg.output_dir.join(DATA_EFFICIENCY)).unwrap();
        assert_eq!(curve.lines().count(), 1 + cfg.eval.train_fractions.len());
    }

    #[test]
    fn ablation_table_has_four_rows_per_task() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = loaded(dir.path());
        cmd_gen_data(&cfg).unwrap();
        cmd_ablate(&cfg).unwrap();
        let csv = std::fs::read_to_string(cfg.output_dir.join(ABLATION_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 1 + 4 * cfg.data.n_tasks);
        // Exactly one Best per task.
        for task in 0..cfg.data.n_tasks {
            let best = csv
                .lines()
                .filter(|l| l.starts_with(&format!("{task},")) && l.contains(",Best,"))
                .count();
            assert_eq!(best, 1, "task {task}");
        }
    }

    #[test]
    fn report_without_trials_is_missing_prerequisite() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = loaded(dir.path());
        std::fs::create_dir_all(&cfg.output_dir).unwrap();
        match cmd_report(&cfg) {
            Err(CliError::Missing(msg)) => assert!(msg.contains("trials.json"), "{msg}"),
            other => panic!("expected missing prerequisite, got {other:?}"),
        }
    }

    #[test]
    fn report_marks_identical_conditions_tied() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = loaded(dir.path());
        std::fs::create_dir_all(&cfg.output_dir).unwrap();
        for label in ["a", "b"] {
            let set = TrialSet {
                label: label.into(),
                samples: vec![0.7, 0.8, 0.9],
            };
            write_json(&cfg.output_dir.join(format!("{label}.trials.json")), &set).unwrap();
        }
        cmd_report(&cfg).unwrap();
        let csv = std::fs::read_to_string(cfg.output_dir.join(SIGNIFICANCE_CSV)).unwrap();
        assert!(csv.contains("a,") && csv.contains(",Best,"), "{csv}");
        assert!(csv.contains("b,") && csv.contains(",TiedWithBest,"), "{csv}");
    }

    #[test]
    fn exit_codes_follow_contract() {
        assert_eq!(CliError::Config(String::new()).exit_code(), EXIT_CONFIG);
        assert_eq!(CliError::Diverged(String::new()).exit_code(), EXIT_DIVERGED);
        assert_eq!(CliError::Missing(String::new()).exit_code(), EXIT_MISSING);
        let diverged: CliError = PretrainError::Diverged {
            round: 3,
            task_id: 1,
            detail: "loss is NaN".into(),
        }
        .into();
        assert_eq!(diverged.exit_code(), EXIT_DIVERGED);
        assert!(diverged.to_string().contains('3'));
    }
}
