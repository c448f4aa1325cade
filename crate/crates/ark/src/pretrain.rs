//! Pretraining loops: cyclic (one epoch per dataset per round, epoch-wise EMA)
//! and the concurrent alternative (equal-sample mixed batches, summed losses),
//! plus a sequential baseline that never revisits a task.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    epoch_batches, interleave_equal, sample_rng, tau1, tau2, AugmentationConfig, DataError,
    DatasetManifest, Labels, Split,
};
use crate::losses::{self, LossError, LossKind};
use crate::nn::{ModelError, ModelPair, ParamBindings};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at round {round}, task {task_id}: {detail}")]
    Diverged {
        round: usize,
        task_id: usize,
        detail: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    Cyclic,
    Concurrent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub rounds: usize,
    pub lr0: f64,
    /// EMA momentum lambda for the teacher update.
    pub momentum: f64,
    pub batch_size: usize,
    pub consistency_weight: f64,
    #[serde(default = "default_true")]
    pub use_projector: bool,
    #[serde(default = "default_true")]
    pub use_consistency: bool,
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Restart the cosine schedule at each round instead of decaying once
    /// across the whole horizon.
    #[serde(default)]
    pub per_round_restart: bool,
    #[serde(default)]
    pub augment: Option<AugmentationConfig>,
}

fn default_true() -> bool {
    true
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        if self.rounds < 1 {
            return Err(PretrainError::Config("rounds must be >= 1".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(PretrainError::Config(format!(
                "lr0 must be > 0, got {}",
                self.lr0
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(PretrainError::Config(format!(
                "momentum must be in [0, 1], got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(PretrainError::Config("batch size must be >= 1".into()));
        }
        if self.consistency_weight < 0.0 {
            return Err(PretrainError::Config(
                "consistency weight must be >= 0".into(),
            ));
        }
        Ok(())
    }

    fn aug_for(&self, manifest: &DatasetManifest) -> AugmentationConfig {
        self.augment.clone().unwrap_or_else(|| {
            let side = manifest
                .records
                .first()
                .map(|r| r.image.shape[1])
                .unwrap_or(0);
            AugmentationConfig::for_size(side)
        })
    }
}

/// Global SGD step counter against a fixed horizon.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: usize,
    pub total_steps: usize,
}

impl OptimizerState {
    pub fn new(total_steps: usize) -> Result<Self, PretrainError> {
        if total_steps == 0 {
            return Err(PretrainError::Config("total_steps must be > 0".into()));
        }
        Ok(OptimizerState {
            step: 0,
            total_steps,
        })
    }

    pub fn lr(&self, lr0: f64) -> f64 {
        cosine_lr(lr0, self.step, self.total_steps)
    }
}

/// `lr(t) = lr0 * 0.5 * (1 + cos(pi * t / total_steps))`.
pub fn cosine_lr(lr0: f64, t: usize, total_steps: usize) -> f64 {
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total_steps as f64).cos())
}

/// Plain SGD: apply `p -= lr(t) * g` for the bound parameters, then advance
/// the step counter.
pub fn sgd_step(
    state: &mut OptimizerState,
    pair: &mut ModelPair,
    tape: &Tape,
    bindings: &ParamBindings,
    lr0: f64,
) {
    let lr = state.lr(lr0);
    pair.apply_gradients(tape, bindings, lr);
    state.step += 1;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLogEntry {
    pub round: usize,
    pub task_id: usize,
    pub task_loss: f64,
    pub consistency_loss: f64,
    pub lr: f64,
    pub steps: usize,
    #[serde(skip)]
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundLog {
    pub entries: Vec<RoundLogEntry>,
}

impl RoundLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,task_id,task_loss,consistency_loss,lr,steps\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.round, e.task_id, e.task_loss, e.consistency_loss, e.lr, e.steps
            ));
        }
        out
    }
}

/// Per-batch targets in the task's native label schema.
enum Targets {
    Bce(Tensor),
    Ce(Vec<usize>),
}

/// Augmented views of a batch: `x1 = tau1(x)` (teacher input) and
/// `x2 = tau2(x1)` (student input), both flattened to `[n, c*h*w]`.
fn batch_views(
    manifest: &DatasetManifest,
    indices: &[usize],
    aug: &AugmentationConfig,
    seed: u64,
    epoch: u64,
) -> Result<(Tensor, Tensor, Targets), PretrainError> {
    let n = indices.len();
    let d = manifest.records[indices[0]].image.numel();
    let mut x1 = Vec::with_capacity(n * d);
    let mut x2 = Vec::with_capacity(n * d);
    let k = manifest.task.n_classes();
    let mut bce = Vec::new();
    let mut ce = Vec::new();
    let is_ce = manifest.task.loss_kind == LossKind::CeMulticlass;
    for &i in indices {
        let r = &manifest.records[i];
        let mut rng = sample_rng(seed, epoch, i as u64);
        let v1 = tau1(&r.image, aug, &mut rng);
        let v2 = tau2(&v1, aug, &mut rng);
        x1.extend_from_slice(&v1.values);
        x2.extend_from_slice(&v2.values);
        match (&r.labels, is_ce) {
            (Labels::Multilabel(bits), false) => {
                bce.extend(bits.iter().map(|&b| b as f64));
            }
            (Labels::Class(c), true) => ce.push(*c),
            _ => {
                return Err(PretrainError::Data(DataError::Schema(format!(
                    "label kind of record {} does not match task {}",
                    r.id, manifest.task.name
                ))))
            }
        }
    }
    let targets = if is_ce {
        Targets::Ce(ce)
    } else {
        Targets::Bce(Tensor::new(vec![n, k], bce)?)
    };
    Ok((
        Tensor::new(vec![n, d], x1)?,
        Tensor::new(vec![n, d], x2)?,
        targets,
    ))
}

/// One student training step on a prepared batch. Returns (task loss,
/// consistency loss, bindings) with the gradients left on the tape.
fn batch_loss(
    pair: &ModelPair,
    tape: &mut Tape,
    x1: &Tensor,
    x2: &Tensor,
    targets: &Targets,
    task_id: usize,
    cfg: &PretrainConfig,
) -> Result<(Tensor, f64, f64, ParamBindings), PretrainError> {
    let out = pair.forward_student(tape, x2, task_id)?;
    let task_loss = match targets {
        Targets::Bce(y) => losses::bce_with_logits(tape, &out.pred, y)?,
        Targets::Ce(classes) => losses::ce_multiclass_rows(tape, &out.pred, classes)?,
    };
    let (total, cons_val) = if cfg.use_consistency {
        let (emb_t, emb_s) = if cfg.use_projector {
            (pair.forward_teacher(tape, x1)?, out.emb_s.clone())
        } else {
            (
                pair.forward_teacher_features(tape, x1)?,
                out.features.clone(),
            )
        };
        let cons = losses::mse_consistency(tape, &emb_t, &emb_s)?;
        let total = losses::total_loss(tape, &task_loss, &cons, cfg.consistency_weight)?;
        (total, cons.values[0])
    } else {
        (task_loss.clone(), 0.0)
    };
    Ok((total, task_loss.values[0], cons_val, out.bindings))
}

fn check_finite(
    value: f64,
    round: usize,
    task_id: usize,
    what: &str,
) -> Result<(), PretrainError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(PretrainError::Diverged {
            round,
            task_id,
            detail: format!("{what} is {value}"),
        })
    }
}

fn check_heads(pair: &ModelPair, manifests: &[DatasetManifest]) -> Result<(), PretrainError> {
    if manifests.is_empty() {
        return Err(PretrainError::Config("at least one manifest required".into()));
    }
    for m in manifests {
        pair.head(m.task.task_id)?;
    }
    Ok(())
}

fn steps_per_epoch(manifest: &DatasetManifest, batch_size: usize) -> usize {
    manifest
        .split_indices(Split::Pretrain)
        .len()
        .div_ceil(batch_size)
}

/// Train the student for one epoch on one dataset's pretrain split.
fn train_task_epoch(
    pair: &mut ModelPair,
    manifest: &DatasetManifest,
    cfg: &PretrainConfig,
    opt: &mut OptimizerState,
    round: usize,
    epoch: u64,
) -> Result<RoundLogEntry, PretrainError> {
    let start = Instant::now();
    let task_id = manifest.task.task_id;
    let aug = cfg.aug_for(manifest);
    let batches = epoch_batches(manifest, Split::Pretrain, cfg.batch_size, cfg.seed, epoch)?;
    let lr_at_entry = opt.lr(cfg.lr0);
    let mut task_sum = 0.0;
    let mut cons_sum = 0.0;
    let mut steps = 0usize;
    for batch in &batches {
        let (x1, x2, targets) = batch_views(manifest, batch, &aug, cfg.seed, epoch)?;
        let mut tape = Tape::new();
        let (total, task_v, cons_v, bindings) =
            batch_loss(pair, &mut tape, &x1, &x2, &targets, task_id, cfg)?;
        check_finite(total.values[0], round, task_id, "loss")?;
        tape.backward(&total)?;
        sgd_step(opt, pair, &tape, &bindings, cfg.lr0);
        task_sum += task_v;
        cons_sum += cons_v;
        steps += 1;
    }
    Ok(RoundLogEntry {
        round,
        task_id,
        task_loss: task_sum / steps as f64,
        consistency_loss: cons_sum / steps as f64,
        lr: lr_at_entry,
        steps,
        wall_ms: start.elapsed().as_secs_f64() * 1000.0,
    })
}

/// Cyclic pretraining: each round visits every dataset in order for one epoch
/// and applies one EMA update after each task epoch. The teacher inside the
/// returned pair is the transferable model.
pub fn run_cyclic(
    mut pair: ModelPair,
    manifests: &[DatasetManifest],
    cfg: &PretrainConfig,
) -> Result<(ModelPair, RoundLog), PretrainError> {
    run_cyclic_with(&mut pair, manifests, cfg, |_, _, _| {}).map(|log| (pair, log))
}

/// As `run_cyclic`, with a callback fired after every task epoch (used for
/// checkpointing and snapshotting); it receives the round and task index.
pub fn run_cyclic_with(
    pair: &mut ModelPair,
    manifests: &[DatasetManifest],
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(usize, usize, &ModelPair),
) -> Result<RoundLog, PretrainError> {
    cfg.validate()?;
    check_heads(pair, manifests)?;
    let per_round: usize = manifests
        .iter()
        .map(|m| steps_per_epoch(m, cfg.batch_size))
        .sum();
    let horizon = if cfg.per_round_restart {
        per_round
    } else {
        per_round * cfg.rounds
    };
    let mut opt = OptimizerState::new(horizon)?;
    let mut log = RoundLog::default();
    let n_tasks = manifests.len() as u64;
    for round in 0..cfg.rounds {
        if cfg.per_round_restart {
            opt.step = 0;
        }
        for (ti, m) in manifests.iter().enumerate() {
            let epoch = round as u64 * n_tasks + ti as u64;
            let entry = train_task_epoch(pair, m, cfg, &mut opt, round, epoch)?;
            log.entries.push(entry);
            pair.ema_update(cfg.momentum)?;
            on_epoch(round, ti, pair);
        }
    }
    Ok(log)
}

/// As `run_cyclic`, additionally capturing a model snapshot right after each
/// task's last training visit (the final round). Feeds the per-task
/// forgetting metric on equal footing with `sequential_baseline`.
pub fn run_cyclic_snapshots(
    mut pair: ModelPair,
    manifests: &[DatasetManifest],
    cfg: &PretrainConfig,
) -> Result<SnapshotRun, PretrainError> {
    let last = cfg.rounds.saturating_sub(1);
    let mut snapshots = Vec::with_capacity(manifests.len());
    let log = run_cyclic_with(&mut pair, manifests, cfg, |round, _, p| {
        if round == last {
            snapshots.push(p.clone());
        }
    })?;
    Ok(SnapshotRun {
        pair,
        log,
        snapshots,
    })
}

/// Concurrent pretraining: every step draws an equal-sample mixed batch, sums
/// the per-task losses ("loss summation over all task heads"), and applies EMA
/// once per pass over the largest dataset. With a single task this reduces
/// exactly to cyclic stepping.
pub fn run_concurrent(
    mut pair: ModelPair,
    manifests: &[DatasetManifest],
    cfg: &PretrainConfig,
) -> Result<(ModelPair, RoundLog), PretrainError> {
    cfg.validate()?;
    check_heads(&pair, manifests)?;
    if manifests.len() == 1 {
        let log = run_cyclic_with(&mut pair, manifests, cfg, |_, _, _| {})?;
        return Ok((pair, log));
    }
    if cfg.batch_size % manifests.len() != 0 {
        return Err(PretrainError::Config(format!(
            "batch size {} not divisible by {} tasks",
            cfg.batch_size,
            manifests.len()
        )));
    }
    let per = cfg.batch_size / manifests.len();
    let largest = manifests
        .iter()
        .map(|m| m.split_indices(Split::Pretrain).len())
        .max()
        .unwrap();
    let steps_per_pass = largest.div_ceil(per);
    let horizon = if cfg.per_round_restart {
        steps_per_pass
    } else {
        steps_per_pass * cfg.rounds
    };
    let mut opt = OptimizerState::new(horizon)?;
    let mut log = RoundLog::default();
    let augs: Vec<AugmentationConfig> = manifests.iter().map(|m| cfg.aug_for(m)).collect();
    for round in 0..cfg.rounds {
        if cfg.per_round_restart {
            opt.step = 0;
        }
        let start = Instant::now();
        let lr_at_entry = opt.lr(cfg.lr0);
        let batches = interleave_equal(manifests, cfg.batch_size, cfg.seed, round as u64)?;
        let mut task_sums = vec![0.0; manifests.len()];
        let mut cons_sums = vec![0.0; manifests.len()];
        let mut steps = 0usize;
        for mixed in &batches {
            let mut tape = Tape::new();
            let lr = opt.lr(cfg.lr0);
            let mut all_bindings = Vec::new();
            // "Loss summation over all task heads": one scalar per step.
            let mut grand_total: Option<Tensor> = None;
            for (ti, m) in manifests.iter().enumerate() {
                let indices: Vec<usize> = mixed
                    .iter()
                    .filter(|(t, _)| *t == ti)
                    .map(|(_, i)| *i)
                    .collect();
                if indices.is_empty() {
                    continue;
                }
                let (x1, x2, targets) =
                    batch_views(m, &indices, &augs[ti], cfg.seed, round as u64)?;
                let (total, task_v, cons_v, bindings) =
                    batch_loss(&pair, &mut tape, &x1, &x2, &targets, m.task.task_id, cfg)?;
                check_finite(total.values[0], round, m.task.task_id, "loss")?;
                grand_total = Some(match grand_total {
                    Some(acc) => tape.add(&acc, &total)?,
                    None => total,
                });
                all_bindings.push(bindings);
                task_sums[ti] += task_v;
                cons_sums[ti] += cons_v;
            }
            let grand_total =
                grand_total.ok_or_else(|| PretrainError::Config("empty mixed batch".into()))?;
            tape.backward(&grand_total)?;
            for b in &all_bindings {
                pair.apply_gradients(&tape, b, lr);
            }
            opt.step += 1;
            steps += 1;
        }
        pair.ema_update(cfg.momentum)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1000.0;
        for (ti, m) in manifests.iter().enumerate() {
            log.entries.push(RoundLogEntry {
                round,
                task_id: m.task.task_id,
                task_loss: task_sums[ti] / steps as f64,
                consistency_loss: cons_sums[ti] / steps as f64,
                lr: lr_at_entry,
                steps,
                wall_ms,
            });
        }
    }
    Ok((pair, log))
}

/// A finished training run plus a model snapshot taken right after each
/// task's last training visit (for the forgetting metric).
pub struct SnapshotRun {
    pub pair: ModelPair,
    pub log: RoundLog,
    /// `snapshots[k]` is the model just after task `k` was last trained.
    pub snapshots: Vec<ModelPair>,
}

/// Train each task once for `epochs_per_task` epochs, in order, never
/// returning — the catastrophic-forgetting baseline.
///
/// With `per_round_restart` the cosine schedule restarts at full `lr0` for
/// every task, so late tasks train as aggressively as early ones; otherwise
/// one schedule decays across the whole horizon.
pub fn sequential_baseline(
    mut pair: ModelPair,
    manifests: &[DatasetManifest],
    epochs_per_task: usize,
    cfg: &PretrainConfig,
) -> Result<SnapshotRun, PretrainError> {
    cfg.validate()?;
    check_heads(&pair, manifests)?;
    if epochs_per_task < 1 {
        return Err(PretrainError::Config("epochs_per_task must be >= 1".into()));
    }
    let horizon: usize = manifests
        .iter()
        .map(|m| steps_per_epoch(m, cfg.batch_size) * epochs_per_task)
        .sum();
    let mut opt = OptimizerState::new(horizon)?;
    let mut log = RoundLog::default();
    let mut snapshots = Vec::new();
    for (ti, m) in manifests.iter().enumerate() {
        if cfg.per_round_restart {
            opt.step = 0;
            opt.total_steps = steps_per_epoch(m, cfg.batch_size) * epochs_per_task;
        }
        for e in 0..epochs_per_task {
            let epoch = (ti * epochs_per_task + e) as u64;
            let entry = train_task_epoch(&mut pair, m, cfg, &mut opt, e, epoch)?;
            log.entries.push(entry);
            pair.ema_update(cfg.momentum)?;
        }
        snapshots.push(pair.clone());
    }
    Ok(SnapshotRun {
        pair,
        log,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_suite, SyntheticConfig};
    use crate::nn::{build_model, EncoderConfig, EncoderKind, ProjectorConfig};

    fn tiny_suite(n_tasks: usize, per_task: usize, seed: u64) -> Vec<DatasetManifest> {
        generate_synthetic_suite(&SyntheticConfig {
            n_tasks,
            sizes: vec![per_task; n_tasks],
            image_size: 16,
            vocab_overlap: 0.5,
            subgroup_skew: 0.0,
            noise: 0.0,
            seed,
        })
        .unwrap()
    }

    fn tiny_model(manifests: &[DatasetManifest], seed: u64) -> ModelPair {
        let enc = EncoderConfig {
            kind: EncoderKind::Mlp,
            hidden: vec![12],
            input_shape: (1, 16, 16),
            feature_dim: 8,
        };
        let tasks: Vec<_> = manifests.iter().map(|m| m.task.clone()).collect();
        build_model(&enc, &ProjectorConfig::affine(4), &tasks, seed).unwrap()
    }

    fn tiny_cfg(rounds: usize) -> PretrainConfig {
        PretrainConfig {
            mode: PretrainMode::Cyclic,
            rounds,
            lr0: 0.1,
            momentum: 0.9,
            batch_size: 8,
            consistency_weight: 1.0,
            use_projector: true,
            use_consistency: true,
            seed: 7,
            checkpoint_every: 0,
            per_round_restart: false,
            augment: None,
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.3, 0, 100), 0.3);
        assert!((cosine_lr(0.3, 50, 100) - 0.15).abs() < 1e-15);
        assert!(cosine_lr(0.3, 100, 100).abs() < 1e-16);
        assert!(matches!(
            OptimizerState::new(0),
            Err(PretrainError::Config(_))
        ));
    }

    #[test]
    fn ema_cadence_rounds_times_tasks() {
        let suite = tiny_suite(3, 40, 1);
        let pair = tiny_model(&suite, 2);
        let (pair, log) = run_cyclic(pair, &suite, &tiny_cfg(1)).unwrap();
        assert_eq!(pair.ema_updates, 3);
        assert_eq!(log.entries.len(), 3);
        let (pair, log) = run_cyclic(tiny_model(&suite, 2), &suite, &tiny_cfg(2)).unwrap();
        assert_eq!(pair.ema_updates, 6);
        assert_eq!(log.entries.len(), 6);
        // One entry per task per round, in order.
        for (i, e) in log.entries.iter().enumerate() {
            assert_eq!(e.round, i / 3);
        }
    }

    #[test]
    fn lambda_one_freezes_teacher() {
        let suite = tiny_suite(2, 24, 3);
        let pair = tiny_model(&suite, 4);
        let before: Vec<_> = pair
            .named_tensors()
            .into_iter()
            .filter(|(n, _)| n.starts_with("teacher."))
            .collect();
        let mut cfg = tiny_cfg(2);
        cfg.momentum = 1.0;
        let (pair, _) = run_cyclic(pair, &suite, &cfg).unwrap();
        let after: Vec<_> = pair
            .named_tensors()
            .into_iter()
            .filter(|(n, _)| n.starts_with("teacher."))
            .collect();
        assert_eq!(before, after);
        // Student must still have moved.
        assert!(pair.max_branch_divergence() > 0.0);
    }

    #[test]
    fn round_log_deterministic_across_runs() {
        let suite = tiny_suite(2, 24, 5);
        let cfg = tiny_cfg(2);
        let (_, log_a) = run_cyclic(tiny_model(&suite, 6), &suite, &cfg).unwrap();
        let (_, log_b) = run_cyclic(tiny_model(&suite, 6), &suite, &cfg).unwrap();
        assert_eq!(log_a.to_csv(), log_b.to_csv());
    }

    #[test]
    fn single_task_concurrent_equals_cyclic() {
        let suite = tiny_suite(1, 24, 8);
        let cfg = tiny_cfg(2);
        let (pc, log_c) = run_cyclic(tiny_model(&suite, 9), &suite, &cfg).unwrap();
        let (pk, log_k) = run_concurrent(tiny_model(&suite, 9), &suite, &cfg).unwrap();
        assert_eq!(log_c.to_csv(), log_k.to_csv());
        assert_eq!(pc.named_tensors(), pk.named_tensors());
    }

    #[test]
    fn single_task_sequential_equals_cyclic() {
        let suite = tiny_suite(1, 24, 8);
        let cfg = tiny_cfg(3);
        let (pc, log_c) = run_cyclic(tiny_model(&suite, 9), &suite, &cfg).unwrap();
        let out = sequential_baseline(tiny_model(&suite, 9), &suite, 3, &cfg).unwrap();
        assert_eq!(pc.named_tensors(), out.pair.named_tensors());
        // Same losses; sequential logs epoch index as "round".
        let c: Vec<_> = log_c.entries.iter().map(|e| e.task_loss).collect();
        let s: Vec<_> = out.log.entries.iter().map(|e| e.task_loss).collect();
        assert_eq!(c, s);
        assert_eq!(out.pair.ema_updates, 3);
        assert_eq!(out.snapshots.len(), 1);
    }

    #[test]
    fn sequential_ema_count_is_tasks_times_epochs() {
        let suite = tiny_suite(2, 24, 11);
        let out = sequential_baseline(tiny_model(&suite, 1), &suite, 2, &tiny_cfg(1)).unwrap();
        assert_eq!(out.pair.ema_updates, 4);
        assert_eq!(out.snapshots.len(), 2);
    }

    #[test]
    fn concurrent_runs_and_logs_per_task() {
        let suite = tiny_suite(2, 24, 13);
        let mut cfg = tiny_cfg(2);
        cfg.batch_size = 8; // divisible by 2 tasks
        let (pair, log) = run_concurrent(tiny_model(&suite, 3), &suite, &cfg).unwrap();
        assert_eq!(pair.ema_updates, 2);
        assert_eq!(log.entries.len(), 4);
        for e in &log.entries {
            assert!(e.task_loss.is_finite());
        }
    }

    #[test]
    fn concurrent_rejects_indivisible_batch() {
        let suite = tiny_suite(3, 24, 13);
        let mut cfg = tiny_cfg(1);
        cfg.batch_size = 8;
        assert!(matches!(
            run_concurrent(tiny_model(&suite, 3), &suite, &cfg),
            Err(PretrainError::Config(_))
        ));
    }

    #[test]
    fn missing_head_is_registry_error() {
        let suite = tiny_suite(2, 24, 15);
        let pair = tiny_model(&suite[..1], 3);
        assert!(matches!(
            run_cyclic(pair, &suite, &tiny_cfg(1)),
            Err(PretrainError::Model(ModelError::Registry(_)))
        ));
    }

    #[test]
    fn consistency_off_keeps_teacher_pure_ema_shadow() {
        let suite = tiny_suite(2, 24, 17);
        let mut cfg = tiny_cfg(1);
        cfg.use_consistency = false;
        let (_, log) = run_cyclic(tiny_model(&suite, 3), &suite, &cfg).unwrap();
        for e in &log.entries {
            assert_eq!(e.consistency_loss, 0.0);
        }
    }

    #[test]
    fn losses_finite_and_decreasing_trend() {
        let suite = tiny_suite(2, 48, 19);
        let cfg = tiny_cfg(6);
        let (_, log) = run_cyclic(tiny_model(&suite, 3), &suite, &cfg).unwrap();
        for e in &log.entries {
            assert!(e.task_loss.is_finite() && e.consistency_loss.is_finite());
        }
        let first: f64 = log.entries[..2].iter().map(|e| e.task_loss).sum();
        let last: f64 = log.entries[log.entries.len() - 2..]
            .iter()
            .map(|e| e.task_loss)
            .sum();
        assert!(last < first, "task loss did not improve: {first} -> {last}");
    }
}
