//! Evaluation battery: embedding export, linear probing on frozen embeddings
//! (full, partial, and few-shot), fine-tuning transfer, and the classification
//! metrics (AUC, accuracy, FNR).

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, DatasetManifest, Labels, Split, TaskSpec};
use crate::losses::{self, LossError, LossKind};
use crate::nn::{
    build_model, EncoderConfig, ModelError, ModelPair, ParamBindings, ProjectorConfig,
};
use crate::pretrain::{cosine_lr, PretrainError};
use crate::tensor::{Tape, Tensor, TensorError};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingStage {
    Projector,
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub embedding: Vec<f64>,
    pub labels: Labels,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subgroup: Option<String>,
    pub split: Split,
}

/// How much of the training data a probe sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainBudget {
    Fraction(f64),
    KShot(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_epochs")]
    pub epochs: usize,
    #[serde(default = "default_probe_lr")]
    pub lr: f64,
    #[serde(default = "default_probe_batch")]
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub budget: Option<TrainBudget>,
}

fn default_probe_epochs() -> usize {
    100
}
fn default_probe_lr() -> f64 {
    0.1
}
fn default_probe_batch() -> usize {
    32
}

impl ProbeConfig {
    pub fn new(seed: u64) -> Self {
        ProbeConfig {
            epochs: default_probe_epochs(),
            lr: default_probe_lr(),
            batch_size: default_probe_batch(),
            seed,
            budget: None,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr <= 0.0 {
            return Err(EvalError::Config(
                "probe epochs, batch size and lr must be positive".into(),
            ));
        }
        match self.budget {
            Some(TrainBudget::Fraction(f)) if !(f > 0.0 && f <= 1.0) => Err(EvalError::Config(
                format!("train fraction must be in (0, 1], got {f}"),
            )),
            Some(TrainBudget::KShot(0)) => {
                Err(EvalError::Config("k-shot count must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    /// Per-class values; `None` when undefined (e.g. class absent from train).
    pub per_class: Vec<(String, Option<f64>)>,
    pub aggregate: f64,
    pub n_trials: usize,
    pub mean: f64,
    pub std: f64,
}

impl MetricReport {
    pub fn single(metric: &str, per_class: Vec<(String, Option<f64>)>, aggregate: f64) -> Self {
        MetricReport {
            metric: metric.to_string(),
            per_class,
            aggregate,
            n_trials: 1,
            mean: aggregate,
            std: 0.0,
        }
    }

    /// Merge per-trial reports into one: per-class values averaged over the
    /// trials where they were defined; mean/std over trial aggregates with the
    /// n-1 denominator.
    pub fn aggregate_trials(trials: &[MetricReport]) -> Result<MetricReport, EvalError> {
        let first = trials
            .first()
            .ok_or_else(|| EvalError::Data("no trials to aggregate".into()))?;
        if trials.iter().any(|t| t.metric != first.metric) {
            return Err(EvalError::Data("mixed metrics in trial set".into()));
        }
        let aggs: Vec<f64> = trials.iter().map(|t| t.aggregate).collect();
        let n = aggs.len();
        let mean = aggs.iter().sum::<f64>() / n as f64;
        let std = if n >= 2 {
            (aggs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut per_class = Vec::new();
        for (ci, (name, _)) in first.per_class.iter().enumerate() {
            let vals: Vec<f64> = trials
                .iter()
                .filter_map(|t| t.per_class[ci].1)
                .collect();
            let v = if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            };
            per_class.push((name.clone(), v));
        }
        Ok(MetricReport {
            metric: first.metric.clone(),
            per_class,
            aggregate: mean,
            n_trials: n,
            mean,
            std,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,class,value,n_trials,mean,std\n");
        for (name, v) in &self.per_class {
            let v = v.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.metric, name, v, self.n_trials, self.mean, self.std
            ));
        }
        out.push_str(&format!(
            "{},__aggregate__,{},{},{},{}\n",
            self.metric, self.aggregate, self.n_trials, self.mean, self.std
        ));
        out
    }
}

// ---------------------------------------------------------------------------
// Embedding export
// ---------------------------------------------------------------------------

/// One embedding per sample, computed on unaugmented images, deterministic.
pub fn export_embeddings(
    pair: &ModelPair,
    manifest: &DatasetManifest,
    source: EmbeddingSource,
    stage: EmbeddingStage,
) -> Result<Vec<EmbeddingRecord>, EvalError> {
    let branch = match source {
        EmbeddingSource::Teacher => &pair.teacher,
        EmbeddingSource::Student => &pair.student,
    };
    let mut out = Vec::with_capacity(manifest.records.len());
    let batch = 64;
    let records = &manifest.records;
    let mut i = 0;
    while i < records.len() {
        let end = (i + batch).min(records.len());
        let d = records[i].image.numel();
        let mut rows = Vec::with_capacity((end - i) * d);
        for r in &records[i..end] {
            rows.extend_from_slice(&r.image.values);
        }
        let x = Tensor::new(vec![end - i, d], rows)?;
        let mut tape = Tape::new();
        let mut bind = ParamBindings::default();
        let features = branch.encoder.forward(&mut tape, &x, &mut bind)?;
        let emb = match stage {
            EmbeddingStage::Projector => branch.projector.forward(&mut tape, &features, &mut bind)?,
            EmbeddingStage::Encoder => features,
        };
        let dim = emb.shape[1];
        for (j, r) in records[i..end].iter().enumerate() {
            let v = emb.values[j * dim..(j + 1) * dim].to_vec();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EvalError::Data(format!(
                    "non-finite embedding for sample {}",
                    r.id
                )));
            }
            out.push(EmbeddingRecord {
                id: r.id.clone(),
                embedding: v,
                labels: r.labels.clone(),
                subgroup: r.subgroup.clone(),
                split: r.split,
            });
        }
        i = end;
    }
    Ok(out)
}

pub fn save_embeddings(records: &[EmbeddingRecord], path: &Path) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| EvalError::Data(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>, EvalError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    let mut dim = None;
    for (ln, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EmbeddingRecord = serde_json::from_str(&line)
            .map_err(|e| EvalError::Data(format!("line {}: {e}", ln + 1)))?;
        match dim {
            None => dim = Some(r.embedding.len()),
            Some(d) if d != r.embedding.len() => {
                return Err(EvalError::Data(format!(
                    "line {}: embedding length {} != {}",
                    ln + 1,
                    r.embedding.len(),
                    d
                )))
            }
            _ => {}
        }
        out.push(r);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// AUC by the Mann-Whitney rank formulation with midranks for ties:
/// `(R_pos - P(P+1)/2) / (P * N)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Data(format!(
            "scores ({}) and labels ({}) differ in length",
            scores.len(),
            labels.len()
        )));
    }
    let p = labels.iter().filter(|&&l| l == 1).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(EvalError::UndefinedMetric(
            "AUC needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Midranks: tied scores all receive the mean of their rank range.
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let r_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    Ok((r_pos - (p * (p + 1)) as f64 / 2.0) / (p * n) as f64)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::Data("length mismatch".into()));
    }
    if pred.is_empty() {
        return Err(EvalError::UndefinedMetric("accuracy of empty input".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// False-negative rate FN/(FN+TP); predicted positive iff
/// `sigmoid(score) >= threshold`.
pub fn fnr(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Data("length mismatch".into()));
    }
    let mut fn_ = 0usize;
    let mut tp = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        if l == 1 {
            if sigmoid(s) >= threshold {
                tp += 1;
            } else {
                fn_ += 1;
            }
        }
    }
    if fn_ + tp == 0 {
        return Err(EvalError::UndefinedMetric("FNR with no positives".into()));
    }
    Ok(fn_ as f64 / (fn_ + tp) as f64)
}

// ---------------------------------------------------------------------------
// Subsampling
// ---------------------------------------------------------------------------

/// Shrink a training set to the configured budget: stratified by class for
/// fractions, exactly k positives per class for k-shot. Seeded and
/// deterministic; `budget=None` or fraction 1.0 is the identity.
pub fn subsample_train(
    records: &[EmbeddingRecord],
    task: &TaskSpec,
    cfg: &ProbeConfig,
) -> Result<Vec<EmbeddingRecord>, EvalError> {
    cfg.validate()?;
    let labels: Vec<Labels> = records.iter().map(|r| r.labels.clone()).collect();
    let picked = subsample_indices(&labels, task, cfg.budget, cfg.seed)?;
    Ok(picked.into_iter().map(|i| records[i].clone()).collect())
}

/// Index-level core of `subsample_train`, shared with fine-tuning.
pub fn subsample_indices(
    labels: &[Labels],
    task: &TaskSpec,
    budget: Option<TrainBudget>,
    seed: u64,
) -> Result<Vec<usize>, EvalError> {
    let records = labels;
    let budget = match budget {
        None | Some(TrainBudget::Fraction(1.0)) => return Ok((0..records.len()).collect()),
        Some(b) => b,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5b5a3);
    match budget {
        TrainBudget::Fraction(frac) => {
            // Stratify by full label pattern so class prevalence is preserved.
            // Largest-remainder allocation hits the overall target count
            // exactly (at least one record), so tiny fractions of small sets
            // never collapse to an empty training set.
            let mut strata: HashMap<String, Vec<usize>> = HashMap::new();
            for (i, r) in records.iter().enumerate() {
                let key = match r {
                    Labels::Multilabel(bits) => format!("{bits:?}"),
                    Labels::Class(c) => c.to_string(),
                };
                strata.entry(key).or_default().push(i);
            }
            let mut keys: Vec<_> = strata.keys().cloned().collect();
            keys.sort();
            let target = ((frac * records.len() as f64).round() as usize).max(1);
            let mut quota: Vec<usize> = keys
                .iter()
                .map(|k| (frac * strata[k].len() as f64).floor() as usize)
                .collect();
            let mut order: Vec<usize> = (0..keys.len()).collect();
            order.sort_by(|&a, &b| {
                let rem = |i: usize| {
                    let len = strata[&keys[i]].len() as f64;
                    frac * len - (frac * len).floor()
                };
                rem(b).partial_cmp(&rem(a)).unwrap().then(a.cmp(&b))
            });
            let mut short = target.saturating_sub(quota.iter().sum());
            for &i in order.iter().cycle() {
                if short == 0 {
                    break;
                }
                if quota[i] < strata[&keys[i]].len() {
                    quota[i] += 1;
                    short -= 1;
                }
            }
            let mut picked = Vec::new();
            for (key, take) in keys.iter().zip(quota) {
                let mut idx = strata.remove(key).unwrap();
                idx.shuffle(&mut rng);
                picked.extend(idx.into_iter().take(take));
            }
            picked.sort();
            Ok(picked)
        }
        TrainBudget::KShot(k) => {
            let mut chosen: Vec<usize> = Vec::new();
            for (ci, class) in task.class_names.iter().enumerate() {
                let mut pos: Vec<usize> = records
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| match r {
                        Labels::Multilabel(bits) => bits.get(ci) == Some(&1),
                        Labels::Class(c) => *c == ci,
                    })
                    .map(|(i, _)| i)
                    .collect();
                if pos.len() < k {
                    return Err(EvalError::Data(format!(
                        "class {class} has only {} positives, k-shot needs {k}",
                        pos.len()
                    )));
                }
                pos.shuffle(&mut rng);
                chosen.extend(pos.into_iter().take(k));
            }
            chosen.sort();
            chosen.dedup();
            Ok(chosen)
        }
    }
}

// ---------------------------------------------------------------------------
// Linear probing
// ---------------------------------------------------------------------------

struct ProbeData {
    x: Tensor,
    bce_targets: Option<Tensor>,
    ce_classes: Option<Vec<usize>>,
}

fn probe_data(records: &[EmbeddingRecord], task: &TaskSpec) -> Result<ProbeData, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Data("no records".into()));
    }
    let d = records[0].embedding.len();
    let k = task.n_classes();
    let is_ce = task.loss_kind == LossKind::CeMulticlass;
    let mut x = Vec::with_capacity(records.len() * d);
    let mut bce = Vec::new();
    let mut ce = Vec::new();
    for r in records {
        if r.embedding.len() != d {
            return Err(EvalError::Data(format!(
                "embedding length mismatch at {}",
                r.id
            )));
        }
        x.extend_from_slice(&r.embedding);
        match (&r.labels, is_ce) {
            (Labels::Multilabel(bits), false) => bce.extend(bits.iter().map(|&b| b as f64)),
            (Labels::Class(c), true) => ce.push(*c),
            _ => {
                return Err(EvalError::Data(format!(
                    "label kind of {} does not match task {}",
                    r.id, task.name
                )))
            }
        }
    }
    Ok(ProbeData {
        x: Tensor::new(vec![records.len(), d], x)?,
        bce_targets: if is_ce {
            None
        } else {
            Some(Tensor::new(vec![records.len(), k], bce)?)
        },
        ce_classes: if is_ce { Some(ce) } else { None },
    })
}

/// A trained affine classifier over frozen embeddings.
pub struct LinearClassifier {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearClassifier {
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, EvalError> {
        let mut tape = Tape::new();
        let w = tape.leaf(&self.w);
        let b = tape.leaf(&self.b);
        let z = tape.matmul(x, &w)?;
        Ok(tape.add_bias(&z, &b)?)
    }
}

/// Train a single affine layer on frozen embeddings with the task's loss via
/// SGD and a cosine-decayed learning rate.
pub fn train_linear(
    train: &[EmbeddingRecord],
    task: &TaskSpec,
    cfg: &ProbeConfig,
) -> Result<LinearClassifier, EvalError> {
    cfg.validate()?;
    let data = probe_data(train, task)?;
    let d = data.x.shape[1];
    let k = task.n_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Small seeded random init: independent probe trials land on distinct
    // near-optima instead of all collapsing onto one deterministic solution.
    let scale = 0.5 / (d as f64).sqrt();
    let wv: Vec<f64> = (0..d * k).map(|_| rng.gen_range(-scale..scale)).collect();
    let mut w = Tensor::new(vec![d, k], wv)?.with_grad();
    let mut b = Tensor::zeros(vec![k]).with_grad();
    let n = train.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let m = chunk.len();
            let mut xb = Vec::with_capacity(m * d);
            for &i in chunk {
                xb.extend_from_slice(&data.x.values[i * d..(i + 1) * d]);
            }
            let xb = Tensor::new(vec![m, d], xb)?;
            let mut tape = Tape::new();
            let wl = tape.leaf(&w);
            let bl = tape.leaf(&b);
            let z = tape.matmul(&xb, &wl)?;
            let z = tape.add_bias(&z, &bl)?;
            let loss = match (&data.bce_targets, &data.ce_classes) {
                (Some(y), None) => {
                    let mut yb = Vec::with_capacity(m * k);
                    for &i in chunk {
                        yb.extend_from_slice(&y.values[i * k..(i + 1) * k]);
                    }
                    losses::bce_with_logits(&mut tape, &z, &Tensor::new(vec![m, k], yb)?)?
                }
                (None, Some(classes)) => {
                    let cb: Vec<usize> = chunk.iter().map(|&i| classes[i]).collect();
                    losses::ce_multiclass_rows(&mut tape, &z, &cb)?
                }
                _ => unreachable!(),
            };
            tape.backward(&loss)?;
            let lr = cosine_lr(cfg.lr, step, total_steps);
            if let Some(g) = tape.grad(&wl) {
                for (p, &gv) in w.values.iter_mut().zip(g) {
                    *p -= lr * gv;
                }
            }
            if let Some(g) = tape.grad(&bl) {
                for (p, &gv) in b.values.iter_mut().zip(g) {
                    *p -= lr * gv;
                }
            }
            step += 1;
        }
    }
    Ok(LinearClassifier { w, b })
}

/// Score a classifier on a test set: per-class AUC + mean AUC for
/// multilabel/binary tasks, accuracy for multiclass.
pub fn score_classifier(
    clf: &LinearClassifier,
    test: &[EmbeddingRecord],
    task: &TaskSpec,
    trained_on: &[EmbeddingRecord],
) -> Result<MetricReport, EvalError> {
    let data = probe_data(test, task)?;
    let z = clf.logits(&data.x)?;
    let k = task.n_classes();
    if task.loss_kind == LossKind::CeMulticlass {
        let truth = data.ce_classes.unwrap();
        let pred: Vec<usize> = (0..test.len())
            .map(|i| {
                let row = &z.values[i * k..(i + 1) * k];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect();
        let acc = accuracy(&pred, &truth)?;
        let mut per_class = Vec::new();
        for (ci, name) in task.class_names.iter().enumerate() {
            let idx: Vec<usize> = (0..test.len()).filter(|&i| truth[i] == ci).collect();
            let v = if idx.is_empty() {
                None
            } else {
                Some(idx.iter().filter(|&&i| pred[i] == ci).count() as f64 / idx.len() as f64)
            };
            per_class.push((name.clone(), v));
        }
        return Ok(MetricReport::single("accuracy", per_class, acc));
    }
    // Multilabel: per-class AUC; a class absent from the training set has an
    // untrained column, its AUC is recorded as undefined and left out of the
    // mean.
    let y = data.bce_targets.unwrap();
    let mut train_has_class = vec![false; k];
    for r in trained_on {
        if let Labels::Multilabel(bits) = &r.labels {
            for (ci, &b) in bits.iter().enumerate() {
                if b == 1 {
                    train_has_class[ci] = true;
                }
            }
        }
    }
    let mut per_class = Vec::new();
    let mut defined = Vec::new();
    for (ci, name) in task.class_names.iter().enumerate() {
        let scores: Vec<f64> = (0..test.len()).map(|i| z.values[i * k + ci]).collect();
        let labels: Vec<u8> = (0..test.len()).map(|i| y.values[i * k + ci] as u8).collect();
        let v = if !train_has_class[ci] {
            None
        } else {
            match auc(&scores, &labels) {
                Ok(a) => Some(a),
                Err(EvalError::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            }
        };
        if let Some(a) = v {
            defined.push(a);
        }
        per_class.push((name.clone(), v));
    }
    if defined.is_empty() {
        return Err(EvalError::UndefinedMetric(
            "no class has a defined AUC".into(),
        ));
    }
    let mean_auc = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(MetricReport::single("auc", per_class, mean_auc))
}

/// Full linear-probe protocol: subsample the train budget, fit the affine
/// classifier, report test metrics.
pub fn linear_probe(
    train: &[EmbeddingRecord],
    test: &[EmbeddingRecord],
    task: &TaskSpec,
    cfg: &ProbeConfig,
) -> Result<MetricReport, EvalError> {
    let train_ids: std::collections::HashSet<&str> =
        train.iter().map(|r| r.id.as_str()).collect();
    if let Some(r) = test.iter().find(|r| train_ids.contains(r.id.as_str())) {
        return Err(EvalError::Data(format!(
            "id {} appears in both probe train and test sets",
            r.id
        )));
    }
    let train = subsample_train(train, task, cfg)?;
    let clf = train_linear(&train, task, cfg)?;
    score_classifier(&clf, test, task, &train)
}

/// Per-task forgetting metric over a finished run with snapshots: for each
/// task, probe AUC from the snapshot taken right after that task's last
/// training visit minus probe AUC from the final model, both on the task's
/// held-out test split. Positive Δ means the task degraded after its last
/// visit; a no-revisit schedule should show larger Δ on early tasks than a
/// cyclic one.
pub fn forgetting_delta(
    run: &crate::pretrain::SnapshotRun,
    manifests: &[DatasetManifest],
    source: EmbeddingSource,
    stage: EmbeddingStage,
    cfg: &ProbeConfig,
) -> Result<Vec<f64>, EvalError> {
    if run.snapshots.len() != manifests.len() {
        return Err(EvalError::Config(format!(
            "{} snapshots for {} tasks",
            run.snapshots.len(),
            manifests.len()
        )));
    }
    let probe_auc = |pair: &ModelPair, m: &DatasetManifest| -> Result<f64, EvalError> {
        let emb = export_embeddings(pair, m, source, stage)?;
        let train: Vec<_> = emb
            .iter()
            .filter(|r| r.split == Split::Train)
            .cloned()
            .collect();
        let test: Vec<_> = emb
            .iter()
            .filter(|r| r.split == Split::Test)
            .cloned()
            .collect();
        linear_probe(&train, &test, &m.task, cfg).map(|r| r.aggregate)
    };
    let mut deltas = Vec::with_capacity(manifests.len());
    for (snap, m) in run.snapshots.iter().zip(manifests) {
        deltas.push(probe_auc(snap, m)? - probe_auc(&run.pair, m)?);
    }
    Ok(deltas)
}

/// FNR per subgroup from one trained classifier, for the bias report.
pub fn fnr_by_subgroup(
    clf: &LinearClassifier,
    test: &[EmbeddingRecord],
    task: &TaskSpec,
    class_index: usize,
    threshold: f64,
) -> Result<Vec<(String, f64)>, EvalError> {
    let data = probe_data(test, task)?;
    let z = clf.logits(&data.x)?;
    let k = task.n_classes();
    let mut groups: HashMap<String, (Vec<f64>, Vec<u8>)> = HashMap::new();
    let y = data
        .bce_targets
        .ok_or_else(|| EvalError::Data("FNR needs a multilabel task".into()))?;
    for (i, r) in test.iter().enumerate() {
        let g = r.subgroup.clone().unwrap_or_else(|| "_all".into());
        let entry = groups.entry(g).or_default();
        entry.0.push(z.values[i * k + class_index]);
        entry.1.push(y.values[i * k + class_index] as u8);
    }
    let mut keys: Vec<_> = groups.keys().cloned().collect();
    keys.sort();
    let mut out = Vec::new();
    for g in keys {
        let (s, l) = &groups[&g];
        out.push((g.clone(), fnr(s, l, threshold)?));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Label budget on the target task's train split; `None` uses all of it.
    #[serde(default)]
    pub budget: Option<TrainBudget>,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr0 <= 0.0 {
            return Err(EvalError::Config(
                "finetune epochs, batch size and lr must be positive".into(),
            ));
        }
        match self.budget {
            Some(TrainBudget::Fraction(f)) if !(f > 0.0 && f <= 1.0) => Err(EvalError::Config(
                format!("train fraction must be in (0, 1], got {f}"),
            )),
            Some(TrainBudget::KShot(0)) => {
                Err(EvalError::Config("k-shot count must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Fine-tune on a target task: encoder (and projector) initialized from the
/// teacher branch of a checkpoint, or randomly when `init` is `None`; always a
/// fresh head; all layers trained; metrics on the test split.
pub fn finetune(
    init: Option<&[(String, Tensor)]>,
    enc: &EncoderConfig,
    proj: &ProjectorConfig,
    manifest: &DatasetManifest,
    cfg: &FinetuneConfig,
) -> Result<MetricReport, EvalError> {
    cfg.validate()?;
    let mut pair = build_model(enc, proj, std::slice::from_ref(&manifest.task), cfg.seed)?;
    if let Some(tensors) = init {
        init_student_from_teacher(&mut pair, tensors)?;
    }
    let task_id = manifest.task.task_id;
    let mut train_idx = manifest.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(EvalError::Data(format!(
            "train split of {} is empty",
            manifest.task.name
        )));
    }
    if cfg.budget.is_some() {
        let labels: Vec<Labels> = train_idx
            .iter()
            .map(|&i| manifest.records[i].labels.clone())
            .collect();
        let keep = subsample_indices(&labels, &manifest.task, cfg.budget, cfg.seed)?;
        train_idx = keep.into_iter().map(|j| train_idx[j]).collect();
    }
    let n = train_idx.len();
    let total_steps = cfg.epochs * n.div_ceil(cfg.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf17e);
    let mut order = train_idx.clone();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let d = manifest.records[chunk[0]].image.numel();
            let mut xb = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                xb.extend_from_slice(&manifest.records[i].image.values);
            }
            let x = Tensor::new(vec![chunk.len(), d], xb)?;
            let mut tape = Tape::new();
            let out = pair.forward_student(&mut tape, &x, task_id)?;
            let loss = match manifest.task.loss_kind {
                LossKind::CeMulticlass => {
                    let classes: Vec<usize> = chunk
                        .iter()
                        .map(|&i| match &manifest.records[i].labels {
                            Labels::Class(c) => *c,
                            _ => usize::MAX,
                        })
                        .collect();
                    losses::ce_multiclass_rows(&mut tape, &out.pred, &classes)?
                }
                _ => {
                    let k = manifest.task.n_classes();
                    let mut yb = Vec::with_capacity(chunk.len() * k);
                    for &i in chunk {
                        match &manifest.records[i].labels {
                            Labels::Multilabel(bits) => {
                                yb.extend(bits.iter().map(|&b| b as f64))
                            }
                            _ => {
                                return Err(EvalError::Data(
                                    "label kind does not match task".into(),
                                ))
                            }
                        }
                    }
                    losses::bce_with_logits(
                        &mut tape,
                        &out.pred,
                        &Tensor::new(vec![chunk.len(), k], yb)?,
                    )?
                }
            };
            if !loss.values[0].is_finite() {
                return Err(EvalError::Data(format!(
                    "fine-tuning diverged at step {step}"
                )));
            }
            tape.backward(&loss)?;
            let lr = cosine_lr(cfg.lr0, step, total_steps);
            pair.apply_gradients(&tape, &out.bindings, lr);
            step += 1;
        }
    }
    // Evaluate the trained student on the test split via its head logits.
    let test_idx = manifest.split_indices(Split::Test);
    if test_idx.is_empty() {
        return Err(EvalError::Data(format!(
            "test split of {} is empty",
            manifest.task.name
        )));
    }
    let d = manifest.records[test_idx[0]].image.numel();
    let mut xb = Vec::with_capacity(test_idx.len() * d);
    for &i in &test_idx {
        xb.extend_from_slice(&manifest.records[i].image.values);
    }
    let x = Tensor::new(vec![test_idx.len(), d], xb)?;
    let mut tape = Tape::new();
    let out = pair.forward_student(&mut tape, &x, task_id)?;
    let k = manifest.task.n_classes();
    if manifest.task.loss_kind == LossKind::CeMulticlass {
        let truth: Vec<usize> = test_idx
            .iter()
            .map(|&i| match &manifest.records[i].labels {
                Labels::Class(c) => *c,
                _ => usize::MAX,
            })
            .collect();
        let pred: Vec<usize> = (0..test_idx.len())
            .map(|i| {
                let row = &out.pred.values[i * k..(i + 1) * k];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect();
        let acc = accuracy(&pred, &truth)?;
        Ok(MetricReport::single("accuracy", vec![], acc))
    } else {
        let mut per_class = Vec::new();
        let mut defined = Vec::new();
        for (ci, name) in manifest.task.class_names.iter().enumerate() {
            let scores: Vec<f64> = (0..test_idx.len())
                .map(|i| out.pred.values[i * k + ci])
                .collect();
            let labels: Vec<u8> = test_idx
                .iter()
                .map(|&i| match &manifest.records[i].labels {
                    Labels::Multilabel(bits) => bits[ci],
                    _ => 0,
                })
                .collect();
            let v = match auc(&scores, &labels) {
                Ok(a) => Some(a),
                Err(EvalError::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            if let Some(a) = v {
                defined.push(a);
            }
            per_class.push((name.clone(), v));
        }
        if defined.is_empty() {
            return Err(EvalError::UndefinedMetric(
                "no class has a defined AUC".into(),
            ));
        }
        let mean_auc = defined.iter().sum::<f64>() / defined.len() as f64;
        Ok(MetricReport::single("auc", per_class, mean_auc))
    }
}

/// Copy a checkpoint's teacher encoder+projector into both branches of a
/// freshly built model (heads stay freshly initialized).
pub fn init_student_from_teacher(
    pair: &mut ModelPair,
    tensors: &[(String, Tensor)],
) -> Result<(), EvalError> {
    let map: HashMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut missing = Vec::new();
    let mut collect = |name: String, t: &mut Tensor| {
        let key = format!("teacher.{name}");
        match map.get(key.as_str()) {
            Some(src) if src.shape == t.shape => t.values = src.values.clone(),
            Some(_) => missing.push(format!("{key} (shape mismatch)")),
            None => missing.push(key),
        }
    };
    let mut student = pair.student.clone();
    student.visit_mut(&mut collect);
    if !missing.is_empty() {
        return Err(EvalError::Model(ModelError::Checkpoint(format!(
            "cannot initialize from checkpoint: {}",
            missing.join(", ")
        ))));
    }
    pair.student = student.clone();
    let mut teacher = student;
    teacher_freeze(&mut teacher);
    pair.teacher = teacher;
    Ok(())
}

fn teacher_freeze(branch: &mut crate::nn::Branch) {
    branch.visit_mut(&mut |_, t| t.requires_grad = false);
}
