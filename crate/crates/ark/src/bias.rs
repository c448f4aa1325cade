//! Subgroup-bias audit: subgroup-exclusive class-balanced fold construction
//! and the cross-subgroup probing experiment with per-class significance
//! tests and false-negative rates.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Labels, Split, TaskSpec};
use crate::eval::{
    fnr_by_subgroup, score_classifier, train_linear, EmbeddingRecord, EvalError, ProbeConfig,
};
use crate::losses::LossKind;
use crate::stats::{t_test_independent, StatsError};

#[derive(Debug, Error)]
pub enum BiasError {
    #[error("data error: {0}")]
    Data(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// One subgroup-exclusive training fold plus the per-subgroup test sets it is
/// evaluated against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupFoldPlan {
    pub subgroup: String,
    pub fold_index: usize,
    pub train_ids: Vec<String>,
    /// Test ids keyed by subgroup value.
    pub test_ids: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldConfig {
    pub n_folds_per_subgroup: usize,
    /// Positives drawn per class per fold. Folds partition each class pool,
    /// so `per_class * n_folds_per_subgroup` exclusive positives are needed
    /// per class per subgroup. Defaults to an even split of the scarcest
    /// class's pool across folds, clamped to at most 10 per fold.
    #[serde(default)]
    pub per_class: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub excluded_classes: Vec<String>,
}

/// Drop excluded classes from a task schema; returns the reduced task and the
/// kept original class indices.
pub fn reduce_task(task: &TaskSpec, excluded: &[String]) -> Result<(TaskSpec, Vec<usize>), BiasError> {
    for e in excluded {
        if !task.class_names.contains(e) {
            return Err(BiasError::Config(format!(
                "excluded class {e} not in task {}",
                task.name
            )));
        }
    }
    let kept: Vec<usize> = task
        .class_names
        .iter()
        .enumerate()
        .filter(|(_, n)| !excluded.contains(n))
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() {
        return Err(BiasError::Config("all classes excluded".into()));
    }
    let mut reduced = task.clone();
    reduced.class_names = kept.iter().map(|&i| task.class_names[i].clone()).collect();
    Ok((reduced, kept))
}

/// Project a record's label vector onto the kept class indices.
pub fn reduce_labels(r: &EmbeddingRecord, kept: &[usize]) -> Result<EmbeddingRecord, BiasError> {
    let Labels::Multilabel(bits) = &r.labels else {
        return Err(BiasError::Data(format!(
            "bias protocol requires multilabel records, got class label at {}",
            r.id
        )));
    };
    let mut out = r.clone();
    out.labels = Labels::Multilabel(kept.iter().map(|&i| bits[i]).collect());
    Ok(out)
}

/// Stable FNV-1a over bytes; hashing the sorted pool ids keeps fold seeds
/// independent of the subgroup's name, so relabeling A/B swaps folds exactly.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn fold_seed(pool_ids: &[String], fold: usize, seed: u64) -> u64 {
    let mut buf = Vec::new();
    let mut ids: Vec<&String> = pool_ids.iter().collect();
    ids.sort();
    for id in ids {
        buf.extend_from_slice(id.as_bytes());
        buf.push(0);
    }
    buf.extend_from_slice(&(fold as u64).to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    fnv1a(&buf)
}

/// Build `n_folds_per_subgroup` class-balanced, subgroup-pure training folds
/// per subgroup from the train split, with per-subgroup test sets from the
/// test split. Positives are drawn from exclusively-positive records so
/// per-class positive counts are exactly equal within every fold.
pub fn build_exclusive_folds(
    records: &[EmbeddingRecord],
    task: &TaskSpec,
    cfg: &FoldConfig,
) -> Result<(Vec<SubgroupFoldPlan>, TaskSpec, Vec<usize>), BiasError> {
    if cfg.n_folds_per_subgroup == 0 {
        return Err(BiasError::Config("need at least one fold per subgroup".into()));
    }
    if task.loss_kind != LossKind::BceMultilabel {
        return Err(BiasError::Data(
            "bias protocol requires a multilabel task".into(),
        ));
    }
    if let Some(r) = records.iter().find(|r| r.subgroup.is_none()) {
        return Err(BiasError::Data(format!(
            "record {} has no subgroup attribute",
            r.id
        )));
    }
    let (reduced, kept) = reduce_task(task, &cfg.excluded_classes)?;
    let k = reduced.n_classes();

    // Train pools: per subgroup, exclusively-positive records per class.
    let mut pools: BTreeMap<String, Vec<Vec<&EmbeddingRecord>>> = BTreeMap::new();
    let mut pool_ids: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut test_ids: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in records {
        let g = r.subgroup.clone().unwrap();
        match r.split {
            Split::Test => test_ids.entry(g).or_default().push(r.id.clone()),
            Split::Train => {
                let rr = reduce_labels(r, &kept)?;
                let Labels::Multilabel(bits) = &rr.labels else { unreachable!() };
                let positives: Vec<usize> = bits
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b == 1)
                    .map(|(i, _)| i)
                    .collect();
                let classes = pools
                    .entry(g.clone())
                    .or_insert_with(|| vec![Vec::new(); k]);
                if positives.len() == 1 {
                    classes[positives[0]].push(r);
                    pool_ids.entry(g).or_default().push(r.id.clone());
                }
            }
            _ => {}
        }
    }
    if pools.len() < 2 {
        return Err(BiasError::Data(format!(
            "need at least 2 subgroups with training data, found {}",
            pools.len()
        )));
    }
    for g in pools.keys() {
        if !test_ids.contains_key(g) {
            return Err(BiasError::Data(format!("subgroup {g} has no test records")));
        }
    }

    let mut plans = Vec::new();
    for (g, classes) in &pools {
        let scarcest = classes.iter().map(|c| c.len()).min().unwrap();
        // Folds partition each class pool: every record appears in at most
        // one fold. Disjoint folds make the per-fold AUCs independent draws,
        // which the row-level t-test requires; overlapping folds would share
        // a fixed pool idiosyncrasy and flag it as a subgroup effect.
        let per = cfg
            .per_class
            .unwrap_or_else(|| (scarcest / cfg.n_folds_per_subgroup).clamp(1, 10));
        if scarcest < per * cfg.n_folds_per_subgroup {
            let counts: Vec<String> = reduced
                .class_names
                .iter()
                .zip(classes)
                .map(|(n, c)| format!("{n}={}", c.len()))
                .collect();
            return Err(BiasError::Data(format!(
                "subgroup {g}: not enough exclusive positives to give {} disjoint folds {per} per class ({})",
                cfg.n_folds_per_subgroup,
                counts.join(", ")
            )));
        }
        let ids = &pool_ids[g];
        // One shuffle per class (seeded by the pool's ids, never by the
        // subgroup name, so relabeling subgroups reproduces the same folds),
        // then consecutive chunks of `per` become the folds.
        let shuffled: Vec<Vec<&EmbeddingRecord>> = classes
            .iter()
            .enumerate()
            .map(|(ci, class_pool)| {
                let mut rng: rand_chacha::ChaCha8Rng =
                    rand::SeedableRng::seed_from_u64(fold_seed(ids, ci, cfg.seed));
                let mut pool = class_pool.clone();
                rand::seq::SliceRandom::shuffle(pool.as_mut_slice(), &mut rng);
                pool
            })
            .collect();
        for fold in 0..cfg.n_folds_per_subgroup {
            let mut train_ids = Vec::with_capacity(per * k);
            for class_pool in &shuffled {
                train_ids.extend(
                    class_pool[fold * per..(fold + 1) * per]
                        .iter()
                        .map(|r| r.id.clone()),
                );
            }
            train_ids.sort();
            plans.push(SubgroupFoldPlan {
                subgroup: g.clone(),
                fold_index: fold,
                train_ids,
                test_ids: test_ids.clone(),
            });
        }
    }
    Ok((plans, reduced, kept))
}

/// One row of the bias report: a (class, train subgroup, test subgroup)
/// condition averaged over folds, with the train-A-vs-train-B significance
/// test on that test subgroup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub class: String,
    pub train_subgroup: String,
    pub test_subgroup: String,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub t: f64,
    pub p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub rows: Vec<BiasRow>,
    /// FNR per (class, subgroup) from the full-data probe.
    pub fnr: Vec<(String, String, f64)>,
}

impl BiasReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("class,train_subgroup,test_subgroup,mean_auc,std_auc,t,p,significant\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.class,
                r.train_subgroup,
                r.test_subgroup,
                r.mean_auc,
                r.std_auc,
                r.t,
                r.p,
                r.significant
            ));
        }
        out
    }

    /// Classes whose train-subgroup contrast is significant on every test
    /// subgroup. Requiring consistency across test sets (rather than any
    /// single significant row) is the audit's multiple-comparison control: a
    /// genuinely subgroup-linked representation gap shows up no matter which
    /// subgroup supplies the test set, while isolated p < 0.05 rows appear
    /// under the null at roughly the nominal rate per test.
    pub fn significant_classes(&self) -> Vec<String> {
        let mut test_groups: Vec<&str> = self.rows.iter().map(|r| r.test_subgroup.as_str()).collect();
        test_groups.sort();
        test_groups.dedup();
        let mut out: Vec<String> = self
            .rows
            .iter()
            .map(|r| r.class.clone())
            .filter(|class| {
                test_groups.iter().all(|tg| {
                    self.rows
                        .iter()
                        .any(|r| &r.class == class && r.test_subgroup == *tg && r.significant)
                })
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

/// Run the full cross-subgroup experiment: one linear probe per fold,
/// per-class AUC on every subgroup's test set, fold-averaged conditions, and
/// per-class t-tests of train-A vs train-B AUCs on each fixed test subgroup.
pub fn run_bias_experiment(
    embeddings: &[EmbeddingRecord],
    plans: &[SubgroupFoldPlan],
    task: &TaskSpec,
    kept: &[usize],
    probe: &ProbeConfig,
    fnr_threshold: f64,
) -> Result<BiasReport, BiasError> {
    if plans.is_empty() {
        return Err(BiasError::Config("no fold plans".into()));
    }
    let by_id: HashMap<&str, &EmbeddingRecord> =
        embeddings.iter().map(|r| (r.id.as_str(), r)).collect();
    let fetch = |ids: &[String]| -> Result<Vec<EmbeddingRecord>, BiasError> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|r| reduce_labels(r, kept))
                    .ok_or_else(|| BiasError::Data(format!("missing embedding id {id}")))?
            })
            .collect()
    };

    let subgroups: Vec<String> = {
        let mut s: Vec<String> = plans.iter().map(|p| p.subgroup.clone()).collect();
        s.sort();
        s.dedup();
        s
    };
    // Per (train_subgroup, test_subgroup, class) -> fold AUCs, in fold order.
    let mut samples: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for plan in plans {
        let train = fetch(&plan.train_ids)?;
        // Per-fold probe seed derived from the fold's ids, never from the
        // subgroup name, so relabeling A/B reproduces the same probes.
        let mut fold_probe = probe.clone();
        fold_probe.seed = fold_seed(&plan.train_ids, plan.fold_index, probe.seed);
        let clf = train_linear(&train, task, &fold_probe)?;
        for (tg, ids) in &plan.test_ids {
            let test = fetch(ids)?;
            let report = score_classifier(&clf, &test, task, &train)?;
            for (class, v) in &report.per_class {
                if let Some(v) = v {
                    samples
                        .entry((plan.subgroup.clone(), tg.clone(), class.clone()))
                        .or_default()
                        .push(*v);
                }
            }
        }
    }

    let mut rows = Vec::new();
    for class in &task.class_names {
        for test_g in &subgroups {
            // Significance of the train-subgroup contrast on this test set.
            let (t, p) = if subgroups.len() == 2 {
                let a = samples
                    .get(&(subgroups[0].clone(), test_g.clone(), class.clone()))
                    .cloned()
                    .unwrap_or_default();
                let b = samples
                    .get(&(subgroups[1].clone(), test_g.clone(), class.clone()))
                    .cloned()
                    .unwrap_or_default();
                if a.len() >= 2 && b.len() >= 2 {
                    let r = t_test_independent(&a, &b, false)?;
                    (r.t, r.p)
                } else {
                    (f64::NAN, f64::NAN)
                }
            } else {
                (f64::NAN, f64::NAN)
            };
            for train_g in &subgroups {
                let vals = samples
                    .get(&(train_g.clone(), test_g.clone(), class.clone()))
                    .cloned()
                    .unwrap_or_default();
                let (mean, std) = match vals.len() {
                    0 => (f64::NAN, f64::NAN),
                    1 => (vals[0], 0.0),
                    _ => crate::stats::mean_std(&vals)?,
                };
                rows.push(BiasRow {
                    class: class.clone(),
                    train_subgroup: train_g.clone(),
                    test_subgroup: test_g.clone(),
                    mean_auc: mean,
                    std_auc: std,
                    t,
                    p,
                    significant: p.is_finite() && p < 0.05,
                });
            }
        }
    }

    // FNR per subgroup from the full-data probe: train on every train-split
    // embedding, measure on the combined test split.
    let train_all: Vec<EmbeddingRecord> = embeddings
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| reduce_labels(r, kept))
        .collect::<Result<_, _>>()?;
    let test_all: Vec<EmbeddingRecord> = embeddings
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| reduce_labels(r, kept))
        .collect::<Result<_, _>>()?;
    let mut fnr_rows = Vec::new();
    if !train_all.is_empty() && !test_all.is_empty() {
        let clf = train_linear(&train_all, task, probe)?;
        for (ci, class) in task.class_names.iter().enumerate() {
            match fnr_by_subgroup(&clf, &test_all, task, ci, fnr_threshold) {
                Ok(groups) => {
                    for (g, v) in groups {
                        fnr_rows.push((class.clone(), g, v));
                    }
                }
                Err(EvalError::UndefinedMetric(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(BiasReport {
        rows,
        fnr: fnr_rows,
    })
}
