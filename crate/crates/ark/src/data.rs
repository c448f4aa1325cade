//! Heterogeneous task registry, synthetic dataset generation with subgroup
//! attributes, manifest loading, split/leak enforcement, and the two-stage
//! augmentation pipeline.
//!
//! Manifest files are line-delimited JSON: the first line is the [`TaskSpec`]
//! header, every following line one record. Images are either inline
//! (base64-encoded 8-bit grayscale grid) or a path to a P5 portable graymap
//! next to the manifest.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use base64::Engine as _;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::LossKind;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("leak error: ids present in both pretrain and val/test: {0:?}")]
    Leak(Vec<String>),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Multilabel,
    Multiclass,
    Binary,
}

/// One dataset's label schema. Vocabularies across tasks may overlap or
/// differ; heterogeneity is permitted and never reconciled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub label_mode: LabelMode,
    pub class_names: Vec<String>,
    pub loss_kind: LossKind,
}

impl TaskSpec {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.class_names.is_empty() {
            return Err(DataError::Schema(format!(
                "task {} has no classes",
                self.name
            )));
        }
        let unique: HashSet<_> = self.class_names.iter().collect();
        if unique.len() != self.class_names.len() {
            return Err(DataError::Schema(format!(
                "task {} has duplicate class names",
                self.name
            )));
        }
        let expect = match self.label_mode {
            LabelMode::Multilabel | LabelMode::Binary => LossKind::BceMultilabel,
            LabelMode::Multiclass => LossKind::CeMulticlass,
        };
        if self.loss_kind != expect {
            return Err(DataError::Schema(format!(
                "task {}: loss kind {:?} does not match label mode {:?}",
                self.name, self.loss_kind, self.label_mode
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

/// Per-record labels: a bit vector for multilabel/binary tasks, a class index
/// for multiclass tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Labels {
    Multilabel(Vec<u8>),
    Class(usize),
}

impl Labels {
    pub fn validate(&self, task: &TaskSpec) -> Result<(), DataError> {
        match (self, task.label_mode) {
            (Labels::Multilabel(bits), LabelMode::Multilabel | LabelMode::Binary) => {
                if bits.len() != task.n_classes() {
                    return Err(DataError::Schema(format!(
                        "label vector length {} != {} classes of task {}",
                        bits.len(),
                        task.n_classes(),
                        task.name
                    )));
                }
                if bits.iter().any(|&b| b > 1) {
                    return Err(DataError::Schema(
                        "multilabel values must be 0 or 1".into(),
                    ));
                }
                Ok(())
            }
            (Labels::Class(c), LabelMode::Multiclass) => {
                if *c >= task.n_classes() {
                    return Err(DataError::Schema(format!(
                        "class index {} out of range for task {} with {} classes",
                        c,
                        task.name,
                        task.n_classes()
                    )));
                }
                Ok(())
            }
            _ => Err(DataError::Schema(format!(
                "label kind does not match label mode of task {}",
                task.name
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// Grayscale image `[c, h, w]`, values in [0, 1].
    pub image: Tensor,
    pub labels: Labels,
    pub subgroup: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub task: TaskSpec,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Leak rule: pretrain ids must be disjoint from val and test ids.
    pub fn check_leaks(&self) -> Result<(), DataError> {
        let pretrain: HashSet<&str> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Pretrain)
            .map(|r| r.id.as_str())
            .collect();
        let mut offenders: Vec<String> = self
            .records
            .iter()
            .filter(|r| matches!(r.split, Split::Val | Split::Test))
            .filter(|r| pretrain.contains(r.id.as_str()))
            .map(|r| r.id.clone())
            .collect();
        if offenders.is_empty() {
            Ok(())
        } else {
            offenders.sort();
            offenders.dedup();
            Err(DataError::Leak(offenders))
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        self.task.validate()?;
        if self.records.is_empty() {
            return Err(DataError::Schema(format!(
                "manifest for task {} has no records",
                self.task.name
            )));
        }
        for r in &self.records {
            r.labels.validate(&self.task)?;
            if r.image.values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(DataError::Schema(format!(
                    "record {}: pixel values outside [0, 1]",
                    r.id
                )));
            }
        }
        self.check_leaks()
    }
}

/// Cross-task leak check over a whole suite: an image id seen in any pretrain
/// split may not appear in any val/test split.
pub fn check_suite_leaks(manifests: &[DatasetManifest]) -> Result<(), DataError> {
    let pretrain: HashSet<&str> = manifests
        .iter()
        .flat_map(|m| m.records.iter())
        .filter(|r| r.split == Split::Pretrain)
        .map(|r| r.id.as_str())
        .collect();
    let mut offenders: Vec<String> = manifests
        .iter()
        .flat_map(|m| m.records.iter())
        .filter(|r| matches!(r.split, Split::Val | Split::Test))
        .filter(|r| pretrain.contains(r.id.as_str()))
        .map(|r| r.id.clone())
        .collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        offenders.sort();
        offenders.dedup();
        Err(DataError::Leak(offenders))
    }
}

// ---------------------------------------------------------------------------
// Synthetic suite generation
// ---------------------------------------------------------------------------

/// The global concept vocabulary. Each concept renders one shape kind into a
/// fixed grid cell, so presence is a deterministic function of the draw.
const CONCEPTS: [&str; 12] = [
    "circle", "square", "cross", "triangle", "hbar", "vbar", "ring", "diamond", "dot", "lshape",
    "tshape", "checker",
];
const GRID: usize = 4;
const CLASSES_PER_TASK: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_tasks: usize,
    /// Records per task; one entry, or one per task.
    pub sizes: Vec<usize>,
    pub image_size: usize,
    pub vocab_overlap: f64,
    pub subgroup_skew: f64,
    /// Standard deviation of per-pixel acquisition noise added after
    /// rendering; 0 reproduces noiseless images bit for bit.
    #[serde(default)]
    pub noise: f64,
    pub seed: u64,
}

/// Everything that determines one rendered sample. Labels are re-derivable
/// from this alone, which the generator tests exploit as an oracle.
#[derive(Debug, Clone)]
pub(crate) struct RenderParams {
    pub concepts: Vec<String>,
    /// Presence flag per concept of the owning task.
    pub present: Vec<bool>,
    pub subgroup_a: bool,
    pub background: f64,
    pub intensities: Vec<f64>,
    pub jitter: Vec<(i32, i32)>,
}

pub(crate) fn labels_from_params(params: &RenderParams, mode: LabelMode) -> Labels {
    match mode {
        LabelMode::Multilabel | LabelMode::Binary => {
            Labels::Multilabel(params.present.iter().map(|&p| p as u8).collect())
        }
        LabelMode::Multiclass => Labels::Class(
            params
                .present
                .iter()
                .position(|&p| p)
                .expect("multiclass sample renders exactly one concept"),
        ),
    }
}

fn concept_cell(concept: &str) -> usize {
    CONCEPTS
        .iter()
        .position(|&c| c == concept)
        .expect("unknown concept")
}

fn draw_shape(img: &mut [f64], size: usize, concept: &str, jx: i32, jy: i32, intensity: f64) {
    let cell = size / GRID;
    let idx = concept_cell(concept);
    let (cx0, cy0) = ((idx % GRID) * cell, (idx / GRID) * cell);
    let c = cell as i32;
    let half = c / 2;
    let mut put = |x: i32, y: i32| {
        let px = cx0 as i32 + x + jx;
        let py = cy0 as i32 + y + jy;
        if px >= 0 && py >= 0 && (px as usize) < size && (py as usize) < size {
            img[py as usize * size + px as usize] = intensity;
        }
    };
    let r = half - 2;
    for y in 0..c {
        for x in 0..c {
            let dx = x - half;
            let dy = y - half;
            let on = match concept {
                "circle" => dx * dx + dy * dy <= r * r,
                "square" => dx.abs() <= r - 1 && dy.abs() <= r - 1,
                "cross" => dx.abs() <= 1 || dy.abs() <= 1,
                "triangle" => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2,
                "hbar" => dy.abs() <= 1 && dx.abs() <= r,
                "vbar" => dx.abs() <= 1 && dy.abs() <= r,
                "ring" => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= r * r && d2 >= (r - 2) * (r - 2)
                }
                "diamond" => dx.abs() + dy.abs() <= r,
                "dot" => dx * dx + dy * dy <= 4,
                "lshape" => (dx <= -r + 2 && dy.abs() <= r) || (dy >= r - 2 && dx.abs() <= r),
                "tshape" => (dy <= -r + 2 && dx.abs() <= r) || (dx.abs() <= 1 && dy.abs() <= r),
                "checker" => (x / 2 + y / 2) % 2 == 0 && dx.abs() <= r && dy.abs() <= r,
                _ => false,
            };
            if on {
                put(x, y);
            }
        }
    }
}

fn render(params: &RenderParams, size: usize) -> Tensor {
    let mut img = vec![params.background; size * size];
    for (i, concept) in params.concepts.iter().enumerate() {
        if params.present[i] {
            let (jx, jy) = params.jitter[i];
            draw_shape(&mut img, size, concept, jx, jy, params.intensities[i]);
        }
    }
    // Quantize to the 8-bit grid used on disk so in-memory data round-trips.
    let values = img
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    Tensor::new(vec![1, size, size], values).unwrap()
}

fn task_vocabularies(n_tasks: usize, vocab_overlap: f64) -> Result<Vec<Vec<String>>, DataError> {
    let n_shared = (vocab_overlap * CLASSES_PER_TASK as f64).round() as usize;
    let n_unique = CLASSES_PER_TASK - n_shared;
    if n_shared + n_tasks * n_unique > CONCEPTS.len() {
        return Err(DataError::Config(format!(
            "{n_tasks} tasks at overlap {vocab_overlap} need more than {} concepts",
            CONCEPTS.len()
        )));
    }
    let shared: Vec<String> = CONCEPTS[..n_shared].iter().map(|s| s.to_string()).collect();
    let mut next = n_shared;
    let mut vocabs = Vec::new();
    for _ in 0..n_tasks {
        let mut v = shared.clone();
        for _ in 0..n_unique {
            v.push(CONCEPTS[next].to_string());
            next += 1;
        }
        vocabs.push(v);
    }
    Ok(vocabs)
}

fn assign_split(i: usize, n: usize) -> Split {
    // Fixed 70/15/5/10 layout, deterministic in the record index.
    let f = i as f64 / n as f64;
    if f < 0.70 {
        Split::Pretrain
    } else if f < 0.85 {
        Split::Train
    } else if f < 0.90 {
        Split::Val
    } else {
        Split::Test
    }
}

pub(crate) fn generate_task(
    task_id: usize,
    vocab: Vec<String>,
    size: usize,
    image_size: usize,
    subgroup_skew: f64,
    noise: f64,
    seed: u64,
) -> (DatasetManifest, Vec<RenderParams>) {
    let multilabel = task_id % 2 == 0;
    let task = TaskSpec {
        task_id,
        name: format!("task{task_id}"),
        label_mode: if multilabel {
            LabelMode::Multilabel
        } else {
            LabelMode::Multiclass
        },
        class_names: vocab.clone(),
        loss_kind: if multilabel {
            LossKind::BceMultilabel
        } else {
            LossKind::CeMulticlass
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, task_id as u64, 0));
    let mut records = Vec::with_capacity(size);
    let mut all_params = Vec::with_capacity(size);
    for i in 0..size {
        let subgroup_a = rng.gen_bool(0.5);
        let p_pos =
            (0.5 + 0.25 * subgroup_skew * if subgroup_a { 1.0 } else { -1.0 }).clamp(0.02, 0.98);
        let present: Vec<bool> = if multilabel {
            vocab.iter().map(|_| rng.gen_bool(p_pos)).collect()
        } else {
            let class = rng.gen_range(0..vocab.len());
            (0..vocab.len()).map(|c| c == class).collect()
        };
        // Nuisance style: under skew the background level tracks the subgroup,
        // a label-independent domain shift between the two cohorts. At skew 0
        // the subgroups are identically distributed, so the audit's null case
        // stays a true null.
        let background = 0.10
            + if subgroup_a { 0.0 } else { 0.08 * subgroup_skew }
            + rng.gen_range(-0.02..0.02);
        // Acquisition style: the two subgroups are imaged with different
        // registration, as if by different devices. Subgroup B's shapes sit at
        // a systematic offset that grows with skew, on top of the same small
        // random jitter both subgroups share. Because the offset is consistent
        // across records, a classifier fit on one subgroup's template geometry
        // is consistently (not just noisily) wrong on the other's, even inside
        // class-balanced evaluation folds; at skew 0 the offset is zero and
        // the subgroups are identically distributed.
        let max_jitter = 2;
        let offset = if subgroup_a { 0 } else { (7.0 * subgroup_skew).round() as i32 };
        let params = RenderParams {
            concepts: vocab.clone(),
            present,
            subgroup_a,
            background,
            intensities: (0..vocab.len()).map(|_| rng.gen_range(0.6..1.0)).collect(),
            jitter: (0..vocab.len())
                .map(|_| {
                    (
                        rng.gen_range(-max_jitter..=max_jitter) + offset,
                        rng.gen_range(-max_jitter..=max_jitter) + offset,
                    )
                })
                .collect(),
        };
        let mut image = render(&params, image_size);
        if noise > 0.0 {
            // Per-pixel acquisition noise, re-quantized to the on-disk 8-bit
            // grid. Drawn after all style parameters so noise = 0 leaves the
            // RNG stream, and therefore every noiseless dataset, unchanged.
            let gauss = Normal::new(0.0, noise).expect("noise validated finite");
            for v in image.values.iter_mut() {
                *v = ((*v + gauss.sample(&mut rng)).clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
        records.push(SampleRecord {
            id: format!("task{task_id}-{i:05}"),
            image,
            labels: labels_from_params(&params, task.label_mode),
            subgroup: Some(if params.subgroup_a { "A" } else { "B" }.to_string()),
            split: assign_split(i, size),
        });
        all_params.push(params);
    }
    (DatasetManifest { task, records }, all_params)
}

/// Procedurally rendered grayscale suite: shapes placed in fixed grid cells
/// define the labels, tasks share `vocab_overlap` of the concept vocabulary,
/// and the subgroup attribute correlates with a nuisance rendering style whose
/// class coupling is controlled by `subgroup_skew`.
pub fn generate_synthetic_suite(cfg: &SyntheticConfig) -> Result<Vec<DatasetManifest>, DataError> {
    if cfg.n_tasks == 0 {
        return Err(DataError::Config("n_tasks must be >= 1".into()));
    }
    for (name, v) in [
        ("vocab_overlap", cfg.vocab_overlap),
        ("subgroup_skew", cfg.subgroup_skew),
        ("noise", cfg.noise),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(DataError::Config(format!("{name} must be in [0, 1], got {v}")));
        }
    }
    if cfg.image_size < 4 * GRID {
        return Err(DataError::Config(format!(
            "image size {} too small to render primitives (minimum {})",
            cfg.image_size,
            4 * GRID
        )));
    }
    if cfg.sizes.len() != 1 && cfg.sizes.len() != cfg.n_tasks {
        return Err(DataError::Config(
            "sizes must have one entry or one per task".into(),
        ));
    }
    let vocabs = task_vocabularies(cfg.n_tasks, cfg.vocab_overlap)?;
    let mut manifests = Vec::new();
    for (t, vocab) in vocabs.into_iter().enumerate() {
        let size = cfg.sizes[t.min(cfg.sizes.len() - 1)];
        let (m, _) = generate_task(t, vocab, size, cfg.image_size, cfg.subgroup_skew, cfg.noise, cfg.seed);
        m.validate()?;
        manifests.push(m);
    }
    check_suite_leaks(&manifests)?;
    Ok(manifests)
}

// ---------------------------------------------------------------------------
// Manifest serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    shape: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_b64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_path: Option<String>,
    labels: Labels,
    #[serde(skip_serializing_if = "Option::is_none")]
    subgroup: Option<String>,
    split: Split,
}

fn pixels_to_bytes(t: &Tensor) -> Vec<u8> {
    t.values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn bytes_to_pixels(bytes: &[u8], shape: Vec<usize>) -> Result<Tensor, DataError> {
    let values: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(shape, values).map_err(|e| DataError::Schema(e.to_string()))
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&manifest.task).map_err(|e| DataError::Schema(e.to_string()))?);
    out.push('\n');
    let b64 = base64::engine::general_purpose::STANDARD;
    for r in &manifest.records {
        let line = RecordLine {
            id: r.id.clone(),
            shape: Some(r.image.shape.clone()),
            image_b64: Some(b64.encode(pixels_to_bytes(&r.image))),
            image_path: None,
            labels: r.labels.clone(),
            subgroup: r.subgroup.clone(),
            split: r.split,
        };
        let _ = writeln!(
            out,
            "{}",
            serde_json::to_string(&line).map_err(|e| DataError::Schema(e.to_string()))?
        );
    }
    fs::write(path, out)?;
    Ok(())
}

fn load_p5(path: &Path) -> Result<Tensor, DataError> {
    let bytes = fs::read(path)?;
    let header_err = || DataError::Schema(format!("{}: invalid P5 header", path.display()));
    // P5 <w> <h> <maxval>\n followed by raw bytes.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err())?);
    }
    if fields.len() != 4 || fields[0] != "P5" || fields[3] != "255" {
        return Err(header_err());
    }
    let w: usize = fields[1].parse().map_err(|_| header_err())?;
    let h: usize = fields[2].parse().map_err(|_| header_err())?;
    pos += 1; // single whitespace after maxval
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| {
        DataError::Schema(format!("{}: truncated pixel data", path.display()))
    })?;
    bytes_to_pixels(data, vec![1, h, w])
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| DataError::Schema("empty manifest file".into()))??;
    let task: TaskSpec = serde_json::from_str(&header)
        .map_err(|e| DataError::Schema(format!("bad task header: {e}")))?;
    task.validate()?;
    let b64 = base64::engine::general_purpose::STANDARD;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line)
            .map_err(|e| DataError::Schema(format!("record line {}: {e}", lineno + 2)))?;
        let image = match (&rec.image_b64, &rec.image_path) {
            (Some(data), None) => {
                let shape = rec.shape.clone().ok_or_else(|| {
                    DataError::Schema(format!("record {}: inline image without shape", rec.id))
                })?;
                let bytes = b64
                    .decode(data)
                    .map_err(|e| DataError::Schema(format!("record {}: {e}", rec.id)))?;
                bytes_to_pixels(&bytes, shape)?
            }
            (None, Some(p)) => load_p5(&dir.join(p))?,
            _ => {
                return Err(DataError::Schema(format!(
                    "record {}: exactly one of image_b64/image_path required",
                    rec.id
                )))
            }
        };
        records.push(SampleRecord {
            id: rec.id,
            image,
            labels: rec.labels,
            subgroup: rec.subgroup,
            split: rec.split,
        });
    }
    let manifest = DatasetManifest { task, records };
    manifest.validate()?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Augmentations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub crop_pad: usize,
    pub max_rotation_deg: f64,
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub gamma_range: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            // 8% of a 64-pixel side; callers with other sizes use `for_size`.
            crop_pad: 5,
            max_rotation_deg: 15.0,
            brightness_range: (-0.2, 0.2),
            contrast_range: (0.8, 1.2),
            gamma_range: (0.7, 1.5),
        }
    }
}

impl AugmentationConfig {
    pub fn for_size(image_size: usize) -> Self {
        AugmentationConfig {
            crop_pad: ((image_size as f64) * 0.08).round() as usize,
            ..Default::default()
        }
    }

    pub fn identity() -> Self {
        AugmentationConfig {
            crop_pad: 0,
            max_rotation_deg: 0.0,
            brightness_range: (0.0, 0.0),
            contrast_range: (1.0, 1.0),
            gamma_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (name, (lo, hi)) in [
            ("brightness_range", self.brightness_range),
            ("contrast_range", self.contrast_range),
            ("gamma_range", self.gamma_range),
        ] {
            if lo > hi {
                return Err(DataError::Config(format!("{name} out of order: {lo} > {hi}")));
            }
        }
        if self.gamma_range.0 <= 0.0 {
            return Err(DataError::Config("gamma range must be strictly positive".into()));
        }
        if self.max_rotation_deg < 0.0 {
            return Err(DataError::Config("max rotation must be >= 0".into()));
        }
        Ok(())
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// Geometric augmentation: reflect-pad + random crop back to size, then a
/// random rotation with nearest-neighbor resampling about the image center.
/// Degenerate configs act as identity.
pub fn tau1(x: &Tensor, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Tensor {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut out = x.values.clone();
    if cfg.crop_pad > 0 {
        let pad = cfg.crop_pad as isize;
        let oy = rng.gen_range(-pad..=pad);
        let ox = rng.gen_range(-pad..=pad);
        let mut shifted = vec![0.0; out.len()];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let sy = reflect(y as isize + oy, h);
                    let sx = reflect(xx as isize + ox, w);
                    shifted[(ch * h + y) * w + xx] = out[(ch * h + sy) * w + sx];
                }
            }
        }
        out = shifted;
    }
    if cfg.max_rotation_deg > 0.0 {
        let theta = rng
            .gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
            .to_radians();
        out = rotate_nearest(&out, c, h, w, theta);
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(x.shape.clone(), out).unwrap()
}

/// Nearest-neighbor rotation by `theta` about the image center. Source
/// coordinates outside the image are clamped to the border, so constant
/// images stay constant.
pub(crate) fn rotate_nearest(img: &[f64], c: usize, h: usize, w: usize, theta: f64) -> Vec<f64> {
    let (sin, cos) = theta.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                // Inverse map: rotate the output coordinate back by -theta.
                let sy = (cy + dy * cos - dx * sin).round().clamp(0.0, h as f64 - 1.0) as usize;
                let sx = (cx + dy * sin + dx * cos).round().clamp(0.0, w as f64 - 1.0) as usize;
                out[(ch * h + y) * w + x] = img[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

/// Photometric augmentation applied to tau1's output: brightness, contrast
/// about the image mean, then gamma, with a final clamp to [0, 1].
pub fn tau2(x: &Tensor, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Tensor {
    let b = sample_range(rng, cfg.brightness_range);
    let con = sample_range(rng, cfg.contrast_range);
    let gamma = sample_range(rng, cfg.gamma_range);
    let mean = x.values.iter().sum::<f64>() / x.numel() as f64 + b;
    let values = x
        .values
        .iter()
        .map(|&v| {
            let v = v + b;
            let v = (v - mean) * con + mean;
            let v = v.clamp(0.0, 1.0).powf(gamma);
            v.clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(x.shape.clone(), values).unwrap()
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Mix-free avalanching of (seed, epoch, index) into one RNG stream seed, so
/// per-sample augmentation is independent of thread scheduling.
pub fn stream_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(epoch.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(index.wrapping_mul(0x94d0_49bb_1331_11eb));
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, epoch, index))
}

/// Seeded shuffled batches of record indices for one epoch; the final partial
/// batch is emitted.
pub fn epoch_batches(
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size == 0 {
        return Err(DataError::Config("batch size must be >= 1".into()));
    }
    let mut indices = manifest.split_indices(split);
    if indices.is_empty() {
        return Err(DataError::Data(format!(
            "split {split:?} of task {} is empty",
            manifest.task.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, epoch, manifest.task.task_id as u64));
    indices.shuffle(&mut rng);
    Ok(indices.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// One concurrent-mode mini-batch: `(task index, record index)` pairs with an
/// equal count per task.
pub type MixedBatch = Vec<(usize, usize)>;

/// Mixed batches with `batch_size / n_tasks` samples from every task, covering
/// one pass over the largest pretrain split; smaller tasks are resampled by
/// reshuffled cycling.
pub fn interleave_equal(
    manifests: &[DatasetManifest],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<MixedBatch>, DataError> {
    let n_tasks = manifests.len();
    if n_tasks == 0 {
        return Err(DataError::Config("no manifests".into()));
    }
    if batch_size % n_tasks != 0 {
        return Err(DataError::Config(format!(
            "batch size {batch_size} not divisible by {n_tasks} tasks"
        )));
    }
    let per = batch_size / n_tasks;
    let mut pools: Vec<Vec<usize>> = Vec::new();
    for m in manifests {
        let idx = m.split_indices(Split::Pretrain);
        if idx.is_empty() {
            return Err(DataError::Data(format!(
                "pretrain split of task {} is empty",
                m.task.name
            )));
        }
        pools.push(idx);
    }
    let largest = pools.iter().map(|p| p.len()).max().unwrap();
    let steps = largest.div_ceil(per);
    let mut cursors = vec![0usize; n_tasks];
    let mut wraps = vec![0u64; n_tasks];
    let mut shuffled: Vec<Vec<usize>> = pools
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let mut p = p.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, epoch * 1000, t as u64));
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let mut batches = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(batch_size);
        for t in 0..n_tasks {
            for _ in 0..per {
                if cursors[t] == shuffled[t].len() {
                    cursors[t] = 0;
                    wraps[t] += 1;
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                        seed,
                        epoch * 1000 + wraps[t],
                        t as u64,
                    ));
                    shuffled[t].shuffle(&mut rng);
                }
                batch.push((t, shuffled[t][cursors[t]]));
                cursors[t] += 1;
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Subgroup-conditional positive prevalence of one class, for skew checks.
pub fn class_prevalence_by_subgroup(
    manifest: &DatasetManifest,
    class: usize,
) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in &manifest.records {
        let Some(sg) = &r.subgroup else { continue };
        let positive = match &r.labels {
            Labels::Multilabel(bits) => bits[class] == 1,
            Labels::Class(c) => *c == class,
        };
        let e = counts.entry(sg.clone()).or_default();
        e.0 += positive as usize;
        e.1 += 1;
    }
    counts
        .into_iter()
        .map(|(k, (p, n))| (k, p as f64 / n as f64))
        .collect()
}
