//! Model construction: encoder, projector, per-task heads, and the
//! student-teacher pair with stop-gradient and epoch-wise EMA.
//!
//! Parameters live as plain tensors between steps and are bound onto a fresh
//! tape each forward pass; `ParamBindings` carries the tape node ids back to
//! the optimizer in the same deterministic order that `visit` walks them.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TaskSpec;
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("registry error: {0}")]
    Registry(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Mlp,
    Conv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Hidden layer widths (mlp) or channel plan (conv).
    pub hidden: Vec<usize>,
    /// Input image shape `(c, h, w)`.
    pub input_shape: (usize, usize, usize),
    pub feature_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden.is_empty() {
            return Err(ModelError::Config("encoder needs at least one hidden layer".into()));
        }
        if self.feature_dim == 0 {
            return Err(ModelError::Config("feature dim must be > 0".into()));
        }
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(ModelError::Config("input shape must be nonzero".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        let (c, h, w) = self.input_shape;
        c * h * w
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    pub embed_dim: usize,
    /// Optional hidden layer width; the default projector is a single affine map.
    #[serde(default)]
    pub hidden: Option<usize>,
}

impl ProjectorConfig {
    pub fn affine(embed_dim: usize) -> Self {
        ProjectorConfig {
            embed_dim,
            hidden: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn he_init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, trainable: bool) -> Self {
        let std = (2.0 / d_in as f64).sqrt();
        let w: Vec<f64> = (0..d_in * d_out)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut w = Tensor::new(vec![d_in, d_out], w).unwrap();
        let mut b = Tensor::zeros(vec![d_out]);
        w.requires_grad = trainable;
        b.requires_grad = trainable;
        Linear { w, b }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        bind: &mut ParamBindings,
        prefix: &str,
    ) -> Result<Tensor, TensorError> {
        let w = tape.leaf(&self.w);
        let b = tape.leaf(&self.b);
        bind.push(format!("{prefix}.w"), w.node_id.unwrap());
        bind.push(format!("{prefix}.b"), b.node_id.unwrap());
        let y = tape.matmul(x, &w)?;
        tape.add_bias(&y, &b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub k: Tensor,
    pub b: Tensor,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub linears: Vec<Linear>,
    pub convs: Vec<ConvLayer>,
}

#[derive(Debug, Clone)]
pub struct Projector {
    pub hidden: Option<Linear>,
    pub out: Linear,
    pub embed_dim: usize,
}

#[derive(Debug, Clone)]
pub struct TaskHead {
    pub task_id: usize,
    pub linear: Linear,
    pub n_classes: usize,
}

/// Encoder + projector; the student and teacher each own one with identical
/// shapes.
#[derive(Debug, Clone)]
pub struct Branch {
    pub encoder: Encoder,
    pub projector: Projector,
}

#[derive(Debug, Clone)]
pub struct ModelPair {
    pub student: Branch,
    pub heads: Vec<TaskHead>,
    pub teacher: Branch,
    pub momentum: f64,
    pub ema_updates: u64,
}

/// Tape node ids of every parameter bound during one forward pass, in visit
/// order.
#[derive(Debug, Default, Clone)]
pub struct ParamBindings {
    pub entries: Vec<(String, NodeId)>,
}

impl ParamBindings {
    fn push(&mut self, name: String, id: NodeId) {
        self.entries.push((name, id));
    }
}

impl Encoder {
    fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng, trainable: bool) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut enc = Encoder {
            cfg: cfg.clone(),
            linears: Vec::new(),
            convs: Vec::new(),
        };
        match cfg.kind {
            EncoderKind::Mlp => {
                let mut d = cfg.input_dim();
                for &h in &cfg.hidden {
                    enc.linears.push(Linear::he_init(rng, d, h, trainable));
                    d = h;
                }
                enc.linears
                    .push(Linear::he_init(rng, d, cfg.feature_dim, trainable));
            }
            EncoderKind::Conv => {
                let mut c_in = cfg.input_shape.0;
                for &c_out in &cfg.hidden {
                    let fan_in = c_in * 9;
                    let std = (2.0 / fan_in as f64).sqrt();
                    let k: Vec<f64> = (0..c_out * c_in * 9)
                        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let mut k = Tensor::new(vec![c_out, c_in, 3, 3], k).unwrap();
                    let mut b = Tensor::zeros(vec![c_out]);
                    k.requires_grad = trainable;
                    b.requires_grad = trainable;
                    enc.convs.push(ConvLayer { k, b, stride: 2 });
                    c_in = c_out;
                }
                // Global average pooling feeds one affine map to feature_dim.
                enc.linears
                    .push(Linear::he_init(rng, c_in, cfg.feature_dim, trainable));
            }
        }
        Ok(enc)
    }

    /// Batched forward: `x` is `[n, c*h*w]`, output is `[n, feature_dim]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        bind: &mut ParamBindings,
    ) -> Result<Tensor, TensorError> {
        match self.cfg.kind {
            EncoderKind::Mlp => {
                let mut h = x.clone();
                let last = self.linears.len() - 1;
                for (i, lin) in self.linears.iter().enumerate() {
                    h = lin.forward(tape, &h, bind, &format!("enc.l{i}"))?;
                    if i < last {
                        h = tape.relu(&h);
                    }
                }
                Ok(h)
            }
            EncoderKind::Conv => {
                let (c, ih, iw) = self.cfg.input_shape;
                let n = x.shape[0];
                let mut kernels = Vec::new();
                for (i, conv) in self.convs.iter().enumerate() {
                    let k = tape.leaf(&conv.k);
                    let b = tape.leaf(&conv.b);
                    bind.push(format!("enc.c{i}.k"), k.node_id.unwrap());
                    bind.push(format!("enc.c{i}.b"), b.node_id.unwrap());
                    kernels.push((k, b, conv.stride));
                }
                let mut rows = Vec::with_capacity(n);
                for r in 0..n {
                    let mut h = tape.slice_row(x, r, vec![c, ih, iw])?;
                    for (k, b, stride) in &kernels {
                        h = tape.conv2d(&h, k, *stride)?;
                        h = tape.add_chan_bias(&h, b)?;
                        h = tape.relu(&h);
                    }
                    rows.push(tape.reduce_mean(&h, &[1, 2])?);
                }
                let pooled = tape.concat_rows(&rows)?;
                self.linears[0].forward(tape, &pooled, bind, "enc.fc")
            }
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self.cfg.kind {
            EncoderKind::Mlp => {
                for (i, lin) in self.linears.iter().enumerate() {
                    f(format!("enc.l{i}.w"), &lin.w);
                    f(format!("enc.l{i}.b"), &lin.b);
                }
            }
            EncoderKind::Conv => {
                for (i, conv) in self.convs.iter().enumerate() {
                    f(format!("enc.c{i}.k"), &conv.k);
                    f(format!("enc.c{i}.b"), &conv.b);
                }
                f("enc.fc.w".into(), &self.linears[0].w);
                f("enc.fc.b".into(), &self.linears[0].b);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self.cfg.kind {
            EncoderKind::Mlp => {
                for (i, lin) in self.linears.iter_mut().enumerate() {
                    f(format!("enc.l{i}.w"), &mut lin.w);
                    f(format!("enc.l{i}.b"), &mut lin.b);
                }
            }
            EncoderKind::Conv => {
                for (i, conv) in self.convs.iter_mut().enumerate() {
                    f(format!("enc.c{i}.k"), &mut conv.k);
                    f(format!("enc.c{i}.b"), &mut conv.b);
                }
                f("enc.fc.w".into(), &mut self.linears[0].w);
                f("enc.fc.b".into(), &mut self.linears[0].b);
            }
        }
    }
}

impl Projector {
    fn init(
        cfg: &ProjectorConfig,
        feature_dim: usize,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Result<Self, ModelError> {
        if cfg.embed_dim == 0 {
            return Err(ModelError::Config("embed dim must be > 0".into()));
        }
        let (hidden, d) = match cfg.hidden {
            Some(h) => (Some(Linear::he_init(rng, feature_dim, h, trainable)), h),
            None => (None, feature_dim),
        };
        Ok(Projector {
            hidden,
            out: Linear::he_init(rng, d, cfg.embed_dim, trainable),
            embed_dim: cfg.embed_dim,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        bind: &mut ParamBindings,
    ) -> Result<Tensor, TensorError> {
        let h = match &self.hidden {
            Some(lin) => {
                let h = lin.forward(tape, x, bind, "proj.h")?;
                tape.relu(&h)
            }
            None => x.clone(),
        };
        self.out.forward(tape, &h, bind, "proj")
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(h) = &self.hidden {
            f("proj.h.w".into(), &h.w);
            f("proj.h.b".into(), &h.b);
        }
        f("proj.w".into(), &self.out.w);
        f("proj.b".into(), &self.out.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(h) = &mut self.hidden {
            f("proj.h.w".into(), &mut h.w);
            f("proj.h.b".into(), &mut h.b);
        }
        f("proj.w".into(), &mut self.out.w);
        f("proj.b".into(), &mut self.out.b);
    }
}

impl Branch {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.encoder.visit(f);
        self.projector.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoder.visit_mut(f);
        self.projector.visit_mut(f);
    }

    /// Features and embedding for a batch, binding parameters on the way.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        bind: &mut ParamBindings,
    ) -> Result<(Tensor, Tensor), TensorError> {
        let features = self.encoder.forward(tape, x, bind)?;
        let emb = self.projector.forward(tape, &features, bind)?;
        Ok((features, emb))
    }
}

/// Output of one student forward pass.
pub struct StudentForward {
    pub features: Tensor,
    pub emb_s: Tensor,
    pub pred: Tensor,
    pub bindings: ParamBindings,
}

/// Build a student (He-initialized) with one head per task and a teacher that
/// starts as an exact parameter copy of the student.
pub fn build_model(
    enc: &EncoderConfig,
    proj: &ProjectorConfig,
    tasks: &[TaskSpec],
    seed: u64,
) -> Result<ModelPair, ModelError> {
    if tasks.is_empty() {
        return Err(ModelError::Config("at least one task required".into()));
    }
    let mut seen = HashSet::new();
    for t in tasks {
        if !seen.insert(t.task_id) {
            return Err(ModelError::Registry(format!(
                "duplicate task_id {}",
                t.task_id
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Encoder::init(enc, &mut rng, true)?;
    let projector = Projector::init(proj, enc.feature_dim, &mut rng, true)?;
    let student = Branch { encoder, projector };
    let mut heads = Vec::new();
    for t in tasks {
        heads.push(TaskHead {
            task_id: t.task_id,
            linear: Linear::he_init(&mut rng, enc.feature_dim, t.n_classes(), true),
            n_classes: t.n_classes(),
        });
    }
    let mut teacher = student.clone();
    teacher.visit_mut(&mut |_, t| t.requires_grad = false);
    Ok(ModelPair {
        student,
        heads,
        teacher,
        momentum: 0.9,
        ema_updates: 0,
    })
}

impl ModelPair {
    pub fn head(&self, task_id: usize) -> Result<&TaskHead, ModelError> {
        self.heads
            .iter()
            .find(|h| h.task_id == task_id)
            .ok_or_else(|| ModelError::Registry(format!("no head for task {task_id}")))
    }

    /// Student path: `emb_s = p_s(e_s(x))`, `pred = h_i(features)`; everything
    /// differentiable.
    pub fn forward_student(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        task_id: usize,
    ) -> Result<StudentForward, ModelError> {
        let head = self.head(task_id)?;
        let mut bind = ParamBindings::default();
        let (features, emb_s) = self.student.forward(tape, x, &mut bind)?;
        let pred = head
            .linear
            .forward(tape, &features, &mut bind, &format!("head.{task_id}"))?;
        Ok(StudentForward {
            features,
            emb_s,
            pred,
            bindings: bind,
        })
    }

    /// Teacher path with stop-gradient: the result is constant w.r.t. the tape.
    pub fn forward_teacher(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut bind = ParamBindings::default();
        let (_, emb_t) = self.teacher.forward(tape, &x.detached(), &mut bind)?;
        debug_assert!(!emb_t.requires_grad);
        Ok(emb_t)
    }

    /// Teacher features (pre-projector), also stop-gradient.
    pub fn forward_teacher_features(
        &self,
        tape: &mut Tape,
        x: &Tensor,
    ) -> Result<Tensor, ModelError> {
        let mut bind = ParamBindings::default();
        self.teacher
            .encoder
            .forward(tape, &x.detached(), &mut bind)
            .map_err(ModelError::from)
    }

    /// `t <- lambda * t + (1 - lambda) * s` for every teacher parameter.
    pub fn ema_update(&mut self, lambda: f64) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(ModelError::Config(format!(
                "EMA momentum must be in [0, 1], got {lambda}"
            )));
        }
        let mut student_params = Vec::new();
        self.student
            .visit(&mut |name, t| student_params.push((name, t.values.clone())));
        let mut i = 0;
        self.teacher.visit_mut(&mut |name, t| {
            let (sname, svals) = &student_params[i];
            debug_assert_eq!(&name, sname);
            for (tv, &sv) in t.values.iter_mut().zip(svals) {
                *tv = lambda * *tv + (1.0 - lambda) * sv;
            }
            i += 1;
        });
        self.ema_updates += 1;
        Ok(())
    }

    /// Apply `p -= lr * grad` to every student parameter bound in `bindings`.
    pub fn apply_gradients(&mut self, tape: &Tape, bindings: &ParamBindings, lr: f64) {
        let by_name: std::collections::HashMap<&str, NodeId> = bindings
            .entries
            .iter()
            .map(|(n, id)| (n.as_str(), *id))
            .collect();
        let mut update = |name: String, t: &mut Tensor| {
            if let Some(&id) = by_name.get(name.as_str()) {
                if let Some(g) = tape.grad_by_id(id) {
                    for (p, &gv) in t.values.iter_mut().zip(g) {
                        *p -= lr * gv;
                    }
                }
            }
        };
        self.student.visit_mut(&mut update);
        for h in &mut self.heads {
            update(format!("head.{}.w", h.task_id), &mut h.linear.w);
            update(format!("head.{}.b", h.task_id), &mut h.linear.b);
        }
    }

    /// All parameters as named tensors, students prefixed `student.`, teacher
    /// `teacher.`, heads `student.head.<id>.`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.student
            .visit(&mut |name, t| out.push((format!("student.{name}"), t.clone())));
        for h in &self.heads {
            out.push((format!("student.head.{}.w", h.task_id), h.linear.w.clone()));
            out.push((format!("student.head.{}.b", h.task_id), h.linear.b.clone()));
        }
        self.teacher
            .visit(&mut |name, t| out.push((format!("teacher.{name}"), t.clone())));
        out
    }

    /// Restore parameters by name from checkpoint tensors. Extra tensors are
    /// ignored; a missing or shape-mismatched parameter is an error.
    pub fn load_named_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<(), ModelError> {
        let map: std::collections::HashMap<&str, &Tensor> = tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        let mut err = None;
        let mut fill = |name: String, t: &mut Tensor| {
            if err.is_some() {
                return;
            }
            match map.get(name.as_str()) {
                Some(src) if src.shape == t.shape => t.values = src.values.clone(),
                Some(src) => {
                    err = Some(ModelError::Checkpoint(format!(
                        "shape mismatch for {name}: checkpoint {:?} vs model {:?}",
                        src.shape, t.shape
                    )))
                }
                None => err = Some(ModelError::Checkpoint(format!("missing tensor {name}"))),
            }
        };
        self.student
            .visit_mut(&mut |name, t| fill(format!("student.{name}"), t));
        for h in &mut self.heads {
            fill(format!("student.head.{}.w", h.task_id), &mut h.linear.w);
            fill(format!("student.head.{}.b", h.task_id), &mut h.linear.b);
        }
        self.teacher
            .visit_mut(&mut |name, t| fill(format!("teacher.{name}"), t));
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Maximum absolute difference between teacher and student encoder and
    /// projector parameters.
    pub fn max_branch_divergence(&self) -> f64 {
        let mut s = Vec::new();
        self.student.visit(&mut |_, t| s.push(t.values.clone()));
        let mut max = 0.0f64;
        let mut i = 0;
        self.teacher.visit(&mut |_, t| {
            for (tv, sv) in t.values.iter().zip(&s[i]) {
                max = max.max((tv - sv).abs());
            }
            i += 1;
        });
        max
    }
}

// ---------------------------------------------------------------------------
// Checkpoint file format
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"ARK1";
const FORMAT_VERSION: u32 = 1;

/// Write named tensors: magic "ARK1", version u32 LE, tensor count u32 LE,
/// then per tensor name (u16 length + UTF-8), ndim u8, dims u64 LE, values
/// f64 LE; a CRC32 of everything after the magic trails the file.
pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<(), ModelError> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    payload.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        payload.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        payload.extend_from_slice(name_bytes);
        payload.push(t.shape.len() as u8);
        for &d in &t.shape {
            payload.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&payload);
    let mut out = Vec::with_capacity(4 + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        let slice = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| ModelError::Format {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            })?;
        self.pos += n;
        Ok(slice)
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>, ModelError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(ModelError::Format {
            offset: bytes.len(),
            reason: "file shorter than header".into(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(ModelError::Format {
            offset: 0,
            reason: "bad magic bytes".into(),
        });
    }
    let payload = &bytes[4..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let crc = crc32fast::hash(payload);
    if crc != stored_crc {
        return Err(ModelError::Format {
            offset: bytes.len() - 4,
            reason: format!("CRC mismatch: stored {stored_crc:#010x}, computed {crc:#010x}"),
        });
    }
    let mut r = Reader { bytes: payload, pos: 0 };
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ModelError::Format {
            offset: 4,
            reason: format!("unsupported format version {version}"),
        });
    }
    let count = u32::from_le_bytes(r.take(4, "tensor count")?.try_into().unwrap());
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap());
        let name = std::str::from_utf8(r.take(name_len as usize, "name")?)
            .map_err(|_| ModelError::Format {
                offset: r.pos,
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = r.take(1, "ndim")?[0];
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(r.take(8, "dim")?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, "tensor values")?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, values).map_err(|e| ModelError::Format {
            offset: r.pos,
            reason: e.to_string(),
        })?));
    }
    Ok(tensors)
}
