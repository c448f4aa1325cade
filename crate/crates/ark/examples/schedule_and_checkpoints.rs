//! The cosine learning-rate schedule and the binary checkpoint format:
//! exact endpoint values, a save/load round trip, and corruption rejection.

use ark::data::{LabelMode, TaskSpec};
use ark::losses::LossKind;
use ark::nn::{build_model, read_checkpoint, write_checkpoint, EncoderConfig, EncoderKind,
    ProjectorConfig};
use ark::pretrain::cosine_lr;

fn main() {
    // lr(t) = lr0 * 0.5 * (1 + cos(pi * t / T)) over the whole horizon.
    let (lr0, total) = (0.3, 1000);
    println!("cosine schedule, lr0 = {lr0}, T = {total}:");
    for t in [0, total / 4, total / 2, 3 * total / 4, total] {
        println!("  lr({t:>4}) = {:.6}", cosine_lr(lr0, t, total));
    }

    // Round-trip a model through the checkpoint format.
    let task = TaskSpec {
        task_id: 0,
        name: "demo".into(),
        label_mode: LabelMode::Multilabel,
        class_names: vec!["a".into(), "b".into()],
        loss_kind: LossKind::BceMultilabel,
    };
    let enc = EncoderConfig {
        kind: EncoderKind::Mlp,
        hidden: vec![8],
        input_shape: (1, 4, 4),
        feature_dim: 4,
    };
    let pair = build_model(&enc, &ProjectorConfig::affine(3), &[task.clone()], 7).unwrap();
    let tensors = pair.named_tensors();

    let dir = std::env::temp_dir().join("ark_ckpt_example");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    write_checkpoint(&path, &tensors).unwrap();
    let loaded = read_checkpoint(&path).unwrap();
    let identical = tensors
        .iter()
        .zip(&loaded)
        .all(|((an, at), (bn, bt))| an == bn && at.values == bt.values);
    println!("\ncheckpoint round trip: {} tensors, bit-exact: {identical}", loaded.len());

    let mut pair2 = build_model(&enc, &ProjectorConfig::affine(3), &[task], 999).unwrap();
    pair2.load_named_tensors(&loaded).unwrap();
    println!("restored into a differently seeded model: gap now {}",
        pair2.max_branch_divergence() == pair.max_branch_divergence());

    // Flip one payload byte: the trailing CRC catches it.
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let corrupt = dir.join("corrupt.ckpt");
    std::fs::write(&corrupt, bytes).unwrap();
    println!("corrupted checkpoint rejected: {}", read_checkpoint(&corrupt).unwrap_err());

    // Truncation is reported with the offset where the data ran out.
    let bytes = std::fs::read(&path).unwrap();
    let short = dir.join("short.ckpt");
    std::fs::write(&short, &bytes[..bytes.len() / 3]).unwrap();
    println!("truncated checkpoint rejected: {}", read_checkpoint(&short).unwrap_err());
}
