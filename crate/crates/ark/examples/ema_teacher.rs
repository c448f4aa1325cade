//! The epoch-wise EMA teacher: after each task epoch the teacher moves toward
//! the student, t <- lambda*t + (1-lambda)*s, and the teacher branch never
//! receives gradients.

use ark::data::{LabelMode, TaskSpec};
use ark::losses::LossKind;
use ark::nn::{build_model, EncoderConfig, EncoderKind, ProjectorConfig};
use ark::tensor::{Tape, Tensor};

fn task() -> TaskSpec {
    TaskSpec {
        task_id: 0,
        name: "demo".into(),
        label_mode: LabelMode::Multilabel,
        class_names: vec!["a".into(), "b".into()],
        loss_kind: LossKind::BceMultilabel,
    }
}

fn main() {
    let enc = EncoderConfig {
        kind: EncoderKind::Mlp,
        hidden: vec![8],
        input_shape: (1, 4, 4),
        feature_dim: 4,
    };
    let mut pair = build_model(&enc, &ProjectorConfig::affine(3), &[task()], 1).unwrap();

    // Perturb the student so the branches differ, then watch the gap decay by
    // the closed form lambda^k under repeated EMA updates.
    pair.student.visit_mut(&mut |_, t| {
        for v in &mut t.values {
            *v += 0.5;
        }
    });
    let lambda = 0.9;
    let initial = pair.max_branch_divergence();
    println!("initial |teacher - student| gap: {initial:.6}");
    for k in 1..=5u32 {
        pair.ema_update(lambda).unwrap();
        let gap = pair.max_branch_divergence();
        let predicted = initial * lambda.powi(k as i32);
        println!(
            "after {k} updates: gap {gap:.6}, closed form lambda^{k} * gap0 = {predicted:.6}, \
             |diff| = {:.2e}",
            (gap - predicted).abs()
        );
    }

    // The two degenerate momenta: lambda=1 freezes the teacher, lambda=0
    // copies the student outright.
    let before = pair.max_branch_divergence();
    pair.ema_update(1.0).unwrap();
    println!("lambda = 1 leaves the gap unchanged: {}", pair.max_branch_divergence() == before);
    pair.ema_update(0.0).unwrap();
    println!("lambda = 0 closes the gap exactly:   {}", pair.max_branch_divergence() == 0.0);

    // Teacher forward passes are recorded without gradient tracking.
    let mut tape = Tape::new();
    let x = Tensor::new(vec![2, 16], vec![0.1; 32]).unwrap();
    let emb = pair.forward_teacher(&mut tape, &x).unwrap();
    tape.backward(&emb).unwrap_err(); // no gradient path exists
    let mut teacher_grads = 0;
    pair.teacher.visit(&mut |_, t| teacher_grads += t.requires_grad as usize);
    println!("teacher parameters requiring gradients: {teacher_grads}");
    println!("ema updates counted so far: {}", pair.ema_updates);
}
