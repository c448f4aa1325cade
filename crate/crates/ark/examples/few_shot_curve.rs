//! Data-efficiency of a frozen representation: probe the same embeddings with
//! shrinking fractions of the training split and with k-shot budgets.

use ark::data::{generate_synthetic_suite, stream_seed, Split, SyntheticConfig};
use ark::eval::{
    export_embeddings, linear_probe, EmbeddingSource, EmbeddingStage, ProbeConfig, TrainBudget,
};
use ark::nn::{build_model, EncoderConfig, EncoderKind, ProjectorConfig};
use ark::pretrain::{run_cyclic, PretrainConfig, PretrainMode};

fn main() {
    let suite = generate_synthetic_suite(&SyntheticConfig {
        n_tasks: 1,
        sizes: vec![2000],
        image_size: 16,
        vocab_overlap: 0.0,
        subgroup_skew: 0.0,
        noise: 0.0,
        seed: 13,
    })
    .unwrap();
    let manifest = &suite[0];
    let enc = EncoderConfig {
        kind: EncoderKind::Mlp,
        hidden: vec![48],
        input_shape: (1, 16, 16),
        feature_dim: 24,
    };
    let cfg = PretrainConfig {
        mode: PretrainMode::Cyclic,
        rounds: 6,
        lr0: 0.3,
        momentum: 0.9,
        batch_size: 32,
        consistency_weight: 1.0,
        use_projector: true,
        use_consistency: true,
        seed: 29,
        checkpoint_every: 0,
        per_round_restart: false,
        augment: None,
    };
    let pair = build_model(&enc, &ProjectorConfig::affine(16), &[manifest.task.clone()], 29)
        .unwrap();
    let (pair, _) = run_cyclic(pair, std::slice::from_ref(manifest), &cfg).unwrap();
    let emb = export_embeddings(&pair, manifest, EmbeddingSource::Teacher, EmbeddingStage::Projector)
        .unwrap();
    let train: Vec<_> = emb.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let test: Vec<_> = emb.iter().filter(|r| r.split == Split::Test).cloned().collect();

    let sweep = |label: String, budget: Option<TrainBudget>| {
        let mut aggs = Vec::new();
        for t in 0..10u64 {
            let mut probe = ProbeConfig::new(stream_seed(31, t, 0));
            probe.budget = budget;
            let report = linear_probe(&train, &test, &manifest.task, &probe).unwrap();
            aggs.push(report.aggregate);
        }
        let mean = aggs.iter().sum::<f64>() / aggs.len() as f64;
        let std = (aggs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (aggs.len() - 1) as f64)
            .sqrt();
        println!("{label:>14}: mean AUC {mean:.4} ± {std:.4}");
    };

    println!("train-budget sweep on {} train embeddings, 10 trials each:", train.len());
    for f in [0.01, 0.1, 0.5, 1.0] {
        sweep(format!("fraction {f}"), Some(TrainBudget::Fraction(f)));
    }
    for k in [1usize, 5, 25] {
        sweep(format!("{k}-shot"), Some(TrainBudget::KShot(k)));
    }
}
