//! The rank-based AUC (Mann-Whitney with midranks for ties) and the
//! false-negative rate, checked against brute-force definitions.

use ark::eval::{auc, fnr};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// O(P*N) oracle: fraction of positive/negative pairs ranked correctly, ties
/// worth half.
fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut good = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            good += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    good / pairs
}

fn main() {
    // Heavily tied scores exercise the midrank path.
    let scores = [0.9, 0.5, 0.5, 0.5, 0.3, 0.1];
    let labels = [1, 1, 0, 1, 0, 0];
    println!(
        "tied example: rank AUC {:.6}, pair-count AUC {:.6}",
        auc(&scores, &labels).unwrap(),
        auc_pairs(&scores, &labels)
    );

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut max_diff = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=50);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        // Guarantee both classes appear.
        labels[0] = 1;
        labels[1] = 0;
        // Quantized scores force plenty of ties.
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
        let diff = (auc(&scores, &labels).unwrap() - auc_pairs(&scores, &labels)).abs();
        max_diff = max_diff.max(diff);
    }
    println!("1000 random instances (sizes 2-50): max |rank - pair-count| = {max_diff:.2e}");

    // FNR at a threshold = missed positives / positives.
    let scores = [2.0, -1.0, 0.4, -3.0, 1.5]; // logits; sigmoid(0) = 0.5
    let labels = [1, 1, 1, 0, 1];
    println!(
        "FNR at threshold 0.5: {:.4} (positives scored below the operating point / positives)",
        fnr(&scores, &labels, 0.5).unwrap()
    );
    println!("FNR at threshold 0.9: {:.4}", fnr(&scores, &labels, 0.9).unwrap());

    // AUC is undefined with a single class present.
    println!("single-class input: {}", auc(&[0.1, 0.2], &[1, 1]).unwrap_err());
}
