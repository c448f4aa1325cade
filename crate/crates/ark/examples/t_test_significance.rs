//! Two-sample t-tests via the regularized incomplete beta function, and the
//! best-vs-others condition comparison built on them.

use ark::stats::{compare_conditions, t_test_independent, TrialSet};

fn main() {
    // A classic textbook instance.
    let a = [1.0, 2.0, 3.0];
    let b = [4.0, 5.0, 6.0];
    let r = t_test_independent(&a, &b, false).unwrap();
    println!("pooled t-test of {a:?} vs {b:?}:");
    println!("  t = {:.4}, df = {}, p = {:.5}", r.t, r.df, r.p);

    // Welch's variant relaxes the equal-variance assumption.
    let c = [1.0, 1.1, 0.9, 1.0, 1.05];
    let d = [2.0, 0.1, 3.5, -1.0, 2.4];
    let pooled = t_test_independent(&c, &d, false).unwrap();
    let welch = t_test_independent(&c, &d, true).unwrap();
    println!("\nunequal variances: pooled df {}, Welch df {:.2}", pooled.df, welch.df);
    println!("  pooled p = {:.4}, Welch p = {:.4}", pooled.p, welch.p);

    // Degenerate conventions are fixed rather than NaN.
    let same = t_test_independent(&[2.0, 2.0, 2.0], &[2.0, 2.0, 2.0], false).unwrap();
    println!("\nidentical constants: t = {}, p = {}", same.t, same.p);
    let apart = t_test_independent(&[1.0, 1.0, 1.0], &[5.0, 5.0, 5.0], false).unwrap();
    println!("separated constants: t = {}, p = {}", apart.t, apart.p);

    // Condition comparison: best by mean, others tied unless p < 0.05.
    let conditions = vec![
        TrialSet { label: "full method".into(), samples: vec![0.84, 0.86, 0.85, 0.83, 0.87] },
        TrialSet { label: "no consistency".into(), samples: vec![0.82, 0.85, 0.84, 0.83, 0.84] },
        TrialSet { label: "no pretraining".into(), samples: vec![0.70, 0.72, 0.69, 0.71, 0.73] },
    ];
    println!("\ncondition comparison at alpha = 0.05:");
    for s in compare_conditions(&conditions, 0.05).unwrap() {
        println!(
            "  {:<16} mean {:.3} ± {:.3}  {:?} (p vs best = {:.4})",
            s.label, s.mean, s.std, s.standing, s.p_vs_best
        );
    }
}
