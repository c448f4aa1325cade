//! Drive the whole experiment pipeline through the same entry points as the
//! `ark` binary: gen-data -> pretrain -> export -> probe -> finetune -> report,
//! all from one strict JSON config, with every artifact under one directory.

use ark::cli::{cmd_export, cmd_finetune, cmd_gen_data, cmd_pretrain, cmd_probe, cmd_report,
    load_config};

fn main() {
    let dir = std::env::temp_dir().join("ark_pipeline_example");
    let out = dir.join("out");
    std::fs::create_dir_all(&dir).unwrap();
    let config = format!(
        r#"{{
  "seed": 7,
  "output_dir": {out:?},
  "data": {{ "n_tasks": 2, "sizes": [400], "image_size": 16, "vocab_overlap": 0.34,
             "subgroup_skew": 0.0, "seed": 11 }},
  "model": {{
    "encoder": {{ "kind": "mlp", "hidden": [32], "input_shape": [1, 16, 16], "feature_dim": 16 }},
    "projector": {{ "embed_dim": 12 }}
  }},
  "pretrain": {{ "mode": "cyclic", "rounds": 3, "lr0": 0.3, "momentum": 0.9,
                "batch_size": 16, "consistency_weight": 1.0, "seed": 21 }},
  "eval": {{ "probe": {{ "seed": 31 }},
            "finetune": {{ "epochs": 2, "lr0": 0.05, "batch_size": 16, "seed": 41 }},
            "n_trials": 3, "train_fractions": [0.1, 0.5, 1.0] }},
  "bias": {{ "folds": {{ "n_folds_per_subgroup": 4, "seed": 51 }},
            "probe": {{ "seed": 61, "epochs": 20 }} }}
}}"#,
        out = out.display().to_string()
    );
    let config_path = dir.join("config.json");
    std::fs::write(&config_path, config).unwrap();

    let cfg = load_config(&config_path, None, None).unwrap();
    cmd_gen_data(&cfg).unwrap();
    cmd_pretrain(&cfg).unwrap();
    cmd_export(&cfg).unwrap();
    cmd_probe(&cfg).unwrap();
    cmd_finetune(&cfg).unwrap();
    cmd_report(&cfg).unwrap();

    println!("\nartifacts under {}:", out.display());
    let mut names: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    for n in names {
        println!("  {n}");
    }
    println!("\ndata-efficiency curve:");
    print!("{}", std::fs::read_to_string(out.join("data_efficiency.csv")).unwrap());
    println!("\nsignificance table over the probe and finetune trial sets:");
    print!("{}", std::fs::read_to_string(out.join("significance.csv")).unwrap());
}
