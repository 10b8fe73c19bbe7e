//! Small experiment harness: trains baseline and counterfactual models on
//! the synthetic task and prints original-vs-dire metrics, for tuning
//! hyperparameters.
//!
//! Usage: cargo run --release --example sweep -- [n_train] [epochs] [lr] [seed] [mode...]

use cfqa::corpus::gen::{generate_dataset, GenConfig};
use cfqa::metrics::{evaluate, render_table};
use cfqa::model::BackboneConfig;
use cfqa::predict::predict_dataset;
use cfqa::probe::build_probe;
use cfqa::trainer::{train, TrainConfig, TrainMode};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n_train: usize = args.first().map(|s| s.parse().unwrap()).unwrap_or(500);
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.08);
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);
    let modes: Vec<String> = if args.len() > 4 {
        args[4..].to_vec()
    } else {
        vec!["baseline".into(), "counterfactual".into()]
    };

    let n_dev = (n_train / 4).clamp(50, 500);
    let gen = GenConfig {
        num_examples: n_train + n_dev,
        seed: 1000 + seed,
        ..GenConfig::default()
    };
    let vocab = gen.vocabulary().unwrap();
    let all = generate_dataset(&gen).unwrap();
    let (train_set, dev_set) = all.split_at(n_train);
    let probe = build_probe(dev_set).unwrap();
    let probe_instances: Vec<_> = probe
        .iter()
        .flat_map(|p| [p.instance_a.clone(), p.instance_b.clone()])
        .collect();

    let backbone = BackboneConfig {
        max_seq_len: 64,
        seed,
        ..BackboneConfig::default()
    };

    for mode_name in &modes {
        let mode: TrainMode = mode_name.parse().unwrap();
        let cfg = TrainConfig {
            epochs,
            learning_rate: lr,
            seed,
            mode,
            ..TrainConfig::default()
        };
        let t0 = std::time::Instant::now();
        let out = train(train_set, &vocab, &backbone, &cfg).unwrap();
        let train_time = t0.elapsed().as_secs_f64();

        let dev_preds = predict_dataset(&out.model, mode, dev_set, &vocab).unwrap();
        let probe_preds =
            predict_dataset(&out.model, mode, &probe_instances, &vocab).unwrap();
        let report = evaluate(dev_set, &dev_preds, &probe, &probe_preds, &vocab).unwrap();

        println!("=== mode {mode_name} seed {seed} lr {lr} epochs {epochs} n {n_train} ===");
        println!(
            "train {train_time:.1}s; snapshot para {:.3} sent {:.3} type {:.3} span {:.3}",
            out.report.final_snapshot.para_accuracy,
            out.report.final_snapshot.sent_accuracy,
            out.report.final_snapshot.type_accuracy,
            out.report.final_snapshot.span_accuracy,
        );
        for (i, e) in out.report.epochs.iter().enumerate() {
            println!(
                "  epoch {i}: total {:.4} start {:.3} end {:.3} sent {:.3} para {:.3} type {:.3}",
                e.total, e.start, e.end, e.sent, e.para, e.type_loss
            );
        }
        print!("{}", render_table(&report));
    }
}
