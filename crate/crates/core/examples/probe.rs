// Scratch harness for tuning the synthetic-suite hyperparameters.
use olora_core::tasks::gen_synthetic_suite;
use olora_core::trainer::{continual_train, HostShape, Strategy, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let n_per: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(160);
    let d_model: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(32);
    let strategies: Vec<Strategy> = match args.get(5).map(String::as_str) {
        Some("seqft") => vec![Strategy::SeqFt],
        Some("olora") => vec![Strategy::Olora],
        _ => vec![Strategy::Olora, Strategy::IncLora, Strategy::SeqLora],
    };
    let show_log = args.get(6).map(String::as_str) == Some("log");

    let host = HostShape {
        d_model,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: 48,
    };
    for strategy in strategies {
        let mut aas = Vec::new();
        for seed in [1u64, 2, 3] {
            let suite = gen_synthetic_suite(3, n_per, seed).unwrap();
            let momentum: f64 = std::env::var("PROBE_MOMENTUM")
                .ok()
                .and_then(|s| s.parse().ok())
                .unwrap_or(0.9);
            let rank: usize = std::env::var("PROBE_RANK")
                .ok()
                .and_then(|s| s.parse().ok())
                .unwrap_or(4);
            let cfg = TrainConfig {
                lambda1: 0.5,
                lr,
                momentum,
                epochs,
                batch_size: 8,
                rank,
                seed,
                strategy,
                ..Default::default()
            };
            let t0 = std::time::Instant::now();
            let out = continual_train::<f32>(&suite, host, &cfg).unwrap();
            let dt = t0.elapsed().as_secs_f64();
            if show_log && seed == 1 {
                for row in &out.train_log {
                    println!(
                        "  task {} epoch {}: nll {:.4} orth {:.2e}",
                        row.task_id, row.epoch, row.nll, row.orth_loss
                    );
                }
            }
            println!(
                "{strategy:>8} seed {seed}: acc {:?} AA {:.3} orth {:?} ({dt:.1}s)",
                out.report
                    .acc
                    .iter()
                    .map(|r| r.iter().map(|a| (a * 100.0).round() / 100.0).collect::<Vec<_>>())
                    .collect::<Vec<_>>(),
                out.report.average_accuracy,
                out.report
                    .per_task_orth_loss
                    .iter()
                    .map(|v| format!("{v:.2e}"))
                    .collect::<Vec<_>>(),
            );
            aas.push(out.report.average_accuracy);
        }
        let mean = aas.iter().sum::<f64>() / aas.len() as f64;
        println!("{strategy:>8} mean AA {mean:.3}\n");
    }
}
