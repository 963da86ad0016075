//! Trains baseline and cipher-augmented systems on the synthetic task and
//! prints dev BLEU per seed.
//!
//! `cargo run --release --example toy_experiment -- [steps] [seeds]`

use std::time::Instant;

use cipherdaug::cipher::CipherKey;
use cipherdaug::losses::LossConfig;
use cipherdaug::model::ModelConfig;
use cipherdaug::synthetic::{generate, run_toy_system, ToyTaskConfig};
use cipherdaug::trainer::{Mode, RecordKind, TrainConfig};
use cipherdaug::Execution;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let merges: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(300);
    let env = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let beta = env("BETA", 5.0);
    let task = generate(&ToyTaskConfig {
        nouns: env("NOUNS", 150.0) as usize,
        train_pairs: env("TRAIN", 2000.0) as usize,
        ..Default::default()
    });
    let model = ModelConfig {
        layers: env("LAYERS", 1.0) as usize,
        heads: 2,
        embed_dim: env("DIM", 32.0) as usize,
        ffn_dim: 2 * env("DIM", 32.0) as usize,
        dropout: env("DROPOUT", 0.1),
        attention_dropout: 0.0,
        vocab_size: 0,
        max_len: 64,
        seed: 1,
        tie_output: false,
    };
    for seed in 1..=seeds {
        for (name, mode, keys, beta) in [
            ("baseline", Mode::Baseline, vec![], 0.0),
            ("cipherdaug", Mode::Cipherdaug, vec![CipherKey(1), CipherKey(2)], beta),
        ] {
            let t = Instant::now();
            let mut m = model.clone();
            m.seed = seed;
            let tc = TrainConfig {
                peak_lr: env("LR", 2e-3),
                warmup_steps: 100,
                max_steps: steps,
                validate_every: steps / 6,
                log_every: steps / 12,
                batch_tokens: 400,
                seed,
                mode,
                patience: 100,
                dev_bleu: std::env::var("DEV_BLEU").is_ok(),
                ..Default::default()
            };
            let lc = LossConfig {
                beta,
                agreement_warmup_steps: steps / 6,
                ..Default::default()
            };
            let run = run_toy_system(&task, &keys, merges, &m, &tc, &lc, Execution::Parallel).unwrap();
            let agree: Vec<String> = run
                .log
                .iter()
                .filter(|r| r.kind == RecordKind::Train)
                .map(|r| format!("{:.3}", r.loss.agreement))
                .collect();
            let nll: Vec<String> = run
                .log
                .iter()
                .filter(|r| r.kind == RecordKind::Train)
                .map(|r| format!("{:.2}/{:.2}", r.loss.anchor_nll, r.loss.cipher_nll))
                .collect();
            let dev: Vec<String> = run
                .log
                .iter()
                .filter(|r| r.kind == RecordKind::Dev)
                .map(|r| format!("{:.2}/{:.1}", r.dev_nll.unwrap_or(0.0), r.dev_bleu.unwrap_or(0.0)))
                .collect();
            println!("  dev {}", dev.join(" "));
            println!(
                "seed {seed} {name:<10} bleu {:6.2} vocab {} {:.0}s\n  nll {}\n  agree {}",
                run.dev_bleu,
                run.vocab_size,
                t.elapsed().as_secs_f64(),
                nll.join(" "),
                agree.join(" ")
            );
        }
    }
}
