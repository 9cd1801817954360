//! Trains on a synthetic corpus and compares against the random-policy and
//! fixed-center baselines.
//!
//! `cargo run --release --example benchmark -- [iterations] [seed]`

use std::time::Instant;

use bar_core::corpus::{generate_synthetic, split, CorpusConfig};
use bar_core::inference::{evaluate, EvalPolicy, InferenceConfig, DEFAULT_THRESHOLDS};
use bar_core::model::{BarModel, ModelConfig};
use bar_core::trainer::{Phase, TrainConfig, Trainer};

fn main() -> bar_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(6000);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let corpus = generate_synthetic(&CorpusConfig { seed, ..CorpusConfig::default() })?;
    let (train, test) = split(&corpus, 500.0 / 600.0, seed)?;
    let model = BarModel::new(ModelConfig { init_seed: seed, ..ModelConfig::default() })?;
    let cfg = TrainConfig {
        total_iterations: iterations,
        seed,
        eval_every: 500,
        half_period: std::env::var("HALF").ok().and_then(|s| s.parse().ok()).unwrap_or(500),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, cfg)?;
    let start = Instant::now();
    let (mut rank_loss, mut a2c_loss, mut reward, mut n_rank, mut n_a2c) = (0.0, 0.0, 0.0, 0, 0);
    trainer.train(&train, Some(&test), |r| {
        match r.phase {
            Phase::Rank => {
                rank_loss += r.loss;
                n_rank += 1;
            }
            _ => {
                a2c_loss += r.loss;
                reward += r.mean_reward.unwrap_or(0.0);
                n_a2c += 1;
            }
        }
        if let Some(e) = &r.eval {
            println!(
                "it {:>5} {:>6.1}s rank {:.4} a2c {:.4} reward {:+.3} | tIoU@0.5 {:.3} mean {:.3}",
                r.iteration + 1,
                start.elapsed().as_secs_f64(),
                rank_loss / n_rank.max(1) as f64,
                a2c_loss / n_a2c.max(1) as f64,
                reward / n_a2c.max(1) as f64,
                e.tiou_05,
                e.mean_tiou
            );
            (rank_loss, a2c_loss, reward, n_rank, n_a2c) = (0.0, 0.0, 0.0, 0, 0);
        }
        Ok(())
    })?;

    let inf = InferenceConfig::default();
    for (name, policy) in [
        ("trained", EvalPolicy::Greedy),
        ("random", EvalPolicy::Uniform { seed: 99 }),
        ("center", EvalPolicy::FixedInitial),
    ] {
        let r = evaluate(&trainer.model, &test, &inf, &DEFAULT_THRESHOLDS, policy, 1)?;
        println!(
            "{name:>8}: @0.3 {:.3} @0.5 {:.3} @0.7 {:.3} mean {:.3}",
            r.recall_at(0.3).unwrap(),
            r.recall_at(0.5).unwrap(),
            r.recall_at(0.7).unwrap(),
            r.mean_tiou
        );
    }
    Ok(())
}
