//! Trains the default model on the default synthetic split and prints the
//! test report. `STAGES`, `LR`, `MOMENTUM`, `ITERS` and `WARMUP` override the
//! defaults; `PRED=dir` dumps image, ground truth and prediction for the
//! first 20 test images.
//!
//!     cargo run --release --example reference_run

use std::time::Instant;

use lesioncascade::data::{generate_synthetic, tensor_to_rgb, SynthConfig};
use lesioncascade::model::ModelConfig;
use lesioncascade::train::{evaluate, init_model, train, TrainConfig};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let synth = SynthConfig::default();
    let train_set = generate_synthetic(&synth)?;
    let test_set = generate_synthetic(&SynthConfig {
        count_per_class: 25,
        stream: synth.stream + 1,
        ..synth.clone()
    })?;

    let defaults = TrainConfig::default();
    let model = ModelConfig {
        stages: env("STAGES", 3),
        ..ModelConfig::default()
    };
    let config = TrainConfig {
        base_lr: env("LR", defaults.base_lr),
        momentum: env("MOMENTUM", defaults.momentum),
        max_iters: env("ITERS", defaults.max_iters),
        warmup_iters: env("WARMUP", defaults.warmup_iters),
        ..defaults
    };
    let (net, mut store) = init_model(&model, config.seed)?;
    let started = Instant::now();
    train(&net, &mut store, &train_set, Some(&test_set), &config)?;
    let test = evaluate(&net, &store, &test_set, 512)?;
    let fit = evaluate(&net, &store, &train_set, 512)?;
    print!("{}", test.report.to_csv());
    println!("train JA {:.4}", fit.report.seg.ja);
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());

    if let Ok(dir) = std::env::var("PRED") {
        std::fs::create_dir_all(&dir)?;
        for (s, p) in test_set.iter().zip(&test.predictions).take(20) {
            tensor_to_rgb(&s.image)?.save(format!("{dir}/{}_image.png", s.id))?;
            s.mask.save(format!("{dir}/{}_truth.png", s.id).as_ref())?;
            p.mask.save(format!("{dir}/{}_pred.png", s.id).as_ref())?;
        }
    }
    Ok(())
}
