//! CaNet vs. ERM on a planted-environment dataset.
//!
//! ```text
//! cargo run --release --example planted_benchmark -- [seeds] [epochs]
//! ```
//!
//! `PLANTED` and `TRAIN` may hold JSON objects overriding the generator
//! defaults and the training settings below, e.g. `TRAIN='{"tau": 3.0}'`.

use std::time::Instant;

use canet::model::Method;
use canet::shiftgen::{gen_planted_dataset, PlantedConfig};
use canet::trainer::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(150);
    let env_json = |key: &str| std::env::var(key).unwrap_or_else(|_| "{}".into());
    let planted: PlantedConfig = serde_json::from_str(&env_json("PLANTED"))?;
    let data = gen_planted_dataset(&planted)?;
    let mut settings = serde_json::json!({ "lambda": 0.5, "lr": 0.005 });
    let overrides: serde_json::Value = serde_json::from_str(&env_json("TRAIN"))?;
    if let (Some(s), Some(o)) = (settings.as_object_mut(), overrides.as_object()) {
        s.extend(o.clone());
    }
    let mut base: TrainConfig = serde_json::from_value(settings)?;
    base.epochs = epochs;
    let erm = TrainConfig {
        model: canet::model::ModelConfig {
            method: Method::Erm,
            ..base.model.clone()
        },
        ..base.clone()
    };
    let no_reg = TrainConfig {
        no_reg_loss: true,
        ..base.clone()
    };
    for (name, cfg) in [("canet", &base), ("erm", &erm), ("canet-no-reg", &no_reg)] {
        let (mut id, mut ood) = (0.0, 0.0);
        let start = Instant::now();
        for seed in 0..seeds {
            let r = train(&data, &TrainConfig { seed, ..cfg.clone() })?;
            id += r.metrics.test_id.value;
            ood += r.metrics.ood_mean.unwrap_or(f64::NAN);
            eprintln!(
                "{name} seed {seed}: id {:.4} ood {:?} epoch {}",
                r.metrics.test_id.value,
                r.metrics.ood.iter().map(|m| (m.value * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                r.selected_epoch
            );
        }
        let n = seeds as f64;
        println!(
            "{name:>14}: id {:.4} ood {:.4} ({:.1}s)",
            id / n,
            ood / n,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
