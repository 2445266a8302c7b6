//! Short paired run on the synthetic task: quadrangle attention against the
//! same initialization with its transforms frozen at the identity.
//!
//! `cargo run --release --example train -- 8` trains for 8 epochs.

use qformer::model::Model;
use qformer::synth::SynthSpec;
use qformer::train::{self, TrainConfig};

fn main() -> qformer::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let base = TrainConfig {
        epochs,
        warmup_epochs: 1,
        synth: SynthSpec {
            train_count: 800,
            test_count: 200,
            ..SynthSpec::default()
        },
        ..TrainConfig::default()
    };
    let (train_set, test_set) = base.datasets()?;
    for freeze_quad in [false, true] {
        let cfg = TrainConfig { freeze_quad, ..base.clone() };
        let model = Model::new(cfg.model_config()?, cfg.seed)?;
        println!("{}", if freeze_quad { "frozen twin" } else { "quadrangle attention" });
        let out = train::train(&cfg, model, &train_set, &test_set, None)?;
        for m in &out.history {
            println!(
                "  epoch {:>2}  lr {:.2e}  loss {:.3}  reg {:.4}  train acc {:.3}  test acc {:.3}",
                m.epoch, m.lr, m.train_loss, m.train_reg, m.train_acc, m.test_acc
            );
        }
        println!("  best test acc {:.3} at epoch {}", out.best_test_acc(), out.best_epoch);
    }
    Ok(())
}
