//! Learned quadrangles and attention distances of a briefly trained model.

use qformer::analysis::{attention_distance, export_quads, head_scales};
use qformer::model::Model;
use qformer::synth::SynthSpec;
use qformer::train::{self, TrainConfig};

fn main() -> qformer::Result<()> {
    let cfg = TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        synth: SynthSpec {
            train_count: 600,
            test_count: 100,
            ..SynthSpec::default()
        },
        ..TrainConfig::default()
    };
    let (train_set, test_set) = cfg.datasets()?;
    let init = Model::new(cfg.model_config()?, cfg.seed)?;
    let twin = init.window_twin()?;
    let trained = train::train(&cfg, init, &train_set, &test_set, None)?.last;

    let (x, _) = test_set.batch(&(0..32).collect::<Vec<_>>());
    let quads = export_quads(&trained, &x)?;
    println!("{} quadrangle records; first one:", quads.len());
    println!("{}", serde_json::to_string(&quads[0]).expect("serializable"));

    println!("\nmean scale per head:");
    for s in head_scales(&quads) {
        println!("  {:<20} head {}  sx {:.3}  sy {:.3}", s.layer, s.head, s.mean_scale[0], s.mean_scale[1]);
    }

    println!("\nattention distance (token pixels):");
    let window = attention_distance(&twin, &x)?;
    for (qa, w) in attention_distance(&trained, &x)?.iter().zip(&window) {
        println!("  {:<20} trained QA {:.3}   untrained window twin {:.3}", qa.layer, qa.mean, w.mean);
    }
    Ok(())
}
