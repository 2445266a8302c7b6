//! Analytic FLOP counts: how much quadrangle attention adds to each preset.

use qformer::flops;
use qformer::model::ModelConfig;

fn main() {
    println!("{}\n", flops::CONVENTION);
    println!("{:<16} {:>10} {:>14} {:>10} {:>12} {:>14}", "config", "input", "GFLOPs", "QA extra", "with CPE", "closed form Δ");
    for name in ModelConfig::PRESETS {
        let cfg = ModelConfig::preset(name).expect("preset");
        let r = flops::count(&cfg, (cfg.image_size, cfg.image_size));
        println!(
            "{name:<16} {:>10} {:>14.3} {:>9.3}% {:>11.3}% {:>13.1}%",
            format!("{}x{}", r.input.0, r.input.1),
            r.total_flops as f64 / 1e9,
            100.0 * r.ratio,
            100.0 * r.ratio_with_cpe,
            100.0 * r.closed_form_rel_diff
        );
    }

    let cfg = ModelConfig::preset("qformer-h-t").expect("preset");
    let r = flops::count(&cfg, (224, 224));
    println!("\nqformer-h-t, first block:");
    println!("{}", serde_json::to_string_pretty(&r.blocks[0]).expect("serializable"));
}
