//! The oriented-bars dataset: one ASCII rendering per class.

use qformer::synth::{self, Split, SynthSpec};

fn main() -> qformer::Result<()> {
    let spec = SynthSpec {
        train_count: 200,
        test_count: 40,
        ..SynthSpec::default()
    };
    let n = spec.image_size;
    for index in 0..spec.num_classes {
        let (img, label) = synth::sample(&spec, Split::Train, index);
        println!("sample {index}, label {label}, bin centre {:.0}°", spec.bin_angle(label as usize).to_degrees());
        for y in (0..n).step_by(2) {
            let row: String = (0..n)
                .map(|x| match img[y * n + x] {
                    v if v > 0.66 => '#',
                    v if v > 0.33 => '+',
                    v if v > 0.1 => '.',
                    _ => ' ',
                })
                .collect();
            println!("  |{row}|");
        }
    }
    let train = synth::generate(&spec, Split::Train)?;
    println!("train split: {} images, sha256 {}", train.len(), train.checksum());
    Ok(())
}
