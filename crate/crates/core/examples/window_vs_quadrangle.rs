//! Window attention against quadrangle attention on one random feature map.
//!
//! A zero prediction head reproduces window attention exactly; a head biased
//! toward scale 2 enlarges every key region and changes the output.

use qformer::attention::{quadrangle_attention, window_attention, AttentionConfig, AttentionParams, Linear};
use qformer::quad::{QuadHead, RegConfig};
use qformer::{DenseArray, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> qformer::Result<()> {
    let (c, heads, w) = (8, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let mut lin = |tape: &mut Tape| Linear {
        weight: tape.leaf(DenseArray::randn(vec![c, c], 0.4, &mut rng)),
        bias: None,
    };
    let (q, k, v, o) = (lin(&mut tape), lin(&mut tape), lin(&mut tape), lin(&mut tape));
    let x = tape.constant(DenseArray::randn(vec![1, 10, 12, c], 1.0, &mut rng));
    let cfg = AttentionConfig {
        heads,
        window: w,
        reg: RegConfig::new(1.0)?,
        keep_probs: false,
    };

    let head = |tape: &mut Tape, scale: f64| {
        let mut bias = vec![0.0; 9 * heads];
        for h in 0..heads {
            bias[9 * h] = scale - 1.0;
            bias[9 * h + 1] = scale - 1.0;
        }
        QuadHead {
            weight: tape.leaf(DenseArray::zeros(vec![c, 9 * heads])),
            bias: tape.leaf(DenseArray::new(vec![9 * heads], bias).expect("shape")),
        }
    };

    let base = AttentionParams { q, k, v, o, rel_pos_bias: None, quad: None };
    let window = window_attention(&mut tape, x, &base, &cfg)?;
    println!("10×12 map, {w}×{w} windows, padded to {:?}", window.padded);

    for scale in [1.0, 1.5, 2.0] {
        let p = AttentionParams {
            quad: Some(head(&mut tape, scale)),
            ..base
        };
        let qa = quadrangle_attention(&mut tape, x, &p, &cfg)?;
        let diff = tape.value(qa.features).max_abs_diff(tape.value(window.features));
        let reg = tape.value(qa.reg_loss.expect("quadrangle attention")).item();
        println!("scale {scale:.1}: max |QA − window| = {diff:.3e}, out-of-map penalty {reg:.3}");
    }
    Ok(())
}
