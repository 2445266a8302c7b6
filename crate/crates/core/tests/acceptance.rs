//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::f64::consts::SQRT_2;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use qformer::analysis::{export_quads, head_scales, window_distances};
use qformer::attention::{quadrangle_attention, window_attention, AttentionConfig, AttentionParams, Linear};
use qformer::flops;
use qformer::gradcheck::{self, MODEL_TOLERANCE, OP_TOLERANCE};
use qformer::model::{self, Model, ModelConfig};
use qformer::quad::{build_transform, project_coords, reg_loss, QuadHead, RegConfig};
use qformer::synth::{self, Split, SynthSpec};
use qformer::train::{self, TrainConfig};
use qformer::windowing::{centers, merge, padded_extent, partition, relative_offsets};
use qformer::{DenseArray, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn random_params(tape: &mut Tape, c: usize, heads: usize, quad_bias: Vec<f64>, rng: &mut ChaCha8Rng) -> AttentionParams {
    let mut lin = |tape: &mut Tape| Linear {
        weight: tape.leaf(DenseArray::randn(vec![c, c], 0.5, rng)),
        bias: Some(tape.leaf(DenseArray::randn(vec![c], 0.1, rng))),
    };
    let (q, k, v, o) = (lin(tape), lin(tape), lin(tape), lin(tape));
    let quad = Some(QuadHead {
        weight: tape.leaf(DenseArray::zeros(vec![c, 9 * heads])),
        bias: tape.leaf(DenseArray::new(vec![9 * heads], quad_bias).unwrap()),
    });
    AttentionParams { q, k, v, o, rel_pos_bias: None, quad }
}

fn attn_cfg(heads: usize, window: usize, keep_probs: bool) -> AttentionConfig {
    AttentionConfig {
        heads,
        window,
        reg: RegConfig::new(1.0).unwrap(),
        keep_probs,
    }
}

fn identity_reduction() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (b, h, w) = (rng.gen_range(1..3), rng.gen_range(3..10), rng.gen_range(3..10));
        let (heads, win) = (rng.gen_range(1..4), rng.gen_range(2..4));
        let c = heads * rng.gen_range(2..5);
        let mut tape = Tape::new();
        let p = random_params(&mut tape, c, heads, vec![0.0; 9 * heads], &mut rng);
        let x = tape.constant(DenseArray::randn(vec![b, h, w, c], 1.0, &mut rng));
        let a = window_attention(&mut tape, x, &p, &attn_cfg(heads, win, false)).unwrap();
        let q = quadrangle_attention(&mut tape, x, &p, &attn_cfg(heads, win, false)).unwrap();
        worst = worst.max(tape.value(a.features).max_abs_diff(tape.value(q.features)));
    }
    // whole models without position terms: zero-head QA against its window twin
    for (i, base) in [ModelConfig::micro_hierarchical(), ModelConfig::micro_plain()].into_iter().enumerate() {
        let cfg = ModelConfig { cpe: false, ..base };
        let m = Model::new(cfg, i as u64).unwrap();
        let twin = m.window_twin().unwrap();
        let x = DenseArray::randn(vec![2, 32, 32, 1], 1.0, &mut rng);
        worst = worst.max(m.predict(&x).unwrap().max_abs_diff(&twin.predict(&x).unwrap()));
    }
    let t = start.elapsed();
    verdict(
        worst < 1e-10 && t < Duration::from_secs(10),
        format!("20 attention inputs + 2 models, max |QA − window| = {worst:.2e} (< 1e-10), {}", secs(t)),
    )
}

fn oracle_transform(t: &[f64], b1: f64, b2: f64) -> Matrix3<f64> {
    let (s, c) = t[4].sin_cos();
    let scale = Matrix3::new(1.0 + t[0], 0.0, 0.0, 0.0, 1.0 + t[1], 0.0, 0.0, 0.0, 1.0);
    let shear = Matrix3::new(1.0, t[2], 0.0, t[3], 1.0, 0.0, 0.0, 0.0, 1.0);
    let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    let trans = Matrix3::new(1.0, 0.0, b1 * t[5], 0.0, 1.0, b2 * t[6], 0.0, 0.0, 1.0);
    let proj = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, t[7], t[8], 1.0);
    scale * shear * rot * trans * proj
}

fn geometry_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (gh, gw, w) = (3usize, 4usize, 3usize);
    let cs = centers(gh * w, gw * w, w);
    let rel = relative_offsets(w);
    let mut ts = Vec::with_capacity(1000 * 9);
    while ts.len() < 1000 * 9 {
        let t: Vec<f64> = (0..9)
            .map(|i| rng.gen_range(-1.0..1.0) * if i >= 7 { 0.05 } else { 0.6 })
            .collect();
        // keep w = 1 + t7·x + t8·y away from zero for every offset
        let m = oracle_transform(&t, gw as f64, gh as f64);
        if rel.iter().all(|r| (m * Vector3::new(r[0], r[1], 1.0)).z.abs() > 0.2) {
            ts.extend(t);
        }
    }
    let mut tape = Tape::new();
    let n = 1000 / (gh * gw);
    let used = n * gh * gw;
    let tv = tape.leaf(DenseArray::new(vec![1, gh * gw, n, 9], ts[..used * 9].to_vec()).unwrap());
    let tm = build_transform(&mut tape, tv, gw as f64, gh as f64).unwrap();
    let q = project_coords(&mut tape, tm, &cs).unwrap();
    let (md, qd) = (tape.value(tm).data(), tape.value(q).data());
    let mut worst_t = 0.0f64;
    let mut worst_q = 0.0f64;
    let mut check = |t: &[f64], ours_t: &[f64], ours_q: Option<&[f64]>, center: [f64; 2]| {
        let o = oracle_transform(t, gw as f64, gh as f64);
        for i in 0..9 {
            worst_t = worst_t.max((ours_t[i] - o[(i / 3, i % 3)]).abs());
        }
        for (pi, r) in rel.iter().enumerate() {
            let h = o * Vector3::new(r[0], r[1], 1.0);
            let want = [h.x / h.z + center[0], h.y / h.z + center[1]];
            let got = match ours_q {
                Some(qd) => [qd[2 * pi], qd[2 * pi + 1]],
                None => {
                    let m = qformer::quad::compose_transform(t, gw as f64, gh as f64);
                    let p = qformer::quad::project_point(&m, *r);
                    [p[0] + center[0], p[1] + center[1]]
                }
            };
            worst_q = worst_q.max((got[0] - want[0]).abs()).max((got[1] - want[1]).abs());
        }
    };
    let p = rel.len();
    for k in 0..used {
        let t = &ts[k * 9..k * 9 + 9];
        let c = cs.centers[k / n];
        check(t, &md[k * 9..k * 9 + 9], Some(&qd[k * p * 2..(k + 1) * p * 2]), c);
    }
    for k in used..1000 {
        let t = &ts[k * 9..k * 9 + 9];
        let m = qformer::quad::compose_transform(t, gw as f64, gh as f64);
        let flat: Vec<f64> = m.iter().flatten().copied().collect();
        check(t, &flat, None, [5.5, 2.5]);
    }
    let elapsed = start.elapsed();
    verdict(
        worst_t < 1e-12 && worst_q < 1e-12 && elapsed < Duration::from_secs(5),
        format!(
            "1000 random t, max |ΔT| = {worst_t:.2e}, max |Δcoord| = {worst_q:.2e} (< 1e-12), {}",
            secs(elapsed)
        ),
    )
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let ops = gradcheck::check_ops(None, 0).unwrap();
    let model = gradcheck::check_model(gradcheck::model_check_config(), 0, 5).unwrap();
    let t = start.elapsed();
    let worst_op = ops.iter().fold(0.0f64, |m, r| m.max(r.worst_rel_err));
    let worst_model = model.iter().fold(0.0f64, |m, r| m.max(r.worst_rel_err));
    let failed: Vec<&str> = ops.iter().chain(&model).filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let required = ["grid_sample_feature", "grid_sample_coords", "project_coords_wrt_t"];
    let covered = required.iter().all(|n| ops.iter().any(|r| r.name == *n));
    let checked: usize = model.iter().map(|r| r.checked).sum();
    verdict(
        failed.is_empty() && covered && checked == 5 && t < Duration::from_secs(120),
        format!(
            "{} op cases worst rel err {worst_op:.2e} (< {OP_TOLERANCE:e}); model {checked} params worst {worst_model:.2e} (< {MODEL_TOLERANCE:e}); failed [{}]; {}",
            ops.len(),
            failed.join(", "),
            secs(t)
        ),
    )
}

fn regularization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = (7usize, 9usize);
    let reg = RegConfig::new(1.0).unwrap();

    // fully inside: every coordinate in [0, w−1] × [0, h−1]
    let mut inside_zero = true;
    for _ in 0..20 {
        let d: Vec<f64> = (0..2 * 3 * 2 * 9 * 2)
            .map(|i| if i % 2 == 0 { rng.gen_range(0.0..=8.0) } else { rng.gen_range(0.0..=6.0) })
            .collect();
        let mut tape = Tape::new();
        let c = tape.constant(DenseArray::new(vec![2, 3, 2, 9, 2], d).unwrap());
        let l = reg_loss(&mut tape, c, h, w, reg).unwrap();
        inside_zero &= tape.value(l).item() == 0.0;
    }

    // x = 12 on a 9-wide map normalizes to 2
    let mut tape = Tape::new();
    let c = tape.constant(DenseArray::new(vec![1, 1, 1, 1, 2], vec![12.0, 3.0]).unwrap());
    let l = reg_loss(&mut tape, c, h, w, reg).unwrap();
    let at_two = tape.value(l).item();

    let mut sign_ok = 0;
    for _ in 0..100 {
        let d: Vec<f64> = (0..2 * 4 * 2).map(|_| rng.gen_range(-12.0..20.0)).collect();
        let mut tape = Tape::new();
        let c = tape.leaf(DenseArray::new(vec![1, 1, 2, 4, 2], d.clone()).unwrap());
        let l = reg_loss(&mut tape, c, h, w, RegConfig::new(rng.gen_range(0.1..3.0)).unwrap()).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(c).unwrap().data().to_vec();
        let ok = d.iter().zip(&g).enumerate().all(|(i, (v, gi))| {
            let extent = if i % 2 == 0 { w } else { h };
            let hi = (extent - 1) as f64;
            if *v > hi {
                *gi > 0.0
            } else if *v < 0.0 {
                *gi < 0.0
            } else {
                *gi == 0.0
            }
        });
        sign_ok += ok as usize;
    }
    verdict(
        inside_zero && at_two == 2.0 && sign_ok == 100,
        format!("inside ⇒ L_reg = 0: {inside_zero}; u = 2, λ = 1 ⇒ {at_two}; gradient signs correct in {sign_ok}/100 cases"),
    )
}

fn complexity() -> Verdict {
    let single_map = |r: &flops::FlopsReport| {
        let half: u64 = r.blocks.iter().filter_map(|b| b.quad).map(|q| q.sampling / 2).sum();
        (r.qa_extra_flops - half) as f64 / r.total_flops as f64
    };
    let plain = ModelConfig::preset("qformer-p-b").unwrap();
    let pb = flops::count(&plain, (224, 224));
    let mut ok = pb.ratio <= 0.001 && pb.closed_form_rel_diff <= 0.02;
    let mut detail = format!(
        "plain-B ratio {:.5} (≤ 0.001), with CPE {:.5}, one sampled map {:.5}, closed-form diff {:.2}% (≤ 2%)",
        pb.ratio,
        pb.ratio_with_cpe,
        single_map(&pb),
        100.0 * pb.closed_form_rel_diff
    );
    for name in ModelConfig::SHIPPED {
        let cfg = ModelConfig::preset(name).unwrap();
        let r = flops::count(&cfg, (cfg.image_size, cfg.image_size));
        ok &= r.ratio <= 0.05 && r.closed_form_rel_diff <= 0.02;
        detail += &format!(
            "; {name} ratio {:.4} (≤ 0.05), one map {:.4}, closed-form diff {:.2}%",
            r.ratio,
            single_map(&r),
            100.0 * r.closed_form_rel_diff
        );
    }
    verdict(ok, detail)
}

fn comparative_training() -> Verdict {
    let start = Instant::now();
    let mut qa_best = Vec::new();
    let mut twin_best = Vec::new();
    let mut engaged = Vec::new();
    let mut per_seed = Vec::new();
    let base = TrainConfig::default();
    let (train_set, test_set) = base.datasets().unwrap();
    let probe: Vec<usize> = (0..64).collect();
    let (probe_x, _) = test_set.batch(&probe);
    for seed in 0..3u64 {
        let mut outcomes = Vec::new();
        for freeze_quad in [false, true] {
            let cfg = TrainConfig {
                seed,
                freeze_quad,
                ..base.clone()
            };
            let init = Model::new(cfg.model_config().unwrap(), seed).unwrap();
            outcomes.push(train::train(&cfg, init, &train_set, &test_set, None).unwrap());
        }
        let (qa, twin) = (&outcomes[0], &outcomes[1]);
        let scales = head_scales(&export_quads(&qa.last, &probe_x).unwrap());
        let widest = scales.iter().map(|s| s.deviation()).fold(0.0f64, f64::max);
        engaged.push(widest > 0.05);
        qa_best.push(qa.best_test_acc());
        twin_best.push(twin.best_test_acc());
        per_seed.push(format!(
            "seed {seed}: QA best {:.3} final {:.3}, twin best {:.3} final {:.3}, max |scale − 1| {widest:.3}",
            qa.best_test_acc(),
            qa.history.last().unwrap().test_acc,
            twin.best_test_acc(),
            twin.history.last().unwrap().test_acc
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (qa, twin) = (mean(&qa_best), mean(&twin_best));
    let t = start.elapsed();
    for line in &per_seed {
        println!("       {line}");
    }
    verdict(
        qa >= twin - 0.01 && engaged.iter().all(|e| *e) && t < Duration::from_secs(1800),
        format!(
            "micro-h, {} epochs, 3 seeds: mean best test acc QA {qa:.4} vs twin {twin:.4} (≥ twin − 0.01); scale engaged {engaged:?}; {}",
            base.epochs,
            secs(t)
        ),
    )
}

fn attention_distance() -> Verdict {
    // scale-2 quadrangles, uniform attention (zero query weights), w = 2
    let (w, c, heads) = (2usize, 4usize, 2usize);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::new();
    let mut bias = vec![0.0; 9 * heads];
    for h in 0..heads {
        bias[9 * h] = 1.0;
        bias[9 * h + 1] = 1.0;
    }
    let mut p = random_params(&mut tape, c, heads, bias, &mut rng);
    p.q = Linear {
        weight: tape.constant(DenseArray::zeros(vec![c, c])),
        bias: None,
    };
    let x = tape.constant(DenseArray::randn(vec![1, 8, 8, c], 1.0, &mut rng));
    let out = quadrangle_attention(&mut tape, x, &p, &attn_cfg(heads, w, true)).unwrap();
    let probs = tape.value(out.attn_probs.unwrap()).data().to_vec();
    let coords = tape.value(out.quad_coords.unwrap()).data().to_vec();
    let cs = centers(8, 8, w);
    let rel = relative_offsets(w);
    let pp = rel.len();
    let mut dists = Vec::new();
    for (k, chunk) in coords.chunks(pp * 2).enumerate() {
        let center = cs.centers[k / heads];
        let keys: Vec<[f64; 2]> = chunk.chunks(2).map(|v| [v[0], v[1]]).collect();
        let queries: Vec<[f64; 2]> = rel.iter().map(|r| [center[0] + r[0], center[1] + r[1]]).collect();
        dists.extend(window_distances(&probs[k * pp * pp..(k + 1) * pp * pp], &queries, &keys));
    }
    let qa_mean = dists.iter().sum::<f64>() / dists.len() as f64;
    let bound2 = (w - 1) as f64 * SQRT_2;

    let mut worst_ratio = 0.0f64;
    for _ in 0..1000 {
        let win = rng.gen_range(2..5);
        let heads = rng.gen_range(1..3);
        let c = heads * 2;
        let (h, wd) = (rng.gen_range(win..2 * win + 1), rng.gen_range(win..2 * win + 1));
        let mut tape = Tape::new();
        let p = random_params(&mut tape, c, heads, vec![0.0; 9 * heads], &mut rng);
        let x = tape.constant(DenseArray::randn(vec![1, h, wd, c], 2.0, &mut rng));
        let out = window_attention(&mut tape, x, &p, &attn_cfg(heads, win, true)).unwrap();
        let probs = tape.value(out.attn_probs.unwrap()).data().to_vec();
        let lattice: Vec<[f64; 2]> = (0..win * win).map(|i| [(i % win) as f64, (i / win) as f64]).collect();
        let pp = win * win;
        for window in probs.chunks(pp * pp) {
            for d in window_distances(window, &lattice, &lattice) {
                worst_ratio = worst_ratio.max(d / ((win - 1) as f64 * SQRT_2));
            }
        }
    }
    verdict(
        qa_mean > bound2 && worst_ratio <= 1.0 + 1e-12,
        format!(
            "scale-2 QA mean distance {qa_mean:.4} > (w−1)√2 = {bound2:.4} at w = 2; 1000 random window trials reach at most {worst_ratio:.4} of the bound"
        ),
    )
}

fn round_trips() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut exact = 0;
    let mut padded = 0;
    for _ in 0..50 {
        let (b, h, w, c, win) = (
            rng.gen_range(1..3),
            rng.gen_range(1..15),
            rng.gen_range(1..15),
            rng.gen_range(1..5),
            rng.gen_range(1..8),
        );
        let x = DenseArray::randn(vec![b, h, w, c], 1.0, &mut rng);
        let g = partition(&x, win).unwrap();
        padded += (padded_extent(h, win) != h || padded_extent(w, win) != w) as usize;
        exact += (merge(&g, h, w).unwrap() == x) as usize;
    }

    let dir = tempfile::tempdir().unwrap();
    let mut ckpt_ok = true;
    for (i, cfg) in [ModelConfig::micro_hierarchical(), ModelConfig::micro_plain()].into_iter().enumerate() {
        let mut m = Model::new(cfg, 10 + i as u64).unwrap();
        for (_, p) in m.params_mut().iter_mut() {
            *p = DenseArray::randn(p.shape().to_vec(), 0.1, &mut rng);
        }
        let path = dir.path().join(format!("m{i}.ckpt"));
        model::save(&m, &path).unwrap();
        let back = model::load(&path).unwrap();
        let bits = |m: &Model| -> Vec<u64> { m.params().values().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect() };
        let again = dir.path().join(format!("m{i}b.ckpt"));
        model::save(&back, &again).unwrap();
        ckpt_ok &= bits(&m) == bits(&back)
            && back.config() == m.config()
            && std::fs::read(&path).unwrap() == std::fs::read(&again).unwrap();
    }

    let spec = SynthSpec {
        train_count: 200,
        test_count: 50,
        ..SynthSpec::default()
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth::write_dataset(&spec, &a).unwrap();
    synth::write_dataset(&spec, &b).unwrap();
    let same_files = ["train.bin", "test.bin"]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    let same_sum = synth::generate(&spec, Split::Train).unwrap().checksum()
        == synth::generate(&spec, Split::Train).unwrap().checksum();
    verdict(
        exact == 50 && padded > 0 && ckpt_ok && same_files && same_sum,
        format!(
            "partition/merge exact on {exact}/50 shapes ({padded} padded); checkpoint bit-exact {ckpt_ok}; dataset bytes reproducible {}",
            same_files && same_sum
        ),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 8] = [
        ("identity reduction", identity_reduction),
        ("geometry oracle", geometry_oracle),
        ("gradient suite", gradient_suite),
        ("regularization", regularization),
        ("complexity", complexity),
        ("comparative training", comparative_training),
        ("attention distance", attention_distance),
        ("round trips", round_trips),
    ];
    let only: Option<usize> = std::env::var("QFORMER_CRITERION").ok().and_then(|s| s.parse().ok());
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let v = f();
        println!("{} {n} {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        if !v.passed {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
