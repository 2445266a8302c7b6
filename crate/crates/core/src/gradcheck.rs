//! Central finite-difference checks of every differentiable operation and
//! of the full model loss.
//!
//! Each check reduces an operation's output to a scalar with a fixed random
//! weighting, `L = Σ out ⊙ R`, so every output element contributes. Inputs
//! near a kink of a piecewise-linear operation are redrawn.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::array::DenseArray;
use crate::attention::{self, AttentionConfig, AttentionParams, Linear};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{is_quad_param, BindMode, Model, ModelConfig};
use crate::quad::{self, QuadHead, RegConfig};
use crate::sample::bilinear_sample;
use crate::windowing::centers;

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
const REL_FLOOR: f64 = 1e-4;
const KINK_MARGIN: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, 1e-4)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub worst_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
}

type OpFn = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// One differentiable computation with its inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<DenseArray>,
    /// Inputs whose gradient is checked; the rest enter as constants.
    pub wrt: Vec<bool>,
    f: Box<OpFn>,
}

impl OpCase {
    fn new(
        name: &'static str,
        inputs: Vec<DenseArray>,
        f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        let wrt = vec![true; inputs.len()];
        Self {
            name,
            inputs,
            wrt,
            f: Box::new(f),
        }
    }

    fn wrt(mut self, wrt: &[bool]) -> Self {
        self.wrt = wrt.to_vec();
        self
    }
}

fn weighted_loss(tape: &mut Tape, out: Var, weights: &DenseArray) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let m = tape.mul(out, r)?;
    tape.sum(m)
}

fn eval_loss(case: &OpCase, inputs: &[DenseArray], weights: &DenseArray) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.constant(v.clone())).collect();
    let out = (case.f)(&mut tape, &vars)?;
    let l = weighted_loss(&mut tape, out, weights)?;
    Ok(tape.value(l).item())
}

/// Checks every element of every `wrt` input of `case`.
pub fn check_case(case: &OpCase, seed: u64) -> Result<CheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .zip(&case.wrt)
        .map(|(v, &g)| if g { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
        .collect();
    let out = (case.f)(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = DenseArray::randn(tape.shape(out).to_vec(), 1.0, &mut rng);
    let loss = weighted_loss(&mut tape, out, &weights)?;
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut inputs = case.inputs.clone();
    for (i, &g) in case.wrt.iter().enumerate() {
        if !g {
            continue;
        }
        let zeros = DenseArray::zeros(inputs[i].shape().to_vec());
        let analytic = tape.grad(vars[i]).unwrap_or(&zeros).clone();
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x0 + STEP;
            let lp = eval_loss(case, &inputs, &weights)?;
            inputs[i].data_mut()[j] = x0 - STEP;
            let lm = eval_loss(case, &inputs, &weights)?;
            inputs[i].data_mut()[j] = x0;
            let numeric = (lp - lm) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
            checked += 1;
        }
    }
    Ok(CheckReport {
        name: case.name.to_string(),
        worst_rel_err: worst,
        tolerance: OP_TOLERANCE,
        checked,
        passed: worst < OP_TOLERANCE,
    })
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseArray {
    DenseArray::randn(shape.to_vec(), 1.0, rng)
}

/// Draws `N(0, 1)` entries, redrawing any for which `bad` holds.
fn normal_avoiding(rng: &mut ChaCha8Rng, shape: &[usize], bad: impl Fn(f64) -> bool) -> DenseArray {
    let mut a = normal(rng, shape);
    for v in a.data_mut() {
        while bad(*v) {
            *v = rng.sample(rand_distr::StandardNormal);
        }
    }
    a
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DenseArray {
    DenseArray::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn near_integer(v: f64) -> bool {
    (v - v.round()).abs() < KINK_MARGIN
}

/// Coordinates in `[lo, hi)` at least the kink margin away from the lattice.
fn off_lattice(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DenseArray {
    let mut a = uniform(rng, shape, lo, hi);
    for v in a.data_mut() {
        while near_integer(*v) {
            *v = rng.gen_range(lo..hi);
        }
    }
    a
}

fn lin(v: &[Var], w: usize, b: usize) -> Linear {
    Linear {
        weight: v[w],
        bias: Some(v[b]),
    }
}

fn attention_inputs(rng: &mut ChaCha8Rng, c: usize, heads: usize, h: usize, w: usize) -> Vec<DenseArray> {
    let mut v = vec![normal(rng, &[1, h, w, c])];
    for _ in 0..4 {
        v.push(DenseArray::randn(vec![c, c], 0.4, rng));
        v.push(DenseArray::randn(vec![c], 0.1, rng));
    }
    // quad head: non-zero so sampling points leave the lattice
    v.push(DenseArray::randn(vec![c, 9 * heads], 0.15, rng));
    v.push(DenseArray::randn(vec![9 * heads], 0.05, rng));
    v
}

fn attention_params(v: &[Var], bias: Option<Var>) -> AttentionParams {
    AttentionParams {
        q: lin(v, 1, 2),
        k: lin(v, 3, 4),
        v: lin(v, 5, 6),
        o: lin(v, 7, 8),
        rel_pos_bias: bias,
        quad: Some(QuadHead {
            weight: v[9],
            bias: v[10],
        }),
    }
}

/// The operation suite, one case per differentiable op or gradient path.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = vec![
        OpCase::new("add", vec![normal(r, &[2, 3]), normal(r, &[2, 3])], |t, v| t.add(v[0], v[1])),
        OpCase::new("sub", vec![normal(r, &[2, 3]), normal(r, &[2, 3])], |t, v| t.sub(v[0], v[1])),
        OpCase::new("mul", vec![normal(r, &[2, 3]), normal(r, &[2, 3])], |t, v| t.mul(v[0], v[1])),
        OpCase::new("scale", vec![normal(r, &[4])], |t, v| t.scale(v[0], -1.7)),
        OpCase::new("add_bcast", vec![normal(r, &[2, 3, 4]), normal(r, &[3, 4])], |t, v| {
            t.add_bcast(v[0], v[1])
        }),
        OpCase::new(
            "leaky_relu",
            vec![normal_avoiding(r, &[3, 4], |x| x.abs() < KINK_MARGIN)],
            |t, v| t.leaky_relu(v[0], quad::LEAKY_SLOPE),
        ),
        OpCase::new("gelu", vec![normal(r, &[3, 4])], |t, v| t.gelu(v[0])),
        OpCase::new("sin", vec![normal(r, &[5])], |t, v| t.sin(v[0])),
        OpCase::new("cos", vec![normal(r, &[5])], |t, v| t.cos(v[0])),
        OpCase::new("reciprocal", vec![normal_avoiding(r, &[5], |x| x.abs() < 0.3)], |t, v| {
            t.reciprocal(v[0])
        }),
        OpCase::new("sum", vec![normal(r, &[2, 3])], |t, v| t.sum(v[0])),
        OpCase::new("mean_axis", vec![normal(r, &[2, 3, 4])], |t, v| t.mean_axis(v[0], 1)),
        OpCase::new("reshape", vec![normal(r, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4])),
        OpCase::new("permute", vec![normal(r, &[2, 3, 4])], |t, v| t.permute(v[0], &[2, 0, 1])),
        OpCase::new("transpose", vec![normal(r, &[2, 3, 4])], |t, v| t.transpose(v[0])),
        OpCase::new("matmul", vec![normal(r, &[2, 3, 4]), normal(r, &[2, 4, 5])], |t, v| {
            t.matmul(v[0], v[1])
        }),
        OpCase::new("matmul_shared_rhs", vec![normal(r, &[2, 3, 4]), normal(r, &[4, 5])], |t, v| {
            t.matmul(v[0], v[1])
        }),
        OpCase::new("softmax_last", vec![normal(r, &[2, 3, 5])], |t, v| t.softmax(v[0], 2)),
        OpCase::new("softmax_middle", vec![normal(r, &[2, 4, 3])], |t, v| t.softmax(v[0], 1)),
        OpCase::new(
            "layer_norm",
            vec![normal(r, &[2, 3, 5]), normal(r, &[5]), normal(r, &[5])],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        OpCase::new(
            "linear",
            vec![normal(r, &[2, 3, 4]), normal(r, &[4, 5]), normal(r, &[5])],
            |t, v| t.linear(v[0], v[1], Some(v[2])),
        ),
        OpCase::new(
            "conv1x1",
            vec![normal(r, &[1, 2, 3, 4]), normal(r, &[4, 6]), normal(r, &[6])],
            |t, v| t.conv1x1(v[0], v[1], Some(v[2])),
        ),
        OpCase::new("mean_pool2d", vec![normal(r, &[1, 4, 6, 2])], |t, v| t.mean_pool2d(v[0], 2, 2)),
        OpCase::new(
            "depthwise_conv2d",
            vec![normal(r, &[1, 4, 5, 2]), normal(r, &[3, 3, 2]), normal(r, &[2])],
            |t, v| t.depthwise_conv2d(v[0], v[1], v[2]),
        ),
        OpCase::new("cross_entropy", vec![normal(r, &[3, 4])], |t, v| t.cross_entropy(v[0], &[0, 3, 1])),
        OpCase::new("index_select", vec![normal(r, &[5, 3])], |t, v| t.index_select(v[0], &[4, 0, 0, 2])),
        OpCase::new("pad2d", vec![normal(r, &[1, 3, 3, 2])], |t, v| t.pad2d(v[0], 4, 5)),
        OpCase::new("crop2d", vec![normal(r, &[1, 4, 5, 2])], |t, v| t.crop2d(v[0], 3, 3)),
        OpCase::new("space_to_depth", vec![normal(r, &[1, 4, 4, 2])], |t, v| t.space_to_depth(v[0], 2)),
        OpCase::new("window_partition", vec![normal(r, &[2, 4, 6, 3])], |t, v| t.window_partition(v[0], 2)),
        OpCase::new("window_merge", vec![normal(r, &[2, 6, 4, 3])], |t, v| t.window_merge(v[0], 2, 3, 2)),
        OpCase::new("build_transform", vec![normal(r, &[2, 3, 9])], |t, v| {
            quad::build_transform(t, v[0], 2.0, 3.0)
        }),
    ];

    // projective parameters small enough that z stays far from zero
    let t_small = DenseArray::randn(vec![1, 4, 2, 9], 0.1, r);
    cases.push(OpCase::new("project_coords_wrt_t", vec![t_small], |t, v| {
        let m = quad::build_transform(t, v[0], 2.0, 2.0)?;
        quad::project_coords(t, m, &centers(4, 4, 2))
    }));
    let mut tm = DenseArray::randn(vec![1, 4, 2, 3, 3], 0.1, r);
    for (k, x) in tm.data_mut().iter_mut().enumerate() {
        if k % 9 % 4 == 0 {
            *x += 1.0;
        }
    }
    cases.push(OpCase::new("project_coords_wrt_matrix", vec![tm], |t, v| {
        quad::project_coords(t, v[0], &centers(4, 4, 2))
    }));

    let feat = normal(r, &[1, 5, 5, 4]);
    let coords = off_lattice(r, &[1, 2, 2, 3, 2], -0.6, 4.6);
    cases.push(
        OpCase::new("grid_sample_feature", vec![feat.clone(), coords.clone()], |t, v| {
            bilinear_sample(t, v[0], v[1])
        })
        .wrt(&[true, false]),
    );
    cases.push(
        OpCase::new("grid_sample_coords", vec![feat, coords], |t, v| bilinear_sample(t, v[0], v[1])).wrt(&[false, true]),
    );

    // normalized coordinates kept away from the ±1 thresholds
    let mut rc = uniform(r, &[1, 2, 2, 4, 2], -4.0, 9.0);
    for v in rc.data_mut() {
        while ((2.0 * *v / 4.0 - 1.0).abs() - 1.0).abs() < KINK_MARGIN {
            *v = r.gen_range(-4.0..9.0);
        }
    }
    cases.push(OpCase::new("reg_loss", vec![rc], |t, v| {
        quad::reg_loss(t, v[0], 5, 5, RegConfig::new(0.7)?)
    }));

    let mut px = normal(r, &[1, 4, 4, 4]);
    loop {
        let pooled_ok = (0..4).all(|gy| {
            (0..4).all(|c| {
                let (y0, x0) = (gy / 2 * 2, gy % 2 * 2);
                let s: f64 = (0..4).map(|k| px.data()[(((y0 + k / 2) * 4) + x0 + k % 2) * 4 + c]).sum();
                (s / 4.0).abs() > KINK_MARGIN
            })
        });
        if pooled_ok {
            break;
        }
        px = normal(r, &[1, 4, 4, 4]);
    }
    cases.push(OpCase::new(
        "predict_params",
        vec![px, normal(r, &[4, 18]), normal(r, &[18])],
        |t, v| {
            let head = QuadHead {
                weight: v[1],
                bias: v[2],
            };
            quad::predict_params(t, v[0], &head, 2, 2)
        },
    ));

    let mut wa = attention_inputs(r, 4, 2, 4, 5);
    wa.push(DenseArray::randn(vec![9, 2], 0.5, r));
    cases.push(OpCase::new("window_attention", wa, |t, v| {
        let cfg = AttentionConfig {
            heads: 2,
            window: 2,
            reg: RegConfig::new(1.0)?,
            keep_probs: false,
        };
        Ok(attention::window_attention(t, v[0], &attention_params(v, Some(v[11])), &cfg)?.features)
    }));
    let qa = attention_inputs(r, 4, 2, 4, 4);
    cases.push(OpCase::new("quadrangle_attention", qa, |t, v| {
        let cfg = AttentionConfig {
            heads: 2,
            window: 2,
            reg: RegConfig::new(1.0)?,
            keep_probs: false,
        };
        let out = attention::quadrangle_attention(t, v[0], &attention_params(v, None), &cfg)?;
        let r = out.reg_loss.expect("quadrangle path");
        let s = t.sum(out.features)?;
        t.add(s, r)
    }));
    cases.push(OpCase::new(
        "cpe",
        vec![normal(r, &[1, 4, 4, 2]), normal(r, &[3, 3, 2]), normal(r, &[2])],
        |t, v| attention::cpe(t, v[0], v[1], v[2]),
    ));
    cases
}

pub fn op_names() -> Vec<&'static str> {
    op_cases(0).into_iter().map(|c| c.name).collect()
}

/// Runs the whole op suite, or only the case named `target`.
pub fn check_ops(target: Option<&str>, seed: u64) -> Result<Vec<CheckReport>> {
    let cases: Vec<OpCase> = op_cases(seed)
        .into_iter()
        .filter(|c| target.is_none_or(|t| t == c.name))
        .collect();
    if cases.is_empty() {
        return Err(Error::Config(format!(
            "unknown gradcheck target `{}`; expected one of: all, ops, model, {}",
            target.unwrap_or(""),
            op_names().join(", ")
        )));
    }
    cases.iter().map(|c| check_case(c, seed)).collect()
}

/// The configuration used by the full-model check: the micro hierarchical
/// model on 16×16 inputs.
pub fn model_check_config() -> ModelConfig {
    let mut cfg = ModelConfig::micro_hierarchical();
    cfg.image_size = 16;
    cfg
}

fn model_loss(model: &Model, images: &DenseArray, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, BindMode::Inference);
    let x = tape.constant(images.clone());
    let l = model.loss(&mut tape, &bound, x, labels)?;
    Ok(tape.value(l.total).item())
}

/// Checks `CE + L_reg` of a model with a random (non-zero) quadrangle head
/// against finite differences in `samples` randomly chosen scalar parameters.
/// Returns one report per parameter tensor touched.
pub fn check_model(cfg: ModelConfig, seed: u64, samples: usize) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(cfg, seed)?;
    for (name, v) in model.params_mut() {
        if is_quad_param(name) {
            *v = DenseArray::randn(v.shape().to_vec(), 0.05, &mut rng);
        }
    }
    let c = model.config().clone();
    let images = DenseArray::randn(vec![2, c.image_size, c.image_size, c.in_chans], 1.0, &mut rng);
    let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(0..c.num_classes)).collect();

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, BindMode::Train);
    let x = tape.constant(images.clone());
    let out = model.loss(&mut tape, &bound, x, &labels)?;
    tape.backward(out.total)?;

    let names: Vec<String> = model.params().keys().cloned().collect();
    let mut picks: Vec<(String, usize)> = Vec::with_capacity(samples);
    while picks.len() < samples {
        let name = names.choose(&mut rng).expect("model has parameters").clone();
        let j = rng.gen_range(0..model.params()[&name].len());
        if !picks.contains(&(name.clone(), j)) {
            picks.push((name, j));
        }
    }

    let mut reports: Vec<CheckReport> = Vec::new();
    for (name, j) in picks {
        let analytic = tape.grad(bound.get(&name)?).map_or(0.0, |g| g.data()[j]);
        let x0 = model.params()[&name].data()[j];
        model.params_mut()[&name].data_mut()[j] = x0 + STEP;
        let lp = model_loss(&model, &images, &labels)?;
        model.params_mut()[&name].data_mut()[j] = x0 - STEP;
        let lm = model_loss(&model, &images, &labels)?;
        model.params_mut()[&name].data_mut()[j] = x0;
        let err = rel_err(analytic, (lp - lm) / (2.0 * STEP));
        match reports.iter_mut().find(|r| r.name == name) {
            Some(r) => {
                r.worst_rel_err = r.worst_rel_err.max(err);
                r.checked += 1;
                r.passed = r.worst_rel_err < MODEL_TOLERANCE;
            }
            None => reports.push(CheckReport {
                name,
                worst_rel_err: err,
                tolerance: MODEL_TOLERANCE,
                checked: 1,
                passed: err < MODEL_TOLERANCE,
            }),
        }
    }
    Ok(reports)
}
