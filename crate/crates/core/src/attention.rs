//! Multi-head window attention and quadrangle attention.
//!
//! Both paths pad the input to a multiple of the window size, project to
//! Q/K/V, split channels into `N` heads of width `C' = C/N`, and compute
//! `softmax(Q·Kᵀ/√C' + r)·V` per window and head. They differ only in where
//! keys and values come from: the base window (window attention) or bilinear
//! samples at the projected quadrangle coordinates (quadrangle attention).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::quad::{self, QuadHead, RegConfig};
use crate::sample::bilinear_sample;
use crate::windowing::{centers, padded_extent};

/// A dense layer `x·W + b`, with `W` shaped `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    /// `((2w−1)², N)` table indexed by integer query–key offset.
    pub rel_pos_bias: Option<Var>,
    pub quad: Option<QuadHead>,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    pub heads: usize,
    pub window: usize,
    pub reg: RegConfig,
    /// Keep the `(B, nW, N, w², w²)` attention probabilities in the output.
    pub keep_probs: bool,
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `(B, H, W, C)`.
    pub features: Var,
    /// Surrogate parameters `(B, nW, N, 9)` (quadrangle attention only).
    pub params: Option<Var>,
    /// Projective matrices `(B, nW, N, 3, 3)` (quadrangle attention only).
    pub transforms: Option<Var>,
    /// Sampling coordinates `(B, nW, N, w², 2)` (quadrangle attention only).
    pub quad_coords: Option<Var>,
    /// λ-weighted out-of-map penalty (quadrangle attention only).
    pub reg_loss: Option<Var>,
    pub attn_probs: Option<Var>,
    pub grid: (usize, usize),
    pub padded: (usize, usize),
}

/// Index into the relative position table for every (query, key) pair of a
/// `w×w` window, row-major over queries then keys.
pub fn relative_position_index(w: usize) -> Vec<usize> {
    let span = 2 * w - 1;
    let mut idx = Vec::with_capacity(w.pow(4));
    for qi in 0..w * w {
        let (qy, qx) = (qi / w, qi % w);
        for ki in 0..w * w {
            let (ky, kx) = (ki / w, ki % w);
            idx.push((qy + w - 1 - ky) * span + (qx + w - 1 - kx));
        }
    }
    idx
}

struct Prepared {
    xp: Var,
    q: Var,
    k: Var,
    v: Var,
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    c: usize,
}

fn prepare(tape: &mut Tape, x: Var, p: &AttentionParams, cfg: &AttentionConfig) -> Result<Prepared> {
    tape.check(x)?;
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid("attention", format!("expected (B,H,W,C), got {s:?}")));
    }
    let (h, w, c) = (s[1], s[2], s[3]);
    if cfg.heads == 0 || c % cfg.heads != 0 {
        return Err(Error::Config(format!("{c} channels not divisible by {} heads", cfg.heads)));
    }
    if cfg.window == 0 {
        return Err(Error::Config("window size must be >= 1".into()));
    }
    let (hp, wp) = (padded_extent(h, cfg.window), padded_extent(w, cfg.window));
    let xp = tape.pad2d(x, hp, wp)?;
    let q = p.q.forward(tape, xp)?;
    let k = p.k.forward(tape, xp)?;
    let v = p.v.forward(tape, xp)?;
    Ok(Prepared { xp, q, k, v, h, w, hp, wp, c })
}

/// `(B, Hp, Wp, C)` → `(B, nW, N, w², C')`.
fn split_windows(tape: &mut Tape, x: Var, w: usize, heads: usize) -> Result<Var> {
    let pw = tape.window_partition(x, w)?;
    let s = tape.shape(pw).to_vec();
    let r = tape.reshape(pw, &[s[0], s[1], s[2], heads, s[3] / heads])?;
    tape.permute(r, &[0, 1, 3, 2, 4])
}

/// `softmax(q·kᵀ/√C' + bias)·v` on `(B, nW, N, P, C')` operands.
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, bias: Option<Var>, w: usize) -> Result<(Var, Var)> {
    let cp = *tape.shape(q).last().expect("rank 5");
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let mut logits = tape.scale(logits, 1.0 / (cp as f64).sqrt())?;
    if let Some(table) = bias {
        let heads = tape.shape(q)[2];
        let p = w * w;
        if tape.shape(table) != [(2 * w - 1).pow(2), heads] {
            return Err(Error::shape("relative position bias", tape.shape(table), &[(2 * w - 1).pow(2), heads]));
        }
        let gathered = tape.index_select(table, &relative_position_index(w))?;
        let r = tape.reshape(gathered, &[p, p, heads])?;
        let r = tape.permute(r, &[2, 0, 1])?;
        logits = tape.add_bcast(logits, r)?;
    }
    let probs = tape.softmax(logits, 4)?;
    let out = tape.matmul(probs, v)?;
    Ok((out, probs))
}

/// `(B, nW, N, P, C')` → output projection of the `(B, H, W, C)` map.
fn finish(tape: &mut Tape, out: Var, p: &AttentionParams, pre: &Prepared, window: usize) -> Result<Var> {
    let s = tape.shape(out).to_vec();
    let o = tape.permute(out, &[0, 1, 3, 2, 4])?;
    let o = tape.reshape(o, &[s[0], s[1], s[3], pre.c])?;
    let m = tape.window_merge(o, pre.hp / window, pre.wp / window, window)?;
    let m = tape.crop2d(m, pre.h, pre.w)?;
    p.o.forward(tape, m)
}

pub fn window_attention(tape: &mut Tape, x: Var, p: &AttentionParams, cfg: &AttentionConfig) -> Result<AttentionOutput> {
    let pre = prepare(tape, x, p, cfg)?;
    let w = cfg.window;
    let q = split_windows(tape, pre.q, w, cfg.heads)?;
    let k = split_windows(tape, pre.k, w, cfg.heads)?;
    let v = split_windows(tape, pre.v, w, cfg.heads)?;
    let (out, probs) = attend(tape, q, k, v, p.rel_pos_bias, w)?;
    let features = finish(tape, out, p, &pre, w)?;
    Ok(AttentionOutput {
        features,
        params: None,
        transforms: None,
        quad_coords: None,
        reg_loss: None,
        attn_probs: cfg.keep_probs.then_some(probs),
        grid: (pre.hp / w, pre.wp / w),
        padded: (pre.hp, pre.wp),
    })
}

/// Quadrangle attention. Queries come from the base windows; keys and values
/// are sampled at the projected coordinates of each window's quadrangle. No
/// relative position bias is applied (sampled key offsets are fractional).
pub fn quadrangle_attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionParams,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    let head = p
        .quad
        .ok_or_else(|| Error::Config("quadrangle attention needs prediction-head weights".into()))?;
    let pre = prepare(tape, x, p, cfg)?;
    let w = cfg.window;
    let (gh, gw) = (pre.hp / w, pre.wp / w);
    let q = split_windows(tape, pre.q, w, cfg.heads)?;

    let t = quad::predict_params(tape, pre.xp, &head, w, cfg.heads)?;
    let transforms = quad::build_transform(tape, t, gw as f64, gh as f64)?;
    let coords = quad::project_coords(tape, transforms, &centers(pre.hp, pre.wp, w))?;
    if !tape.value(coords).all_finite() {
        return Err(Error::Numeric("non-finite quadrangle coordinates".into()));
    }
    let k = bilinear_sample(tape, pre.k, coords)?;
    let v = bilinear_sample(tape, pre.v, coords)?;
    let reg = quad::reg_loss(tape, coords, pre.hp, pre.wp, cfg.reg)?;

    let (out, probs) = attend(tape, q, k, v, None, w)?;
    let features = finish(tape, out, p, &pre, w)?;
    Ok(AttentionOutput {
        features,
        params: Some(t),
        transforms: Some(transforms),
        quad_coords: Some(coords),
        reg_loss: Some(reg),
        attn_probs: cfg.keep_probs.then_some(probs),
        grid: (gh, gw),
        padded: (pre.hp, pre.wp),
    })
}

/// Conditional position embedding: `x + DWConv(x)`.
pub fn cpe(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let c = tape.depthwise_conv2d(x, weight, bias)?;
    tape.add(x, c)
}
