//! Differentiable ops. Shape rules are checked at record time; there is no
//! implicit broadcasting except where an op says so (trailing-suffix bias
//! add, shared right-hand matrix in `matmul`).

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, inverse_axes, permute};
use super::{BackwardRule, Tape, Var};
use crate::array::DenseArray;
use crate::error::{Error, Result};

/// `sqrt(2/pi)` in the tanh form of GELU.
pub const GELU_TANH_COEFF: f64 = 0.797_884_560_802_865_4;

fn same_shape(op: &'static str, a: &DenseArray, b: &DenseArray) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn arr(shape: &[usize], data: Vec<f64>) -> DenseArray {
    DenseArray::new(shape.to_vec(), data).expect("kernel produced consistent shape")
}

// ---------------------------------------------------------------- elementwise

struct AddRule;
impl BackwardRule for AddRule {
    fn backward(&self, _: &[&DenseArray], _: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct SubRule;
impl BackwardRule for SubRule {
    fn backward(&self, _: &[&DenseArray], _: &DenseArray, g: &DenseArray, needs: &[bool]) -> Vec<Option<DenseArray>> {
        vec![Some(g.clone()), needs[1].then(|| g.map(|v| -v))]
    }
}

struct MulRule;
impl BackwardRule for MulRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, needs: &[bool]) -> Vec<Option<DenseArray>> {
        let prod = |o: &DenseArray| {
            arr(g.shape(), g.data().iter().zip(o.data()).map(|(a, b)| a * b).collect())
        };
        vec![needs[0].then(|| prod(x[1])), needs[1].then(|| prod(x[0]))]
    }
}

struct ScaleRule(f64);
impl BackwardRule for ScaleRule {
    fn backward(&self, _: &[&DenseArray], _: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        vec![Some(g.map(|v| v * self.0))]
    }
}

/// Elementwise unary op whose derivative depends on input and output.
struct UnaryRule(fn(f64, f64, &[f64]) -> f64, Vec<f64>);
impl BackwardRule for UnaryRule {
    fn backward(&self, x: &[&DenseArray], y: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        let d = x[0]
            .data()
            .iter()
            .zip(y.data())
            .zip(g.data())
            .map(|((&xi, &yi), &gi)| gi * (self.0)(xi, yi, &self.1))
            .collect();
        vec![Some(arr(g.shape(), d))]
    }
}

fn gelu(x: f64) -> f64 {
    let u = GELU_TANH_COEFF * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_TANH_COEFF * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_TANH_COEFF * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// `out = a + b` where `b.shape` is a trailing suffix of `a.shape`.
struct AddBcastRule {
    bshape: Vec<usize>,
}
impl BackwardRule for AddBcastRule {
    fn backward(&self, _: &[&DenseArray], _: &DenseArray, g: &DenseArray, needs: &[bool]) -> Vec<Option<DenseArray>> {
        let gb = needs[1].then(|| {
            let inner: usize = self.bshape.iter().product();
            let mut acc = vec![0.0; inner];
            for chunk in g.data().chunks(inner) {
                for (a, v) in acc.iter_mut().zip(chunk) {
                    *a += v;
                }
            }
            arr(&self.bshape, acc)
        });
        vec![Some(g.clone()), gb]
    }
}

struct SumRule;
impl BackwardRule for SumRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        vec![Some(DenseArray::full(x[0].shape().to_vec(), g.item()))]
    }
}

struct MeanAxisRule {
    outer: usize,
    n: usize,
    inner: usize,
}
impl BackwardRule for MeanAxisRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        let mut d = vec![0.0; x[0].len()];
        let s = 1.0 / self.n as f64;
        for o in 0..self.outer {
            for k in 0..self.n {
                for i in 0..self.inner {
                    d[(o * self.n + k) * self.inner + i] = g.data()[o * self.inner + i] * s;
                }
            }
        }
        vec![Some(arr(x[0].shape(), d))]
    }
}

struct ReshapeRule;
impl BackwardRule for ReshapeRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        vec![Some(arr(x[0].shape(), g.data().to_vec()))]
    }
}

struct PermuteRule {
    inverse: Vec<usize>,
}
impl BackwardRule for PermuteRule {
    fn backward(&self, _: &[&DenseArray], _: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        let (d, s) = permute(g.data(), g.shape(), &self.inverse);
        vec![Some(arr(&s, d))]
    }
}

// ---------------------------------------------------------------- matmul

struct MatmulRule {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
}
impl BackwardRule for MatmulRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, needs: &[bool]) -> Vec<Option<DenseArray>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (x[0].data(), x[1].data());
        let mut da = needs[0].then(|| vec![0.0; a.len()]);
        let mut db = needs[1].then(|| vec![0.0; b.len()]);
        for bi in 0..self.batch {
            let ao = if self.a_batched { bi * m * k } else { 0 };
            let bo = if self.b_batched { bi * k * n } else { 0 };
            let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
            if let Some(da) = da.as_mut() {
                gemm_nt(gs, &b[bo..bo + k * n], &mut da[ao..ao + m * k], m, k, n);
            }
            if let Some(db) = db.as_mut() {
                gemm_tn(&a[ao..ao + m * k], gs, &mut db[bo..bo + k * n], m, k, n);
            }
        }
        vec![da.map(|d| arr(x[0].shape(), d)), db.map(|d| arr(x[1].shape(), d))]
    }
}

// ---------------------------------------------------------------- softmax

struct SoftmaxRule {
    outer: usize,
    n: usize,
    inner: usize,
}
impl BackwardRule for SoftmaxRule {
    fn backward(&self, _: &[&DenseArray], y: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        let (yd, gd) = (y.data(), g.data());
        let mut d = vec![0.0; yd.len()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let at = |k: usize| (o * self.n + k) * self.inner + i;
                let dot: f64 = (0..self.n).map(|k| yd[at(k)] * gd[at(k)]).sum();
                for k in 0..self.n {
                    d[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                }
            }
        }
        vec![Some(arr(y.shape(), d))]
    }
}

// ---------------------------------------------------------------- layer norm

struct LayerNormRule {
    c: usize,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}
impl BackwardRule for LayerNormRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, needs: &[bool]) -> Vec<Option<DenseArray>> {
        let c = self.c;
        let gamma = x[1].data();
        let mut dx = vec![0.0; x[0].len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (row, (gr, xr)) in g.data().chunks(c).zip(self.xhat.chunks(c)).enumerate() {
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for j in 0..c {
                let dxh = gr[j] * gamma[j];
                mean_d += dxh;
                mean_dx += dxh * xr[j];
                dgamma[j] += gr[j] * xr[j];
                dbeta[j] += gr[j];
            }
            mean_d /= c as f64;
            mean_dx /= c as f64;
            let r = self.rstd[row];
            for j in 0..c {
                dx[row * c + j] = r * (gr[j] * gamma[j] - mean_d - xr[j] * mean_dx);
            }
        }
        vec![
            needs[0].then(|| arr(x[0].shape(), dx)),
            needs[1].then(|| arr(&[c], dgamma)),
            needs[2].then(|| arr(&[c], dbeta)),
        ]
    }
}

// ---------------------------------------------------------------- linear

struct LinearRule {
    m: usize,
    k: usize,
    n: usize,
    has_bias: bool,
}
impl BackwardRule for LinearRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, needs: &[bool]) -> Vec<Option<DenseArray>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let dx = needs[0].then(|| {
            let mut d = vec![0.0; m * k];
            gemm_nt(g.data(), x[1].data(), &mut d, m, k, n);
            arr(x[0].shape(), d)
        });
        let dw = needs[1].then(|| {
            let mut d = vec![0.0; k * n];
            gemm_tn(x[0].data(), g.data(), &mut d, m, k, n);
            arr(x[1].shape(), d)
        });
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(needs[2].then(|| {
                let mut d = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (a, v) in d.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                arr(&[n], d)
            }));
        }
        out
    }
}

// ---------------------------------------------------------------- spatial ops on (B, H, W, C)

struct MeanPoolRule {
    k: usize,
    s: usize,
}
impl BackwardRule for MeanPoolRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        let [b, h, w, c] = dims4(x[0].shape());
        let (ho, wo) = (g.shape()[1], g.shape()[2]);
        let norm = 1.0 / (self.k * self.k) as f64;
        let mut d = vec![0.0; x[0].len()];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = ((bi * ho + oy) * wo + ox) * c;
                    for dy in 0..self.k {
                        for dx in 0..self.k {
                            let (y, xx) = (oy * self.s + dy, ox * self.s + dx);
                            let xo = ((bi * h + y) * w + xx) * c;
                            for ch in 0..c {
                                d[xo + ch] += g.data()[go + ch] * norm;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(arr(x[0].shape(), d))]
    }
}

struct DepthwiseRule {
    k: usize,
}
impl BackwardRule for DepthwiseRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, needs: &[bool]) -> Vec<Option<DenseArray>> {
        let [b, h, w, c] = dims4(x[0].shape());
        let (xd, wd, gd) = (x[0].data(), x[1].data(), g.data());
        let p = (self.k / 2) as isize;
        let mut dx = vec![0.0; xd.len()];
        let mut dw = vec![0.0; wd.len()];
        let mut db = vec![0.0; c];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let go = ((bi * h + y) * w + xx) * c;
                    for ch in 0..c {
                        db[ch] += gd[go + ch];
                    }
                    for ky in 0..self.k {
                        let sy = y as isize + ky as isize - p;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let sx = xx as isize + kx as isize - p;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let xo = ((bi * h + sy as usize) * w + sx as usize) * c;
                            let wo = (ky * self.k + kx) * c;
                            for ch in 0..c {
                                dx[xo + ch] += gd[go + ch] * wd[wo + ch];
                                dw[wo + ch] += gd[go + ch] * xd[xo + ch];
                            }
                        }
                    }
                }
            }
        }
        vec![
            needs[0].then(|| arr(x[0].shape(), dx)),
            needs[1].then(|| arr(x[1].shape(), dw)),
            needs[2].then(|| arr(&[c], db)),
        ]
    }
}

struct CrossEntropyRule {
    probs: Vec<f64>,
    labels: Vec<usize>,
}
impl BackwardRule for CrossEntropyRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        let (b, k) = (x[0].shape()[0], x[0].shape()[1]);
        let s = g.item() / b as f64;
        let mut d: Vec<f64> = self.probs.iter().map(|p| p * s).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            d[i * k + l] -= s;
        }
        vec![Some(arr(x[0].shape(), d))]
    }
}

struct IndexSelectRule {
    idx: Vec<usize>,
    row: usize,
}
impl BackwardRule for IndexSelectRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        let mut d = vec![0.0; x[0].len()];
        for (o, &i) in self.idx.iter().enumerate() {
            for j in 0..self.row {
                d[i * self.row + j] += g.data()[o * self.row + j];
            }
        }
        vec![Some(arr(x[0].shape(), d))]
    }
}

struct PadRule {
    h: usize,
    w: usize,
}
impl BackwardRule for PadRule {
    fn backward(&self, _: &[&DenseArray], _: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        vec![Some(crop_data(g, self.h, self.w))]
    }
}

struct CropRule {
    hp: usize,
    wp: usize,
}
impl BackwardRule for CropRule {
    fn backward(&self, _: &[&DenseArray], _: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        vec![Some(pad_data(g, self.hp, self.wp))]
    }
}

struct SpaceToDepthRule {
    p: usize,
}
impl BackwardRule for SpaceToDepthRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        let [b, h, w, c] = dims4(x[0].shape());
        let p = self.p;
        let v = g.reshape(vec![b, h / p, w / p, p, p, c]).expect("shape");
        let (d, _) = permute(v.data(), v.shape(), &inverse_axes(&S2D_AXES));
        vec![Some(arr(x[0].shape(), d))]
    }
}

// (b, h/p, p, w/p, p, c) -> (b, h/p, w/p, p, p, c)
const S2D_AXES: [usize; 6] = [0, 1, 3, 2, 4, 5];

pub(crate) fn dims4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}

pub(crate) fn pad_data(x: &DenseArray, hp: usize, wp: usize) -> DenseArray {
    let [b, h, w, c] = dims4(x.shape());
    if (h, w) == (hp, wp) {
        return x.clone();
    }
    let mut d = vec![0.0; b * hp * wp * c];
    for bi in 0..b {
        for y in 0..h {
            let src = ((bi * h + y) * w) * c;
            let dst = ((bi * hp + y) * wp) * c;
            d[dst..dst + w * c].copy_from_slice(&x.data()[src..src + w * c]);
        }
    }
    arr(&[b, hp, wp, c], d)
}

pub(crate) fn crop_data(x: &DenseArray, h: usize, w: usize) -> DenseArray {
    let [b, hp, wp, c] = dims4(x.shape());
    if (h, w) == (hp, wp) {
        return x.clone();
    }
    let mut d = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h {
            let src = ((bi * hp + y) * wp) * c;
            d.extend_from_slice(&x.data()[src..src + w * c]);
        }
    }
    arr(&[b, h, w, c], d)
}

fn require_rank(op: &'static str, a: &DenseArray, rank: usize) -> Result<()> {
    if a.rank() != rank {
        return Err(Error::invalid(op, format!("expected rank {rank}, got shape {:?}", a.shape())));
    }
    Ok(())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let d = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let v = arr(x.shape(), d);
        self.record(&[a, b], v, AddRule)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let d = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let v = arr(x.shape(), d);
        self.record(&[a, b], v, SubRule)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let d = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let v = arr(x.shape(), d);
        self.record(&[a, b], v, MulRule)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * c);
        self.record(&[a], v, ScaleRule(c))
    }

    /// `a + b` with `b` broadcast over the leading axes of `a`; `b.shape`
    /// must equal a trailing suffix of `a.shape`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (x, y) = (self.value(a), self.value(b));
        if y.rank() > x.rank() || x.shape()[x.rank() - y.rank()..] != *y.shape() {
            return Err(Error::shape("add_bcast", x.shape(), y.shape()));
        }
        let inner = y.len();
        let mut d = x.data().to_vec();
        for chunk in d.chunks_mut(inner) {
            for (p, q) in chunk.iter_mut().zip(y.data()) {
                *p += q;
            }
        }
        let v = arr(x.shape(), d);
        let bshape = self.shape(b).to_vec();
        self.record(&[a, b], v, AddBcastRule { bshape })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: fn(f64, f64, &[f64]) -> f64, extra: Vec<f64>) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(f);
        self.record(&[a], v, UnaryRule(df, extra))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            |x, _, e| if x > 0.0 { 1.0 } else { e[0] },
            vec![slope],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, gelu, |x, _, _| gelu_grad(x), Vec::new())
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sin, |x, _, _| x.cos(), Vec::new())
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::cos, |x, _, _| -x.sin(), Vec::new())
    }

    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| 1.0 / x, |_, y, _| -y * y, Vec::new())
    }

    /// Sum of all elements, as a rank-0 array.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = DenseArray::scalar(self.value(a).sum());
        self.record(&[a], v, SumRule)
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::invalid("mean_axis", format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut d = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    d[o * inner + i] += x.data()[(o * n + k) * inner + i];
                }
            }
        }
        d.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let v = arr(&shape, d);
        self.record(&[a], v, MeanAxisRule { outer, n, inner })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).reshape(shape.to_vec())?;
        self.record(&[a], v, ReshapeRule)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..x.rank()).collect::<Vec<_>>() {
            return Err(Error::invalid("permute", format!("{axes:?} is not a permutation of rank {}", x.rank())));
        }
        let (d, s) = permute(x.data(), x.shape(), axes);
        let v = arr(&s, d);
        self.record(&[a], v, PermuteRule { inverse: inverse_axes(axes) })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::invalid("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]`. Batch extents must
    /// match, or one side may be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() < 2 || y.rank() < 2 {
            return Err(Error::shape("matmul", x.shape(), y.shape()));
        }
        let (xr, yr) = (x.rank(), y.rank());
        let (m, k, k2, n) = (x.shape()[xr - 2], x.shape()[xr - 1], y.shape()[yr - 2], y.shape()[yr - 1]);
        let (xb, yb) = (&x.shape()[..xr - 2], &y.shape()[..yr - 2]);
        let batch_ok = xb == yb || xb.is_empty() || yb.is_empty();
        if k != k2 || !batch_ok {
            return Err(Error::shape("matmul", x.shape(), y.shape()));
        }
        let out_batch: Vec<usize> = if xb.is_empty() { yb.to_vec() } else { xb.to_vec() };
        let batch: usize = out_batch.iter().product();
        let (a_batched, b_batched) = (!xb.is_empty(), !yb.is_empty());
        let mut d = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ao = if a_batched { bi * m * k } else { 0 };
            let bo = if b_batched { bi * k * n } else { 0 };
            gemm_nn(
                &x.data()[ao..ao + m * k],
                &y.data()[bo..bo + k * n],
                &mut d[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = out_batch;
        shape.extend([m, n]);
        let v = arr(&shape, d);
        self.record(&[a, b], v, MatmulRule { batch, a_batched, b_batched, m, k, n })
    }

    /// Softmax along `axis`, stabilized by subtracting the max.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut d = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..n {
                    let e = (xd[at(k)] - mx).exp();
                    d[at(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    d[at(k)] /= s;
                }
            }
        }
        let v = arr(x.shape(), d);
        self.record(&[a], v, SoftmaxRule { outer, n, inner })
    }

    /// Normalizes the last axis, then applies `gamma`, `beta` (both `[C]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let xv = self.value(x);
        let c = *xv.shape().last().ok_or_else(|| Error::invalid("layer_norm", "rank-0 input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("layer_norm", self.value(x).shape(), self.shape(p)));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for (r, row) in xv.data().chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let v = arr(xv.shape(), out);
        self.record(&[x, gamma, beta], v, LayerNormRule { c, xhat, rstd })
    }

    /// `x[.., in] · weight[in, out] + bias[out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        let (xv, wv) = (self.value(x), self.value(weight));
        let k = *xv.shape().last().unwrap_or(&0);
        if wv.rank() != 2 || wv.shape()[0] != k || xv.rank() == 0 {
            return Err(Error::shape("linear", xv.shape(), wv.shape()));
        }
        let n = wv.shape()[1];
        let m = xv.len() / k;
        let mut d = vec![0.0; m * n];
        if let Some(b) = bias {
            self.check(b)?;
            let bv = self.value(b);
            if bv.shape() != [n] {
                return Err(Error::shape("linear", wv.shape(), bv.shape()));
            }
            for row in d.chunks_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm_nn(xv.data(), wv.data(), &mut d, m, k, n);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let v = arr(&shape, d);
        let rule = LinearRule { m, k, n, has_bias: bias.is_some() };
        match bias {
            Some(b) => self.record(&[x, weight, b], v, rule),
            None => self.record(&[x, weight], v, rule),
        }
    }

    /// 1×1 convolution over a `(B, H, W, C)` map; `weight` is `[C, C_out]`.
    pub fn conv1x1(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.check(x)?;
        require_rank("conv1x1", self.value(x), 4)?;
        self.linear(x, weight, bias)
    }

    /// Average pooling of a `(B, H, W, C)` map with a square kernel.
    pub fn mean_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        require_rank("mean_pool2d", xv, 4)?;
        let [b, h, w, c] = dims4(xv.shape());
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(Error::invalid("mean_pool2d", format!("kernel {kernel} stride {stride} on {:?}", xv.shape())));
        }
        let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let norm = 1.0 / (kernel * kernel) as f64;
        let mut d = vec![0.0; b * ho * wo * c];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = ((bi * ho + oy) * wo + ox) * c;
                    for dy in 0..kernel {
                        for dx in 0..kernel {
                            let xo = ((bi * h + oy * stride + dy) * w + ox * stride + dx) * c;
                            for ch in 0..c {
                                d[go + ch] += xv.data()[xo + ch];
                            }
                        }
                    }
                    for ch in 0..c {
                        d[go + ch] *= norm;
                    }
                }
            }
        }
        let v = arr(&[b, ho, wo, c], d);
        self.record(&[x], v, MeanPoolRule { k: kernel, s: stride })
    }

    /// Per-channel `k×k` convolution with zero "same" padding; `weight` is
    /// `[k, k, C]`, `bias` is `[C]`, `k` odd.
    pub fn depthwise_conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        self.check(bias)?;
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        require_rank("depthwise_conv2d", xv, 4)?;
        let [b, h, w, c] = dims4(xv.shape());
        let k = wv.shape().first().copied().unwrap_or(0);
        if wv.shape() != [k, k, c] || k % 2 == 0 || bv.shape() != [c] {
            return Err(Error::shape("depthwise_conv2d", xv.shape(), wv.shape()));
        }
        let p = (k / 2) as isize;
        let (xd, wd) = (xv.data(), wv.data());
        let mut d = vec![0.0; xd.len()];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let go = ((bi * h + y) * w + xx) * c;
                    d[go..go + c].copy_from_slice(bv.data());
                    for ky in 0..k {
                        let sy = y as isize + ky as isize - p;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = xx as isize + kx as isize - p;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let xo = ((bi * h + sy as usize) * w + sx as usize) * c;
                            let wo = (ky * k + kx) * c;
                            for ch in 0..c {
                                d[go + ch] += wd[wo + ch] * xd[xo + ch];
                            }
                        }
                    }
                }
            }
        }
        let v = arr(xv.shape(), d);
        self.record(&[x, weight, bias], v, DepthwiseRule { k })
    }

    /// Mean softmax cross-entropy of `(B, K)` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let lv = self.value(logits);
        require_rank("cross_entropy", lv, 2)?;
        let (b, k) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != b || labels.iter().any(|&l| l >= k) {
            return Err(Error::invalid("cross_entropy", format!("{} labels for {b}x{k} logits", labels.len())));
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (i, row) in lv.data().chunks(k).enumerate() {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        let v = DenseArray::scalar(loss / b as f64);
        self.record(&[logits], v, CrossEntropyRule { probs, labels: labels.to_vec() })
    }

    /// Gathers rows of `table` (axis 0) by index.
    pub fn index_select(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        self.check(table)?;
        let tv = self.value(table);
        if tv.rank() == 0 || idx.is_empty() || idx.iter().any(|&i| i >= tv.shape()[0]) {
            return Err(Error::invalid("index_select", format!("bad index into {:?}", tv.shape())));
        }
        let row: usize = tv.shape()[1..].iter().product();
        let mut d = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            d.extend_from_slice(&tv.data()[i * row..(i + 1) * row]);
        }
        let mut shape = tv.shape().to_vec();
        shape[0] = idx.len();
        let v = arr(&shape, d);
        self.record(&[table], v, IndexSelectRule { idx: idx.to_vec(), row })
    }

    /// Zero-pads a `(B, H, W, C)` map on the bottom and right to `(hp, wp)`.
    pub fn pad2d(&mut self, x: Var, hp: usize, wp: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        require_rank("pad2d", xv, 4)?;
        let [_, h, w, _] = dims4(xv.shape());
        if hp < h || wp < w {
            return Err(Error::invalid("pad2d", format!("cannot pad {h}x{w} to {hp}x{wp}")));
        }
        let v = pad_data(xv, hp, wp);
        self.record(&[x], v, PadRule { h, w })
    }

    /// Keeps the top-left `(h, w)` region of a `(B, H, W, C)` map.
    pub fn crop2d(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        require_rank("crop2d", xv, 4)?;
        let [_, hp, wp, _] = dims4(xv.shape());
        if h > hp || w > wp || h == 0 || w == 0 {
            return Err(Error::invalid("crop2d", format!("cannot crop {hp}x{wp} to {h}x{w}")));
        }
        let v = crop_data(xv, h, w);
        self.record(&[x], v, CropRule { hp, wp })
    }

    /// Folds each `p×p` block of a `(B, H, W, C)` map into channels:
    /// `(B, H/p, W/p, p·p·C)`, block-local order `(dy, dx, c)`.
    pub fn space_to_depth(&mut self, x: Var, p: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        require_rank("space_to_depth", xv, 4)?;
        let [b, h, w, c] = dims4(xv.shape());
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::invalid("space_to_depth", format!("{h}x{w} not divisible by {p}")));
        }
        let r = xv.reshape(vec![b, h / p, p, w / p, p, c])?;
        let (d, _) = permute(r.data(), r.shape(), &S2D_AXES);
        let v = arr(&[b, h / p, w / p, p * p * c], d);
        self.record(&[x], v, SpaceToDepthRule { p })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(shape: &[usize], d: &[f64]) -> DenseArray {
        DenseArray::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = t.constant(a(&[2, 2], &[1., 0., 0., 1.]));
        let m = t.constant(a(&[2, 2], &[3., 4., 5., 6.]));
        let p = t.matmul(i, m).unwrap();
        assert_eq!(t.value(p).data(), &[3., 4., 5., 6.]);
    }

    #[test]
    fn matmul_row_col() {
        let mut t = Tape::new();
        let x = t.constant(a(&[1, 2], &[1., 2.]));
        let y = t.constant(a(&[2, 1], &[3., 4.]));
        let p = t.matmul(x, y).unwrap();
        assert_eq!(t.value(p).data(), &[11.]);
    }

    #[test]
    fn matmul_mismatch_names_shapes() {
        let mut t = Tape::new();
        let x = t.constant(DenseArray::zeros(vec![2, 3]));
        let y = t.constant(DenseArray::zeros(vec![2, 3]));
        let err = t.matmul(x, y).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut t = Tape::new();
        let x = t.constant(DenseArray::zeros(vec![3]));
        let s = t.softmax(x, 0).unwrap();
        for v in t.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = t.constant(a(&[2], &[1000., 1000.]));
        let s = t.softmax(big, 0).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_inner_axis() {
        let mut t = Tape::new();
        let x = t.constant(a(&[2, 2], &[0., 5., 0., 5.]));
        let s = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(t.softmax(x, 2).is_err());
    }

    #[test]
    fn leaky_relu_negative_side() {
        let mut t = Tape::new();
        let x = t.constant(a(&[2], &[-1., 2.]));
        let y = t.leaky_relu(x, 0.01).unwrap();
        assert_eq!(t.value(y).data(), &[-0.01, 2.]);
    }

    #[test]
    fn mean_pool_of_two_by_two() {
        let mut t = Tape::new();
        let x = t.constant(a(&[1, 2, 2, 1], &[1., 2., 3., 4.]));
        let y = t.mean_pool2d(x, 2, 2).unwrap();
        assert_eq!(t.value(y).data(), &[2.5]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(DenseArray::full(vec![2, 4], 3.7));
        let g = t.constant(DenseArray::ones(vec![4]));
        let b = t.constant(DenseArray::zeros(vec![4]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t = Tape::new();
        let x = t.constant(DenseArray::zeros(vec![2, 4]));
        let l = t.cross_entropy(x, &[0, 3]).unwrap();
        assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-14);
        assert!(t.cross_entropy(x, &[0, 4]).is_err());
    }

    #[test]
    fn space_to_depth_orders_block_then_channel() {
        let mut t = Tape::new();
        // 1x2x2x1 map [[1,2],[3,4]] -> one token [1,2,3,4]
        let x = t.constant(a(&[1, 2, 2, 1], &[1., 2., 3., 4.]));
        let y = t.space_to_depth(x, 2).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 4]);
        assert_eq!(t.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn pad_then_crop_roundtrip() {
        let mut t = Tape::new();
        let x = t.leaf(DenseArray::from_fn(vec![1, 3, 3, 2], |i| i as f64));
        let p = t.pad2d(x, 4, 5).unwrap();
        assert_eq!(t.shape(p), &[1, 4, 5, 2]);
        let c = t.crop2d(p, 3, 3).unwrap();
        assert_eq!(t.value(c), t.value(x));
    }

    #[test]
    fn depthwise_sum_one_kernel_on_constant_interior() {
        let mut t = Tape::new();
        let x = t.constant(DenseArray::full(vec![1, 5, 5, 1], 2.0));
        let w = t.constant(DenseArray::full(vec![3, 3, 1], 1.0 / 9.0));
        let b = t.constant(DenseArray::zeros(vec![1]));
        let y = t.depthwise_conv2d(x, w, b).unwrap();
        // centre pixel sees the full kernel
        assert!((t.value(y).data()[12] - 2.0).abs() < 1e-14);
    }
}
