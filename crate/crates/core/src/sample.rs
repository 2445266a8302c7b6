//! Bilinear sampling of per-head feature maps at continuous pixel coordinates.
//!
//! Neighbours outside `[0, W−1] × [0, H−1]` read as zero, so a point entirely
//! off the map samples the zero vector and partial border cells blend with
//! zero. At an exact integer coordinate the coordinate derivative is the one
//! of the cell to the right (below), since `floor` picks that cell.

use crate::array::DenseArray;
use crate::autodiff::{BackwardRule, Tape, Var};
use crate::error::{Error, Result};

struct Corner {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

/// Beyond this magnitude every tap is off any map; bounding keeps the cell
/// index representable.
const COORD_BOUND: f64 = 1e12;

fn corner(x: f64, y: f64) -> Corner {
    let (x, y) = (x.clamp(-COORD_BOUND, COORD_BOUND), y.clamp(-COORD_BOUND, COORD_BOUND));
    let (xf, yf) = (x.floor(), y.floor());
    Corner {
        x0: xf as isize,
        y0: yf as isize,
        fx: x - xf,
        fy: y - yf,
    }
}

/// Geometry shared by forward and backward: feature `(B, H, W, C)`, coords
/// `(B, nW, N, P, 2)`, head width `C / N`.
#[derive(Clone, Copy)]
struct Layout {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    nw: usize,
    heads: usize,
    p: usize,
}

impl Layout {
    fn head_width(&self) -> usize {
        self.c / self.heads
    }

    /// Offset of pixel `(x, y)` of batch `bi`, or `None` when off the map.
    fn pixel(&self, bi: usize, x: isize, y: isize) -> Option<usize> {
        if x < 0 || y < 0 || x >= self.w as isize || y >= self.h as isize {
            return None;
        }
        Some(((bi * self.h + y as usize) * self.w + x as usize) * self.c)
    }
}

fn layout(feature: &DenseArray, coords: &DenseArray) -> Result<Layout> {
    let (f, q) = (feature.shape(), coords.shape());
    if f.len() != 4 || q.len() != 5 || q[4] != 2 || q[0] != f[0] {
        return Err(Error::shape("bilinear_sample", f, q));
    }
    let heads = q[2];
    if f[3] % heads != 0 {
        return Err(Error::invalid(
            "bilinear_sample",
            format!("{} channels do not split into {heads} heads", f[3]),
        ));
    }
    Ok(Layout {
        b: f[0],
        h: f[1],
        w: f[2],
        c: f[3],
        nw: q[1],
        heads,
        p: q[3],
    })
}

struct SampleRule {
    l: Layout,
}

impl BackwardRule for SampleRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, needs: &[bool]) -> Vec<Option<DenseArray>> {
        let l = self.l;
        let cp = l.head_width();
        let (fd, qd, gd) = (x[0].data(), x[1].data(), g.data());
        let mut dfeat = needs[0].then(|| vec![0.0; fd.len()]);
        let mut dcoord = needs[1].then(|| vec![0.0; qd.len()]);
        for bi in 0..l.b {
            for wi in 0..l.nw {
                for hi in 0..l.heads {
                    let ch0 = hi * cp;
                    for pi in 0..l.p {
                        let k = ((bi * l.nw + wi) * l.heads + hi) * l.p + pi;
                        let Corner { x0, y0, fx, fy } = corner(qd[2 * k], qd[2 * k + 1]);
                        let go = &gd[k * cp..(k + 1) * cp];
                        let taps = [
                            (l.pixel(bi, x0, y0), (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
                            (l.pixel(bi, x0 + 1, y0), fx * (1.0 - fy), 1.0 - fy, -fx),
                            (l.pixel(bi, x0, y0 + 1), (1.0 - fx) * fy, -fy, 1.0 - fx),
                            (l.pixel(bi, x0 + 1, y0 + 1), fx * fy, fy, fx),
                        ];
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for (off, wgt, dwx, dwy) in taps {
                            let Some(off) = off else { continue };
                            let base = off + ch0;
                            if let Some(df) = dfeat.as_mut() {
                                for j in 0..cp {
                                    df[base + j] += wgt * go[j];
                                }
                            }
                            if dcoord.is_some() {
                                let dot: f64 = (0..cp).map(|j| go[j] * fd[base + j]).sum();
                                gx += dwx * dot;
                                gy += dwy * dot;
                            }
                        }
                        if let Some(dc) = dcoord.as_mut() {
                            dc[2 * k] += gx;
                            dc[2 * k + 1] += gy;
                        }
                    }
                }
            }
        }
        vec![
            dfeat.map(|d| DenseArray::new(x[0].shape().to_vec(), d).expect("shape")),
            dcoord.map(|d| DenseArray::new(x[1].shape().to_vec(), d).expect("shape")),
        ]
    }
}

/// Samples head `n`'s channel slice of `feature` at `coords[.., .., n, .., ..]`.
///
/// `feature` is `(B, H, W, C)`, `coords` is `(B, nW, N, P, 2)` in absolute
/// pixels; the result is `(B, nW, N, P, C/N)`.
pub fn bilinear_sample(tape: &mut Tape, feature: Var, coords: Var) -> Result<Var> {
    tape.check(feature)?;
    tape.check(coords)?;
    let (fv, qv) = (tape.value(feature), tape.value(coords));
    let l = layout(fv, qv)?;
    if qv.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN sampling coordinate".into()));
    }
    let cp = l.head_width();
    let (fd, qd) = (fv.data(), qv.data());
    let mut out = vec![0.0; l.b * l.nw * l.heads * l.p * cp];
    for bi in 0..l.b {
        for wi in 0..l.nw {
            for hi in 0..l.heads {
                for pi in 0..l.p {
                    let k = ((bi * l.nw + wi) * l.heads + hi) * l.p + pi;
                    let Corner { x0, y0, fx, fy } = corner(qd[2 * k], qd[2 * k + 1]);
                    let o = &mut out[k * cp..(k + 1) * cp];
                    let taps = [
                        (l.pixel(bi, x0, y0), (1.0 - fx) * (1.0 - fy)),
                        (l.pixel(bi, x0 + 1, y0), fx * (1.0 - fy)),
                        (l.pixel(bi, x0, y0 + 1), (1.0 - fx) * fy),
                        (l.pixel(bi, x0 + 1, y0 + 1), fx * fy),
                    ];
                    for (off, wgt) in taps {
                        let Some(off) = off else { continue };
                        if wgt == 0.0 {
                            continue;
                        }
                        let src = &fd[off + hi * cp..off + (hi + 1) * cp];
                        for (ov, sv) in o.iter_mut().zip(src) {
                            *ov += wgt * sv;
                        }
                    }
                }
            }
        }
    }
    let out = DenseArray::new(vec![l.b, l.nw, l.heads, l.p, cp], out)?;
    tape.record(&[feature, coords], out, SampleRule { l })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_one(feature: DenseArray, x: f64, y: f64) -> (Tape, Var, Var, Var) {
        let mut t = Tape::new();
        let f = t.leaf(feature);
        let q = t.leaf(DenseArray::new(vec![1, 1, 1, 1, 2], vec![x, y]).unwrap());
        let s = bilinear_sample(&mut t, f, q).unwrap();
        (t, f, q, s)
    }

    #[test]
    fn integer_point_reads_pixel() {
        let f = DenseArray::from_fn(vec![1, 3, 3, 2], |i| i as f64);
        let (t, _, _, s) = sample_one(f.clone(), 1.0, 2.0);
        let off = (2 * 3 + 1) * 2;
        assert_eq!(t.value(s).data(), &f.data()[off..off + 2]);
    }

    #[test]
    fn cell_center_averages() {
        let f = DenseArray::new(vec![1, 2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        let (t, _, _, s) = sample_one(f, 0.5, 0.5);
        assert_eq!(t.value(s).data(), &[2.5]);
    }

    #[test]
    fn far_outside_is_zero_with_zero_grads() {
        let f = DenseArray::ones(vec![1, 2, 2, 3]);
        let (mut t, fv, qv, s) = sample_one(f, -5.0, -5.0);
        assert_eq!(t.value(s).data(), &[0.0; 3]);
        let l = t.sum(s).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(fv).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
        assert_eq!(t.grad(qv).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn ramp_gradient_is_slope() {
        // value = 3x along rows
        let f = DenseArray::from_fn(vec![1, 4, 4, 1], |i| 3.0 * (i % 4) as f64);
        let (mut t, _, q, s) = sample_one(f, 1.3, 1.6);
        let l = t.sum(s).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(q).unwrap().data().to_vec();
        assert!((g[0] - 3.0).abs() < 1e-12 && g[1].abs() < 1e-12);
    }

    #[test]
    fn huge_coordinates_read_zero() {
        let f = DenseArray::ones(vec![1, 2, 2, 1]);
        for v in [1e30, -1e30, f64::INFINITY] {
            let (t, _, _, s) = sample_one(f.clone(), v, 0.5);
            assert_eq!(t.value(s).data(), &[0.0]);
        }
    }

    #[test]
    fn nan_coordinate_is_numeric_error() {
        let mut t = Tape::new();
        let f = t.constant(DenseArray::ones(vec![1, 2, 2, 1]));
        let q = t.constant(DenseArray::new(vec![1, 1, 1, 1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(bilinear_sample(&mut t, f, q), Err(Error::Numeric(_))));
    }

    #[test]
    fn heads_read_their_own_channels() {
        let f = DenseArray::from_fn(vec![1, 1, 1, 4], |i| i as f64 + 1.0);
        let mut t = Tape::new();
        let fv = t.constant(f);
        let q = t.constant(DenseArray::zeros(vec![1, 1, 2, 1, 2]));
        let s = bilinear_sample(&mut t, fv, q).unwrap();
        assert_eq!(t.value(s).data(), &[1., 2., 3., 4.]);
    }
}
