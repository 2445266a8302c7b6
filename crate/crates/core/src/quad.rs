//! Quadrangle generation: surrogate parameters → projective matrix →
//! projected token coordinates, plus the out-of-map penalty.
//!
//! Shapes (per batch element `B`, window count `nW`, heads `N`, tokens per
//! window `P = w²`):
//!
//! ```text
//! t       (B, nW, N, 9)
//! T       (B, nW, N, 3, 3)
//! coords  (B, nW, N, P, 2)   absolute pixels, (x, y)
//! ```

use crate::array::DenseArray;
use crate::autodiff::{BackwardRule, Tape, Var};
use crate::error::{Error, Result};
use crate::windowing::{relative_offsets, WindowCenters};

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Slope of the LeakyReLU inside the prediction head.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Smallest `|z|` used as a homogeneous divisor.
pub const Z_MIN: f64 = 1e-4;

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

/// Scaling, shearing, rotation, translation and projection matrices built
/// from the nine surrogate parameters, in composition order.
pub fn basic_transforms(t: &[f64], beta1: f64, beta2: f64) -> [Mat3; 5] {
    assert_eq!(t.len(), 9);
    let (s, c) = t[4].sin_cos();
    [
        [[t[0] + 1.0, 0.0, 0.0], [0.0, t[1] + 1.0, 0.0], [0.0, 0.0, 1.0]],
        [[1.0, t[2], 0.0], [t[3], 1.0, 0.0], [0.0, 0.0, 1.0]],
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        [[1.0, 0.0, beta1 * t[5]], [0.0, 1.0, beta2 * t[6]], [0.0, 0.0, 1.0]],
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [t[7], t[8], 1.0]],
    ]
}

/// `T = T_s · T_h · T_r · T_t · T_p`.
pub fn compose_transform(t: &[f64], beta1: f64, beta2: f64) -> Mat3 {
    basic_transforms(t, beta1, beta2)
        .iter()
        .fold(IDENTITY, |acc, m| mat3_mul(&acc, m))
}

fn clamp_z(z: f64) -> f64 {
    if z.abs() >= Z_MIN {
        z
    } else if z < 0.0 {
        -Z_MIN
    } else {
        Z_MIN
    }
}

/// Projects a point given relative to the window center.
pub fn project_point(t: &Mat3, r: [f64; 2]) -> [f64; 2] {
    let xt = t[0][0] * r[0] + t[0][1] * r[1] + t[0][2];
    let yt = t[1][0] * r[0] + t[1][1] * r[1] + t[1][2];
    let z = clamp_z(t[2][0] * r[0] + t[2][1] * r[1] + t[2][2]);
    [xt / z, yt / z]
}

/// Corners (TL, TR, BR, BL) of the `w×w` cell around `center`, mapped by `t`.
pub fn quad_corners(t: &Mat3, center: [f64; 2], w: usize) -> [[f64; 2]; 4] {
    let h = w as f64 / 2.0;
    [[-h, -h], [h, -h], [h, h], [-h, h]].map(|r| {
        let p = project_point(t, r);
        [p[0] + center[0], p[1] + center[1]]
    })
}

/// Penalty weight configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegConfig {
    lambda: f64,
}

impl RegConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("regularization weight must be >= 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// `R(u)`: `-λ` below −1, `λ` above 1, zero in between.
pub fn penalty(u: f64, lambda: f64) -> f64 {
    if u < -1.0 {
        -lambda
    } else if u > 1.0 {
        lambda
    } else {
        0.0
    }
}

/// Maps a pixel coordinate on an axis of `extent` pixels to `[-1, 1]`.
pub fn normalize_coord(v: f64, extent: usize) -> f64 {
    2.0 * v / (extent.max(2) - 1) as f64 - 1.0
}

// ---------------------------------------------------------------- backward rules

struct BuildTransformRule {
    beta1: f64,
    beta2: f64,
}

impl BackwardRule for BuildTransformRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        let t = x[0].data();
        let mut dt = vec![0.0; t.len()];
        for (k, (tk, gk)) in t.chunks(9).zip(g.data().chunks(9)).enumerate() {
            let gm: Mat3 = [[gk[0], gk[1], gk[2]], [gk[3], gk[4], gk[5]], [gk[6], gk[7], gk[8]]];
            let mats = basic_transforms(tk, self.beta1, self.beta2);
            // prefix[i] = A_0..A_{i-1}, suffix[i] = A_{i+1}..A_4
            let mut prefix = [IDENTITY; 5];
            for i in 1..5 {
                prefix[i] = mat3_mul(&prefix[i - 1], &mats[i - 1]);
            }
            let mut suffix = [IDENTITY; 5];
            for i in (0..4).rev() {
                suffix[i] = mat3_mul(&mats[i + 1], &suffix[i + 1]);
            }
            let dm: Vec<Mat3> = (0..5)
                .map(|i| mat3_mul(&mat3_mul(&transpose(&prefix[i]), &gm), &transpose(&suffix[i])))
                .collect();
            let (s, c) = tk[4].sin_cos();
            let out = &mut dt[k * 9..(k + 1) * 9];
            out[0] = dm[0][0][0];
            out[1] = dm[0][1][1];
            out[2] = dm[1][0][1];
            out[3] = dm[1][1][0];
            out[4] = -s * dm[2][0][0] - c * dm[2][0][1] + c * dm[2][1][0] - s * dm[2][1][1];
            out[5] = self.beta1 * dm[3][0][2];
            out[6] = self.beta2 * dm[3][1][2];
            out[7] = dm[4][2][0];
            out[8] = dm[4][2][1];
        }
        vec![Some(DenseArray::new(x[0].shape().to_vec(), dt).expect("shape"))]
    }
}

struct ProjectRule {
    rel: Vec<[f64; 2]>,
}

impl BackwardRule for ProjectRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        let p = self.rel.len();
        let mut dt = vec![0.0; x[0].len()];
        for (k, tk) in x[0].data().chunks(9).enumerate() {
            let gk = &g.data()[k * p * 2..(k + 1) * p * 2];
            let out = &mut dt[k * 9..(k + 1) * 9];
            for (i, r) in self.rel.iter().enumerate() {
                let h = [r[0], r[1], 1.0];
                let xt = tk[0] * h[0] + tk[1] * h[1] + tk[2];
                let yt = tk[3] * h[0] + tk[4] * h[1] + tk[5];
                // The clamped divisor passes gradient straight through.
                let z = clamp_z(tk[6] * h[0] + tk[7] * h[1] + tk[8]);
                let (gx, gy) = (gk[2 * i], gk[2 * i + 1]);
                let dxt = gx / z;
                let dyt = gy / z;
                let dz = -(gx * xt + gy * yt) / (z * z);
                for j in 0..3 {
                    out[j] += dxt * h[j];
                    out[3 + j] += dyt * h[j];
                    out[6 + j] += dz * h[j];
                }
            }
        }
        vec![Some(DenseArray::new(x[0].shape().to_vec(), dt).expect("shape"))]
    }
}

struct RegLossRule {
    lambda: f64,
    h: usize,
    w: usize,
    batch: usize,
}

impl BackwardRule for RegLossRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        let gs = g.item() / self.batch as f64;
        let (sx, sy) = (2.0 / (self.w.max(2) - 1) as f64, 2.0 / (self.h.max(2) - 1) as f64);
        let d = x[0]
            .data()
            .chunks(2)
            .flat_map(|c| {
                let ux = normalize_coord(c[0], self.w);
                let uy = normalize_coord(c[1], self.h);
                [gs * penalty(ux, self.lambda) * sx, gs * penalty(uy, self.lambda) * sy]
            })
            .collect();
        vec![Some(DenseArray::new(x[0].shape().to_vec(), d).expect("shape"))]
    }
}

/// Parameters of the quadrangle prediction head: a `C → 9N` 1×1 convolution.
#[derive(Clone, Copy, Debug)]
pub struct QuadHead {
    pub weight: Var,
    pub bias: Var,
}

/// Average-pools each `w×w` window of `x` (padded `(B, Hp, Wp, C)`), applies
/// LeakyReLU and the 1×1 convolution, and returns `t` shaped `(B, nW, N, 9)`.
pub fn predict_params(tape: &mut Tape, x: Var, head: &QuadHead, w: usize, heads: usize) -> Result<Var> {
    let c = tape.shape(x).get(3).copied().unwrap_or(0);
    let ws = tape.shape(head.weight).to_vec();
    if ws != [c, 9 * heads] {
        return Err(Error::shape("predict_params", tape.shape(x), &ws));
    }
    let b = tape.shape(x)[0];
    let pooled = tape.mean_pool2d(x, w, w)?;
    let nw = tape.shape(pooled)[1] * tape.shape(pooled)[2];
    let act = tape.leaky_relu(pooled, LEAKY_SLOPE)?;
    let t = tape.conv1x1(act, head.weight, Some(head.bias))?;
    tape.reshape(t, &[b, nw, heads, 9])
}

/// Composes the projective matrix for every `(…, 9)` parameter vector.
pub fn build_transform(tape: &mut Tape, t: Var, beta1: f64, beta2: f64) -> Result<Var> {
    tape.check(t)?;
    let tv = tape.value(t);
    if tv.shape().last() != Some(&9) {
        return Err(Error::invalid("build_transform", format!("expected trailing 9, got {:?}", tv.shape())));
    }
    let mut d = Vec::with_capacity(tv.len());
    for tk in tv.data().chunks(9) {
        d.extend(compose_transform(tk, beta1, beta2).iter().flatten());
    }
    let mut shape = tv.shape().to_vec();
    shape.pop();
    shape.extend([3, 3]);
    let out = DenseArray::new(shape, d)?;
    tape.record(&[t], out, BuildTransformRule { beta1, beta2 })
}

/// Maps every window's token offsets through its transforms and adds the
/// window center back. `transform` is `(B, nW, N, 3, 3)`.
pub fn project_coords(tape: &mut Tape, transform: Var, centers: &WindowCenters) -> Result<Var> {
    tape.check(transform)?;
    let tv = tape.value(transform);
    let s = tv.shape();
    if s.len() != 5 || s[3..] != [3, 3] || s[1] != centers.centers.len() {
        return Err(Error::invalid(
            "project_coords",
            format!("transform {s:?} does not match {} windows", centers.centers.len()),
        ));
    }
    let (b, nw, n) = (s[0], s[1], s[2]);
    let rel = relative_offsets(centers.w);
    let p = rel.len();
    let mut d = Vec::with_capacity(b * nw * n * p * 2);
    for (k, tk) in tv.data().chunks(9).enumerate() {
        let m: Mat3 = [[tk[0], tk[1], tk[2]], [tk[3], tk[4], tk[5]], [tk[6], tk[7], tk[8]]];
        let c = centers.centers[(k / n) % nw];
        for r in &rel {
            let q = project_point(&m, *r);
            d.push(q[0] + c[0]);
            d.push(q[1] + c[1]);
        }
    }
    let out = DenseArray::new(vec![b, nw, n, p, 2], d)?;
    tape.record(&[transform], out, ProjectRule { rel })
}

/// `Σ R(u_x)·u_x + R(u_y)·u_y` over the coordinates of each image, normalized
/// against an `h × w` map and averaged over the leading batch axis. `R` is
/// held constant under differentiation.
pub fn reg_loss(tape: &mut Tape, coords: Var, h: usize, w: usize, cfg: RegConfig) -> Result<Var> {
    tape.check(coords)?;
    let cv = tape.value(coords);
    if cv.shape().last() != Some(&2) {
        return Err(Error::invalid("reg_loss", format!("expected trailing 2, got {:?}", cv.shape())));
    }
    if !cv.all_finite() {
        return Err(Error::Numeric("non-finite quadrangle coordinates".into()));
    }
    let lambda = cfg.lambda();
    let loss: f64 = cv
        .data()
        .chunks(2)
        .map(|c| {
            let ux = normalize_coord(c[0], w);
            let uy = normalize_coord(c[1], h);
            penalty(ux, lambda) * ux + penalty(uy, lambda) * uy
        })
        .sum();
    let batch = cv.shape()[0];
    let loss = loss / batch as f64;
    tape.record(&[coords], DenseArray::scalar(loss), RegLossRule { lambda, h, w, batch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windowing::centers;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn zero_params_give_identity() {
        assert_eq!(compose_transform(&[0.0; 9], 3.0, 5.0), IDENTITY);
    }

    #[test]
    fn quarter_turn() {
        let mut t = [0.0; 9];
        t[4] = FRAC_PI_2;
        let m = compose_transform(&t, 1.0, 1.0);
        assert!(close(&m, &[[0., -1., 0.], [1., 0., 0.], [0., 0., 1.]], 1e-15));
    }

    #[test]
    fn projection_row_divides() {
        let m: Mat3 = [[1., 0., 0.], [0., 1., 0.], [0.1, 0., 1.]];
        let p = project_point(&m, [1.0, 1.0]);
        assert!((p[0] - 1.0 / 1.1).abs() < 1e-15 && (p[1] - 1.0 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn clamp_keeps_sign() {
        assert_eq!(clamp_z(0.0), Z_MIN);
        assert_eq!(clamp_z(-1e-9), -Z_MIN);
        assert_eq!(clamp_z(-0.5), -0.5);
    }

    #[test]
    fn translation_shifts_by_beta_t6() {
        // W = 4, w = 2 -> beta1 = 2; t6 = 0.3 shifts x by 0.6
        let mut t = [0.0; 9];
        t[5] = 0.3;
        let m = compose_transform(&t, 2.0, 2.0);
        for r in relative_offsets(2) {
            let p = project_point(&m, r);
            assert!((p[0] - (r[0] + 0.6)).abs() < 1e-15);
            assert_eq!(p[1], r[1]);
        }
    }

    #[test]
    fn identity_projection_is_exact_on_tape() {
        let c = centers(6, 4, 2);
        let mut tape = Tape::new();
        let t = tape.leaf(DenseArray::zeros(vec![1, c.centers.len(), 3, 9]));
        let tr = build_transform(&mut tape, t, 2.0, 3.0).unwrap();
        let q = project_coords(&mut tape, tr, &c).unwrap();
        let v = tape.value(q);
        let rel = relative_offsets(2);
        for (k, pt) in v.data().chunks(2).enumerate() {
            let win = k / (3 * 4);
            let tok = k % 4;
            let want = [c.centers[win][0] + rel[tok][0], c.centers[win][1] + rel[tok][1]];
            assert_eq!(pt, &want);
        }
    }

    #[test]
    fn penalty_cases() {
        assert_eq!(penalty(0.3, 1.0), 0.0);
        assert_eq!(penalty(2.0, 1.0) * 2.0, 2.0);
        assert_eq!(penalty(-2.0, 0.5) * -2.0, 1.0);
        assert_eq!(penalty(1.0, 1.0), 0.0);
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(RegConfig::new(-0.1).is_err());
        assert!(RegConfig::new(f64::NAN).is_err());
        assert!(RegConfig::new(0.0).is_ok());
    }

    #[test]
    fn reg_loss_zero_inside_map() {
        let mut tape = Tape::new();
        let coords = tape.leaf(DenseArray::from_fn(vec![1, 4, 1, 4, 2], |i| (i % 8) as f64 * 0.9));
        let l = reg_loss(&mut tape, coords, 8, 8, RegConfig::new(1.0).unwrap()).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn reg_loss_is_batch_mean_of_image_sums() {
        // x at normalized 2 on a 5-wide map is pixel 6
        let one = DenseArray::new(vec![1, 1, 1, 2, 2], vec![6.0, 2.0, 2.0, 2.0]).unwrap();
        let two = DenseArray::new(vec![2, 1, 1, 2, 2], [one.data(), one.data()].concat()).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(one);
        let b = tape.leaf(two);
        let cfg = RegConfig::new(1.0).unwrap();
        let la = reg_loss(&mut tape, a, 5, 5, cfg).unwrap();
        let lb = reg_loss(&mut tape, b, 5, 5, cfg).unwrap();
        assert_eq!(tape.value(la).item(), 2.0);
        assert_eq!(tape.value(lb).item(), 2.0);
    }

    #[test]
    fn predict_params_shape_and_zero_init() {
        let mut tape = Tape::new();
        let x = tape.constant(DenseArray::from_fn(vec![2, 4, 6, 5], |i| (i as f64).cos()));
        let head = QuadHead {
            weight: tape.leaf(DenseArray::zeros(vec![5, 27])),
            bias: tape.leaf(DenseArray::zeros(vec![27])),
        };
        let t = predict_params(&mut tape, x, &head, 2, 3).unwrap();
        assert_eq!(tape.shape(t), &[2, 6, 3, 9]);
        assert!(tape.value(t).data().iter().all(|&v| v == 0.0));
        let bad = QuadHead {
            weight: tape.leaf(DenseArray::zeros(vec![4, 27])),
            bias: head.bias,
        };
        assert!(predict_params(&mut tape, x, &bad, 2, 3).is_err());
    }
}
