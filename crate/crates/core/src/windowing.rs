//! Non-overlapping `w×w` window partition of `(B, H, W, C)` feature maps.
//!
//! Pixel `(row r, col c)` sits at `(x = c, y = r)`; every geometry module uses
//! this convention. Maps whose extents are not multiples of `w` are padded
//! with zeros on the bottom and right.

use crate::array::DenseArray;
use crate::autodiff::{BackwardRule, Tape, Var};
use crate::error::{Error, Result};

/// Windows of one partitioned map, shaped `(B, num_windows, w², C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGrid {
    pub windows: DenseArray,
    pub grid_h: usize,
    pub grid_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub w: usize,
}

impl WindowGrid {
    pub fn num_windows(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Window centers in absolute pixel coordinates, row-major over the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowCenters {
    pub grid_h: usize,
    pub grid_w: usize,
    pub w: usize,
    /// `(x, y)` per window.
    pub centers: Vec<[f64; 2]>,
}

/// Smallest multiple of `w` that is at least `n`.
pub fn padded_extent(n: usize, w: usize) -> usize {
    n.div_ceil(w) * w
}

pub fn partition(x: &DenseArray, w: usize) -> Result<WindowGrid> {
    if x.rank() != 4 {
        return Err(Error::invalid("partition", format!("expected (B,H,W,C), got {:?}", x.shape())));
    }
    if w == 0 {
        return Err(Error::invalid("partition", "window size must be >= 1"));
    }
    let [b, h, wd, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (hp, wp) = (padded_extent(h, w), padded_extent(wd, w));
    let padded = crate::autodiff::pad_data(x, hp, wp);
    let data = partition_exact(padded.data(), b, hp, wp, c, w);
    let (gh, gw) = (hp / w, wp / w);
    Ok(WindowGrid {
        windows: DenseArray::new(vec![b, gh * gw, w * w, c], data)?,
        grid_h: gh,
        grid_w: gw,
        pad_h: hp - h,
        pad_w: wp - wd,
        w,
    })
}

pub fn merge(g: &WindowGrid, h: usize, w_img: usize) -> Result<DenseArray> {
    let s = g.windows.shape();
    let w = g.w;
    let consistent = s.len() == 4
        && s[1] == g.num_windows()
        && s[2] == w * w
        && g.grid_h * w == h + g.pad_h
        && g.grid_w * w == w_img + g.pad_w
        && g.pad_h < w.max(1)
        && g.pad_w < w.max(1);
    if !consistent {
        return Err(Error::invalid(
            "merge",
            format!("window grid {s:?} (grid {}x{}, w {w}) does not fit a {h}x{w_img} map", g.grid_h, g.grid_w),
        ));
    }
    let (b, c) = (s[0], s[3]);
    let (hp, wp) = (g.grid_h * w, g.grid_w * w);
    let data = merge_exact(g.windows.data(), b, hp, wp, c, w);
    let full = DenseArray::new(vec![b, hp, wp, c], data)?;
    Ok(crate::autodiff::crop_data(&full, h, w_img))
}

/// Center of window `(gy, gx)` is `(gx·w + (w−1)/2, gy·w + (w−1)/2)`.
pub fn centers(h: usize, w_img: usize, w: usize) -> WindowCenters {
    let (gh, gw) = (h.div_ceil(w), w_img.div_ceil(w));
    let half = (w as f64 - 1.0) / 2.0;
    let mut centers = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            centers.push([(gx * w) as f64 + half, (gy * w) as f64 + half]);
        }
    }
    WindowCenters {
        grid_h: gh,
        grid_w: gw,
        w,
        centers,
    }
}

/// Token offsets `(x − x^c, y − y^c)` inside a window, row-major.
pub fn relative_offsets(w: usize) -> Vec<[f64; 2]> {
    let half = (w as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(w * w);
    for r in 0..w {
        for c in 0..w {
            out.push([c as f64 - half, r as f64 - half]);
        }
    }
    out
}

fn partition_exact(x: &[f64], b: usize, hp: usize, wp: usize, c: usize, w: usize) -> Vec<f64> {
    let (gh, gw) = (hp / w, wp / w);
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for r in 0..w {
                    let src = ((bi * hp + gy * w + r) * wp + gx * w) * c;
                    out.extend_from_slice(&x[src..src + w * c]);
                }
            }
        }
    }
    out
}

fn merge_exact(x: &[f64], b: usize, hp: usize, wp: usize, c: usize, w: usize) -> Vec<f64> {
    let (gh, gw) = (hp / w, wp / w);
    let mut out = vec![0.0; x.len()];
    let mut src = 0;
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for r in 0..w {
                    let dst = ((bi * hp + gy * w + r) * wp + gx * w) * c;
                    out[dst..dst + w * c].copy_from_slice(&x[src..src + w * c]);
                    src += w * c;
                }
            }
        }
    }
    out
}

struct PartitionRule {
    w: usize,
}
impl BackwardRule for PartitionRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        let s = x[0].shape();
        let d = merge_exact(g.data(), s[0], s[1], s[2], s[3], self.w);
        vec![Some(DenseArray::new(s.to_vec(), d).expect("shape"))]
    }
}

struct MergeRule {
    hp: usize,
    wp: usize,
    w: usize,
}
impl BackwardRule for MergeRule {
    fn backward(&self, x: &[&DenseArray], _: &DenseArray, g: &DenseArray, _: &[bool]) -> Vec<Option<DenseArray>> {
        let s = x[0].shape();
        let d = partition_exact(g.data(), s[0], self.hp, self.wp, s[3], self.w);
        vec![Some(DenseArray::new(s.to_vec(), d).expect("shape"))]
    }
}

impl Tape {
    /// `(B, Hp, Wp, C)` with extents divisible by `w` → `(B, num_windows, w², C)`.
    pub fn window_partition(&mut self, x: Var, w: usize) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        if v.rank() != 4 || w == 0 || !v.shape()[1].is_multiple_of(w) || !v.shape()[2].is_multiple_of(w) {
            return Err(Error::invalid("window_partition", format!("{:?} not divisible into {w}x{w} windows", v.shape())));
        }
        let [b, hp, wp, c] = [v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]];
        let d = partition_exact(v.data(), b, hp, wp, c, w);
        let out = DenseArray::new(vec![b, (hp / w) * (wp / w), w * w, c], d)?;
        self.record(&[x], out, PartitionRule { w })
    }

    /// Inverse of [`Tape::window_partition`] for a `grid_h × grid_w` grid.
    pub fn window_merge(&mut self, x: Var, grid_h: usize, grid_w: usize, w: usize) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        if v.rank() != 4 || v.shape()[1] != grid_h * grid_w || v.shape()[2] != w * w {
            return Err(Error::invalid("window_merge", format!("{:?} is not a {grid_h}x{grid_w} grid of {w}x{w} windows", v.shape())));
        }
        let (b, c) = (v.shape()[0], v.shape()[3]);
        let (hp, wp) = (grid_h * w, grid_w * w);
        let d = merge_exact(v.data(), b, hp, wp, c, w);
        let out = DenseArray::new(vec![b, hp, wp, c], d)?;
        self.record(&[x], out, MergeRule { hp, wp, w })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(shape: Vec<usize>) -> DenseArray {
        DenseArray::from_fn(shape, |i| i as f64 * 0.5 - 3.0)
    }

    #[test]
    fn four_by_four_gives_four_windows() {
        let g = partition(&ramp(vec![1, 4, 4, 3]), 2).unwrap();
        assert_eq!(g.windows.shape(), &[1, 4, 4, 3]);
        assert_eq!((g.pad_h, g.pad_w), (0, 0));
    }

    #[test]
    fn five_by_five_pads_to_six() {
        let g = partition(&ramp(vec![1, 5, 5, 1]), 2).unwrap();
        assert_eq!(g.num_windows(), 9);
        assert_eq!((g.pad_h, g.pad_w), (1, 1));
        // last window holds pixel (4,4) then three zeros
        let last = &g.windows.data()[8 * 4..9 * 4];
        assert_eq!(last, &[ramp(vec![1, 5, 5, 1]).data()[24], 0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_window_is_flattened_map() {
        let x = ramp(vec![1, 2, 2, 2]);
        let g = partition(&x, 2).unwrap();
        assert_eq!(g.windows.data(), x.data());
    }

    #[test]
    fn merge_of_ones_is_ones() {
        let g = WindowGrid {
            windows: DenseArray::ones(vec![2, 6, 4, 3]),
            grid_h: 2,
            grid_w: 3,
            pad_h: 0,
            pad_w: 0,
            w: 2,
        };
        let m = merge(&g, 4, 6).unwrap();
        assert_eq!(m, DenseArray::ones(vec![2, 4, 6, 3]));
    }

    #[test]
    fn merge_rejects_inconsistent_metadata() {
        let mut g = partition(&ramp(vec![1, 4, 4, 1]), 2).unwrap();
        g.grid_w = 3;
        assert!(merge(&g, 4, 4).is_err());
        let g = partition(&ramp(vec![1, 4, 4, 1]), 2).unwrap();
        assert!(merge(&g, 5, 4).is_err());
    }

    #[test]
    fn centers_of_four_by_four() {
        let c = centers(4, 4, 2);
        assert_eq!(c.centers, vec![[0.5, 0.5], [2.5, 0.5], [0.5, 2.5], [2.5, 2.5]]);
    }

    #[test]
    fn centers_unit_window_are_pixels() {
        let c = centers(3, 2, 1);
        assert_eq!(c.centers, vec![[0., 0.], [1., 0.], [0., 1.], [1., 1.], [0., 2.], [1., 2.]]);
        assert_eq!(centers(7, 7, 7).centers, vec![[3.0, 3.0]]);
    }

    #[test]
    fn relative_offsets_span_half_window() {
        for w in 1..9 {
            let half = (w as f64 - 1.0) / 2.0;
            let offs = relative_offsets(w);
            let (mn, mx) = offs
                .iter()
                .flatten()
                .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            assert_eq!((mn, mx), (-half, half));
        }
    }

    #[test]
    fn tape_partition_matches_pure_partition() {
        let x = ramp(vec![2, 4, 6, 3]);
        let g = partition(&x, 2).unwrap();
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let p = t.window_partition(v, 2).unwrap();
        assert_eq!(t.value(p), &g.windows);
        let m = t.window_merge(p, 2, 3, 2).unwrap();
        assert_eq!(t.value(m), &x);
    }

    proptest! {
        #[test]
        fn partition_merge_roundtrip(b in 1usize..3, h in 1usize..11, w_img in 1usize..11, c in 1usize..4, w in 1usize..5) {
            let x = DenseArray::from_fn(vec![b, h, w_img, c], |i| (i as f64).sin());
            let g = partition(&x, w).unwrap();
            prop_assert_eq!(merge(&g, h, w_img).unwrap(), x);
            let again = partition(&merge(&g, h, w_img).unwrap(), w).unwrap();
            prop_assert_eq!(again, g);
        }
    }
}
