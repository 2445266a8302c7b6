//! Analytic operation counts for a [`ModelConfig`].
//!
//! Convention: a multiply-add is 2 FLOPs; every other arithmetic operation,
//! including `exp`, division and comparison, is 1. Layout operations
//! (padding, partition, permute) are free. Counts follow what the forward
//! pass executes, so padded maps are counted at their padded size and
//! quadrangle attention samples both keys and values.

use serde::Serialize;

use crate::model::{AttentionKind, ModelConfig};
use crate::windowing::padded_extent;

pub const CONVENTION: &str = "multiply-add = 2 FLOPs; exp, division, comparison and other scalar ops = 1 FLOP";

const LN_PER_ELEM: u64 = 7;
const GELU_PER_ELEM: u64 = 9;
/// max, subtract, exp, sum, divide.
const SOFTMAX_PER_ELEM: u64 = 5;
/// 3×3 matrix–vector product plus the perspective divide.
const COORD_PER_POINT: u64 = 9 * 2 + 2;
/// Floor, fractions and the four tap weights.
const WEIGHTS_PER_POINT: u64 = 10;
/// Four 3×3 matrix products, the rotation's sin/cos and the entry fill.
const COMPOSE_PER_TRANSFORM: u64 = 4 * 27 * 2 + 2 + 9;

/// Extra work of one quadrangle-attention layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct QuadFlops {
    pub pool: u64,
    pub predict: u64,
    /// Transform composition and coordinate projection.
    pub coords: u64,
    /// Bilinear interpolation of keys and values, including tap weights.
    pub sampling: u64,
}

impl QuadFlops {
    pub fn total(&self) -> u64 {
        self.pool + self.predict + self.coords + self.sampling
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockFlops {
    pub name: String,
    /// Token grid `(H, W)` before padding.
    pub tokens: (usize, usize),
    pub channels: usize,
    pub heads: usize,
    pub cpe: u64,
    pub norms: u64,
    /// Q, K, V and output projections.
    pub projections: u64,
    /// `Q·Kᵀ`, scaling, bias, softmax and `P·V`.
    pub attention_core: u64,
    pub ffn: u64,
    pub residual: u64,
    pub quad: Option<QuadFlops>,
    /// Closed-form QA extra in multiply-add units.
    pub predicted_extra_macs: f64,
    /// Component sum in multiply-add units: CPE, pool, prediction, sampling, coordinates.
    pub measured_extra_macs: f64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.cpe
            + self.norms
            + self.projections
            + self.attention_core
            + self.ffn
            + self.residual
            + self.quad.map_or(0, |q| q.total())
    }

    pub fn attention(&self) -> u64 {
        self.projections + self.attention_core
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub convention: &'static str,
    pub input: (usize, usize),
    pub patch_embed: u64,
    pub blocks: Vec<BlockFlops>,
    pub downsample: Vec<u64>,
    pub classifier: u64,
    pub total_flops: u64,
    pub attention_flops: u64,
    /// Pool, prediction, coordinates and sampling; CPE is shared with the
    /// window-attention reference and reported separately.
    pub qa_extra_flops: u64,
    pub cpe_flops: u64,
    pub predicted_extra_macs: f64,
    pub measured_extra_macs: f64,
    /// `|measured − predicted| / predicted`.
    pub closed_form_rel_diff: f64,
    /// `qa_extra_flops / total_flops`.
    pub ratio: f64,
    /// `(qa_extra_flops + cpe_flops) / total_flops`.
    pub ratio_with_cpe: f64,
}

fn linear(tokens: u64, cin: u64, cout: u64, bias: bool) -> u64 {
    tokens * cout * (2 * cin + bias as u64)
}

/// Closed-form QA extra `(54 + 4N/w²)·H·W·C` in multiply-add units.
pub fn closed_form_extra(h: usize, w: usize, c: usize, heads: usize, window: usize) -> f64 {
    (54.0 + 4.0 * heads as f64 / (window * window) as f64) * (h * w * c) as f64
}

fn block(cfg: &ModelConfig, name: String, h: usize, w: usize, c: usize, heads: usize, hidden: usize) -> BlockFlops {
    let win = cfg.window;
    let (hp, wp) = (padded_extent(h, win), padded_extent(w, win));
    let t = (h * w) as u64;
    let tp = (hp * wp) as u64;
    let (c64, n64, p) = (c as u64, heads as u64, (win * win) as u64);
    let cp = c64 / n64;
    let windows = ((hp / win) * (wp / win)) as u64;
    let k = cfg.cpe_kernel as u64;

    let cpe = if cfg.cpe { t * c64 * (2 * k * k + 1) + t * c64 } else { 0 };
    let norms = 2 * t * c64 * LN_PER_ELEM;
    let projections = 3 * linear(tp, c64, c64, true) + linear(t, c64, c64, true);
    let logits = windows * n64 * p * p * (2 * cp + 1);
    let bias = if cfg.rel_pos_bias && cfg.attention == AttentionKind::Window {
        windows * n64 * p * p
    } else {
        0
    };
    let core = logits + bias + windows * n64 * p * p * SOFTMAX_PER_ELEM + windows * n64 * p * cp * 2 * p;
    let hid = hidden as u64;
    let ffn = linear(t, c64, hid, true) + t * hid * GELU_PER_ELEM + linear(t, hid, c64, true);
    let residual = 2 * t * c64;

    let (quad, measured) = match cfg.attention {
        AttentionKind::Quadrangle => {
            let points = windows * n64 * p;
            let q = QuadFlops {
                pool: tp * c64 + windows * c64,
                predict: linear(windows, c64, 9 * n64, true) + windows * c64,
                coords: windows * n64 * COMPOSE_PER_TRANSFORM + points * COORD_PER_POINT,
                sampling: points * WEIGHTS_PER_POINT + 2 * points * cp * 4 * 2,
            };
            let (hwc, hw) = ((hp * wp * c) as f64, (hp * wp) as f64);
            let kk = if cfg.cpe { (k * k) as f64 } else { 0.0 };
            let measured = kk * hwc
                + hwc
                + 9.0 * heads as f64 * c as f64 * hw / (win * win) as f64
                + 2.0 * 4.0 * hwc
                + 9.0 * heads as f64 * hw;
            (Some(q), measured)
        }
        AttentionKind::Window => (None, 0.0),
    };
    let predicted = match cfg.attention {
        AttentionKind::Quadrangle => closed_form_extra(hp, wp, c, heads, win),
        AttentionKind::Window => 0.0,
    };
    BlockFlops {
        name,
        tokens: (h, w),
        channels: c,
        heads,
        cpe,
        norms,
        projections,
        attention_core: core,
        ffn,
        residual,
        quad,
        predicted_extra_macs: predicted,
        measured_extra_macs: measured,
    }
}

/// Counts one forward pass of `cfg` on a single `input` image.
pub fn count(cfg: &ModelConfig, input: (usize, usize)) -> FlopsReport {
    let p = cfg.patch_size;
    let (mut h, mut w) = (input.0 / p, input.1 / p);
    let c0 = cfg.channels[0] as u64;
    let t0 = (h * w) as u64;
    let patch_embed = linear(t0, (p * p * cfg.in_chans) as u64, c0, true) + t0 * c0 * LN_PER_ELEM;

    let mut blocks = Vec::new();
    let mut downsample = Vec::new();
    for s in 0..cfg.num_stages() {
        let (c, n, hidden) = (cfg.channels[s], cfg.heads[s], cfg.hidden(s));
        for b in 0..cfg.depths[s] {
            blocks.push(block(cfg, format!("stages.{s}.blocks.{b}"), h, w, c, n, hidden));
        }
        if s + 1 < cfg.num_stages() {
            h /= 2;
            w /= 2;
            let t = (h * w) as u64;
            let cin = 4 * c as u64;
            downsample.push(t * cin * LN_PER_ELEM + linear(t, cin, cfg.channels[s + 1] as u64, false));
        }
    }
    let cl = *cfg.channels.last().expect("validated") as u64;
    let t = (h * w) as u64;
    let classifier = t * cl * LN_PER_ELEM + t * cl + linear(1, cl, cfg.num_classes as u64, true);

    let total_flops = patch_embed
        + blocks.iter().map(BlockFlops::total).sum::<u64>()
        + downsample.iter().sum::<u64>()
        + classifier;
    let attention_flops = blocks.iter().map(BlockFlops::attention).sum();
    let qa_extra_flops = blocks.iter().filter_map(|b| b.quad).map(|q| q.total()).sum();
    let cpe_flops = blocks.iter().map(|b| b.cpe).sum();
    let predicted_extra_macs: f64 = blocks.iter().map(|b| b.predicted_extra_macs).sum();
    let measured_extra_macs: f64 = blocks.iter().map(|b| b.measured_extra_macs).sum();
    let closed_form_rel_diff = if predicted_extra_macs > 0.0 {
        (measured_extra_macs - predicted_extra_macs).abs() / predicted_extra_macs
    } else {
        0.0
    };
    FlopsReport {
        convention: CONVENTION,
        input,
        patch_embed,
        blocks,
        downsample,
        classifier,
        total_flops,
        attention_flops,
        qa_extra_flops,
        cpe_flops,
        predicted_extra_macs,
        measured_extra_macs,
        closed_form_rel_diff,
        ratio: qa_extra_flops as f64 / total_flops as f64,
        ratio_with_cpe: (qa_extra_flops + cpe_flops) as f64 / total_flops as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_config_has_no_extra() {
        let mut cfg = ModelConfig::micro_plain();
        cfg.attention = AttentionKind::Window;
        let r = count(&cfg, (32, 32));
        assert_eq!(r.qa_extra_flops, 0);
        assert_eq!(r.ratio, 0.0);
        assert!(r.blocks.iter().all(|b| b.quad.is_none()));
    }

    #[test]
    fn linear_counts_multiply_adds_twice() {
        assert_eq!(linear(1, 3, 2, false), 12);
        assert_eq!(linear(1, 3, 2, true), 14);
    }

    #[test]
    fn hierarchical_grids_halve() {
        let r = count(&ModelConfig::micro_hierarchical(), (32, 32));
        let grids: Vec<_> = r.blocks.iter().map(|b| b.tokens).collect();
        assert_eq!(grids, vec![(8, 8), (4, 4)]);
        assert_eq!(r.downsample.len(), 1);
    }

    #[test]
    fn quad_and_window_differ_by_extra_only() {
        let qa = ModelConfig::micro_plain();
        let mut win = qa.clone();
        win.attention = AttentionKind::Window;
        let a = count(&qa, (32, 32));
        let b = count(&win, (32, 32));
        assert_eq!(a.total_flops - b.total_flops, a.qa_extra_flops);
    }

    #[test]
    fn closed_form_value() {
        // (54 + 4·12/49)·14·14·768
        let v = closed_form_extra(14, 14, 768, 12, 7);
        assert!((v - (54.0 + 48.0 / 49.0) * 150528.0).abs() < 1e-6);
    }
}
