//! Inspection of trained models: quadrangle geometry export, learned scale
//! factors and attention distance.

use std::io::Write;

use serde::Serialize;

use crate::array::DenseArray;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{BindMode, LayerAux, Model};
use crate::quad::{quad_corners, Mat3};
use crate::windowing::{centers, relative_offsets};

pub const SCHEMA: u32 = 1;

/// Geometry of one (image, layer, window, head) quadrangle.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuadRecord {
    pub schema: u32,
    pub image: usize,
    pub layer: String,
    pub stage: usize,
    pub block: usize,
    pub window: usize,
    pub head: usize,
    /// Window centre in token pixels, `(x, y)`.
    pub center: [f64; 2],
    pub t: [f64; 9],
    pub transform: Mat3,
    /// Pre-image of the base window's corners, TL, TR, BR, BL.
    pub corners: [[f64; 2]; 4],
    /// `(t₁ + 1, t₂ + 1)`.
    pub scale: [f64; 2],
    /// `t₅`, radians.
    pub rotation: f64,
}

fn forward_aux(model: &Model, images: &DenseArray, keep_probs: bool) -> Result<(Tape, Vec<LayerAux>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, BindMode::Inference);
    let x = tape.constant(images.clone());
    let out = model.forward(&mut tape, &bound, x, keep_probs)?;
    Ok((tape, out.layers))
}

/// Quadrangles of every quadrangle-attention layer for each image of a
/// `(B, H, W, C)` batch, ordered by image, layer, window, head.
pub fn export_quads(model: &Model, images: &DenseArray) -> Result<Vec<QuadRecord>> {
    let (tape, layers) = forward_aux(model, images, false)?;
    let b = images.shape()[0];
    let mut per_image: Vec<Vec<QuadRecord>> = vec![Vec::new(); b];
    for layer in &layers {
        let (Some(t), Some(tr)) = (layer.attention.params, layer.attention.transforms) else {
            continue;
        };
        let (tv, trv) = (tape.value(t), tape.value(tr));
        let (nw, n) = (tv.shape()[1], tv.shape()[2]);
        let (hp, wp) = layer.attention.padded;
        let cs = centers(hp, wp, layer.window);
        for (k, (tk, mk)) in tv.data().chunks(9).zip(trv.data().chunks(9)).enumerate() {
            let (bi, wi, hi) = (k / (nw * n), (k / n) % nw, k % n);
            let m: Mat3 = [[mk[0], mk[1], mk[2]], [mk[3], mk[4], mk[5]], [mk[6], mk[7], mk[8]]];
            let center = cs.centers[wi];
            let rec = QuadRecord {
                schema: SCHEMA,
                image: bi,
                layer: layer.name.clone(),
                stage: layer.stage,
                block: layer.block,
                window: wi,
                head: hi,
                center,
                t: tk.try_into().expect("9 values"),
                transform: m,
                corners: quad_corners(&m, center, layer.window),
                scale: [tk[0] + 1.0, tk[1] + 1.0],
                rotation: tk[4],
            };
            if !rec.corners.iter().flatten().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite quadrangle in {}", layer.name)));
            }
            per_image[bi].push(rec);
        }
    }
    Ok(per_image.into_iter().flatten().collect())
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(records: &[T], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Mean learned scale factors of one head in one layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadScale {
    pub layer: String,
    pub head: usize,
    pub mean_scale: [f64; 2],
}

impl HeadScale {
    /// Largest deviation of either mean scale from 1.
    pub fn deviation(&self) -> f64 {
        (self.mean_scale[0] - 1.0).abs().max((self.mean_scale[1] - 1.0).abs())
    }
}

/// Averages `scale` over images and windows, per layer and head.
pub fn head_scales(records: &[QuadRecord]) -> Vec<HeadScale> {
    let mut acc: Vec<(String, usize, [f64; 2], usize)> = Vec::new();
    for r in records {
        let slot = match acc.iter().position(|(l, h, _, _)| *l == r.layer && *h == r.head) {
            Some(i) => i,
            None => {
                acc.push((r.layer.clone(), r.head, [0.0; 2], 0));
                acc.len() - 1
            }
        };
        let e = &mut acc[slot];
        e.2[0] += r.scale[0];
        e.2[1] += r.scale[1];
        e.3 += 1;
    }
    acc.into_iter()
        .map(|(layer, head, s, n)| HeadScale {
            layer,
            head,
            mean_scale: [s[0] / n as f64, s[1] / n as f64],
        })
        .collect()
}

/// `Σ_k p_k · ‖q − k_k‖₂` for one query.
pub fn query_distance(probs: &[f64], query: [f64; 2], keys: &[[f64; 2]]) -> f64 {
    probs
        .iter()
        .zip(keys)
        .map(|(p, k)| p * (query[0] - k[0]).hypot(query[1] - k[1]))
        .sum()
}

/// Per-query distances of one window and head: `probs` is `P×P` row-major
/// over queries.
pub fn window_distances(probs: &[f64], queries: &[[f64; 2]], keys: &[[f64; 2]]) -> Vec<f64> {
    let p = keys.len();
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| query_distance(&probs[i * p..(i + 1) * p], *q, keys))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerDistance {
    pub schema: u32,
    pub layer: String,
    /// Mean over queries, windows, heads and images, in token pixels.
    pub mean: f64,
    /// Standard deviation across all queries.
    pub std: f64,
    pub queries: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Attention distance of every layer on a `(B, H, W, C)` batch. Key
/// positions are the sampled quadrangle coordinates for quadrangle attention
/// and the window lattice otherwise. Queries in padding are skipped.
pub fn attention_distance(model: &Model, images: &DenseArray) -> Result<Vec<LayerDistance>> {
    let (tape, layers) = forward_aux(model, images, true)?;
    let mut out = Vec::with_capacity(layers.len());
    for layer in &layers {
        let a = &layer.attention;
        let probs = a.attn_probs.ok_or_else(|| Error::invalid("attention_distance", "probabilities not kept"))?;
        let pv = tape.value(probs);
        let s = pv.shape().to_vec();
        let (b, nw, n, p) = (s[0], s[1], s[2], s[3]);
        let fs = tape.shape(a.features);
        let (h, w) = (fs[1] as f64, fs[2] as f64);
        let cs = centers(a.padded.0, a.padded.1, layer.window);
        let rel = relative_offsets(layer.window);
        let coords = a.quad_coords.map(|c| tape.value(c).data());
        let mut dists = Vec::with_capacity(b * nw * n * p);
        for bi in 0..b {
            for wi in 0..nw {
                let c = cs.centers[wi];
                let lattice: Vec<[f64; 2]> = rel.iter().map(|r| [c[0] + r[0], c[1] + r[1]]).collect();
                for hi in 0..n {
                    let k = (bi * nw + wi) * n + hi;
                    let keys: Vec<[f64; 2]> = match coords {
                        Some(d) => d[k * p * 2..(k + 1) * p * 2].chunks(2).map(|c| [c[0], c[1]]).collect(),
                        None => lattice.clone(),
                    };
                    let row = &pv.data()[k * p * p..(k + 1) * p * p];
                    for (q, d) in lattice.iter().zip(window_distances(row, &lattice, &keys)) {
                        if q[0] < w && q[1] < h {
                            dists.push(d);
                        }
                    }
                }
            }
        }
        let (mean, std) = mean_std(&dists);
        out.push(LayerDistance {
            schema: SCHEMA,
            layer: layer.name.clone(),
            mean,
            std,
            queries: dists.len(),
        });
    }
    Ok(out)
}
