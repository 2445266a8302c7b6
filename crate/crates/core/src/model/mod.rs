//! QFormer classifiers assembled from pre-norm transformer blocks:
//!
//! ```text
//! x = z + CPE(z)
//! x = x + Attn(LN(x))
//! x = x + FFN(LN(x))
//! ```
//!
//! Parameters live in an ordered name → array map so checkpoints, gradient
//! checks and the optimizer all address them the same way.

mod checkpoint;
mod config;

pub use checkpoint::{from_bytes, load, save, to_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{AttentionKind, ModelConfig, Variant};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::DenseArray;
use crate::attention::{self, AttentionConfig, AttentionOutput, AttentionParams, Linear};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::quad::{QuadHead, RegConfig};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// How parameters enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Every parameter receives a gradient.
    Train,
    /// Like `Train`, but the quadrangle prediction heads are constants.
    FrozenQuad,
    /// No gradients at all.
    Inference,
}

/// Parameters bound to one tape.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn linear(&self, prefix: &str, bias: bool) -> Result<Linear> {
        Ok(Linear {
            weight: self.get(&format!("{prefix}.weight"))?,
            bias: if bias { Some(self.get(&format!("{prefix}.bias"))?) } else { None },
        })
    }
}

pub fn is_quad_param(name: &str) -> bool {
    name.contains(".attn.quad.")
}

/// Per-attention-layer tensors kept for losses and analysis.
#[derive(Clone, Debug)]
pub struct LayerAux {
    pub name: String,
    pub stage: usize,
    pub block: usize,
    pub heads: usize,
    pub window: usize,
    pub attention: AttentionOutput,
}

pub struct ForwardOutput {
    /// `(B, num_classes)`.
    pub logits: Var,
    /// Sum of the λ-weighted penalties of every quadrangle layer.
    pub reg_loss: Option<Var>,
    pub layers: Vec<LayerAux>,
}

pub struct LossOutput {
    pub total: Var,
    pub cross_entropy: Var,
    pub reg_loss: Option<Var>,
    pub forward: ForwardOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: IndexMap<String, DenseArray>,
}

/// Names and shapes of every parameter `cfg` implies, in canonical order.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
    let p = cfg.patch_size;
    let c0 = cfg.channels[0];
    push("patch_embed.proj.weight".into(), vec![p * p * cfg.in_chans, c0]);
    push("patch_embed.proj.bias".into(), vec![c0]);
    push("patch_embed.norm.weight".into(), vec![c0]);
    push("patch_embed.norm.bias".into(), vec![c0]);
    let w = cfg.window;
    for s in 0..cfg.num_stages() {
        let (c, n, hidden) = (cfg.channels[s], cfg.heads[s], cfg.hidden(s));
        for b in 0..cfg.depths[s] {
            let pre = format!("stages.{s}.blocks.{b}");
            if cfg.cpe {
                push(format!("{pre}.cpe.weight"), vec![cfg.cpe_kernel, cfg.cpe_kernel, c]);
                push(format!("{pre}.cpe.bias"), vec![c]);
            }
            push(format!("{pre}.norm1.weight"), vec![c]);
            push(format!("{pre}.norm1.bias"), vec![c]);
            for l in ["q", "k", "v", "o"] {
                push(format!("{pre}.attn.{l}.weight"), vec![c, c]);
                push(format!("{pre}.attn.{l}.bias"), vec![c]);
            }
            match cfg.attention {
                AttentionKind::Quadrangle => {
                    push(format!("{pre}.attn.quad.weight"), vec![c, 9 * n]);
                    push(format!("{pre}.attn.quad.bias"), vec![9 * n]);
                }
                AttentionKind::Window if cfg.rel_pos_bias => {
                    push(format!("{pre}.attn.rel_pos_bias"), vec![(2 * w - 1).pow(2), n]);
                }
                AttentionKind::Window => {}
            }
            push(format!("{pre}.norm2.weight"), vec![c]);
            push(format!("{pre}.norm2.bias"), vec![c]);
            push(format!("{pre}.mlp.fc1.weight"), vec![c, hidden]);
            push(format!("{pre}.mlp.fc1.bias"), vec![hidden]);
            push(format!("{pre}.mlp.fc2.weight"), vec![hidden, c]);
            push(format!("{pre}.mlp.fc2.bias"), vec![c]);
        }
        if s + 1 < cfg.num_stages() {
            let pre = format!("stages.{s}.downsample");
            push(format!("{pre}.norm.weight"), vec![4 * c]);
            push(format!("{pre}.norm.bias"), vec![4 * c]);
            push(format!("{pre}.reduction.weight"), vec![4 * c, cfg.channels[s + 1]]);
        }
    }
    let cl = *cfg.channels.last().expect("validated");
    push("norm.weight".into(), vec![cl]);
    push("norm.bias".into(), vec![cl]);
    push("head.weight".into(), vec![cl, cfg.num_classes]);
    push("head.bias".into(), vec![cfg.num_classes]);
    out
}

fn init_param(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> DenseArray {
    if is_quad_param(name) {
        // Zero head: t = 0, so every quadrangle starts as its base window.
        return DenseArray::zeros(shape.to_vec());
    }
    let is_norm = name.contains("norm");
    if name.ends_with(".bias") {
        return DenseArray::zeros(shape.to_vec());
    }
    if is_norm {
        return DenseArray::ones(shape.to_vec());
    }
    DenseArray::randn(shape.to_vec(), INIT_STD, rng).map(|v| v.clamp(-2.0 * INIT_STD, 2.0 * INIT_STD))
}

impl Model {
    /// Builds a model with seeded initial weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = parameter_shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let v = init_param(&name, &shape, &mut rng);
                (name, v)
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Builds a model from explicit parameters, which must match `config`
    /// exactly.
    pub fn from_parts(config: ModelConfig, mut params: IndexMap<String, DenseArray>) -> Result<Self> {
        config.validate()?;
        let shapes = parameter_shapes(&config);
        for name in params.keys() {
            if !shapes.iter().any(|(n, _)| n == name) {
                return Err(Error::UnknownParameter(name.clone()));
            }
        }
        let mut ordered = IndexMap::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let v = params.swap_remove(&name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if v.shape() != shape.as_slice() {
                return Err(Error::shape("Model::from_parts", v.shape(), &shape));
            }
            ordered.insert(name, v);
        }
        Ok(Self {
            config,
            params: ordered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, DenseArray> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, DenseArray> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&DenseArray> {
        self.params.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(DenseArray::len).sum()
    }

    /// Sets the penalty weight used by later forward passes.
    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        RegConfig::new(lambda)?;
        self.config.lambda = lambda;
        Ok(())
    }

    /// The same weights run with window attention: quadrangle heads are
    /// dropped, every other parameter is shared.
    pub fn window_twin(&self) -> Result<Self> {
        let mut cfg = self.config.clone();
        cfg.attention = AttentionKind::Window;
        cfg.rel_pos_bias = false;
        let params = self
            .params
            .iter()
            .filter(|(k, _)| !is_quad_param(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self::from_parts(cfg, params)
    }

    pub fn bind(&self, tape: &mut Tape, mode: BindMode) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, value)| {
                let grad = match mode {
                    BindMode::Train => true,
                    BindMode::FrozenQuad => !is_quad_param(name),
                    BindMode::Inference => false,
                };
                let v = if grad { tape.leaf(value.clone()) } else { tape.constant(value.clone()) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Runs the classifier on `images` shaped `(B, H, W, in_chans)`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, images: Var, keep_probs: bool) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let s = tape.shape(images).to_vec();
        let want = [cfg.image_size, cfg.image_size, cfg.in_chans];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::shape("Model::forward", &s, &want));
        }
        let reg = RegConfig::new(cfg.lambda)?;
        let b = s[0];

        let x = tape.space_to_depth(images, cfg.patch_size)?;
        let x = bound.linear("patch_embed.proj", true)?.forward(tape, x)?;
        let mut x = self.norm(tape, bound, "patch_embed.norm", x)?;

        let mut layers = Vec::new();
        let mut reg_total: Option<Var> = None;
        for stage in 0..cfg.num_stages() {
            let attn_cfg = AttentionConfig {
                heads: cfg.heads[stage],
                window: cfg.window,
                reg,
                keep_probs,
            };
            for block in 0..cfg.depths[stage] {
                let name = format!("stages.{stage}.blocks.{block}");
                let (y, aux) = self.block(tape, bound, &name, x, &attn_cfg)?;
                x = y;
                if let Some(r) = aux.reg_loss {
                    reg_total = Some(match reg_total {
                        Some(acc) => tape.add(acc, r)?,
                        None => r,
                    });
                }
                layers.push(LayerAux {
                    name,
                    stage,
                    block,
                    heads: attn_cfg.heads,
                    window: cfg.window,
                    attention: aux,
                });
            }
            if stage + 1 < cfg.num_stages() {
                let pre = format!("stages.{stage}.downsample");
                let m = tape.space_to_depth(x, 2)?;
                let m = self.norm(tape, bound, &format!("{pre}.norm"), m)?;
                x = bound.linear(&format!("{pre}.reduction"), false)?.forward(tape, m)?;
            }
        }

        let x = self.norm(tape, bound, "norm", x)?;
        let xs = tape.shape(x).to_vec();
        let tokens = tape.reshape(x, &[b, xs[1] * xs[2], xs[3]])?;
        let pooled = tape.mean_axis(tokens, 1)?;
        let logits = bound.linear("head", true)?.forward(tape, pooled)?;
        Ok(ForwardOutput {
            logits,
            reg_loss: reg_total,
            layers,
        })
    }

    /// Cross-entropy plus the accumulated quadrangle penalty.
    pub fn loss(&self, tape: &mut Tape, bound: &Bound, images: Var, labels: &[usize]) -> Result<LossOutput> {
        let forward = self.forward(tape, bound, images, false)?;
        let ce = tape.cross_entropy(forward.logits, labels)?;
        let total = match forward.reg_loss {
            Some(r) => tape.add(ce, r)?,
            None => ce,
        };
        Ok(LossOutput {
            total,
            cross_entropy: ce,
            reg_loss: forward.reg_loss,
            forward,
        })
    }

    fn norm(&self, tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let g = bound.get(&format!("{prefix}.weight"))?;
        let b = bound.get(&format!("{prefix}.bias"))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn block(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        pre: &str,
        z: Var,
        attn_cfg: &AttentionConfig,
    ) -> Result<(Var, AttentionOutput)> {
        let cfg = &self.config;
        let x = if cfg.cpe {
            let w = bound.get(&format!("{pre}.cpe.weight"))?;
            let b = bound.get(&format!("{pre}.cpe.bias"))?;
            attention::cpe(tape, z, w, b)?
        } else {
            z
        };
        let h = self.norm(tape, bound, &format!("{pre}.norm1"), x)?;
        let params = AttentionParams {
            q: bound.linear(&format!("{pre}.attn.q"), true)?,
            k: bound.linear(&format!("{pre}.attn.k"), true)?,
            v: bound.linear(&format!("{pre}.attn.v"), true)?,
            o: bound.linear(&format!("{pre}.attn.o"), true)?,
            rel_pos_bias: if cfg.rel_pos_bias {
                Some(bound.get(&format!("{pre}.attn.rel_pos_bias"))?)
            } else {
                None
            },
            quad: match cfg.attention {
                AttentionKind::Quadrangle => Some(QuadHead {
                    weight: bound.get(&format!("{pre}.attn.quad.weight"))?,
                    bias: bound.get(&format!("{pre}.attn.quad.bias"))?,
                }),
                AttentionKind::Window => None,
            },
        };
        let out = match cfg.attention {
            AttentionKind::Quadrangle => attention::quadrangle_attention(tape, h, &params, attn_cfg)?,
            AttentionKind::Window => attention::window_attention(tape, h, &params, attn_cfg)?,
        };
        let x = tape.add(x, out.features)?;
        let h = self.norm(tape, bound, &format!("{pre}.norm2"), x)?;
        let f = bound.linear(&format!("{pre}.mlp.fc1"), true)?.forward(tape, h)?;
        let f = tape.gelu(f)?;
        let f = bound.linear(&format!("{pre}.mlp.fc2"), true)?.forward(tape, f)?;
        Ok((tape.add(x, f)?, out))
    }

    /// Class predictions for `images` without recording gradients.
    pub fn predict(&self, images: &DenseArray) -> Result<DenseArray> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, BindMode::Inference);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &bound, x, false)?;
        Ok(tape.value(out.logits).clone())
    }
}
