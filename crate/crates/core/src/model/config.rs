use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Constant token grid after the patch embedding.
    Plain,
    /// Stages with 2× patch merging in between.
    Hierarchical,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[default]
    Quadrangle,
    Window,
}

fn default_in_chans() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_cpe_kernel() -> usize {
    7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Blocks per stage (a single entry for plain models).
    pub depths: Vec<usize>,
    /// Channel width per stage.
    pub channels: Vec<usize>,
    /// Attention heads per stage.
    pub heads: Vec<usize>,
    /// FFN expansion ratio.
    pub mlp_ratio: f64,
    pub window: usize,
    pub patch_size: usize,
    #[serde(default = "default_in_chans")]
    pub in_chans: usize,
    pub image_size: usize,
    pub num_classes: usize,
    /// Weight of the out-of-map penalty.
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub attention: AttentionKind,
    /// Learnable relative position bias (window attention only).
    #[serde(default)]
    pub rel_pos_bias: bool,
    /// Depthwise-convolution position embedding before each attention.
    #[serde(default = "default_true")]
    pub cpe: bool,
    #[serde(default = "default_cpe_kernel")]
    pub cpe_kernel: usize,
}

impl ModelConfig {
    /// Two-stage hierarchical model for 32×32 single-channel inputs.
    pub fn micro_hierarchical() -> Self {
        Self {
            variant: Variant::Hierarchical,
            depths: vec![1, 1],
            channels: vec![16, 32],
            heads: vec![2, 4],
            mlp_ratio: 4.0,
            window: 2,
            patch_size: 4,
            in_chans: 1,
            image_size: 32,
            num_classes: 4,
            lambda: 1.0,
            attention: AttentionKind::Quadrangle,
            rel_pos_bias: false,
            cpe: true,
            cpe_kernel: 7,
        }
    }

    /// Four-block plain model for 32×32 single-channel inputs.
    pub fn micro_plain() -> Self {
        Self {
            variant: Variant::Plain,
            depths: vec![4],
            channels: vec![32],
            heads: vec![4],
            ..Self::micro_hierarchical()
        }
    }

    fn hierarchical_full(depths: Vec<usize>, c: usize, h: usize) -> Self {
        Self {
            variant: Variant::Hierarchical,
            depths,
            channels: vec![c, 2 * c, 4 * c, 8 * c],
            heads: vec![h, 2 * h, 4 * h, 8 * h],
            mlp_ratio: 4.0,
            window: 7,
            patch_size: 4,
            in_chans: 3,
            image_size: 224,
            num_classes: 1000,
            lambda: 1.0,
            attention: AttentionKind::Quadrangle,
            rel_pos_bias: false,
            cpe: true,
            cpe_kernel: 7,
        }
    }

    /// Looks up a named configuration.
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "qformer-micro-h" => Self::micro_hierarchical(),
            "qformer-micro-p" => Self::micro_plain(),
            "qformer-h-t" => Self::hierarchical_full(vec![2, 2, 6, 2], 96, 3),
            "qformer-h-s" => Self::hierarchical_full(vec![2, 2, 18, 2], 96, 3),
            "qformer-h-b" => Self::hierarchical_full(vec![2, 2, 18, 2], 128, 4),
            "qformer-p-b" => Self {
                variant: Variant::Plain,
                depths: vec![12],
                channels: vec![768],
                heads: vec![12],
                patch_size: 16,
                ..Self::hierarchical_full(vec![12], 768, 12)
            },
            _ => return None,
        })
    }

    pub const PRESETS: [&'static str; 6] = [
        "qformer-micro-h",
        "qformer-micro-p",
        "qformer-h-t",
        "qformer-h-s",
        "qformer-h-b",
        "qformer-p-b",
    ];

    /// Desk-scale configurations that are actually trained.
    pub const SHIPPED: [&'static str; 2] = ["qformer-micro-h", "qformer-micro-p"];

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    /// Token grid side length at `stage`.
    pub fn stage_resolution(&self, stage: usize) -> usize {
        self.image_size / self.patch_size / (1 << stage)
    }

    pub fn hidden(&self, stage: usize) -> usize {
        (self.channels[stage] as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let n = self.depths.len();
        if n == 0 {
            problems.push("depths must not be empty".to_string());
        }
        if self.channels.len() != n || self.heads.len() != n {
            problems.push(format!(
                "depths/channels/heads lengths differ ({}, {}, {})",
                n,
                self.channels.len(),
                self.heads.len()
            ));
        }
        if self.variant == Variant::Plain && n != 1 {
            problems.push("plain models have exactly one stage".into());
        }
        for (s, (&c, &h)) in self.channels.iter().zip(&self.heads).enumerate() {
            if h == 0 || c % h != 0 {
                problems.push(format!("stage {s}: {c} channels not divisible by {h} heads"));
            }
        }
        if self.depths.contains(&0) {
            problems.push("every stage needs at least one block".into());
        }
        if !(self.mlp_ratio > 0.0) {
            problems.push(format!("mlp_ratio must be > 0, got {}", self.mlp_ratio));
        }
        if self.window == 0 {
            problems.push("window must be >= 1".into());
        }
        if self.patch_size == 0 || self.in_chans == 0 || self.num_classes < 2 {
            problems.push("patch_size, in_chans must be >= 1 and num_classes >= 2".into());
        }
        if self.cpe && self.cpe_kernel.is_multiple_of(2) {
            problems.push(format!("cpe_kernel must be odd, got {}", self.cpe_kernel));
        }
        if !(self.lambda >= 0.0) {
            problems.push(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.rel_pos_bias && self.attention == AttentionKind::Quadrangle {
            problems.push("relative position bias is only defined for window attention".into());
        }
        if self.patch_size > 0 && n > 0 {
            let downs = 1usize << (n - 1);
            if !self.image_size.is_multiple_of(self.patch_size * downs) || self.image_size == 0 {
                problems.push(format!(
                    "image_size {} not divisible by patch_size·2^(stages−1) = {}",
                    self.image_size,
                    self.patch_size * downs
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ModelConfig::PRESETS {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("nope").is_none());
    }

    #[test]
    fn table_one_tiny_prediction_width() {
        let c = ModelConfig::preset("qformer-h-t").unwrap();
        assert_eq!((c.channels[0], c.heads[0]), (96, 3));
        assert_eq!(9 * c.heads[0], 27);
        assert_eq!(c.depths, vec![2, 2, 6, 2]);
    }

    #[test]
    fn invalid_fields_are_all_reported() {
        let mut c = ModelConfig::micro_hierarchical();
        c.heads = vec![3, 4];
        c.mlp_ratio = 0.0;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("not divisible by 3 heads"), "{msg}");
        assert!(msg.contains("mlp_ratio"), "{msg}");
    }

    #[test]
    fn json_defaults() {
        let js = r#"{"variant":"plain","depths":[2],"channels":[32],"heads":[4],"mlp_ratio":4.0,
                     "window":2,"patch_size":4,"image_size":16,"num_classes":4}"#;
        let c: ModelConfig = serde_json::from_str(js).unwrap();
        assert_eq!(c.attention, AttentionKind::Quadrangle);
        assert!(c.cpe);
        assert_eq!(c.in_chans, 1);
        c.validate().unwrap();
    }
}
