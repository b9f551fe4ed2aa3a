use crate::error::{invalid, Result};

/// Architecture and regularization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Text and decoder width `d`.
    pub d_model: usize,
    /// Fusion width `d_c`.
    pub d_fusion: usize,
    /// Visual width `d_v`.
    pub d_visual: usize,
    /// Text encoder and decoder depth `L`.
    pub text_layers: usize,
    /// Visual encoder depth `H`.
    pub visual_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_text_len: usize,
    pub max_summary_len: usize,
    pub n_images: usize,
    pub regions_per_image: usize,
    pub detector_classes: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
}

impl ModelConfig {
    /// Base-size setting: d = 768, d_c = 256, d_v = 2048, L = 12, H = 4,
    /// 8 heads, 2048 feed-forward, 512/84 token lengths, 5 images × 36
    /// regions, dropout and label smoothing 0.1. The vocabulary is the
    /// bundled 512-id synthetic one and the 1600 detector classes are the
    /// Visual Genome object inventory.
    pub fn paper_default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 768,
            d_fusion: 256,
            d_visual: 2048,
            text_layers: 12,
            visual_layers: 4,
            heads: 8,
            ffn_dim: 2048,
            max_text_len: 512,
            max_summary_len: 84,
            n_images: 5,
            regions_per_image: 36,
            detector_classes: 1600,
            dropout: 0.1,
            label_smoothing: 0.1,
        }
    }

    /// The d = 8 reference configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 32,
            d_model: 8,
            d_fusion: 8,
            d_visual: 16,
            text_layers: 1,
            visual_layers: 1,
            heads: 2,
            ffn_dim: 16,
            max_text_len: 6,
            max_summary_len: 5,
            n_images: 2,
            regions_per_image: 2,
            detector_classes: 4,
            dropout: 0.0,
            label_smoothing: 0.1,
        }
    }

    pub fn visual_len(&self) -> usize {
        self.n_images * self.regions_per_image
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_fusion", self.d_fusion),
            ("d_visual", self.d_visual),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_text_len", self.max_text_len),
            ("n_images", self.n_images),
            ("regions_per_image", self.regions_per_image),
            ("detector_classes", self.detector_classes),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(invalid!("model config: {} must be positive", name));
        }
        if self.max_summary_len < 2 {
            return Err(invalid!("model config: max_summary_len must leave room for END"));
        }
        if self.vocab_size < 4 {
            return Err(invalid!("model config: vocabulary must hold the 4 special ids"));
        }
        for (name, w) in [("d_model", self.d_model), ("d_fusion", self.d_fusion), ("d_visual", self.d_visual)] {
            if w % self.heads != 0 {
                return Err(invalid!("model config: {} = {} not divisible by {} heads", name, w, self.heads));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(invalid!("model config: dropout and label smoothing must lie in [0, 1)"));
        }
        Ok(())
    }
}
