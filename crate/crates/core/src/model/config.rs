use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tensor::Tensor;

/// Shape of the shared transformer body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BodyConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Feature tokens per sample, not counting the CLS token.
    pub tokens: usize,
}

impl BodyConfig {
    pub fn new(
        layers: usize,
        heads: usize,
        hidden: usize,
        tokens: usize,
    ) -> Result<Self, ModelError> {
        let cfg = Self {
            layers,
            heads,
            hidden,
            tokens,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.tokens == 0 {
            return Err(ModelError::Config(format!(
                "body dimensions must be positive: {self:?}"
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    /// 12 layers, 12 heads, 768 hidden, 16×16 feature map.
    pub fn full_scale() -> Self {
        Self::new(12, 12, 768, 256).expect("valid preset")
    }

    /// Desk-scale body used by default experiments.
    pub fn toy() -> Self {
        Self::new(2, 4, 32, 16).expect("valid preset")
    }

    /// The (heads, layers, hidden) capacity ladder at full width.
    pub fn capacity_ladder(tokens: usize) -> [Self; 3] {
        [
            Self::new(4, 4, 256, tokens).expect("valid preset"),
            Self::new(8, 8, 512, tokens).expect("valid preset"),
            Self::new(12, 12, 768, tokens).expect("valid preset"),
        ]
    }

    /// Same heads/layers ladder with hidden sizes divided by eight so the sweep
    /// runs at desk scale.
    pub fn capacity_ladder_desk(tokens: usize) -> [Self; 3] {
        [
            Self::new(4, 4, 32, tokens).expect("valid preset"),
            Self::new(8, 8, 64, tokens).expect("valid preset"),
            Self::new(12, 12, 96, tokens).expect("valid preset"),
        ]
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "full" => Some(Self::full_scale()),
            "small" => Some(Self::capacity_ladder(256)[0]),
            "medium" => Some(Self::capacity_ladder(256)[1]),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Rows of a feature block: CLS plus the feature tokens.
    pub fn block_rows(&self) -> usize {
        self.tokens + 1
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.hidden
    }
}

/// Everything needed to instantiate heads, body and tails for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub body: BodyConfig,
    /// Hidden width of the classification head MLP.
    pub head_hidden: usize,
    /// Learned positional embeddings on the non-CLS tokens.
    pub positional: bool,
    pub classes: usize,
    /// Raw dimension of a classification sample.
    pub sample_dim: usize,
    /// Raw dimension of one image patch for segmentation/detection.
    pub patch_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            body: BodyConfig::toy(),
            head_hidden: 32,
            positional: true,
            classes: 3,
            sample_dim: 8,
            patch_dim: 4,
        }
    }
}

/// One sample's token sequence at the split boundary: `(P+1)×D` with the CLS
/// token at row 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock(Tensor);

impl FeatureBlock {
    pub fn new(tokens: Tensor, cfg: &BodyConfig) -> Result<Self, ModelError> {
        let expected = [cfg.block_rows(), cfg.hidden];
        if tokens.shape() != expected {
            return Err(ModelError::Dimension {
                what: "feature block",
                expected: expected.to_vec(),
                got: tokens.shape().to_vec(),
            });
        }
        Ok(Self(tokens))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn cls(&self) -> &[f32] {
        let d = self.0.shape()[1];
        &self.0.data()[..d]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_must_divide_by_heads() {
        assert!(BodyConfig::new(2, 5, 32, 16).is_err());
        assert!(BodyConfig::new(0, 4, 32, 16).is_err());
        for cfg in BodyConfig::capacity_ladder(256)
            .into_iter()
            .chain(BodyConfig::capacity_ladder_desk(16))
        {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn full_scale_block_is_257_by_768() {
        let cfg = BodyConfig::full_scale();
        assert_eq!((cfg.block_rows(), cfg.hidden), (257, 768));
        assert!(FeatureBlock::new(Tensor::zeros(&[257, 768]), &cfg).is_ok());
        assert!(FeatureBlock::new(Tensor::zeros(&[256, 768]), &cfg).is_err());
    }
}
