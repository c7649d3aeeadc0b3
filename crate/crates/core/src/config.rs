use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub channels: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 96, 128],
            leaky_slope: 0.1,
        }
    }
}

impl PyramidConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Smallest spatial extent for which the deepest level is at least 1x1.
    pub fn min_extent(&self) -> usize {
        1 << self.levels()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub window: usize,
    pub use_layer_norm: bool,
    pub blocks_per_level: usize,
    pub mlp_ratio: usize,
}

impl Default for StConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            heads: 2,
            window: 4,
            use_layer_norm: false,
            blocks_per_level: 2,
            mlp_ratio: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Frames per clip; the embedding width depends on it.
    pub frames: usize,
    pub pyramid: PyramidConfig,
    pub st: StConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_frames(12)
    }
}

impl ModelConfig {
    pub fn with_frames(frames: usize) -> Self {
        Self {
            frames,
            pyramid: PyramidConfig::default(),
            st: StConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if self.frames == 0 {
            return bad("frame count must be positive".into());
        }
        if self.pyramid.channels.is_empty() || self.pyramid.channels.contains(&0) {
            return bad(format!("bad pyramid channels {:?}", self.pyramid.channels));
        }
        let st = &self.st;
        if st.embed_dim == 0 || st.heads == 0 || st.embed_dim % st.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", st.embed_dim, st.heads));
        }
        if st.window == 0 || st.mlp_ratio == 0 {
            return bad("window and mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 8,
            epochs: 20,
            scale_min: 0.5,
            scale_max: 1.0,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(Error::Invalid(format!(
                "resize range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.scale_min, self.scale_max
            )));
        }
        if self.batch == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Invalid("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_recipe() {
        let m = ModelConfig::default();
        assert_eq!(m.pyramid.channels, [16, 32, 64, 96, 128]);
        assert_eq!((m.st.embed_dim, m.st.heads, m.st.window), (32, 2, 4));
        assert!(!m.st.use_layer_norm);
        let t = TrainConfig::default();
        assert_eq!((t.lr, t.batch, t.epochs), (1e-4, 8, 20));
        assert_eq!((t.scale_min, t.scale_max), (0.5, 1.0));
    }

    #[test]
    fn rejects_inconsistent_settings() {
        let mut m = ModelConfig::default();
        m.st.heads = 3;
        assert!(m.validate().is_err());
        let t = TrainConfig { scale_min: 0.0, ..Default::default() };
        assert!(t.validate().is_err());
        let t = TrainConfig { scale_min: 0.9, scale_max: 0.8, ..Default::default() };
        assert!(t.validate().is_err());
    }
}
