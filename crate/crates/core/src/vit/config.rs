use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub layers: usize,
    pub hidden_d: usize,
    pub mlp_size: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub channels: usize,
}

impl ViTConfig {
    /// ViT-B/16: 12 layers, D = 768, MLP 3072, 12 heads.
    pub fn b16(num_classes: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            layers: 12,
            hidden_d: 768,
            mlp_size: 3072,
            heads: 12,
            num_classes,
            channels: 3,
        }
    }

    /// ViT-L/16: 24 layers, D = 1024, MLP 4096, 16 heads.
    pub fn l16(num_classes: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            layers: 24,
            hidden_d: 1024,
            mlp_size: 4096,
            heads: 16,
            num_classes,
            channels: 3,
        }
    }

    /// Miniature model for tests and smoke runs: 32x32 input, 8x8 patches,
    /// 2 layers, D = 32.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            layers: 2,
            hidden_d: 32,
            mlp_size: 64,
            heads: 4,
            num_classes,
            channels: 3,
        }
    }

    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "b16" | "b-16" | "vit-b16" => Ok(Self::b16(num_classes)),
            "l16" | "l-16" | "vit-l16" => Ok(Self::l16(num_classes)),
            "tiny" => Ok(Self::tiny(num_classes)),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected b16, l16 or tiny)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("layers", self.layers),
            ("hidden_d", self.hidden_d),
            ("mlp_size", self.mlp_size),
            ("heads", self.heads),
            ("num_classes", self.num_classes),
            ("channels", self.channels),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.hidden_d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_d, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patches N.
    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    /// Token count including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_d / self.heads
    }

    /// Same architecture apart from the classification head.
    pub fn same_backbone(&self, other: &ViTConfig) -> bool {
        ViTConfig {
            num_classes: 0,
            ..self.clone()
        } == ViTConfig {
            num_classes: 0,
            ..other.clone()
        }
    }

    pub fn with_num_classes(&self, num_classes: usize) -> Self {
        Self {
            num_classes,
            ..self.clone()
        }
    }

    /// `key=value` pairs joined by `;`, as stored in checkpoint headers.
    pub fn to_kv(&self) -> String {
        format!(
            "image_size={};patch_size={};layers={};hidden_d={};mlp_size={};heads={};num_classes={};channels={}",
            self.image_size,
            self.patch_size,
            self.layers,
            self.hidden_d,
            self.mlp_size,
            self.heads,
            self.num_classes,
            self.channels
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for pair in text.split(';').filter(|s| !s.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config entry {pair:?}")))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::Format(format!("bad config value {pair:?}")))?;
            map.insert(k.to_string(), v);
        }
        let mut take = |k: &str| {
            map.remove(k)
                .ok_or_else(|| Error::Format(format!("config is missing {k}")))
        };
        let cfg = Self {
            image_size: take("image_size")?,
            patch_size: take("patch_size")?,
            layers: take("layers")?,
            hidden_d: take("hidden_d")?,
            mlp_size: take("mlp_size")?,
            heads: take("heads")?,
            num_classes: take("num_classes")?,
            channels: take("channels")?,
        };
        if let Some(k) = map.keys().next() {
            return Err(Error::Format(format!("unknown config key {k}")));
        }
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_table() {
        let b = ViTConfig::b16(7);
        assert_eq!(
            (b.layers, b.hidden_d, b.mlp_size, b.heads),
            (12, 768, 3072, 12)
        );
        assert_eq!(b.seq_len(), 197);
        let l = ViTConfig::l16(7);
        assert_eq!(
            (l.layers, l.hidden_d, l.mlp_size, l.heads),
            (24, 1024, 4096, 16)
        );
        assert_eq!(l.seq_len(), 197);
    }

    #[test]
    fn validation() {
        let mut c = ViTConfig::tiny(3);
        assert!(c.validate().is_ok());
        c.image_size = 30;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::tiny(3);
        c.heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_roundtrip() {
        let c = ViTConfig::l16(1000);
        assert_eq!(ViTConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert!(ViTConfig::from_kv("image_size=224").is_err());
    }
}
