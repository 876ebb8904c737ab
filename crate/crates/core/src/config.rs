//! Model configuration.

use std::fmt;
use std::path::Path;

use crate::error::{CfbtError, Result};
use crate::kv::{self, KvConfig};

/// Which branch features are summed before the prediction head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadInput {
    /// RGB and TIR search features of both branches.
    All,
    /// RGB search features of both branches only.
    Rgb,
}

impl fmt::Display for HeadInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadInput::All => "all",
            HeadInput::Rgb => "rgb",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub template_size: usize,
    pub search_size: usize,
    /// Width reduction of the cross-branch hourglass.
    pub down_factor: usize,
    pub ba_bottleneck: usize,
    /// 1-based layer indices after which CSTAF/CSTCF fire.
    pub cstf_layers: Vec<usize>,
    /// 1-based layer indices hosting DSTA at both residual points.
    pub dsta_layers: Vec<usize>,
    pub cstaf: bool,
    pub cstcf: bool,
    pub drop_rate: f64,
    pub update_interval: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Template crop side as a multiple of sqrt(w*h).
    pub template_factor: f64,
    /// Search crop side as a multiple of sqrt(w*h).
    pub search_factor: f64,
    pub head_channels: usize,
    pub head_input: HeadInput,
    pub cosine_window: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// CPU-trainable configuration.
    pub fn desk() -> Self {
        let embed_dim = 96;
        Self {
            embed_dim,
            depth: 12,
            num_heads: 3,
            patch_size: 16,
            template_size: 64,
            search_size: 128,
            down_factor: 16,
            ba_bottleneck: default_bottleneck(embed_dim),
            cstf_layers: vec![4, 7, 10],
            dsta_layers: vec![5, 6, 11],
            cstaf: true,
            cstcf: true,
            drop_rate: 0.1,
            update_interval: 50,
            lambda1: 2.0,
            lambda2: 5.0,
            template_factor: 2.0,
            search_factor: 4.0,
            head_channels: 64,
            head_input: HeadInput::All,
            cosine_window: false,
        }
    }

    /// ViT-B sized configuration with 128px templates and 256px search regions.
    pub fn paper() -> Self {
        Self {
            embed_dim: 768,
            num_heads: 12,
            template_size: 128,
            search_size: 256,
            ba_bottleneck: default_bottleneck(768),
            head_channels: 256,
            ..Self::desk()
        }
    }

    /// Smallest useful configuration, used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 8,
            depth: 11,
            num_heads: 2,
            patch_size: 4,
            template_size: 8,
            search_size: 16,
            down_factor: 2,
            ba_bottleneck: 2,
            head_channels: 8,
            drop_rate: 0.0,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(CfbtError::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::desk();
        kv::apply_all(&mut cfg, &kv::parse_file(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn template_grid(&self) -> usize {
        self.template_size / self.patch_size
    }

    pub fn search_grid(&self) -> usize {
        self.search_size / self.patch_size
    }

    pub fn n_template(&self) -> usize {
        self.template_grid().pow(2)
    }

    pub fn n_search(&self) -> usize {
        self.search_grid().pow(2)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn reduced_dim(&self) -> usize {
        self.embed_dim / self.down_factor
    }

    pub fn cstf_at(&self, layer: usize) -> bool {
        (self.cstaf || self.cstcf) && self.cstf_layers.contains(&layer)
    }

    pub fn dsta_at(&self, layer: usize) -> bool {
        self.dsta_layers.contains(&layer)
    }

    pub fn has_fusion(&self) -> bool {
        ((self.cstaf || self.cstcf) && !self.cstf_layers.is_empty()) || !self.dsta_layers.is_empty()
    }

    /// The same network with every fusion family removed.
    pub fn without_fusion(&self) -> Self {
        Self {
            cstf_layers: Vec::new(),
            dsta_layers: Vec::new(),
            cstaf: false,
            cstcf: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CfbtError::Config(msg));
        if self.embed_dim == 0 || self.depth == 0 || self.num_heads == 0 || self.patch_size == 0 {
            return bad("embed_dim, depth, num_heads and patch_size must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        for (name, size) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if size == 0 || size % self.patch_size != 0 {
                return bad(format!(
                    "{name} {size} is not a positive multiple of patch_size {}",
                    self.patch_size
                ));
            }
        }
        if self.down_factor == 0 || !self.embed_dim.is_multiple_of(self.down_factor) {
            return bad(format!(
                "down_factor {} does not divide embed_dim {}",
                self.down_factor, self.embed_dim
            ));
        }
        if self.ba_bottleneck == 0 || self.head_channels < 4 || self.update_interval == 0 {
            return bad("ba_bottleneck, update_interval must be positive and head_channels >= 4".into());
        }
        for (name, layers) in [("cstf_layers", &self.cstf_layers), ("dsta_layers", &self.dsta_layers)] {
            if let Some(&l) = layers.iter().find(|&&l| l == 0 || l > self.depth) {
                return bad(format!("{name} contains {l}, outside 1..={}", self.depth));
            }
            if layers.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("{name} must be strictly increasing"));
            }
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return bad(format!("drop_rate {} outside [0, 1]", self.drop_rate));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return bad("loss weights must be nonnegative".into());
        }
        if self.template_factor <= 0.0 || self.search_factor <= 0.0 {
            return bad("context factors must be positive".into());
        }
        Ok(())
    }
}

/// Cross-branch adapter width: 8 at D=768, max(2, D/96) in general.
pub fn default_bottleneck(embed_dim: usize) -> usize {
    (embed_dim / 96).max(2)
}

impl KvConfig for ModelConfig {
    fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "preset" => *self = Self::preset(v)?,
            "embed_dim" => self.embed_dim = kv::value(key, v)?,
            "depth" => self.depth = kv::value(key, v)?,
            "num_heads" => self.num_heads = kv::value(key, v)?,
            "patch_size" => self.patch_size = kv::value(key, v)?,
            "template_size" => self.template_size = kv::value(key, v)?,
            "search_size" => self.search_size = kv::value(key, v)?,
            "down_factor" => self.down_factor = kv::value(key, v)?,
            "ba_bottleneck" => self.ba_bottleneck = kv::value(key, v)?,
            "cstf_layers" => self.cstf_layers = kv::list(key, v)?,
            "dsta_layers" => self.dsta_layers = kv::list(key, v)?,
            "cstaf" => self.cstaf = kv::boolean(key, v)?,
            "cstcf" => self.cstcf = kv::boolean(key, v)?,
            "drop_rate" => self.drop_rate = kv::value(key, v)?,
            "update_interval" => self.update_interval = kv::value(key, v)?,
            "lambda1" => self.lambda1 = kv::value(key, v)?,
            "lambda2" => self.lambda2 = kv::value(key, v)?,
            "template_factor" => self.template_factor = kv::value(key, v)?,
            "search_factor" => self.search_factor = kv::value(key, v)?,
            "head_channels" => self.head_channels = kv::value(key, v)?,
            "head_input" => {
                self.head_input = match v {
                    "all" => HeadInput::All,
                    "rgb" => HeadInput::Rgb,
                    _ => return Err(CfbtError::Config(format!("`head_input`: expected all|rgb, got `{v}`"))),
                }
            }
            "cosine_window" => self.cosine_window = kv::boolean(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("embed_dim", self.embed_dim.to_string()),
            ("depth", self.depth.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("template_size", self.template_size.to_string()),
            ("search_size", self.search_size.to_string()),
            ("down_factor", self.down_factor.to_string()),
            ("ba_bottleneck", self.ba_bottleneck.to_string()),
            ("cstf_layers", kv::format_list(&self.cstf_layers)),
            ("dsta_layers", kv::format_list(&self.dsta_layers)),
            ("cstaf", self.cstaf.to_string()),
            ("cstcf", self.cstcf.to_string()),
            ("drop_rate", self.drop_rate.to_string()),
            ("update_interval", self.update_interval.to_string()),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("template_factor", self.template_factor.to_string()),
            ("search_factor", self.search_factor.to_string()),
            ("head_channels", self.head_channels.to_string()),
            ("head_input", self.head_input.to_string()),
            ("cosine_window", self.cosine_window.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [ModelConfig::desk(), ModelConfig::paper(), ModelConfig::tiny()] {
            cfg.validate().unwrap();
        }
        let paper = ModelConfig::paper();
        assert_eq!(paper.n_template(), 64);
        assert_eq!(paper.n_search(), 256);
        assert_eq!(paper.reduced_dim(), 48);
        assert_eq!(paper.ba_bottleneck, 8);
        assert_eq!(ModelConfig::desk().ba_bottleneck, 2);
    }

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig::paper();
        let text = cfg.to_kv_string();
        let mut back = ModelConfig::desk();
        kv::apply_all(&mut back, &kv::parse_str(&text).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let mut cfg = ModelConfig::desk();
        let err = kv::apply_all(&mut cfg, &kv::parse_str("embed_dimm = 3").unwrap()).unwrap_err();
        assert!(err.to_string().contains("embed_dimm"));
    }

    #[test]
    fn invariants_are_enforced() {
        let mut cfg = ModelConfig::desk();
        cfg.num_heads = 5;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::desk();
        cfg.search_size = 120;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::desk();
        cfg.dsta_layers = vec![5, 13];
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::desk();
        cfg.down_factor = 7;
        assert!(cfg.validate().is_err());

        // overlapping schedules are allowed
        let mut cfg = ModelConfig::desk();
        cfg.dsta_layers = vec![4, 5];
        cfg.validate().unwrap();
    }
}
