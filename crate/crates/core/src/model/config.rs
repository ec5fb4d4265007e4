//! Architectural description of the encoder.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weight matrices that can carry a per-language expert bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoeModule {
    K,
    Q,
    V,
    O,
    F,
}

impl MoeModule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(MoeModule::K),
            "q" => Ok(MoeModule::Q),
            "v" => Ok(MoeModule::V),
            "o" => Ok(MoeModule::O),
            "f" => Ok(MoeModule::F),
            other => Err(Error::config(format!("unknown moe module '{other}' (expected k,q,v,o,f)"))),
        }
    }
}

impl fmt::Display for MoeModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            MoeModule::K => 'k',
            MoeModule::Q => 'q',
            MoeModule::V => 'v',
            MoeModule::O => 'o',
            MoeModule::F => 'f',
        };
        write!(f, "{c}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterKind {
    /// Single d_model→n matrix over the mean-pooled shared output.
    Linear,
    /// Dilated conv stack with statistics pooling and a small FFN head.
    Tdnn { channels: usize },
}

pub const TDNN_KERNEL_WIDTH: usize = 3;
pub const TDNN_DILATIONS: [usize; 3] = [1, 2, 3];

/// Feature frontend ahead of the Transformer stack. The desk-scale model
/// runs with `Linear`; `ConvSubsampled` describes the conventional
/// two-layer strided conv frontend of full-scale speech encoders and is
/// supported for parameter accounting only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frontend {
    Linear,
    ConvSubsampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Total Transformer layers L.
    pub num_layers: usize,
    /// Shared (lower) layers N; the remaining L−N layers carry expert banks.
    pub num_shared: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    /// One expert per supported language; the list order fixes expert ids.
    pub languages: Vec<String>,
    /// Which weight matrices are expert-banked. Empty set = vanilla model.
    pub moe_modules: BTreeSet<MoeModule>,
    pub router: RouterKind,
    /// Output tokens including blank (id 0).
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub frontend: Frontend,
}

impl ModelConfig {
    pub fn num_experts(&self) -> usize {
        self.languages.len()
    }

    pub fn num_mle(&self) -> usize {
        self.num_layers - self.num_shared
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn is_vanilla(&self) -> bool {
        self.moe_modules.is_empty()
    }

    pub fn banked(&self, m: MoeModule) -> bool {
        self.moe_modules.contains(&m)
    }

    /// Bank size for a module in an MLE layer: `num_experts` when the
    /// module carries experts, 1 otherwise.
    pub fn bank_size(&self, m: MoeModule) -> usize {
        if self.banked(m) {
            self.num_experts()
        } else {
            1
        }
    }

    pub fn lang_index(&self, name: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_shared == 0 || self.num_shared >= self.num_layers {
            return Err(Error::config(format!(
                "num_shared must satisfy 0 < N < L (got N={}, L={})",
                self.num_shared, self.num_layers
            )));
        }
        if self.languages.is_empty() {
            return Err(Error::config("at least one language/expert is required"));
        }
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::config(format!(
                "d_model ({}) must be a positive multiple of num_heads ({})",
                self.d_model, self.num_heads
            )));
        }
        if self.d_ffn == 0 {
            return Err(Error::config("d_ffn must be positive"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must include blank plus at least one token"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be positive"));
        }
        if let RouterKind::Tdnn { channels } = self.router {
            if channels == 0 {
                return Err(Error::config("tdnn channels must be positive"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.languages {
            if !seen.insert(l.as_str()) {
                return Err(Error::config(format!("duplicate language '{l}'")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn desk_config() -> ModelConfig {
        ModelConfig {
            num_layers: 4,
            num_shared: 2,
            d_model: 32,
            num_heads: 2,
            d_ffn: 64,
            languages: vec!["zh".into(), "en".into(), "ja".into(), "ar".into()],
            moe_modules: [MoeModule::O, MoeModule::V, MoeModule::F].into_iter().collect(),
            router: RouterKind::Tdnn { channels: 48 },
            vocab_size: 24,
            feature_dim: 16,
            frontend: Frontend::Linear,
        }
    }

    #[test]
    fn bank_sizes_follow_moe_set() {
        let cfg = desk_config();
        assert_eq!(cfg.bank_size(MoeModule::V), 4);
        assert_eq!(cfg.bank_size(MoeModule::K), 1);
        assert_eq!(cfg.bank_size(MoeModule::F), 4);
    }

    #[test]
    fn validation_rejects_bad_layer_split() {
        let mut cfg = desk_config();
        cfg.num_shared = 4;
        assert!(cfg.validate().is_err());
        cfg.num_shared = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn validation_rejects_indivisible_heads() {
        let mut cfg = desk_config();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_moe_set_is_vanilla() {
        let mut cfg = desk_config();
        cfg.moe_modules.clear();
        assert!(cfg.is_vanilla());
        assert!(cfg.validate().is_ok());
    }
}
