//! Experiment configuration: one human-editable TOML file describing the
//! model, corpus, training recipe, and router fine-tuning, plus the
//! resolution step that derives everything a run needs. Every command
//! writes the fully-resolved config next to its outputs for provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::{Frontend, ModelConfig, MoeModule, RouterKind};
use crate::synth::{self, ConfusionPair, CorpusSpec, Dataset, DomainShift, LanguageSpec};
use crate::train::{FinetuneConfig, TrainConfig};

pub const DEFAULT_TDNN_CHANNELS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub shared_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ffn: usize,
    /// Subset of ["k","q","v","o","f"]; empty list = vanilla model.
    pub moe_modules: Vec<String>,
    /// "linear" or "tdnn".
    pub router: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tdnn_channels: Option<usize>,
    /// "linear" (runnable, default) or "conv_subsampled" (accounting only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frontend: Option<String>,
    /// Normally derived from the corpus; set explicitly for
    /// accounting-only configs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSection {
    /// Per-dimension bias drawn uniformly from [−magnitude, magnitude].
    pub bias_magnitude: f64,
    /// Per-dimension log-scale drawn uniformly from [−spread, spread].
    pub scale_spread: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl ShiftSection {
    pub fn build(&self, feature_dim: usize) -> DomainShift {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        let feature_bias: Vec<f64> =
            (0..feature_dim).map(|_| rng.gen_range(-self.bias_magnitude..=self.bias_magnitude)).collect();
        let feature_scale: Vec<f64> =
            (0..feature_dim).map(|_| rng.gen_range(-self.scale_spread..=self.scale_spread).exp()).collect();
        DomainShift { feature_bias, feature_scale, noise_std: self.noise_std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub languages: Vec<String>,
    pub alphabet_size: usize,
    pub alphabet_stride: usize,
    pub feature_dim: usize,
    pub emission_noise_std: f64,
    pub center_spread: f64,
    #[serde(default)]
    pub confusions: Vec<ConfusionPair>,
    pub utterances_per_lang: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub shift: ShiftSection,
}

impl CorpusSection {
    pub fn to_spec(&self) -> CorpusSpec {
        CorpusSpec {
            languages: self.languages.clone(),
            alphabet_size: self.alphabet_size,
            alphabet_stride: self.alphabet_stride,
            feature_dim: self.feature_dim,
            emission_noise_std: self.emission_noise_std,
            center_spread: self.center_spread,
            confusions: self.confusions.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidTuneSection {
    pub utterances_per_lang: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub lr_scale: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl LidTuneSection {
    pub fn to_finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            warmup_steps: self.warmup_steps,
            lr_scale: self.lr_scale,
            grad_clip: self.grad_clip,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub corpus: CorpusSection,
    pub train: TrainConfig,
    pub lid_tune: LidTuneSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config parse error: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Model config with vocab/feature dims derived from the corpus
    /// (explicit overrides win, for accounting-only configs).
    pub fn model_config(&self) -> Result<ModelConfig> {
        let spec = self.corpus.to_spec();
        spec.validate()?;
        let mut moe = std::collections::BTreeSet::new();
        for m in &self.model.moe_modules {
            moe.insert(MoeModule::parse(m)?);
        }
        let router = match self.model.router.as_str() {
            "linear" => RouterKind::Linear,
            "tdnn" => RouterKind::Tdnn {
                channels: self.model.tdnn_channels.unwrap_or(DEFAULT_TDNN_CHANNELS),
            },
            other => return Err(Error::config(format!("unknown router '{other}' (expected linear|tdnn)"))),
        };
        let frontend = match self.model.frontend.as_deref() {
            None | Some("linear") => Frontend::Linear,
            Some("conv_subsampled") => Frontend::ConvSubsampled,
            Some(other) => {
                return Err(Error::config(format!(
                    "unknown frontend '{other}' (expected linear|conv_subsampled)"
                )))
            }
        };
        let cfg = ModelConfig {
            num_layers: self.model.layers,
            num_shared: self.model.shared_layers,
            d_model: self.model.d_model,
            num_heads: self.model.heads,
            d_ffn: self.model.d_ffn,
            languages: self.corpus.languages.clone(),
            moe_modules: moe,
            router,
            vocab_size: self.model.vocab_size.unwrap_or_else(|| spec.vocab_size()),
            feature_dim: self.model.feature_dim.unwrap_or(self.corpus.feature_dim),
            frontend,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with every derived field made explicit; this is what run
    /// directories persist.
    pub fn resolved(&self) -> Result<ExperimentConfig> {
        let model_cfg = self.model_config()?;
        let mut out = self.clone();
        out.model.vocab_size = Some(model_cfg.vocab_size);
        out.model.feature_dim = Some(model_cfg.feature_dim);
        if let RouterKind::Tdnn { channels } = model_cfg.router {
            out.model.tdnn_channels = Some(channels);
        }
        out.model.frontend = Some(
            match model_cfg.frontend {
                Frontend::Linear => "linear",
                Frontend::ConvSubsampled => "conv_subsampled",
            }
            .to_string(),
        );
        Ok(out)
    }
}

/// Everything a run derives from the config.
pub struct Resolved {
    pub config: ExperimentConfig,
    pub model: ModelConfig,
    pub specs: Vec<LanguageSpec>,
    pub shift: DomainShift,
}

/// The three evaluation corpora of a run: in-domain train/test plus the
/// shifted twin of the test set (matched pairs).
pub struct Corpora {
    pub train: Dataset,
    pub test: Dataset,
    pub test_shifted: Dataset,
}

impl Resolved {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let model = config.model_config()?;
        config.train.validate()?;
        let specs = synth::build_language_specs(&config.corpus.to_spec(), config.corpus.seed)?;
        let shift = config.corpus.shift.build(config.corpus.feature_dim);
        Ok(Resolved { config: config.resolved()?, model, specs, shift })
    }

    pub fn build_corpora(&self) -> Result<Corpora> {
        let c = &self.config.corpus;
        let spec = c.to_spec();
        let base = synth::generate_corpus(
            &self.specs,
            &spec,
            c.utterances_per_lang,
            c.seed,
            &DomainShift::none(c.feature_dim),
        )?;
        let (train, test) = synth::split(&base, (c.train_fraction, 1.0 - c.train_fraction), c.seed ^ 0x5EED_5711)?;
        let test_shifted = synth::apply_shift(&test, &self.shift, c.seed ^ 0x0D0_517)?;
        Ok(Corpora { train, test, test_shifted })
    }

    /// Audio-language pairs for router fine-tuning, generated in the
    /// shifted domain; targets exist but only the language label is used.
    pub fn build_lid_pairs(&self) -> Result<Dataset> {
        let c = &self.config.corpus;
        synth::generate_corpus(
            &self.specs,
            &c.to_spec(),
            self.config.lid_tune.utterances_per_lang,
            c.seed ^ 0x11D_7A9E,
            &self.shift,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn example_toml() -> &'static str {
        r#"
[model]
layers = 4
shared_layers = 2
d_model = 32
heads = 2
d_ffn = 64
moe_modules = ["o", "v", "f"]
router = "tdnn"
tdnn_channels = 48

[corpus]
languages = ["zh", "en", "ja", "ar"]
alphabet_size = 8
alphabet_stride = 5
feature_dim = 16
emission_noise_std = 0.3
center_spread = 1.0
utterances_per_lang = 40
train_fraction = 0.8
seed = 1234

[[corpus.confusions]]
a = "zh"
b = "ja"
strength = 0.7

[[corpus.confusions]]
a = "en"
b = "ar"
strength = 0.7

[corpus.shift]
bias_magnitude = 0.8
scale_spread = 0.3
noise_std = 0.15
seed = 777

[train]
lambda_lid = 0.3
epochs = 2
batch_size = 8
warmup_steps = 200
lr_scale = 1.0
dropout = 0.1
grad_clip = 5.0
seed = 17

[lid_tune]
utterances_per_lang = 10
epochs = 2
batch_size = 8
warmup_steps = 50
lr_scale = 1.0
grad_clip = 5.0
seed = 99
"#
    }

    #[test]
    fn parse_serialize_parse_is_identity() {
        let cfg = ExperimentConfig::parse(example_toml()).unwrap();
        let round = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, round);
        // and again through the resolved form
        let resolved = cfg.resolved().unwrap();
        let round2 = ExperimentConfig::parse(&resolved.to_toml()).unwrap();
        assert_eq!(resolved, round2);
    }

    #[test]
    fn vocab_is_derived_from_corpus() {
        let cfg = ExperimentConfig::parse(example_toml()).unwrap();
        let model = cfg.model_config().unwrap();
        // 1 + 3*5 + 8
        assert_eq!(model.vocab_size, 24);
        assert_eq!(model.feature_dim, 16);
        assert_eq!(model.num_experts(), 4);
    }

    #[test]
    fn unknown_field_is_rejected_with_location() {
        let bad = example_toml().replace("lambda_lid = 0.3", "lambda_lid = 0.3\nbogus_field = 1");
        let err = ExperimentConfig::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("bogus_field"), "error should name the field: {err}");
    }

    #[test]
    fn bad_router_name_is_rejected() {
        let bad = example_toml().replace("router = \"tdnn\"", "router = \"mlp\"");
        let cfg = ExperimentConfig::parse(&bad).unwrap();
        assert!(cfg.model_config().is_err());
    }

    #[test]
    fn shift_vectors_are_deterministic() {
        let cfg = ExperimentConfig::parse(example_toml()).unwrap();
        let a = cfg.corpus.shift.build(16);
        let b = cfg.corpus.shift.build(16);
        assert_eq!(a, b);
        assert!(!a.is_identity());
        assert_eq!(a.feature_bias.len(), 16);
    }

    #[test]
    fn corpora_shapes_line_up() {
        let cfg = ExperimentConfig::parse(example_toml()).unwrap();
        let resolved = Resolved::new(&cfg).unwrap();
        let corpora = resolved.build_corpora().unwrap();
        assert_eq!(corpora.train.len(), 128); // 32 per language
        assert_eq!(corpora.test.len(), 32);
        assert_eq!(corpora.test.len(), corpora.test_shifted.len());
        for (a, b) in corpora.test.utterances.iter().zip(&corpora.test_shifted.utterances) {
            assert_eq!(a.target, b.target);
            assert_eq!(a.utterance_id, b.utterance_id);
        }
        let lid = resolved.build_lid_pairs().unwrap();
        assert_eq!(lid.len(), 40);
    }
}
