//! Closed-form parameter accounting.
//!
//! Train mode counts every expert copy; infer mode counts the shared
//! weights, ONE expert per banked module, and the router — the deployment
//! footprint after expert selection. Counts are pure functions of the
//! config, and for runnable configs they match the actual tensor sizes
//! exactly (see tests).

use serde::Serialize;

use super::config::{Frontend, ModelConfig, MoeModule, RouterKind, TDNN_DILATIONS, TDNN_KERNEL_WIDTH};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    Train,
    Infer,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamBreakdown {
    pub frontend: u64,
    pub shared_block: u64,
    pub mle_block: u64,
    pub final_norm: u64,
    pub output_head: u64,
    pub router: u64,
    pub total: u64,
}

fn ffn_params(d: usize, f: usize) -> u64 {
    (d * f + f + f * d + d) as u64
}

/// Attention projections are bias-free: per module (k/q/v/o) the per-head
/// matrices add up to exactly d_model².
fn attn_module_params(d: usize) -> u64 {
    (d * d) as u64
}

fn layer_params(cfg: &ModelConfig, experts_per_banked: u64) -> u64 {
    let d = cfg.d_model;
    let mut total = 0u64;
    for m in [MoeModule::K, MoeModule::Q, MoeModule::V, MoeModule::O] {
        let copies = if cfg.banked(m) { experts_per_banked } else { 1 };
        total += copies * attn_module_params(d);
    }
    let f_copies = if cfg.banked(MoeModule::F) { experts_per_banked } else { 1 };
    total += f_copies * ffn_params(d, cfg.d_ffn);
    total += 4 * d as u64; // two layer norms
    total
}

fn frontend_params(cfg: &ModelConfig) -> u64 {
    let (f, d) = (cfg.feature_dim, cfg.d_model);
    match cfg.frontend {
        Frontend::Linear => (f * d + d) as u64,
        // Two 3×3 stride-2 convs then a linear onto d_model, the standard
        // subsampling frontend of full-scale speech encoders.
        Frontend::ConvSubsampled => {
            let conv1 = d * 9 + d;
            let conv2 = d * d * 9 + d;
            let reduced = ((f - 1) / 2 - 1) / 2;
            let lin = d * reduced * d + d;
            (conv1 + conv2 + lin) as u64
        }
    }
}

pub fn router_params(cfg: &ModelConfig) -> u64 {
    let (d, n) = (cfg.d_model, cfg.num_experts());
    match cfg.router {
        RouterKind::Linear => (d * n) as u64,
        RouterKind::Tdnn { channels: c } => {
            let w = TDNN_KERNEL_WIDTH;
            let mut total = 0usize;
            let mut c_in = d;
            for _ in TDNN_DILATIONS {
                total += w * c_in * c + c;
                c_in = c;
            }
            total += 2 * c * c + c; // hidden over mean‖std pooling
            total += c * n + n;
            total as u64
        }
    }
}

pub fn param_breakdown(cfg: &ModelConfig, mode: CountMode) -> ParamBreakdown {
    let experts = match mode {
        CountMode::Train => cfg.num_experts() as u64,
        CountMode::Infer => 1,
    };
    let frontend = frontend_params(cfg);
    let shared_block = cfg.num_shared as u64 * layer_params(cfg, 1);
    let mle_block = cfg.num_mle() as u64 * layer_params(cfg, experts);
    let final_norm = 2 * cfg.d_model as u64;
    let output_head = (cfg.d_model * cfg.vocab_size + cfg.vocab_size) as u64;
    let router = router_params(cfg);
    let total = frontend + shared_block + mle_block + final_norm + output_head + router;
    ParamBreakdown { frontend, shared_block, mle_block, final_norm, output_head, router, total }
}

pub fn param_count(cfg: &ModelConfig, mode: CountMode) -> u64 {
    param_breakdown(cfg, mode).total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::weights::EncoderWeights;
    use std::collections::BTreeSet;

    fn paper_config(moe: &[MoeModule], router: RouterKind) -> ModelConfig {
        ModelConfig {
            num_layers: 12,
            num_shared: 6,
            d_model: 512,
            num_heads: 8,
            d_ffn: 2048,
            languages: vec!["zh".into(), "en".into(), "ja".into(), "ar".into()],
            moe_modules: moe.iter().copied().collect(),
            router,
            vocab_size: 17299,
            feature_dim: 80,
            frontend: Frontend::ConvSubsampled,
        }
    }

    fn desk_config() -> ModelConfig {
        ModelConfig {
            num_layers: 3,
            num_shared: 1,
            d_model: 8,
            num_heads: 2,
            d_ffn: 16,
            languages: vec!["zh".into(), "en".into(), "ja".into()],
            moe_modules: [MoeModule::O, MoeModule::V, MoeModule::F].into_iter().collect(),
            router: RouterKind::Tdnn { channels: 10 },
            vocab_size: 6,
            feature_dim: 5,
            frontend: Frontend::Linear,
        }
    }

    fn rel_err(got: u64, want_millions: f64) -> f64 {
        (got as f64 / 1e6 - want_millions).abs() / want_millions
    }

    #[test]
    fn train_count_matches_actual_tensor_sizes() {
        let cfg = desk_config();
        let w = EncoderWeights::init(cfg.clone(), 11).unwrap();
        assert_eq!(w.num_params(), param_count(&cfg, CountMode::Train));
    }

    #[test]
    fn infer_count_matches_stripped_model() {
        let cfg = desk_config();
        let w = EncoderWeights::init(cfg.clone(), 11).unwrap();
        let stripped = w.strip_to_vanilla(1).unwrap();
        assert_eq!(stripped.num_params(), param_count(&cfg, CountMode::Infer));
    }

    #[test]
    fn single_expert_train_equals_infer() {
        let mut cfg = desk_config();
        cfg.languages = vec!["zh".into()];
        assert_eq!(param_count(&cfg, CountMode::Train), param_count(&cfg, CountMode::Infer));
    }

    #[test]
    fn vanilla_train_equals_infer() {
        let mut cfg = desk_config();
        cfg.moe_modules = BTreeSet::new();
        assert_eq!(param_count(&cfg, CountMode::Train), param_count(&cfg, CountMode::Infer));
    }

    #[test]
    fn infer_count_is_independent_of_expert_count() {
        let mut a = desk_config();
        let infer3 = param_count(&a, CountMode::Infer);
        a.languages.push("ar".into());
        // router grows with n; compare the non-router part
        let infer4 = param_count(&a, CountMode::Infer) - router_params(&a);
        let mut one = a.clone();
        one.languages = vec!["zh".into()];
        let infer1 = param_count(&one, CountMode::Infer) - router_params(&one);
        assert_eq!(infer4, infer1);
        let _ = infer3;
    }

    #[test]
    fn bank_delta_closed_form() {
        // train(moe={o,v,f}) − train(moe={f}) == (n−1)·(L−N)·2·d²  exactly
        let ovf = paper_config(&[MoeModule::O, MoeModule::V, MoeModule::F], RouterKind::Linear);
        let f = paper_config(&[MoeModule::F], RouterKind::Linear);
        let delta = param_count(&ovf, CountMode::Train) - param_count(&f, CountMode::Train);
        let n = ovf.num_experts() as u64;
        let lm = ovf.num_mle() as u64;
        let d = ovf.d_model as u64;
        assert_eq!(delta, (n - 1) * lm * 2 * d * d);
    }

    #[test]
    fn paper_scale_counts_within_five_percent() {
        // moe={f}, linear router → 93.7M train / 55.9M infer
        let id1 = paper_config(&[MoeModule::F], RouterKind::Linear);
        assert!(rel_err(param_count(&id1, CountMode::Train), 93.7) < 0.05);
        assert!(rel_err(param_count(&id1, CountMode::Infer), 55.9) < 0.05);

        // moe={o,v,f}, linear router → 103.1M / 55.9M
        let id4 = paper_config(&[MoeModule::O, MoeModule::V, MoeModule::F], RouterKind::Linear);
        assert!(rel_err(param_count(&id4, CountMode::Train), 103.1) < 0.05);
        assert!(rel_err(param_count(&id4, CountMode::Infer), 55.9) < 0.05);

        // moe={o,v,f}, TDNN router (500 channels) → 104.7M / 56.7M
        let id2 = paper_config(
            &[MoeModule::O, MoeModule::V, MoeModule::F],
            RouterKind::Tdnn { channels: 500 },
        );
        assert!(rel_err(param_count(&id2, CountMode::Train), 104.7) < 0.05);
        assert!(rel_err(param_count(&id2, CountMode::Infer), 56.7) < 0.05);
    }
}
