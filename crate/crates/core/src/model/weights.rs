//! Encoder parameters: shared Transformer layers, expert-banked MLE layers,
//! the LID router, and the CTC output head.
//!
//! Every module that can carry experts is stored as a bank (`Vec<_>`): one
//! entry when the module is shared, `num_experts` entries when it is
//! banked. Forward code indexes the bank with the routed expert, so a
//! single-expert model runs the exact same arithmetic as a vanilla one.
//!
//! Parameters have stable dotted names ("mle1.attn.v.e2.h0"); the expert
//! segment `e<i>` appears only on banked modules. The visitors walk the
//! structure in a fixed order, which also fixes initialization draws,
//! optimizer updates, and checkpoint layout.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::{Frontend, ModelConfig, MoeModule, RouterKind, TDNN_DILATIONS, TDNN_KERNEL_WIDTH};
use crate::error::{Error, Result};
use crate::Tensor;

#[derive(Clone, Debug)]
pub struct LinearW {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug)]
pub struct NormW {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct FfnW {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// One projection per attention head. K/Q/V heads are d_model×d_k,
/// output heads are d_k×d_model (summing per-head outputs is the same
/// arithmetic as concatenating heads into one output matrix).
#[derive(Clone, Debug)]
pub struct HeadProj {
    pub heads: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct AttnW {
    pub wk: Vec<HeadProj>,
    pub wq: Vec<HeadProj>,
    pub wv: Vec<HeadProj>,
    pub wo: Vec<HeadProj>,
}

#[derive(Clone, Debug)]
pub struct LayerW {
    pub norm1: NormW,
    pub attn: AttnW,
    pub norm2: NormW,
    pub ffn: Vec<FfnW>,
}

#[derive(Clone, Debug)]
pub struct ConvW {
    /// Kernel [w × c_in × c_out].
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub enum RouterW {
    Linear { w: Tensor },
    Tdnn { convs: Vec<ConvW>, hidden: LinearW, out: LinearW },
}

#[derive(Clone, Debug)]
pub struct EncoderWeights {
    pub config: ModelConfig,
    pub frontend: LinearW,
    pub shared: Vec<LayerW>,
    pub mle: Vec<LayerW>,
    pub final_norm: NormW,
    pub head: LinearW,
    pub router: RouterW,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-lim, lim);
    let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(data, vec![rows, cols]).expect("xavier shape")
}

fn zeros_vec(n: usize) -> Tensor {
    Tensor::zeros(&[1, n])
}

fn ones_vec(n: usize) -> Tensor {
    Tensor::filled(&[1, n], 1.0)
}

fn norm_w(d: usize) -> NormW {
    NormW { gain: ones_vec(d), bias: zeros_vec(d) }
}

fn head_proj(rng: &mut ChaCha8Rng, cfg: &ModelConfig, out_proj: bool) -> HeadProj {
    let (d, dk) = (cfg.d_model, cfg.head_dim());
    let heads = (0..cfg.num_heads)
        .map(|_| {
            if out_proj {
                xavier(rng, dk, d, d, d)
            } else {
                xavier(rng, d, dk, d, d)
            }
        })
        .collect();
    HeadProj { heads }
}

fn layer_w(rng: &mut ChaCha8Rng, cfg: &ModelConfig, banked: bool) -> LayerW {
    let bank = |m: MoeModule| if banked { cfg.bank_size(m) } else { 1 };
    let projs = |rng: &mut ChaCha8Rng, m: MoeModule, out_proj: bool| -> Vec<HeadProj> {
        (0..bank(m)).map(|_| head_proj(rng, cfg, out_proj)).collect()
    };
    let attn = AttnW {
        wk: projs(rng, MoeModule::K, false),
        wq: projs(rng, MoeModule::Q, false),
        wv: projs(rng, MoeModule::V, false),
        wo: projs(rng, MoeModule::O, true),
    };
    let ffn = (0..bank(MoeModule::F))
        .map(|_| FfnW {
            w1: xavier(rng, cfg.d_model, cfg.d_ffn, cfg.d_model, cfg.d_ffn),
            b1: zeros_vec(cfg.d_ffn),
            w2: xavier(rng, cfg.d_ffn, cfg.d_model, cfg.d_ffn, cfg.d_model),
            b2: zeros_vec(cfg.d_model),
        })
        .collect();
    LayerW { norm1: norm_w(cfg.d_model), attn, norm2: norm_w(cfg.d_model), ffn }
}

impl EncoderWeights {
    /// Fresh weights drawn deterministically from the seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.frontend != Frontend::Linear {
            return Err(Error::config(
                "conv-subsampled frontend is supported for parameter accounting only; \
                 runnable models use the linear frontend",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frontend = LinearW {
            w: xavier(&mut rng, config.feature_dim, config.d_model, config.feature_dim, config.d_model),
            b: zeros_vec(config.d_model),
        };
        let shared = (0..config.num_shared).map(|_| layer_w(&mut rng, &config, false)).collect();
        let mle = (0..config.num_mle()).map(|_| layer_w(&mut rng, &config, true)).collect();
        let final_norm = norm_w(config.d_model);
        let head = LinearW {
            w: xavier(&mut rng, config.d_model, config.vocab_size, config.d_model, config.vocab_size),
            b: zeros_vec(config.vocab_size),
        };
        let n = config.num_experts();
        let router = match config.router {
            RouterKind::Linear => RouterW::Linear { w: xavier(&mut rng, config.d_model, n, config.d_model, n) },
            RouterKind::Tdnn { channels } => {
                let w = TDNN_KERNEL_WIDTH;
                let mut convs = Vec::new();
                let mut c_in = config.d_model;
                for _ in TDNN_DILATIONS {
                    let lim_in = w * c_in;
                    let lim_out = w * channels;
                    let kernel = {
                        let dist = Uniform::new_inclusive(
                            -(6.0 / (lim_in + lim_out) as f64).sqrt(),
                            (6.0 / (lim_in + lim_out) as f64).sqrt(),
                        );
                        let data: Vec<f64> =
                            (0..w * c_in * channels).map(|_| dist.sample(&mut rng)).collect();
                        Tensor::new(data, vec![w, c_in, channels]).expect("kernel shape")
                    };
                    convs.push(ConvW { kernel, bias: zeros_vec(channels) });
                    c_in = channels;
                }
                let hidden = LinearW {
                    w: xavier(&mut rng, 2 * channels, channels, 2 * channels, channels),
                    b: zeros_vec(channels),
                };
                let out = LinearW {
                    w: xavier(&mut rng, channels, n, channels, n),
                    b: zeros_vec(n),
                };
                RouterW::Tdnn { convs, hidden, out }
            }
        };
        Ok(EncoderWeights { config, frontend, shared, mle, final_norm, head, router })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_impl(self, &mut |name, t| f(name, t));
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_mut_impl(self, f);
    }

    pub fn num_params(&self) -> u64 {
        let mut n = 0u64;
        self.visit(&mut |_, t| n += t.numel() as u64);
        n
    }

    pub fn clear_grads(&mut self) {
        self.visit_mut(&mut |_, t| t.clear_grad());
    }

    /// Copy expert 0 over every other entry of every bank, making the model
    /// routing-invariant; used by the bank-symmetry checks.
    pub fn sync_expert_banks(&mut self) {
        for layer in &mut self.mle {
            sync_bank_projs(&mut layer.attn.wk);
            sync_bank_projs(&mut layer.attn.wq);
            sync_bank_projs(&mut layer.attn.wv);
            sync_bank_projs(&mut layer.attn.wo);
            if layer.ffn.len() > 1 {
                let first = layer.ffn[0].clone();
                for f in layer.ffn.iter_mut().skip(1) {
                    *f = first.clone();
                }
            }
        }
    }

    /// Export a vanilla (no-MoE) model keeping only the given expert from
    /// every bank; this is what the infer-mode parameter count describes.
    pub fn strip_to_vanilla(&self, expert: usize) -> Result<EncoderWeights> {
        let n = self.config.num_experts();
        if expert >= n {
            return Err(Error::ExpertOutOfRange { expert, num_experts: n });
        }
        let pick_projs = |bank: &Vec<HeadProj>| -> Vec<HeadProj> {
            vec![bank[if bank.len() > 1 { expert } else { 0 }].clone()]
        };
        let mut config = self.config.clone();
        config.moe_modules.clear();
        let mle = self
            .mle
            .iter()
            .map(|l| LayerW {
                norm1: l.norm1.clone(),
                attn: AttnW {
                    wk: pick_projs(&l.attn.wk),
                    wq: pick_projs(&l.attn.wq),
                    wv: pick_projs(&l.attn.wv),
                    wo: pick_projs(&l.attn.wo),
                },
                norm2: l.norm2.clone(),
                ffn: vec![l.ffn[if l.ffn.len() > 1 { expert } else { 0 }].clone()],
            })
            .collect();
        Ok(EncoderWeights {
            config,
            frontend: self.frontend.clone(),
            shared: self.shared.clone(),
            mle,
            final_norm: self.final_norm.clone(),
            head: self.head.clone(),
            router: self.router.clone(),
        })
    }

    /// SHA-256 over (name, raw little-endian values) of every parameter the
    /// filter admits, in visitor order.
    pub fn hash_params(&self, keep: &dyn Fn(&str) -> bool) -> [u8; 32] {
        let mut hasher = Sha256::new();
        self.visit(&mut |name, t| {
            if keep(name) {
                hasher.update(name.as_bytes());
                hasher.update([0u8]);
                for v in t.data() {
                    hasher.update(v.to_le_bytes());
                }
            }
        });
        hasher.finalize().into()
    }
}

fn sync_bank_projs(bank: &mut Vec<HeadProj>) {
    if bank.len() > 1 {
        let first = bank[0].clone();
        for p in bank.iter_mut().skip(1) {
            *p = first.clone();
        }
    }
}

pub fn is_router_param(name: &str) -> bool {
    name.starts_with("router.")
}

/// Expert index of a banked parameter, parsed from its `e<i>` segment.
/// `None` for shared parameters (unbanked modules never carry the segment).
pub fn expert_of(name: &str) -> Option<usize> {
    for seg in name.split('.') {
        if let Some(num) = seg.strip_prefix('e') {
            if !num.is_empty() && num.bytes().all(|b| b.is_ascii_digit()) {
                return num.parse().ok();
            }
        }
    }
    None
}

/// Bank-aware name segment: banked modules are tagged with their expert.
fn bank_seg(bank_len: usize, idx: usize) -> String {
    if bank_len > 1 {
        format!(".e{idx}")
    } else {
        String::new()
    }
}

// The two walkers below must visit the same names in the same order; the
// `visit_orders_match` test keeps them in lockstep.

fn visit_impl(w: &EncoderWeights, f: &mut dyn FnMut(&str, &Tensor)) {
    f("frontend.w", &w.frontend.w);
    f("frontend.b", &w.frontend.b);
    for (prefix, layers) in [("shared", &w.shared), ("mle", &w.mle)] {
        for (i, layer) in layers.iter().enumerate() {
            let p = format!("{prefix}{i}");
            f(&format!("{p}.norm1.gain"), &layer.norm1.gain);
            f(&format!("{p}.norm1.bias"), &layer.norm1.bias);
            for (mname, bank) in [
                ("k", &layer.attn.wk),
                ("q", &layer.attn.wq),
                ("v", &layer.attn.wv),
                ("o", &layer.attn.wo),
            ] {
                for (e, proj) in bank.iter().enumerate() {
                    let eseg = bank_seg(bank.len(), e);
                    for (h, t) in proj.heads.iter().enumerate() {
                        f(&format!("{p}.attn.{mname}{eseg}.h{h}"), t);
                    }
                }
            }
            f(&format!("{p}.norm2.gain"), &layer.norm2.gain);
            f(&format!("{p}.norm2.bias"), &layer.norm2.bias);
            for (e, ffn) in layer.ffn.iter().enumerate() {
                let eseg = bank_seg(layer.ffn.len(), e);
                f(&format!("{p}.ffn{eseg}.w1"), &ffn.w1);
                f(&format!("{p}.ffn{eseg}.b1"), &ffn.b1);
                f(&format!("{p}.ffn{eseg}.w2"), &ffn.w2);
                f(&format!("{p}.ffn{eseg}.b2"), &ffn.b2);
            }
        }
    }
    f("final_norm.gain", &w.final_norm.gain);
    f("final_norm.bias", &w.final_norm.bias);
    f("head.w", &w.head.w);
    f("head.b", &w.head.b);
    match &w.router {
        RouterW::Linear { w } => f("router.w", w),
        RouterW::Tdnn { convs, hidden, out } => {
            for (i, conv) in convs.iter().enumerate() {
                f(&format!("router.conv{i}.kernel"), &conv.kernel);
                f(&format!("router.conv{i}.bias"), &conv.bias);
            }
            f("router.hidden.w", &hidden.w);
            f("router.hidden.b", &hidden.b);
            f("router.out.w", &out.w);
            f("router.out.b", &out.b);
        }
    }
}

fn visit_mut_impl(w: &mut EncoderWeights, f: &mut dyn FnMut(&str, &mut Tensor)) {
    f("frontend.w", &mut w.frontend.w);
    f("frontend.b", &mut w.frontend.b);
    for (prefix, layers) in [("shared", &mut w.shared), ("mle", &mut w.mle)] {
        for (i, layer) in layers.iter_mut().enumerate() {
            let p = format!("{prefix}{i}");
            f(&format!("{p}.norm1.gain"), &mut layer.norm1.gain);
            f(&format!("{p}.norm1.bias"), &mut layer.norm1.bias);
            for (mname, bank) in [
                ("k", &mut layer.attn.wk),
                ("q", &mut layer.attn.wq),
                ("v", &mut layer.attn.wv),
                ("o", &mut layer.attn.wo),
            ] {
                let blen = bank.len();
                for (e, proj) in bank.iter_mut().enumerate() {
                    let eseg = bank_seg(blen, e);
                    for (h, t) in proj.heads.iter_mut().enumerate() {
                        f(&format!("{p}.attn.{mname}{eseg}.h{h}"), t);
                    }
                }
            }
            f(&format!("{p}.norm2.gain"), &mut layer.norm2.gain);
            f(&format!("{p}.norm2.bias"), &mut layer.norm2.bias);
            let blen = layer.ffn.len();
            for (e, ffn) in layer.ffn.iter_mut().enumerate() {
                let eseg = bank_seg(blen, e);
                f(&format!("{p}.ffn{eseg}.w1"), &mut ffn.w1);
                f(&format!("{p}.ffn{eseg}.b1"), &mut ffn.b1);
                f(&format!("{p}.ffn{eseg}.w2"), &mut ffn.w2);
                f(&format!("{p}.ffn{eseg}.b2"), &mut ffn.b2);
            }
        }
    }
    f("final_norm.gain", &mut w.final_norm.gain);
    f("final_norm.bias", &mut w.final_norm.bias);
    f("head.w", &mut w.head.w);
    f("head.b", &mut w.head.b);
    match &mut w.router {
        RouterW::Linear { w } => f("router.w", w),
        RouterW::Tdnn { convs, hidden, out } => {
            for (i, conv) in convs.iter_mut().enumerate() {
                f(&format!("router.conv{i}.kernel"), &mut conv.kernel);
                f(&format!("router.conv{i}.bias"), &mut conv.bias);
            }
            f("router.hidden.w", &mut hidden.w);
            f("router.hidden.b", &mut hidden.b);
            f("router.out.w", &mut out.w);
            f("router.out.b", &mut out.b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn desk_config() -> ModelConfig {
        ModelConfig {
            num_layers: 3,
            num_shared: 1,
            d_model: 8,
            num_heads: 2,
            d_ffn: 16,
            languages: vec!["zh".into(), "en".into(), "ja".into()],
            moe_modules: [MoeModule::O, MoeModule::V, MoeModule::F].into_iter().collect(),
            router: RouterKind::Linear,
            vocab_size: 6,
            feature_dim: 5,
            frontend: Frontend::Linear,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = EncoderWeights::init(desk_config(), 7).unwrap();
        let b = EncoderWeights::init(desk_config(), 7).unwrap();
        let mut names = Vec::new();
        let mut equal = true;
        a.visit(&mut |name, t| {
            names.push(name.to_string());
            let mut found = false;
            b.visit(&mut |n2, t2| {
                if n2 == name {
                    found = true;
                    if t.data() != t2.data() {
                        equal = false;
                    }
                }
            });
            assert!(found, "missing {name}");
        });
        assert!(equal);
        assert!(!names.is_empty());
    }

    #[test]
    fn visit_orders_match() {
        let mut w = EncoderWeights::init(desk_config(), 3).unwrap();
        let mut names_ro = Vec::new();
        w.visit(&mut |n, _| names_ro.push(n.to_string()));
        let mut names_mut = Vec::new();
        w.visit_mut(&mut |n, _| names_mut.push(n.to_string()));
        assert_eq!(names_ro, names_mut);
        let unique: BTreeSet<_> = names_ro.iter().collect();
        assert_eq!(unique.len(), names_ro.len(), "duplicate parameter names");
    }

    #[test]
    fn expert_tags_only_on_banked_modules() {
        let w = EncoderWeights::init(desk_config(), 3).unwrap();
        w.visit(&mut |name, _| {
            let e = expert_of(name);
            if name.contains(".attn.k") || name.contains(".attn.q") || name.starts_with("shared") {
                assert_eq!(e, None, "{name} should be shared");
            }
            if name.starts_with("mle") && (name.contains(".attn.v") || name.contains(".ffn")) {
                assert!(e.is_some(), "{name} should carry an expert tag");
            }
        });
    }

    #[test]
    fn strip_to_vanilla_picks_one_expert() {
        let w = EncoderWeights::init(desk_config(), 3).unwrap();
        let v = w.strip_to_vanilla(2).unwrap();
        assert!(v.config.is_vanilla());
        assert_eq!(v.mle[0].ffn.len(), 1);
        assert_eq!(v.mle[0].ffn[0].w1.data(), w.mle[0].ffn[2].w1.data());
        assert_eq!(v.mle[0].attn.wk[0].heads[0].data(), w.mle[0].attn.wk[0].heads[0].data());
        assert!(w.strip_to_vanilla(5).is_err());
    }

    #[test]
    fn sync_banks_makes_experts_identical() {
        let mut w = EncoderWeights::init(desk_config(), 3).unwrap();
        assert_ne!(w.mle[0].ffn[0].w1.data(), w.mle[0].ffn[1].w1.data());
        w.sync_expert_banks();
        assert_eq!(w.mle[0].ffn[0].w1.data(), w.mle[0].ffn[1].w1.data());
        assert_eq!(w.mle[0].attn.wv[0].heads[1].data(), w.mle[0].attn.wv[2].heads[1].data());
    }

    #[test]
    fn router_hash_ignores_router_changes_only() {
        let mut w = EncoderWeights::init(desk_config(), 3).unwrap();
        let body = |n: &str| !is_router_param(n);
        let h0 = w.hash_params(&body);
        match &mut w.router {
            RouterW::Linear { w } => w.data_mut()[0] += 1.0,
            _ => unreachable!(),
        }
        assert_eq!(h0, w.hash_params(&body));
        w.frontend.b.data_mut()[0] += 1.0;
        assert_ne!(h0, w.hash_params(&body));
    }
}
