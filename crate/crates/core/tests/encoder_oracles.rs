//! Encoder-level oracles: hand-computed attention arithmetic, degenerate
//! depths, expert-bank equivalences, and output contracts.

use blrmoe::model::config::{Frontend, ModelConfig, MoeModule, RouterKind};
use blrmoe::model::encoder::{
    attention_moe_forward, encoder_forward, frontend_forward, shared_block_forward, RoutingPlan,
};
use blrmoe::model::weights::{AttnW, EncoderWeights, HeadProj};
use blrmoe::model::ParamBinder;
use blrmoe::router::{decide, ExpertMask, RoutingMode};
use blrmoe::tensor::TensorBase;
use blrmoe::{Tape, Tensor};

fn t2(rows: &[&[f64]]) -> Tensor {
    TensorBase::from_rows(rows)
}

fn desk_config(moe: &[MoeModule], langs: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 4,
        num_shared: 2,
        d_model: 32,
        num_heads: 2,
        d_ffn: 48,
        languages: ["zh", "en", "ja", "ar"].iter().take(langs).map(|s| s.to_string()).collect(),
        moe_modules: moe.iter().copied().collect(),
        router: RouterKind::Linear,
        vocab_size: 11,
        feature_dim: 7,
        frontend: Frontend::Linear,
    }
}

/// Single-head attention against values computed by hand:
/// H = [[1,2],[0,1]], W_K = I, W_Q = swap, W_V = [[1,1],[0,1]],
/// W_O = [[1,0],[1,1]], d_k = 2.
#[test]
fn attention_matches_hand_arithmetic() {
    let attn = AttnW {
        wk: vec![HeadProj { heads: vec![t2(&[&[1.0, 0.0], &[0.0, 1.0]])] }],
        wq: vec![HeadProj { heads: vec![t2(&[&[0.0, 1.0], &[1.0, 0.0]])] }],
        wv: vec![HeadProj { heads: vec![t2(&[&[1.0, 1.0], &[0.0, 1.0]])] }],
        wo: vec![HeadProj { heads: vec![t2(&[&[1.0, 0.0], &[1.0, 1.0]])] }],
    };
    let mut tape = Tape::new();
    let mut binder = ParamBinder::frozen();
    let h_in = tape.constant(&t2(&[&[1.0, 2.0], &[0.0, 1.0]]));
    let out = attention_moe_forward(&mut tape, &mut binder, "t", &attn, 2, 1, h_in, 0).unwrap();
    let got = tape.value(out);
    let want = [
        3.6788745956044888,
        2.7859163970696592,
        3.0092846479799706,
        2.3395230986533138,
    ];
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-12, "got {g}, want {w}");
    }
}

#[test]
fn single_expert_bank_equals_vanilla_attention() {
    // num_experts = 1: banked attention must equal the plain one exactly
    let cfg = desk_config(&[MoeModule::V, MoeModule::O], 1);
    let w = EncoderWeights::init(cfg, 3).unwrap();
    let layer = &w.mle[0];
    let x = Tensor::filled(&[3, 32], 0.25);
    let mut tape = Tape::new();
    let mut binder = ParamBinder::frozen();
    let xv = tape.constant(&x);
    let banked = attention_moe_forward(&mut tape, &mut binder, "a", &layer.attn, 32, 2, xv, 0).unwrap();
    let banked_vals = tape.value(banked).to_vec();

    let vanilla = w.strip_to_vanilla(0).unwrap();
    let mut tape2 = Tape::new();
    let mut binder2 = ParamBinder::frozen();
    let xv2 = tape2.constant(&x);
    let plain =
        attention_moe_forward(&mut tape2, &mut binder2, "a", &vanilla.mle[0].attn, 32, 2, xv2, 0)
            .unwrap();
    for (a, b) in banked_vals.iter().zip(tape2.value(plain)) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn expert_out_of_range_is_a_routing_error() {
    let cfg = desk_config(&[MoeModule::V], 3);
    let w = EncoderWeights::init(cfg, 4).unwrap();
    let mut tape = Tape::new();
    let mut binder = ParamBinder::frozen();
    let x = tape.constant(&Tensor::zeros(&[2, 32]));
    let err = attention_moe_forward(&mut tape, &mut binder, "a", &w.mle[0].attn, 32, 2, x, 7);
    assert!(matches!(err, Err(blrmoe::Error::ExpertOutOfRange { expert: 7, num_experts: 3 })));
}

#[test]
fn distinct_experts_give_distinct_outputs() {
    let cfg = desk_config(&[MoeModule::O, MoeModule::V, MoeModule::F], 3);
    let w = EncoderWeights::init(cfg, 5).unwrap();
    let x = Tensor::filled(&[3, 32], 0.3);
    let mut outs = Vec::new();
    for e in 0..2 {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen();
        let xv = tape.constant(&x);
        let y = blrmoe::model::encoder::mle_layer_forward(&mut tape, &mut binder, "m", &w.mle[0], xv, e)
            .unwrap();
        outs.push(tape.value(y).to_vec());
    }
    assert_ne!(outs[0], outs[1]);
}

#[test]
fn empty_shared_stack_is_pure_input_projection() {
    let cfg = desk_config(&[], 2);
    let mut w = EncoderWeights::init(cfg, 6).unwrap();
    w.shared.clear(); // degenerate depth N=0
    let feats = t2(&[&[0.1, -0.2, 0.3, 0.0, 0.5, -0.1, 0.2], &[0.4, 0.1, -0.3, 0.2, 0.0, 0.1, -0.2]]);

    let mut tape = Tape::new();
    let mut binder = ParamBinder::frozen();
    let fv = tape.constant(&feats);
    let shared = shared_block_forward(&mut tape, &mut binder, &w, fv).unwrap();
    let got = tape.value(shared).to_vec();

    let mut tape2 = Tape::new();
    let mut binder2 = ParamBinder::frozen();
    let fv2 = tape2.constant(&feats);
    let proj = frontend_forward(&mut tape2, &mut binder2, &w, fv2).unwrap();
    assert_eq!(got, tape2.value(proj));
}

#[test]
fn zeroed_residual_branches_pass_input_through() {
    let cfg = desk_config(&[], 2);
    let mut w = EncoderWeights::init(cfg, 7).unwrap();
    for layer in w.shared.iter_mut() {
        for proj in layer.attn.wo.iter_mut() {
            for h in proj.heads.iter_mut() {
                *h = Tensor::zeros(h.shape());
            }
        }
        for ffn in layer.ffn.iter_mut() {
            ffn.w2 = Tensor::zeros(ffn.w2.shape());
            ffn.b2 = Tensor::zeros(ffn.b2.shape());
        }
    }
    let feats = Tensor::filled(&[3, 7], 0.2);
    let mut tape = Tape::new();
    let mut binder = ParamBinder::frozen();
    let fv = tape.constant(&feats);
    let shared = shared_block_forward(&mut tape, &mut binder, &w, fv).unwrap();
    let got = tape.value(shared).to_vec();

    let mut tape2 = Tape::new();
    let mut binder2 = ParamBinder::frozen();
    let fv2 = tape2.constant(&feats);
    let proj = frontend_forward(&mut tape2, &mut binder2, &w, fv2).unwrap();
    assert_eq!(got, tape2.value(proj));
}

#[test]
fn encoder_output_shapes_match_contract() {
    let cfg = desk_config(&[MoeModule::O, MoeModule::V, MoeModule::F], 4);
    let w = EncoderWeights::init(cfg, 8).unwrap();
    let mask = ExpertMask::full(4);
    for t in [1usize, 5, 9] {
        let feats = Tensor::filled(&[t, 7], 0.1);
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen();
        let fv = tape.constant(&feats);
        let out = encoder_forward(&mut tape, &mut binder, &w, fv, RoutingPlan::Argmax { mask: &mask })
            .unwrap();
        assert_eq!(tape.shape(out.logits), &[t, 11]);
        assert_eq!(tape.shape(out.lid_logits), &[1, 4]);
        assert_eq!(tape.shape(out.shared_out), &[t, 32]);
        assert!(mask.is_active(out.decision.expert));
    }
}

#[test]
fn vanilla_encoder_ignores_the_routing_argument() {
    let cfg = desk_config(&[], 4);
    let w = EncoderWeights::init(cfg, 9).unwrap();
    let feats = Tensor::filled(&[4, 7], 0.15);
    let mask = ExpertMask::full(4);
    let mut logits = Vec::new();
    for lang in 0..4 {
        let d = decide(&[0.0; 4], &mask, RoutingMode::Teacher, Some(lang)).unwrap();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen();
        let fv = tape.constant(&feats);
        let out = encoder_forward(&mut tape, &mut binder, &w, fv, RoutingPlan::Decision(&d)).unwrap();
        logits.push(tape.value(out.logits).to_vec());
    }
    for l in &logits[1..] {
        assert_eq!(&logits[0], l);
    }
}

#[test]
fn symmetric_banks_make_routing_irrelevant() {
    let cfg = desk_config(&[MoeModule::O, MoeModule::V, MoeModule::F], 4);
    let mut w = EncoderWeights::init(cfg, 10).unwrap();
    w.sync_expert_banks();
    let feats = Tensor::filled(&[4, 7], -0.1);
    let mask = ExpertMask::full(4);
    let mut logits = Vec::new();
    for lang in 0..4 {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen();
        let fv = tape.constant(&feats);
        let out = encoder_forward(
            &mut tape,
            &mut binder,
            &w,
            fv,
            RoutingPlan::Teacher { true_lang: lang, mask: &mask },
        )
        .unwrap();
        logits.push(tape.value(out.logits).to_vec());
    }
    for l in &logits[1..] {
        for (a, b) in logits[0].iter().zip(l) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
