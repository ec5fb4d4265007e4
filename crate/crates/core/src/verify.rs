//! Runtime verification suite: gradient checks for every differentiable
//! op and the full encoder, a brute-force CTC oracle, expert-equivalence
//! and routing invariants, and replay determinism. `verify` on the CLI
//! runs all of it and exits nonzero on any failure.
//!
//! The brute-force CTC reference enumerates every frame-level path and is
//! deliberately independent of the lattice recursion it checks.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc;
use crate::error::Result;
use crate::gradcheck::{self, BuildFn, DEFAULT_EPS, DEFAULT_TOL};
use crate::kernels;
use crate::model::config::{Frontend, ModelConfig, MoeModule, RouterKind};
use crate::model::{encoder_forward, EncoderWeights, ParamBinder, RoutingPlan};
use crate::router::{self, ExpertMask, RoutingMode};
use crate::synth;
use crate::tape::Tape;
use crate::train::{joint_loss, Trainer, TrainConfig};
use crate::Tensor;

/// Debug hook for validating that the checks can actually fail: negates
/// the analytic matmul gradient before comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    FlipMatmulGrad,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn pass(name: &str, detail: String) -> Self {
        CheckResult { name: name.to_string(), passed: true, detail }
    }

    fn fail(name: &str, detail: String) -> Self {
        CheckResult { name: name.to_string(), passed: false, detail }
    }

    fn from_err(name: &str, max_rel: f64, tol: f64) -> Self {
        let detail = format!("max rel err {max_rel:.3e} (tol {tol:.0e})");
        if max_rel < tol {
            Self::pass(name, detail)
        } else {
            Self::fail(name, detail)
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(data, shape.to_vec()).expect("shape")
}

/// Random tensor that stays away from zero, for kinked ops like ReLU.
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.1..1.5)
        })
        .collect();
    Tensor::new(data, shape.to_vec()).expect("shape")
}

struct OpCheck<'a> {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Box<BuildFn<'a, f64>>,
}

fn op_checks(rng: &mut ChaCha8Rng) -> Vec<OpCheck<'static>> {
    let mut checks: Vec<OpCheck<'static>> = Vec::new();

    let a = rand_tensor(rng, &[3, 4], -1.5, 1.5);
    let b = rand_tensor(rng, &[4, 2], -1.5, 1.5);
    checks.push(OpCheck {
        name: "grad-matmul",
        inputs: vec![a, b],
        build: Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            t.sum_all(y)
        }),
    });

    let a = rand_tensor(rng, &[3, 4], -1.5, 1.5);
    let b = rand_tensor(rng, &[2, 4], -1.5, 1.5);
    checks.push(OpCheck {
        name: "grad-matmul-nt",
        inputs: vec![a, b],
        build: Box::new(|t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            t.sum_all(y)
        }),
    });

    // row-mixing constant so reduction gradients are nondegenerate
    let x = rand_tensor(rng, &[3, 5], -2.0, 2.0);
    let c = rand_tensor(rng, &[5, 3], -1.0, 1.0);
    checks.push(OpCheck {
        name: "grad-softmax",
        inputs: vec![x],
        build: Box::new(move |t, v| {
            let s = t.softmax_rows(v[0])?;
            let cc = t.constant(&c);
            let y = t.matmul(s, cc)?;
            t.sum_all(y)
        }),
    });

    let x = rand_tensor(rng, &[3, 5], -2.0, 2.0);
    let c = rand_tensor(rng, &[5, 3], -1.0, 1.0);
    checks.push(OpCheck {
        name: "grad-log-softmax",
        inputs: vec![x],
        build: Box::new(move |t, v| {
            let s = t.log_softmax_rows(v[0])?;
            let cc = t.constant(&c);
            let y = t.matmul(s, cc)?;
            t.sum_all(y)
        }),
    });

    let x = rand_tensor(rng, &[4, 6], -2.0, 2.0);
    let gain = rand_tensor(rng, &[1, 6], 0.5, 1.5);
    let bias = rand_tensor(rng, &[1, 6], -0.5, 0.5);
    let c = rand_tensor(rng, &[6, 2], -1.0, 1.0);
    checks.push(OpCheck {
        name: "grad-layer-norm",
        inputs: vec![x, gain, bias],
        build: Box::new(move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            let cc = t.constant(&c);
            let y = t.matmul(y, cc)?;
            t.sum_all(y)
        }),
    });

    for dilation in [1usize, 2] {
        let x = rand_tensor(rng, &[6, 3], -1.5, 1.5);
        let k = rand_tensor(rng, &[3, 3, 2], -1.0, 1.0);
        let c = rand_tensor(rng, &[2, 2], -1.0, 1.0);
        checks.push(OpCheck {
            name: if dilation == 1 { "grad-conv1d" } else { "grad-conv1d-dilated" },
            inputs: vec![x, k],
            build: Box::new(move |t, v| {
                let y = t.conv1d(v[0], v[1], dilation)?;
                let cc = t.constant(&c);
                let y = t.matmul(y, cc)?;
                t.sum_all(y)
            }),
        });
    }

    let x = rand_tensor(rng, &[5, 4], -2.0, 2.0);
    let c = rand_tensor(rng, &[8, 2], -1.0, 1.0);
    checks.push(OpCheck {
        name: "grad-stats-pool",
        inputs: vec![x],
        build: Box::new(move |t, v| {
            let y = t.stats_pool(v[0])?;
            let cc = t.constant(&c);
            let y = t.matmul(y, cc)?;
            t.sum_all(y)
        }),
    });

    let x = rand_tensor(rng, &[4, 3], -2.0, 2.0);
    let c = rand_tensor(rng, &[3, 2], -1.0, 1.0);
    checks.push(OpCheck {
        name: "grad-mean-rows",
        inputs: vec![x],
        build: Box::new(move |t, v| {
            let y = t.mean_rows(v[0])?;
            let cc = t.constant(&c);
            let y = t.matmul(y, cc)?;
            t.sum_all(y)
        }),
    });

    let x = rand_tensor_off_zero(rng, &[4, 5]);
    let c = rand_tensor(rng, &[5, 2], -1.0, 1.0);
    checks.push(OpCheck {
        name: "grad-relu",
        inputs: vec![x],
        build: Box::new(move |t, v| {
            let y = t.relu(v[0])?;
            let cc = t.constant(&c);
            let y = t.matmul(y, cc)?;
            t.sum_all(y)
        }),
    });

    let x = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    let bias = rand_tensor(rng, &[1, 4], -1.0, 1.0);
    let c = rand_tensor(rng, &[4, 2], -1.0, 1.0);
    checks.push(OpCheck {
        name: "grad-add-bias",
        inputs: vec![x, bias],
        build: Box::new(move |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            let cc = t.constant(&c);
            let y = t.matmul(y, cc)?;
            t.sum_all(y)
        }),
    });

    let a = rand_tensor(rng, &[3, 3], -1.0, 1.0);
    let b = rand_tensor(rng, &[3, 3], -1.0, 1.0);
    checks.push(OpCheck {
        name: "grad-add-scale-mean",
        inputs: vec![a, b],
        build: Box::new(|t, v| {
            let s = t.scale(v[0], 1.7)?;
            let y = t.add(s, v[1])?;
            t.mean_all(y)
        }),
    });

    let x = rand_tensor(rng, &[4, 4], -1.0, 1.0);
    let c = rand_tensor(rng, &[4, 2], -1.0, 1.0);
    let seed = rng.gen::<u64>();
    checks.push(OpCheck {
        name: "grad-dropout",
        inputs: vec![x],
        build: Box::new(move |t, v| {
            // same seed per rebuild: identical mask for every probe
            t.set_dropout(0.4, seed);
            let y = t.dropout(v[0])?;
            let cc = t.constant(&c);
            let y = t.matmul(y, cc)?;
            t.sum_all(y)
        }),
    });

    // random feasible CTC instance over log-softmax-normalized rows
    let frames = rng.gen_range(3..=5);
    let vocab = rng.gen_range(3..=4);
    let target: Vec<usize> = {
        let len = rng.gen_range(1..=(frames / 2).max(1));
        (0..len).map(|_| rng.gen_range(1..vocab)).collect()
    };
    let logits = rand_tensor(rng, &[frames, vocab], -1.0, 1.0);
    checks.push(OpCheck {
        name: "grad-ctc-loss",
        inputs: vec![logits],
        build: Box::new(move |t, v| {
            let lp = t.log_softmax_rows(v[0])?;
            t.ctc_loss(lp, &target)
        }),
    });

    let logits = rand_tensor(rng, &[1, 5], -2.0, 2.0);
    let label = rng.gen_range(0..5);
    checks.push(OpCheck {
        name: "grad-cross-entropy",
        inputs: vec![logits],
        build: Box::new(move |t, v| t.cross_entropy_logits(v[0], label)),
    });

    checks
}

fn tiny_model_config(moe: &[MoeModule], router: RouterKind, n_langs: usize) -> ModelConfig {
    let langs = ["zh", "en", "ja", "ar"];
    ModelConfig {
        num_layers: 2,
        num_shared: 1,
        d_model: 8,
        num_heads: 2,
        d_ffn: 12,
        languages: langs.iter().take(n_langs).map(|s| s.to_string()).collect(),
        moe_modules: moe.iter().copied().collect(),
        router,
        vocab_size: 6,
        feature_dim: 5,
        frontend: Frontend::Linear,
    }
}

/// Finite-difference checks for every differentiable op, aggregated over
/// `seeds` random draws each.
pub fn gradient_checks(seeds: u64, fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    let mut worst: std::collections::BTreeMap<String, f64> = Default::default();
    let mut order: Vec<String> = Vec::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC4EC + seed);
        for check in op_checks(&mut rng) {
            let mut analytic = gradcheck::analytic_grads(&*check.build, &check.inputs)?;
            if fault == Some(Fault::FlipMatmulGrad) && check.name == "grad-matmul" {
                for g in analytic.iter_mut().flat_map(|g| g.iter_mut()) {
                    *g = -*g;
                }
            }
            let numeric = gradcheck::numeric_grads(&*check.build, &check.inputs, DEFAULT_EPS)?;
            let rep = gradcheck::compare_grads(&analytic, &numeric);
            if !worst.contains_key(check.name) {
                order.push(check.name.to_string());
            }
            let w = worst.entry(check.name.to_string()).or_insert(0.0);
            if rep.max_rel_err > *w {
                *w = rep.max_rel_err;
            }
        }
        // full encoder w.r.t. features
        let mut rng = ChaCha8Rng::seed_from_u64(0xE4C0 + seed);
        let cfg = tiny_model_config(
            &[MoeModule::O, MoeModule::V, MoeModule::F],
            RouterKind::Tdnn { channels: 6 },
            3,
        );
        let w = EncoderWeights::init(cfg, 100 + seed)?;
        let feats = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
        let lang = rng.gen_range(0..3usize);
        let wc = w.clone();
        let build = move |t: &mut Tape<f64>, v: &[crate::tape::Var]| {
            let mask = ExpertMask::full(wc.config.num_experts());
            let mut binder = ParamBinder::frozen();
            let out = encoder_forward(t, &mut binder, &wc, v[0], RoutingPlan::Teacher { true_lang: lang, mask: &mask })?;
            t.mean_all(out.logits)
        };
        let rep = gradcheck::check_gradient(&build, std::slice::from_ref(&feats), DEFAULT_EPS)?;
        if !worst.contains_key("grad-encoder-features") {
            order.push("grad-encoder-features".into());
        }
        let slot = worst.entry("grad-encoder-features".into()).or_insert(0.0);
        if rep.max_rel_err > *slot {
            *slot = rep.max_rel_err;
        }

        // full encoder w.r.t. a sample of parameters, through the joint loss
        let err = encoder_param_grad_check(0xAB5E + seed)?;
        if !worst.contains_key("grad-encoder-params") {
            order.push("grad-encoder-params".into());
        }
        let slot = worst.entry("grad-encoder-params".into()).or_insert(0.0);
        if err > *slot {
            *slot = err;
        }
    }
    Ok(order.iter().map(|name| CheckResult::from_err(name, worst[name], DEFAULT_TOL)).collect())
}

/// Analytic parameter gradients from one training-style backward pass vs
/// finite differences of the same joint loss, on a sample of parameters
/// covering every module kind.
fn encoder_param_grad_check(seed: u64) -> Result<f64> {
    use crate::synth::Batch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_model_config(
        &[MoeModule::O, MoeModule::V, MoeModule::F],
        RouterKind::Tdnn { channels: 6 },
        3,
    );
    let mut weights = EncoderWeights::init(cfg, seed)?;
    let feats = rand_tensor(&mut rng, &[5, 5], -1.0, 1.0);
    let lang = rng.gen_range(0..3usize);
    let target = crate::ctc::LabelSequence::new(vec![rng.gen_range(1..6), rng.gen_range(1..6)], 6).unwrap();
    let batch = Batch { features: feats, target, language: lang, utterance_id: "probe".into() };

    let loss_of = |w: &EncoderWeights| -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen();
        let jl = joint_loss(&mut tape, &mut binder, w, &batch, 0.3)?;
        Ok(tape.scalar_value(jl.total))
    };

    // analytic
    let mut tape = Tape::new();
    let mut binder = ParamBinder::all();
    let jl = joint_loss(&mut tape, &mut binder, &weights, &batch, 0.3)?;
    tape.backward(jl.total)?;
    let mut analytic: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for (name, var) in &binder.bindings {
        if let Some(g) = tape.grad(*var) {
            analytic.insert(name.clone(), g.to_vec());
        }
    }

    let probes: Vec<String> = vec![
        "frontend.w".into(),
        "shared0.norm1.gain".into(),
        "shared0.attn.q.h0".into(),
        "shared0.ffn.w1".into(),
        format!("mle0.attn.v.e{lang}.h1"),
        format!("mle0.attn.o.e{lang}.h0"),
        format!("mle0.ffn.e{lang}.w2"),
        "router.conv0.kernel".into(),
        "router.out.w".into(),
        "head.w".into(),
        "final_norm.gain".into(),
    ];

    let mut max_rel = 0.0f64;
    for pname in &probes {
        let ga = analytic
            .get(pname)
            .unwrap_or_else(|| panic!("no analytic gradient for {pname}"))
            .clone();
        let n_elems = ga.len().min(4);
        for j in 0..n_elems {
            let perturb = |delta: f64, w: &mut EncoderWeights| {
                w.visit_mut(&mut |name, t| {
                    if name == pname {
                        t.data_mut()[j] += delta;
                    }
                });
            };
            perturb(DEFAULT_EPS, &mut weights);
            let plus = loss_of(&weights)?;
            perturb(-2.0 * DEFAULT_EPS, &mut weights);
            let minus = loss_of(&weights)?;
            perturb(DEFAULT_EPS, &mut weights);
            let num = (plus - minus) / (2.0 * DEFAULT_EPS);
            let a = ga[j];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &p in path {
        if p != prev && p != ctc::BLANK {
            out.push(p);
        }
        prev = p;
    }
    out
}

/// Total probability of `target` by exhaustive enumeration of all
/// vocabᵀ frame-level paths.
pub fn ctc_brute_force_prob(log_probs: &[f64], target: &[usize], frames: usize, vocab: usize) -> f64 {
    let mut total = 0.0;
    let n_paths = vocab.pow(frames as u32);
    let mut path = vec![0usize; frames];
    for code in 0..n_paths {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % vocab;
            c /= vocab;
        }
        if collapse_path(&path) == target {
            let logp: f64 = path.iter().enumerate().map(|(t, &k)| log_probs[t * vocab + k]).sum();
            total += logp.exp();
        }
    }
    total
}

/// Lattice recursion vs exhaustive path enumeration on every tiny
/// instance, plus total-probability conservation.
pub fn ctc_oracle_checks() -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC7C0);
    let mut worst: f64 = 0.0;
    let mut cases = 0usize;
    for frames in 1..=4usize {
        for vocab in 2..=3usize {
            let logits = rand_tensor(&mut rng, &[frames, vocab], -1.5, 1.5);
            let mut lp = vec![0.0; frames * vocab];
            kernels::log_softmax_rows(logits.data(), &mut lp, frames, vocab);
            // all targets of length ≤ 2 over the non-blank tokens
            let mut targets: Vec<Vec<usize>> = vec![vec![]];
            for a in 1..vocab {
                targets.push(vec![a]);
                for b in 1..vocab {
                    targets.push(vec![a, b]);
                }
            }
            for target in &targets {
                cases += 1;
                let brute = ctc_brute_force_prob(&lp, target, frames, vocab);
                match ctc::forward_alpha(&lp, target, frames, vocab) {
                    Ok((_, loss)) => {
                        let diff = (loss - (-brute.ln())).abs();
                        if diff > worst {
                            worst = diff;
                        }
                    }
                    Err(_) => {
                        // infeasible target: enumeration must agree there
                        // are no matching paths
                        if brute != 0.0 {
                            results.push(CheckResult::fail(
                                "ctc-oracle-enumeration",
                                format!("recursion rejected target {target:?} but enumeration found mass {brute}"),
                            ));
                            return Ok(results);
                        }
                    }
                }
            }
        }
    }
    results.push(if worst < 1e-10 {
        CheckResult::pass("ctc-oracle-enumeration", format!("{cases} instances, max |Δloss| {worst:.2e}"))
    } else {
        CheckResult::fail("ctc-oracle-enumeration", format!("max |Δloss| {worst:.2e} exceeds 1e-10"))
    });

    // Σ over all decodable targets of exp(−loss) must be 1
    let (frames, vocab) = (3usize, 3usize);
    let logits = rand_tensor(&mut rng, &[frames, vocab], -1.0, 1.0);
    let mut lp = vec![0.0; frames * vocab];
    kernels::log_softmax_rows(logits.data(), &mut lp, frames, vocab);
    let mut total = 0.0;
    let mut stack: Vec<Vec<usize>> = vec![vec![]];
    while let Some(t) = stack.pop() {
        if t.len() < frames {
            for a in 1..vocab {
                let mut next = t.clone();
                next.push(a);
                stack.push(next);
            }
        }
        if let Ok((_, loss)) = ctc::forward_alpha(&lp, &t, frames, vocab) {
            total += (-loss).exp();
        }
    }
    results.push(if (total - 1.0).abs() < 1e-8 {
        CheckResult::pass("ctc-total-probability", format!("sum over targets = {total:.12}"))
    } else {
        CheckResult::fail("ctc-total-probability", format!("sum over targets = {total:.12}"))
    });
    Ok(results)
}

/// Forward one utterance through a model, argmax routing, full mask.
fn forward_logits(w: &EncoderWeights, feats: &Tensor, plan_expert: Option<usize>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut binder = ParamBinder::frozen();
    let mask = ExpertMask::full(w.config.num_experts());
    let feat = tape.constant(feats);
    let out = match plan_expert {
        None => encoder_forward(&mut tape, &mut binder, w, feat, RoutingPlan::Argmax { mask: &mask })?,
        Some(e) => {
            let d = router::decide(&vec![0.0; w.config.num_experts()], &mask, RoutingMode::Teacher, Some(e))?;
            encoder_forward(&mut tape, &mut binder, w, feat, RoutingPlan::Decision(&d))?
        }
    };
    Ok(tape.value(out.logits).to_vec())
}

/// Single-expert degeneracy and expert-bank symmetry.
pub fn equivalence_checks(num_inputs: usize) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0E00);

    // single expert ≡ vanilla
    let cfg = tiny_model_config(
        &[MoeModule::O, MoeModule::V, MoeModule::F],
        RouterKind::Linear,
        1,
    );
    let w = EncoderWeights::init(cfg, 5)?;
    let vanilla = w.strip_to_vanilla(0)?;
    let mut worst: f64 = 0.0;
    for _ in 0..num_inputs {
        let t = rng.gen_range(3..7);
        let feats = rand_tensor(&mut rng, &[t, 5], -1.0, 1.0);
        let a = forward_logits(&w, &feats, Some(0))?;
        let b = forward_logits(&vanilla, &feats, Some(0))?;
        for (x, y) in a.iter().zip(&b) {
            let d = (x - y).abs();
            if d > worst {
                worst = d;
            }
        }
    }
    results.push(if worst <= 1e-12 {
        CheckResult::pass("single-expert-equivalence", format!("{num_inputs} inputs, max |Δ| {worst:.2e}"))
    } else {
        CheckResult::fail("single-expert-equivalence", format!("max |Δ| {worst:.2e} exceeds 1e-12"))
    });

    // identical banks ⇒ output independent of the routing decision
    let cfg = tiny_model_config(
        &[MoeModule::O, MoeModule::V, MoeModule::F],
        RouterKind::Linear,
        3,
    );
    let mut w = EncoderWeights::init(cfg, 6)?;
    w.sync_expert_banks();
    let feats = rand_tensor(&mut rng, &[5, 5], -1.0, 1.0);
    let base = forward_logits(&w, &feats, Some(0))?;
    let mut worst: f64 = 0.0;
    for e in 1..3 {
        let other = forward_logits(&w, &feats, Some(e))?;
        for (x, y) in base.iter().zip(&other) {
            let d = (x - y).abs();
            if d > worst {
                worst = d;
            }
        }
    }
    results.push(if worst <= 1e-12 {
        CheckResult::pass("bank-symmetry", format!("max |Δ| across experts {worst:.2e}"))
    } else {
        CheckResult::fail("bank-symmetry", format!("max |Δ| {worst:.2e} exceeds 1e-12"))
    });
    Ok(results)
}

/// One teacher-forced training step, then a bit-level zero check on every
/// expert bank that was not routed to.
pub fn routing_sparsity_check() -> Result<CheckResult> {
    let name = "routing-sparsity";
    let cfg = tiny_model_config(
        &[MoeModule::O, MoeModule::V, MoeModule::F],
        RouterKind::Linear,
        4,
    );
    let mut weights = EncoderWeights::init(cfg, 9)?;
    let spec = synth::CorpusSpec {
        languages: vec!["zh".into(), "en".into(), "ja".into(), "ar".into()],
        alphabet_size: 2,
        alphabet_stride: 1,
        feature_dim: 5,
        emission_noise_std: 0.2,
        center_spread: 1.0,
        confusions: vec![],
    };
    let langs = synth::build_language_specs(&spec, 4)?;
    let ds = synth::generate_corpus(&langs, &spec, 2, 77, &synth::DomainShift::none(5))?;
    // batch containing only languages 0 and 2
    let batch: Vec<&synth::Batch> =
        ds.utterances.iter().filter(|u| u.language == 0 || u.language == 2).take(3).collect();
    let tcfg = TrainConfig {
        lambda_lid: 0.3,
        epochs: 1,
        batch_size: batch.len(),
        warmup_steps: 10,
        lr_scale: 1.0,
        dropout: 0.1,
        grad_clip: 5.0,
        seed: 3,
    };
    let mut trainer = Trainer::new(&mut weights, &tcfg)?;
    trainer.step(&batch)?;
    let routed: BTreeSet<usize> = [0usize, 2].into_iter().collect();
    let mut violations = Vec::new();
    weights.visit(&mut |pname, t| {
        if let Some(e) = crate::model::weights::expert_of(pname) {
            if !routed.contains(&e) {
                let g = t.grad_or_zeros();
                if g.iter().any(|&v| v.to_bits() != 0) {
                    violations.push(pname.to_string());
                }
            }
        }
    });
    Ok(if violations.is_empty() {
        CheckResult::pass(name, "unrouted expert gradients are exactly zero".into())
    } else {
        CheckResult::fail(name, format!("nonzero gradients on {violations:?}"))
    })
}

/// Masking a non-selected expert must not change any output bit.
pub fn pruning_noop_check() -> Result<CheckResult> {
    let name = "pruning-noop";
    let cfg = tiny_model_config(
        &[MoeModule::O, MoeModule::V, MoeModule::F],
        RouterKind::Tdnn { channels: 6 },
        4,
    );
    let w = EncoderWeights::init(cfg, 12)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9000);
    for _ in 0..5 {
        let feats = rand_tensor(&mut rng, &[5, 5], -1.0, 1.0);
        let full = ExpertMask::full(4);
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen();
        let feat = tape.constant(&feats);
        let out = encoder_forward(&mut tape, &mut binder, &w, feat, RoutingPlan::Argmax { mask: &full })?;
        let selected = out.decision.expert;
        let base = tape.value(out.logits).to_vec();
        // prune one non-selected expert
        let drop = (selected + 1) % 4;
        let pruned = ExpertMask::from_active((0..4).map(|i| i != drop).collect())?;
        let mut tape2 = Tape::new();
        let mut binder2 = ParamBinder::frozen();
        let feat2 = tape2.constant(&feats);
        let out2 = encoder_forward(&mut tape2, &mut binder2, &w, feat2, RoutingPlan::Argmax { mask: &pruned })?;
        if out2.decision.expert != selected {
            return Ok(CheckResult::fail(name, "decision changed when pruning a non-selected expert".into()));
        }
        let after = tape2.value(out2.logits);
        if base.iter().zip(after).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Ok(CheckResult::fail(name, "logits changed when pruning a non-selected expert".into()));
        }
    }
    Ok(CheckResult::pass(name, "decision and logits bit-identical under non-argmax pruning".into()))
}

/// Forward determinism and tape replay.
pub fn determinism_checks() -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let cfg = tiny_model_config(&[MoeModule::F], RouterKind::Tdnn { channels: 6 }, 3);
    let w = EncoderWeights::init(cfg, 31)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xDE7);
    let feats = rand_tensor(&mut rng, &[6, 5], -1.0, 1.0);

    let a = forward_logits(&w, &feats, None)?;
    let b = forward_logits(&w, &feats, None)?;
    results.push(if a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) {
        CheckResult::pass("forward-determinism", "rebuilt forward is bit-identical".into())
    } else {
        CheckResult::fail("forward-determinism", "two builds of the same forward differ".into())
    });

    let mut tape = Tape::new();
    let mut binder = ParamBinder::frozen();
    let mask = ExpertMask::full(3);
    let feat = tape.constant(&feats);
    let out = encoder_forward(&mut tape, &mut binder, &w, feat, RoutingPlan::Argmax { mask: &mask })?;
    let before = tape.value(out.logits).to_vec();
    tape.replay_forward()?;
    let after = tape.value(out.logits);
    results.push(if before.iter().zip(after).all(|(x, y)| x.to_bits() == y.to_bits()) {
        CheckResult::pass("tape-replay", "replayed outputs are bit-identical".into())
    } else {
        CheckResult::fail("tape-replay", "replay changed outputs".into())
    });
    Ok(results)
}

/// The whole suite. `seeds` controls the gradient-check budget; the
/// acceptance run uses 20.
pub fn run_all(seeds: u64, fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    let mut results = gradient_checks(seeds, fault)?;
    results.extend(ctc_oracle_checks()?);
    results.extend(equivalence_checks(10)?);
    results.push(routing_sparsity_check()?);
    results.push(pruning_noop_check()?);
    results.extend(determinism_checks()?);
    Ok(results)
}

pub fn render(results: &[CheckResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!("{} {:<28} {}\n", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    out.push_str(&format!("{} checks, {} failed\n", results.len(), failed));
    out
}
