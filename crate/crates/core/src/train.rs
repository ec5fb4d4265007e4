//! Joint CTC+LID training with teacher-forced routing, evaluation, and
//! router-only fine-tuning.
//!
//! Training never reads the router's argmax: every utterance is routed by
//! its ground-truth language, so each expert bank only ever sees its own
//! language. Each utterance gets its own tape; gradients are averaged over
//! the batch in utterance order, clipped by global norm, and applied with
//! the warmup schedule. Everything is seeded, single-threaded, and
//! bit-reproducible.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::LrSchedule;
use crate::ctc;
use crate::error::{Error, Result};
use crate::metrics::{token_error_rate, EvalPair, MetricsReport};
use crate::model::weights::is_router_param;
use crate::model::{encoder_forward, EncoderWeights, ParamBinder, RoutingPlan};
use crate::router::{self, ExpertMask, RoutingMode};
use crate::synth::{Batch, Dataset};
use crate::tape::Tape;
use crate::{Adam, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the LID cross-entropy in the joint loss.
    pub lambda_lid: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub lr_scale: f64,
    pub dropout: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_lid < 0.0 {
            return Err(Error::config("lambda_lid must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0,1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.warmup_steps == 0 {
            return Err(Error::config("warmup_steps must be at least 1"));
        }
        Ok(())
    }
}

pub struct JointLoss {
    pub total: crate::tape::Var,
    pub ctc: crate::tape::Var,
    pub lid: crate::tape::Var,
    pub decision: router::RoutingDecision,
}

/// total = ctc + λ_lid · lid, teacher-routed. With λ = 0 the LID term is
/// left out of the graph entirely, so the router receives no gradient.
pub fn joint_loss(
    tape: &mut Tape<f64>,
    binder: &mut ParamBinder,
    w: &EncoderWeights,
    batch: &Batch,
    lambda_lid: f64,
) -> Result<JointLoss> {
    let mask = ExpertMask::full(w.config.num_experts());
    let feat = tape.constant(&batch.features);
    let out = encoder_forward(
        tape,
        binder,
        w,
        feat,
        RoutingPlan::Teacher { true_lang: batch.language, mask: &mask },
    )?;
    let log_probs = tape.log_softmax_rows(out.logits)?;
    let ctc_part = tape.ctc_loss(log_probs, batch.target.tokens())?;
    let lid_part = router::lid_loss(tape, out.lid_logits, batch.language)?;
    let total = if lambda_lid == 0.0 {
        ctc_part
    } else {
        let scaled = tape.scale(lid_part, lambda_lid)?;
        tape.add(ctc_part, scaled)?
    };
    Ok(JointLoss { total, ctc: ctc_part, lid: lid_part, decision: out.decision })
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct StepStats {
    pub total: f64,
    pub ctc: f64,
    pub lid: f64,
}

fn mix_seed(seed: u64, step: usize, slot: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((step as u64) << 20)
        .wrapping_add(slot as u64)
}

pub struct Trainer<'a> {
    pub weights: &'a mut EncoderWeights,
    cfg: TrainConfig,
    adam: Adam,
    schedule: LrSchedule,
    tape: Tape<f64>,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(weights: &'a mut EncoderWeights, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = LrSchedule {
            scale: cfg.lr_scale,
            d_model: weights.config.d_model,
            warmup_steps: cfg.warmup_steps,
        };
        Ok(Trainer {
            weights,
            cfg: cfg.clone(),
            adam: Adam::new(),
            schedule,
            tape: Tape::new(),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimizer step over a mini-batch of utterances.
    pub fn step(&mut self, batch: &[&Batch]) -> Result<StepStats> {
        assert!(!batch.is_empty(), "empty batch");
        let inv_b = 1.0 / batch.len() as f64;
        let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut stats = StepStats::default();
        let mut routed = Vec::new();
        for (slot, utt) in batch.iter().enumerate() {
            self.tape.reset();
            if self.cfg.dropout > 0.0 {
                self.tape.set_dropout(self.cfg.dropout, mix_seed(self.cfg.seed, self.step + 1, slot));
            }
            let mut binder = ParamBinder::all();
            // a numeric explosion inside the forward pass is divergence
            let jl = match joint_loss(&mut self.tape, &mut binder, self.weights, utt, self.cfg.lambda_lid) {
                Ok(jl) => jl,
                Err(Error::NonFiniteValue { .. }) => {
                    return Err(Error::Diverged { step: self.step + 1 })
                }
                Err(e) => return Err(e),
            };
            stats.total += self.tape.scalar_value(jl.total) * inv_b;
            stats.ctc += self.tape.scalar_value(jl.ctc) * inv_b;
            stats.lid += self.tape.scalar_value(jl.lid) * inv_b;
            routed.push(jl.decision.expert);
            self.tape.backward(jl.total)?;
            for (name, var) in &binder.bindings {
                if let Some(g) = self.tape.grad(*var) {
                    let slot = acc.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    for (a, &v) in slot.iter_mut().zip(g) {
                        *a += v * inv_b;
                    }
                }
            }
        }
        if !stats.total.is_finite() {
            return Err(Error::Diverged { step: self.step + 1 });
        }

        // expert-gradient sparsity: only banks routed to this step may
        // appear in the accumulator
        #[cfg(debug_assertions)]
        for name in acc.keys() {
            if let Some(e) = crate::model::weights::expert_of(name) {
                debug_assert!(
                    routed.contains(&e),
                    "gradient for unrouted expert bank {name} (routed: {routed:?})"
                );
            }
        }

        if self.cfg.grad_clip > 0.0 {
            let mut sq = 0.0;
            for g in acc.values() {
                for &v in g {
                    sq += v * v;
                }
            }
            let norm = sq.sqrt();
            if norm > self.cfg.grad_clip {
                let scale = self.cfg.grad_clip / norm;
                for g in acc.values_mut() {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
            }
        }

        self.step += 1;
        let lr = self.schedule.lr(self.step);
        let step = self.step;
        let adam = &mut self.adam;
        let mut failure = None;
        self.weights.clear_grads();
        self.weights.visit_mut(&mut |name, t| {
            if failure.is_some() {
                return;
            }
            if let Some(g) = acc.get(name) {
                if let Err(e) = adam.update(name, t.data_mut(), g, lr, step) {
                    failure = Some(e);
                    return;
                }
                t.set_grad(Some(g.clone()));
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(stats),
        }
    }
}

/// Greedy-decode and score a dataset under a pruning mask. Utterances whose
/// true language is pruned are excluded from scoring and counted
/// separately. Router accuracy is always measured from the argmax of the
/// masked logits, regardless of which routing drove the MLE block.
pub fn evaluate(
    w: &EncoderWeights,
    ds: &Dataset,
    mask: &ExpertMask,
    mode: RoutingMode,
) -> Result<MetricsReport> {
    let mut pairs = Vec::new();
    let mut excluded = vec![0usize; ds.languages.len()];
    let mut tape = Tape::new();
    for utt in &ds.utterances {
        if !mask.is_active(utt.language) {
            excluded[utt.language] += 1;
            continue;
        }
        tape.reset();
        let mut binder = ParamBinder::frozen();
        let plan = match mode {
            RoutingMode::Teacher => RoutingPlan::Teacher { true_lang: utt.language, mask },
            RoutingMode::Argmax => RoutingPlan::Argmax { mask },
        };
        let feat = tape.constant(&utt.features);
        let out = encoder_forward(&mut tape, &mut binder, w, feat, plan)?;
        let t = tape.shape(out.logits)[0];
        let hyp = ctc::greedy_decode(tape.value(out.logits), t, w.config.vocab_size);
        let lid = tape.value(out.lid_logits).to_vec();
        let argmax = router::decide(&lid, mask, RoutingMode::Argmax, None)?;
        pairs.push(EvalPair {
            lang: utt.language,
            hyp,
            reference: utt.target.tokens().to_vec(),
            router_correct: Some(argmax.expert == utt.language),
        });
    }
    token_error_rate(&pairs, &ds.languages, &excluded)
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: StepStats,
    /// Held-out metrics (argmax routing, full mask); absent when no
    /// held-out set was provided.
    pub heldout: Option<MetricsReport>,
}

/// Epochs of shuffled mini-batch training; evaluates on the held-out set
/// after every epoch.
pub fn train(
    weights: &mut EncoderWeights,
    train_set: &Dataset,
    heldout: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if train_set.is_empty() {
        return Err(Error::config("training corpus is empty"));
    }
    let mut trainer = Trainer::new(weights, cfg)?;
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0xE50C + epoch as u64);
        order.shuffle(&mut rng);

        let mut sums = StepStats::default();
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Batch> = chunk.iter().map(|&i| &train_set.utterances[i]).collect();
            let stats = trainer.step(&batch)?;
            sums.total += stats.total * batch.len() as f64;
            sums.ctc += stats.ctc * batch.len() as f64;
            sums.lid += stats.lid * batch.len() as f64;
            seen += batch.len();
        }
        let train_stats = StepStats {
            total: sums.total / seen as f64,
            ctc: sums.ctc / seen as f64,
            lid: sums.lid / seen as f64,
        };
        let heldout_report = match heldout {
            Some(ds) if !ds.is_empty() => Some(evaluate(
                trainer.weights,
                ds,
                &ExpertMask::full(trainer.weights.config.num_experts()),
                RoutingMode::Argmax,
            )?),
            _ => None,
        };
        let record = EpochRecord { epoch, train: train_stats, heldout: heldout_report };
        on_epoch(&record);
        records.push(record);
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub lr_scale: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneRecord {
    pub epoch: usize,
    pub lid_loss: f64,
    /// Router accuracy over the tuning pairs after this epoch.
    pub tune_accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneReport {
    pub records: Vec<FinetuneRecord>,
    /// SHA-256 over all non-router parameters; unchanged by construction
    /// and re-verified after tuning.
    pub frozen_hash: String,
}

/// Adapt the router on (features, language) pairs with the backbone
/// frozen. Shared-block outputs are computed once up front — the backbone
/// never changes, so they are reusable across epochs. Every non-router
/// parameter is bit-identical afterwards, enforced by hash.
pub fn finetune_router(
    weights: &mut EncoderWeights,
    pairs: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    if pairs.is_empty() {
        return Err(Error::config("fine-tuning corpus is empty"));
    }
    if pairs.languages.len() != weights.config.num_experts() {
        return Err(Error::config(format!(
            "fine-tuning corpus has {} languages but the model has {} experts",
            pairs.languages.len(),
            weights.config.num_experts()
        )));
    }
    let backbone = |name: &str| !is_router_param(name);
    let hash_before = weights.hash_params(&backbone);

    // cache shared-block outputs (frozen backbone, no dropout)
    let mut tape = Tape::new();
    let mut cached: Vec<Tensor> = Vec::with_capacity(pairs.len());
    for utt in &pairs.utterances {
        tape.reset();
        let mut binder = ParamBinder::frozen();
        let feat = tape.constant(&utt.features);
        let shared = crate::model::encoder::shared_block_forward(&mut tape, &mut binder, weights, feat)?;
        cached.push(tape.to_tensor(shared));
    }

    let schedule = LrSchedule {
        scale: cfg.lr_scale,
        d_model: weights.config.d_model,
        warmup_steps: cfg.warmup_steps,
    };
    let mut adam = Adam::new();
    let mut step = 0usize;
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0xF17E + epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let inv_b = 1.0 / chunk.len() as f64;
            let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for &i in chunk {
                tape.reset();
                let mut binder = ParamBinder::router_only();
                let x = tape.constant(&cached[i]);
                let logits = router::router_forward(&mut tape, &mut binder, &weights.router, x)?;
                let loss = router::lid_loss(&mut tape, logits, pairs.utterances[i].language)?;
                loss_sum += tape.scalar_value(loss) * inv_b;
                tape.backward(loss)?;
                for (name, var) in &binder.bindings {
                    if let Some(g) = tape.grad(*var) {
                        let slot = acc.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                        for (a, &v) in slot.iter_mut().zip(g) {
                            *a += v * inv_b;
                        }
                    }
                }
            }
            if cfg.grad_clip > 0.0 {
                let sq: f64 = acc.values().flat_map(|g| g.iter().map(|&v| v * v)).sum();
                let norm = sq.sqrt();
                if norm > cfg.grad_clip {
                    let s = cfg.grad_clip / norm;
                    for g in acc.values_mut() {
                        for v in g.iter_mut() {
                            *v *= s;
                        }
                    }
                }
            }
            step += 1;
            let lr = schedule.lr(step);
            let mut failure = None;
            weights.visit_mut(&mut |name, t| {
                if failure.is_some() {
                    return;
                }
                if let Some(g) = acc.get(name) {
                    debug_assert!(is_router_param(name));
                    if let Err(e) = adam.update(name, t.data_mut(), g, lr, step) {
                        failure = Some(e);
                    }
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
        }

        // accuracy over the tuning pairs with the updated router
        let mut correct = 0usize;
        for (i, utt) in pairs.utterances.iter().enumerate() {
            tape.reset();
            let mut binder = ParamBinder::frozen();
            let x = tape.constant(&cached[i]);
            let logits = router::router_forward(&mut tape, &mut binder, &weights.router, x)?;
            let lid = tape.value(logits).to_vec();
            let d = router::decide(
                &lid,
                &ExpertMask::full(weights.config.num_experts()),
                RoutingMode::Argmax,
                None,
            )?;
            correct += usize::from(d.expert == utt.language);
        }
        let n_batches = pairs.len().div_ceil(cfg.batch_size.max(1));
        records.push(FinetuneRecord {
            epoch,
            lid_loss: loss_sum / n_batches as f64,
            tune_accuracy: correct as f64 / pairs.len() as f64,
        });
    }

    let hash_after = weights.hash_params(&backbone);
    if hash_after != hash_before {
        return Err(Error::Invariant(
            "router fine-tuning modified a non-router parameter".into(),
        ));
    }
    Ok(FinetuneReport { records, frozen_hash: hex_string(&hash_after) })
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
