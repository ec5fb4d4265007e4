//! Language-identification routing: the gating network P(L|X), the
//! decision rule (teacher-forced vs argmax), and expert-pruning masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::weights::RouterW;
use crate::model::ParamBinder;
use crate::model::config::TDNN_DILATIONS;
use crate::tape::{Tape, Var};

/// Which experts are available at decision time. Pruned experts receive a
/// −∞ logit before the posterior/argmax, so they can never be selected.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertMask {
    active: Vec<bool>,
}

impl ExpertMask {
    pub fn full(n: usize) -> Self {
        ExpertMask { active: vec![true; n] }
    }

    pub fn from_active(active: Vec<bool>) -> Result<Self> {
        if !active.iter().any(|&a| a) {
            return Err(Error::AllExpertsMasked);
        }
        Ok(ExpertMask { active })
    }

    /// Keep only the listed experts.
    pub fn keep(n: usize, kept: &[usize]) -> Result<Self> {
        let mut active = vec![false; n];
        for &i in kept {
            if i >= n {
                return Err(Error::ExpertOutOfRange { expert: i, num_experts: n });
            }
            active[i] = true;
        }
        Self::from_active(active)
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&i| self.active[i]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    /// Route by the ground-truth language label (training).
    Teacher,
    /// Route by the highest unmasked router logit (inference).
    Argmax,
}

/// Per-utterance routing outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Posterior over languages; masked entries are exactly zero.
    pub lang_posterior: Vec<f64>,
    /// Selected expert; always an unmasked index.
    pub expert: usize,
    pub mask_used: ExpertMask,
    pub mode: RoutingMode,
}

/// Apply the mask and pick an expert. Teacher mode returns the label
/// regardless of the logits (the posterior is still reported from them);
/// argmax mode picks the best unmasked logit, ties to the lowest index.
pub fn decide(
    lid_logits: &[f64],
    mask: &ExpertMask,
    mode: RoutingMode,
    true_lang: Option<usize>,
) -> Result<RoutingDecision> {
    if mask.len() != lid_logits.len() {
        return Err(Error::ShapeMismatch {
            op: "decide",
            lhs: vec![lid_logits.len()],
            rhs: vec![mask.len()],
        });
    }
    if mask.num_active() == 0 {
        return Err(Error::AllExpertsMasked);
    }
    let masked: Vec<f64> = lid_logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.is_active(i) { v } else { f64::NEG_INFINITY })
        .collect();

    // Stable softmax over the unmasked entries; -inf maps to exactly 0.
    let max = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = masked.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lang_posterior: Vec<f64> = exps.iter().map(|&e| e / sum).collect();

    let expert = match mode {
        RoutingMode::Teacher => {
            let lang = true_lang.ok_or(Error::MissingTeacherLabel)?;
            if lang >= mask.len() {
                return Err(Error::ExpertOutOfRange { expert: lang, num_experts: mask.len() });
            }
            if !mask.is_active(lang) {
                return Err(Error::TeacherLabelMasked { lang });
            }
            lang
        }
        RoutingMode::Argmax => {
            let mut best = None;
            for (i, &v) in masked.iter().enumerate() {
                if v == f64::NEG_INFINITY {
                    continue;
                }
                match best {
                    None => best = Some(i),
                    Some(b) if v > masked[b] => best = Some(i),
                    _ => {}
                }
            }
            best.ok_or(Error::AllExpertsMasked)?
        }
    };
    Ok(RoutingDecision { lang_posterior, expert, mask_used: mask.clone(), mode })
}

/// Utterance-level language logits from the shared-block output.
pub fn router_forward(
    tape: &mut Tape<f64>,
    binder: &mut ParamBinder,
    router: &RouterW,
    shared_out: Var,
) -> Result<Var> {
    match router {
        RouterW::Linear { w } => {
            let pooled = tape.mean_rows(shared_out)?;
            let wv = binder.bind(tape, "router.w", w);
            tape.matmul(pooled, wv)
        }
        RouterW::Tdnn { convs, hidden, out } => {
            let mut x = shared_out;
            for (i, (conv, &dil)) in convs.iter().zip(TDNN_DILATIONS.iter()).enumerate() {
                let k = binder.bind(tape, format!("router.conv{i}.kernel"), &conv.kernel);
                let b = binder.bind(tape, format!("router.conv{i}.bias"), &conv.bias);
                x = tape.conv1d(x, k, dil)?;
                x = tape.add_bias(x, b)?;
                x = tape.relu(x)?;
            }
            let pooled = tape.stats_pool(x)?;
            let hw = binder.bind(tape, "router.hidden.w", &hidden.w);
            let hb = binder.bind(tape, "router.hidden.b", &hidden.b);
            let h = tape.matmul(pooled, hw)?;
            let h = tape.add_bias(h, hb)?;
            let h = tape.relu(h)?;
            let ow = binder.bind(tape, "router.out.w", &out.w);
            let ob = binder.bind(tape, "router.out.b", &out.b);
            let logits = tape.matmul(h, ow)?;
            tape.add_bias(logits, ob)
        }
    }
}

/// Cross-entropy of the true language under the router logits.
pub fn lid_loss(tape: &mut Tape<f64>, lid_logits: Var, true_lang: usize) -> Result<Var> {
    tape.cross_entropy_logits(lid_logits, true_lang)
}

/// Fraction of utterances routed to their labelled language.
pub fn router_accuracy(decisions: &[RoutingDecision], labels: &[usize]) -> Result<f64> {
    if decisions.len() != labels.len() {
        return Err(Error::LengthMismatch { hyps: decisions.len(), refs: labels.len() });
    }
    if decisions.is_empty() {
        return Err(Error::config("router_accuracy needs at least one decision"));
    }
    let correct = decisions.iter().zip(labels).filter(|(d, &l)| d.expert == l).count();
    Ok(correct as f64 / decisions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn argmax_picks_highest_logit() {
        let mask = ExpertMask::full(3);
        let d = decide(&[0.1, 5.0, -2.0], &mask, RoutingMode::Argmax, None).unwrap();
        assert_eq!(d.expert, 1);
    }

    #[test]
    fn pruned_argmax_and_posterior() {
        // mask {0,2}: posterior = softmax([0.1, −2]) over the survivors
        let mask = ExpertMask::keep(3, &[0, 2]).unwrap();
        let d = decide(&[0.1, 5.0, -2.0], &mask, RoutingMode::Argmax, None).unwrap();
        assert_eq!(d.expert, 0);
        assert_eq!(d.lang_posterior[1], 0.0);
        assert!((d.lang_posterior[0] - 0.8909).abs() < 1e-4);
        assert!((d.lang_posterior[2] - 0.1091).abs() < 1e-4);
    }

    #[test]
    fn teacher_mode_ignores_logits() {
        let mask = ExpertMask::full(4);
        let d = decide(&[9.0, 0.0, -3.0, 2.0], &mask, RoutingMode::Teacher, Some(2)).unwrap();
        assert_eq!(d.expert, 2);
        // posterior still reported from the logits
        assert!(d.lang_posterior[0] > d.lang_posterior[2]);
    }

    #[test]
    fn teacher_label_must_be_present_and_unmasked() {
        let mask = ExpertMask::keep(3, &[0, 1]).unwrap();
        assert!(matches!(
            decide(&[0.0, 0.0, 0.0], &mask, RoutingMode::Teacher, None),
            Err(Error::MissingTeacherLabel)
        ));
        assert!(matches!(
            decide(&[0.0, 0.0, 0.0], &mask, RoutingMode::Teacher, Some(2)),
            Err(Error::TeacherLabelMasked { lang: 2 })
        ));
    }

    #[test]
    fn empty_mask_is_rejected_at_construction() {
        assert!(matches!(ExpertMask::from_active(vec![false, false]), Err(Error::AllExpertsMasked)));
        assert!(matches!(ExpertMask::keep(3, &[]), Err(Error::AllExpertsMasked)));
        assert!(matches!(
            ExpertMask::keep(2, &[5]),
            Err(Error::ExpertOutOfRange { expert: 5, num_experts: 2 })
        ));
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let mask = ExpertMask::full(3);
        let d = decide(&[1.0, 1.0, 1.0], &mask, RoutingMode::Argmax, None).unwrap();
        assert_eq!(d.expert, 0);
    }

    #[test]
    fn accuracy_counts_matches() {
        let mask = ExpertMask::full(2);
        let decisions: Vec<_> = [0usize, 0]
            .iter()
            .map(|&e| {
                let mut logits = vec![0.0; 2];
                logits[e] = 1.0;
                decide(&logits, &mask, RoutingMode::Argmax, None).unwrap()
            })
            .collect();
        assert_eq!(router_accuracy(&decisions, &[0, 1]).unwrap(), 0.5);
        assert_eq!(router_accuracy(&decisions, &[0, 0]).unwrap(), 1.0);
        assert!(router_accuracy(&decisions, &[0]).is_err());
    }

    proptest! {
        /// Posterior sums to 1 with masked entries exactly zero.
        #[test]
        fn posterior_is_normalized(
            logits in proptest::collection::vec(-20.0f64..20.0, 2..6),
            keep_bits in proptest::collection::vec(any::<bool>(), 2..6),
        ) {
            let n = logits.len().min(keep_bits.len());
            let logits = &logits[..n];
            let mut active = keep_bits[..n].to_vec();
            if !active.iter().any(|&a| a) {
                active[0] = true;
            }
            let mask = ExpertMask::from_active(active.clone()).unwrap();
            let d = decide(logits, &mask, RoutingMode::Argmax, None).unwrap();
            let sum: f64 = d.lang_posterior.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            for (i, &p) in d.lang_posterior.iter().enumerate() {
                if !active[i] {
                    prop_assert_eq!(p, 0.0);
                }
                prop_assert!(p >= 0.0);
            }
            prop_assert!(mask.is_active(d.expert));
        }

        /// Masking experts that were not the argmax leaves the decision's
        /// expert unchanged.
        #[test]
        fn pruning_non_argmax_is_a_noop(
            logits in proptest::collection::vec(-10.0f64..10.0, 3..6),
            drop in 0usize..6,
        ) {
            let n = logits.len();
            let full = ExpertMask::full(n);
            let base = decide(&logits, &full, RoutingMode::Argmax, None).unwrap();
            let drop = drop % n;
            prop_assume!(drop != base.expert);
            let mut active = vec![true; n];
            active[drop] = false;
            let pruned = ExpertMask::from_active(active).unwrap();
            let d = decide(&logits, &pruned, RoutingMode::Argmax, None).unwrap();
            prop_assert_eq!(d.expert, base.expert);
        }

        /// Shrinking the mask while keeping the true language active never
        /// decreases accuracy on a fixed evaluation set.
        #[test]
        fn mask_monotonicity(
            seed in any::<u64>(),
            n_utts in 4usize..24,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let utts: Vec<(Vec<f64>, usize)> = (0..n_utts)
                .map(|_| {
                    let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                    (logits, rng.gen_range(0..n))
                })
                .collect();
            // chain of shrinking masks all containing language 0
            let chains = [vec![0usize, 1, 2, 3], vec![0, 1, 2], vec![0, 2], vec![0]];
            let evalset: Vec<&(Vec<f64>, usize)> = utts.iter().filter(|(_, l)| *l == 0).collect();
            prop_assume!(!evalset.is_empty());
            let mut prev = -1.0;
            for kept in &chains {
                let mask = ExpertMask::keep(n, kept).unwrap();
                let decisions: Vec<_> = evalset
                    .iter()
                    .map(|(lg, _)| decide(lg, &mask, RoutingMode::Argmax, None).unwrap())
                    .collect();
                let labels: Vec<usize> = evalset.iter().map(|(_, l)| *l).collect();
                let acc = router_accuracy(&decisions, &labels).unwrap();
                prop_assert!(acc + 1e-12 >= prev, "accuracy dropped from {prev} to {acc}");
                prev = acc;
            }
            // singleton mask: accuracy is exactly 1 on matching utterances
            prop_assert_eq!(prev, 1.0);
        }
    }
}
