//! Connectionist Temporal Classification: alignment-free sequence loss over
//! the blank-augmented label lattice, plus greedy decoding.
//!
//! The loss is the negative log of the total probability of every
//! frame-level path that collapses (merge repeats, drop blanks) to the
//! target. Both recursions run in log space with log-sum-exp; blank is
//! always token 0.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BLANK: usize = 0;

/// A target token sequence. Tokens live in `[1, vocab)`; the blank never
/// appears in a target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        for &tok in &tokens {
            if tok == BLANK || tok >= vocab {
                return Err(Error::BadToken { token: tok, vocab });
            }
        }
        Ok(LabelSequence(tokens))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fewest frames that can carry this target: one per token plus a blank
    /// between each adjacent repeat.
    pub fn min_frames(&self) -> usize {
        let repeats = self.0.windows(2).filter(|w| w[0] == w[1]).count();
        self.0.len() + repeats
    }
}

fn lse2<S: Scalar>(a: S, b: S) -> S {
    if a == S::neg_infinity() {
        return b;
    }
    if b == S::neg_infinity() {
        return a;
    }
    let m = if a > b { a } else { b };
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3<S: Scalar>(a: S, b: S, c: S) -> S {
    lse2(lse2(a, b), c)
}

#[inline]
fn lattice_label(target: &[usize], s: usize) -> usize {
    if s % 2 == 0 {
        BLANK
    } else {
        target[(s - 1) / 2]
    }
}

/// Forward recursion over the blank-augmented lattice. Returns the full
/// alpha table (frames × lattice states) and the loss −log P(target).
pub fn forward_alpha<S: Scalar>(
    log_probs: &[S],
    target: &[usize],
    frames: usize,
    vocab: usize,
) -> Result<(Vec<S>, S)> {
    for &tok in target {
        if tok == BLANK || tok >= vocab {
            return Err(Error::BadToken { token: tok, vocab });
        }
    }
    let u = target.len();
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    let required = u + repeats;
    if frames < required || frames == 0 {
        return Err(Error::InfeasibleTarget { required: required.max(1), frames });
    }

    let states = 2 * u + 1;
    let ninf = S::neg_infinity();
    let mut alpha = vec![ninf; frames * states];

    alpha[0] = log_probs[BLANK];
    if states > 1 {
        alpha[1] = log_probs[target[0]];
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * states);
        let prev = &prev[(t - 1) * states..];
        let cur = &mut cur[..states];
        for s in 0..states {
            let lab = lattice_label(target, s);
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if s >= 2 && lab != BLANK && lab != lattice_label(target, s - 2) {
                acc = lse2(acc, prev[s - 2]);
            }
            cur[s] = if acc == ninf { ninf } else { acc + log_probs[t * vocab + lab] };
        }
    }

    let last = &alpha[(frames - 1) * states..];
    let total = if states > 1 { lse2(last[states - 1], last[states - 2]) } else { last[0] };
    Ok((alpha, -total))
}

/// Gradient of the loss w.r.t. the log-probabilities, via the beta
/// recursion and the per-frame lattice posterior.
pub fn backward_grad<S: Scalar>(
    log_probs: &[S],
    target: &[usize],
    alpha: &[S],
    dlp: &mut [S],
    frames: usize,
    vocab: usize,
) {
    let u = target.len();
    let states = 2 * u + 1;
    let ninf = S::neg_infinity();

    let last = &alpha[(frames - 1) * states..];
    let log_total = if states > 1 { lse2(last[states - 1], last[states - 2]) } else { last[0] };

    // beta[t][s]: log-probability of finishing from state s after frame t's
    // emission has already been consumed.
    let mut beta = vec![ninf; frames * states];
    beta[(frames - 1) * states + states - 1] = S::zero();
    if states > 1 {
        beta[(frames - 1) * states + states - 2] = S::zero();
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let stay = beta[(t + 1) * states + s]
                + log_probs[(t + 1) * vocab + lattice_label(target, s)];
            let next = if s + 1 < states {
                beta[(t + 1) * states + s + 1]
                    + log_probs[(t + 1) * vocab + lattice_label(target, s + 1)]
            } else {
                ninf
            };
            let skip = if s + 2 < states
                && lattice_label(target, s + 2) != BLANK
                && lattice_label(target, s + 2) != lattice_label(target, s)
            {
                beta[(t + 1) * states + s + 2]
                    + log_probs[(t + 1) * vocab + lattice_label(target, s + 2)]
            } else {
                ninf
            };
            beta[t * states + s] = lse3(stay, next, skip);
        }
    }

    // d(−log P)/d lp[t][k] = −Σ_{s: label(s)=k} exp(α_t(s) + β_t(s) − log P)
    for t in 0..frames {
        for s in 0..states {
            let g = alpha[t * states + s] + beta[t * states + s] - log_total;
            if g == ninf {
                continue;
            }
            let lab = lattice_label(target, s);
            dlp[t * vocab + lab] = dlp[t * vocab + lab] - g.exp();
        }
    }
}

/// Greedy CTC decoding: per-frame argmax (ties to the lowest index),
/// collapse consecutive repeats, then remove blanks.
pub fn greedy_decode<S: Scalar>(log_probs: &[S], frames: usize, vocab: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..frames {
        let row = &log_probs[t * vocab..(t + 1) * vocab];
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best != prev && best != BLANK {
            out.push(best);
        }
        prev = best;
    }
    out
}
