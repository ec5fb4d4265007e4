//! Token error rate (the desk-scale WER/CER analogue), edit distance with
//! substitution/insertion/deletion counts, and per-language breakdowns.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EditCounts {
    pub subs: usize,
    pub ins: usize,
    pub dels: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.subs + self.ins + self.dels
    }

    pub fn add(&mut self, other: &EditCounts) {
        self.subs += other.subs;
        self.ins += other.ins;
        self.dels += other.dels;
    }
}

/// Minimal Levenshtein alignment between hypothesis and reference.
/// Insertions are extra hypothesis tokens, deletions are missing reference
/// tokens. Minimal alignments are not unique; among them the one with the
/// most substitutions is chosen, so a substitution is never traded for an
/// insertion+deletion pair. Because ins−dels is pinned by the length
/// difference, this also makes the counts canonical: swapping hyp and ref
/// exchanges ins with dels and keeps subs.
pub fn edit_distance(hyp: &[usize], reference: &[usize]) -> EditCounts {
    let (m, n) = (hyp.len(), reference.len());
    let mut dp = vec![EditCounts::default(); (m + 1) * (n + 1)];
    let idx = |i: usize, j: usize| i * (n + 1) + j;
    for i in 1..=m {
        dp[idx(i, 0)] = EditCounts { subs: 0, ins: i, dels: 0 };
    }
    for j in 1..=n {
        dp[idx(0, j)] = EditCounts { subs: 0, ins: 0, dels: j };
    }
    // lexicographic additive cost (total, −subs): valid for cellwise DP
    let better = |cand: &EditCounts, best: &EditCounts| {
        cand.total() < best.total() || (cand.total() == best.total() && cand.subs > best.subs)
    };
    for i in 1..=m {
        for j in 1..=n {
            let mut diag = dp[idx(i - 1, j - 1)];
            if hyp[i - 1] != reference[j - 1] {
                diag.subs += 1;
            }
            let mut ins = dp[idx(i - 1, j)];
            ins.ins += 1;
            let mut del = dp[idx(i, j - 1)];
            del.dels += 1;
            let mut best = diag;
            if better(&ins, &best) {
                best = ins;
            }
            if better(&del, &best) {
                best = del;
            }
            dp[idx(i, j)] = best;
        }
    }
    dp[idx(m, n)]
}

/// One scored utterance.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub lang: usize,
    pub hyp: Vec<usize>,
    pub reference: Vec<usize>,
    /// Whether the router picked the labelled language (argmax decisions).
    pub router_correct: Option<bool>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LangReport {
    pub language: String,
    pub utterances: usize,
    /// Utterances excluded because their language was pruned away.
    pub excluded: usize,
    pub ref_tokens: usize,
    pub errors: EditCounts,
    /// (S+I+D)/ref_tokens; absent when the language was fully excluded.
    pub ter: Option<f64>,
    pub router_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub per_lang: Vec<LangReport>,
    /// Total errors over total reference tokens.
    pub micro_ter: f64,
    /// Mean of per-language TERs.
    pub macro_ter: f64,
    pub router_accuracy: Option<f64>,
    pub scored_utterances: usize,
    pub excluded_utterances: usize,
}

/// Aggregate scored pairs into per-language and overall token error rates.
/// `excluded_by_lang` counts utterances skipped because their true language
/// was pruned (reported separately, like the dashes in a pruning grid).
pub fn token_error_rate(
    pairs: &[EvalPair],
    languages: &[String],
    excluded_by_lang: &[usize],
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::config("token_error_rate: empty reference set"));
    }
    let nl = languages.len();
    let mut per: Vec<(usize, usize, EditCounts, usize, usize)> =
        vec![(0, 0, EditCounts::default(), 0, 0); nl];
    for p in pairs {
        if p.lang >= nl {
            return Err(Error::config(format!("pair language {} out of range", p.lang)));
        }
        let slot = &mut per[p.lang];
        slot.0 += 1;
        slot.1 += p.reference.len();
        slot.2.add(&edit_distance(&p.hyp, &p.reference));
        if let Some(c) = p.router_correct {
            slot.3 += 1;
            slot.4 += usize::from(c);
        }
    }
    let mut total_ref = 0usize;
    let mut total_err = 0usize;
    let mut ters = Vec::new();
    let mut routed = 0usize;
    let mut routed_ok = 0usize;
    let mut per_lang = Vec::with_capacity(nl);
    for (i, lang) in languages.iter().enumerate() {
        let (utts, ref_tokens, errors, r_total, r_ok) = per[i];
        let ter =
            if ref_tokens > 0 { Some(errors.total() as f64 / ref_tokens as f64) } else { None };
        if let Some(t) = ter {
            ters.push(t);
        }
        total_ref += ref_tokens;
        total_err += errors.total();
        routed += r_total;
        routed_ok += r_ok;
        per_lang.push(LangReport {
            language: lang.clone(),
            utterances: utts,
            excluded: excluded_by_lang.get(i).copied().unwrap_or(0),
            ref_tokens,
            errors,
            ter,
            router_accuracy: if r_total > 0 { Some(r_ok as f64 / r_total as f64) } else { None },
        });
    }
    if total_ref == 0 {
        return Err(Error::config("token_error_rate: empty reference set"));
    }
    Ok(MetricsReport {
        per_lang,
        micro_ter: total_err as f64 / total_ref as f64,
        macro_ter: ters.iter().sum::<f64>() / ters.len() as f64,
        router_accuracy: if routed > 0 { Some(routed_ok as f64 / routed as f64) } else { None },
        scored_utterances: pairs.len(),
        excluded_utterances: excluded_by_lang.iter().sum(),
    })
}

impl MetricsReport {
    /// Human-readable table; pruned-away languages show "-".
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<6} {:>6} {:>6} {:>9} {:>8} {:>8}\n",
            "lang", "utts", "excl", "ref_toks", "TER%", "router%"
        ));
        for l in &self.per_lang {
            let ter = l.ter.map_or("-".to_string(), |t| format!("{:.2}", 100.0 * t));
            let acc = l.router_accuracy.map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
            out.push_str(&format!(
                "{:<6} {:>6} {:>6} {:>9} {:>8} {:>8}\n",
                l.language, l.utterances, l.excluded, l.ref_tokens, ter, acc
            ));
        }
        let acc = self.router_accuracy.map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
        out.push_str(&format!(
            "avg    micro {:.2}%  macro {:.2}%  router {}\n",
            100.0 * self.micro_ter,
            100.0 * self.macro_ter,
            acc
        ));
        out
    }
}
