//! Deterministic synthetic multilingual corpus.
//!
//! Each language is a bigram model over its token alphabet plus a set of
//! per-token emission centers in feature space. Alphabets of neighbouring
//! languages partially overlap, and a confusability knob pulls two
//! languages' emission centers together, so the same sound can demand a
//! different token depending on the language — the cross-language
//! misrecognition that routed experts resolve and a shared model cannot.
//!
//! A domain shift (per-dimension bias and scale plus extra noise) is
//! applied to features only; targets and language labels stay fixed, so an
//! in-domain test set and its shifted counterpart are matched pairs.
//!
//! Everything is derived from explicit seeds; generating twice with the
//! same inputs yields bit-identical datasets.

use std::io::{BufRead, Read, Seek, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ctc::LabelSequence;
use crate::error::{Error, Result};
use crate::Tensor;

pub type LanguageId = usize;

pub const MIN_TOKENS: usize = 3;
pub const MAX_TOKENS: usize = 12;
pub const MIN_FRAMES_PER_TOKEN: usize = 2;
pub const MAX_FRAMES_PER_TOKEN: usize = 4;

#[derive(Clone, Debug)]
pub struct LanguageSpec {
    pub id: LanguageId,
    pub name: String,
    /// Token ids this language can emit (never the blank 0).
    pub alphabet: Vec<usize>,
    /// Feature-space cluster mean per alphabet entry.
    pub emission_centers: Vec<Vec<f64>>,
    /// Bigram transition probabilities between alphabet positions.
    pub transition: Vec<Vec<f64>>,
    /// Similarity knob row: how strongly this language's centers were
    /// pulled toward each other language's (1.0 = coincide).
    pub confusability: Vec<f64>,
}

/// Multiplicative/additive feature perturbation plus extra noise;
/// the all-zero shift is the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub feature_bias: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub noise_std: f64,
}

impl DomainShift {
    pub fn none(feature_dim: usize) -> Self {
        DomainShift {
            feature_bias: vec![0.0; feature_dim],
            feature_scale: vec![1.0; feature_dim],
            noise_std: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.noise_std == 0.0
            && self.feature_bias.iter().all(|&b| b == 0.0)
            && self.feature_scale.iter().all(|&s| s == 1.0)
    }
}

/// One utterance: features X, target Y, language label L.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub target: LabelSequence,
    pub language: LanguageId,
    pub utterance_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<Batch>,
    pub languages: Vec<String>,
    pub vocab_size: usize,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Knobs for building the language family; lives in the experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub languages: Vec<String>,
    /// Tokens per language.
    pub alphabet_size: usize,
    /// Token-id distance between consecutive languages' alphabets; values
    /// below `alphabet_size` make the alphabets overlap.
    pub alphabet_stride: usize,
    pub feature_dim: usize,
    /// Std of the Gaussian around each emission center.
    pub emission_noise_std: f64,
    /// Spread of the cluster centers themselves.
    pub center_spread: f64,
    /// (language a, language b, strength in [0,1]) center-pulling pairs.
    pub confusions: Vec<ConfusionPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionPair {
    pub a: String,
    pub b: String,
    pub strength: f64,
}

impl CorpusSpec {
    pub fn vocab_size(&self) -> usize {
        1 + (self.languages.len() - 1) * self.alphabet_stride + self.alphabet_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::Corpus("at least one language required".into()));
        }
        if self.alphabet_size == 0 || self.alphabet_stride == 0 {
            return Err(Error::Corpus("alphabet_size and alphabet_stride must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Corpus("feature_dim must be positive".into()));
        }
        for c in &self.confusions {
            if !(0.0..=1.0).contains(&c.strength) {
                return Err(Error::Corpus(format!(
                    "confusability must be in [0,1], got {}",
                    c.strength
                )));
            }
            for l in [&c.a, &c.b] {
                if !self.languages.contains(l) {
                    return Err(Error::Corpus(format!("unknown language '{l}' in confusion pair")));
                }
            }
        }
        Ok(())
    }
}

/// Build the language family: alphabets, bigram tables, emission centers,
/// with confusion pairs pulling centers together position-by-position.
pub fn build_language_specs(spec: &CorpusSpec, seed: u64) -> Result<Vec<LanguageSpec>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = spec.alphabet_size;
    let f = spec.feature_dim;
    let mut langs: Vec<LanguageSpec> = Vec::with_capacity(spec.languages.len());
    for (id, name) in spec.languages.iter().enumerate() {
        let alphabet: Vec<usize> = (0..a).map(|j| 1 + id * spec.alphabet_stride + j).collect();
        let emission_centers: Vec<Vec<f64>> = (0..a)
            .map(|_| {
                (0..f)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        z * spec.center_spread
                    })
                    .collect()
            })
            .collect();
        // bigram rows: peaked but full-support
        let transition: Vec<Vec<f64>> = (0..a)
            .map(|_| {
                let raw: Vec<f64> = (0..a)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        (1.5 * z).exp()
                    })
                    .collect();
                let sum: f64 = raw.iter().sum();
                raw.into_iter().map(|w| w / sum).collect()
            })
            .collect();
        langs.push(LanguageSpec {
            id,
            name: name.clone(),
            alphabet,
            emission_centers,
            transition,
            confusability: vec![0.0; spec.languages.len()],
        });
    }
    for pair in &spec.confusions {
        let ia = spec.languages.iter().position(|l| l == &pair.a).unwrap();
        let ib = spec.languages.iter().position(|l| l == &pair.b).unwrap();
        let g = pair.strength;
        for j in 0..a {
            let pulled: Vec<f64> = langs[ia].emission_centers[j]
                .iter()
                .zip(&langs[ib].emission_centers[j])
                .map(|(&ca, &cb)| (1.0 - g) * cb + g * ca)
                .collect();
            langs[ib].emission_centers[j] = pulled;
        }
        langs[ia].confusability[ib] = g;
        langs[ib].confusability[ia] = g;
    }
    Ok(langs)
}

fn gen_utterance(
    spec: &LanguageSpec,
    feature_dim: usize,
    emission_noise_std: f64,
    vocab_size: usize,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let a = spec.alphabet.len();
    let len_dist = Uniform::new_inclusive(MIN_TOKENS, MAX_TOKENS);
    let n_tokens = len_dist.sample(rng);
    let mut positions = Vec::with_capacity(n_tokens);
    let mut cur = rng.gen_range(0..a);
    positions.push(cur);
    for _ in 1..n_tokens {
        let row = &spec.transition[cur];
        let mut u: f64 = rng.gen::<f64>();
        let mut next = a - 1;
        for (j, &p) in row.iter().enumerate() {
            if u < p {
                next = j;
                break;
            }
            u -= p;
        }
        positions.push(next);
        cur = next;
    }

    let frames_dist = Uniform::new_inclusive(MIN_FRAMES_PER_TOKEN, MAX_FRAMES_PER_TOKEN);
    let mut frame_counts: Vec<usize> = (0..n_tokens).map(|_| frames_dist.sample(rng)).collect();
    // CTC feasibility margin: guarantee T ≥ 2·len + 1
    let mut total: usize = frame_counts.iter().sum();
    while total < 2 * n_tokens + 1 {
        let j = rng.gen_range(0..n_tokens);
        if frame_counts[j] < MAX_FRAMES_PER_TOKEN {
            frame_counts[j] += 1;
            total += 1;
        }
    }

    let mut data = Vec::with_capacity(total * feature_dim);
    for (&pos, &count) in positions.iter().zip(&frame_counts) {
        let center = &spec.emission_centers[pos];
        for _ in 0..count {
            for &c in center {
                let z: f64 = rng.sample(StandardNormal);
                data.push(c + emission_noise_std * z);
            }
        }
    }
    let features = Tensor::new(data, vec![total, feature_dim]).expect("utterance shape");
    let tokens: Vec<usize> = positions.iter().map(|&p| spec.alphabet[p]).collect();
    let target = LabelSequence::new(tokens, vocab_size).expect("alphabet fits the vocab");
    Batch {
        features,
        target,
        language: spec.id,
        utterance_id: format!("{}-{:05}", spec.name, index),
    }
}

/// Generate `utterances_per_lang` utterances for every language, then apply
/// the shift. Fully determined by `seed`.
pub fn generate_corpus(
    specs: &[LanguageSpec],
    corpus: &CorpusSpec,
    utterances_per_lang: usize,
    seed: u64,
    shift: &DomainShift,
) -> Result<Dataset> {
    if utterances_per_lang == 0 {
        return Err(Error::Corpus("utterances_per_lang must be at least 1".into()));
    }
    let mut utterances = Vec::with_capacity(specs.len() * utterances_per_lang);
    for spec in specs {
        for i in 0..utterances_per_lang {
            // per-utterance stream: parallel-friendly and independent of
            // generation order
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((spec.id as u64) << 32 | i as u64);
            utterances.push(gen_utterance(
                spec,
                corpus.feature_dim,
                corpus.emission_noise_std,
                corpus.vocab_size(),
                i,
                &mut rng,
            ));
        }
    }
    let ds = Dataset {
        utterances,
        languages: corpus.languages.clone(),
        vocab_size: corpus.vocab_size(),
        feature_dim: corpus.feature_dim,
    };
    if shift.is_identity() {
        Ok(ds)
    } else {
        apply_shift(&ds, shift, seed ^ 0x5348_4946_54u64)
    }
}

/// Shifted copy of a dataset: features transformed, targets and languages
/// untouched (matched pairs).
pub fn apply_shift(ds: &Dataset, shift: &DomainShift, seed: u64) -> Result<Dataset> {
    if shift.feature_bias.len() != ds.feature_dim || shift.feature_scale.len() != ds.feature_dim {
        return Err(Error::Corpus(format!(
            "shift dimension {} does not match feature dim {}",
            shift.feature_bias.len(),
            ds.feature_dim
        )));
    }
    let f = ds.feature_dim;
    let mut out = ds.clone();
    for (i, utt) in out.utterances.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let data = utt.features.data_mut();
        for (k, v) in data.iter_mut().enumerate() {
            let j = k % f;
            let z: f64 = rng.sample(StandardNormal);
            *v = *v * shift.feature_scale[j] + shift.feature_bias[j] + shift.noise_std * z;
        }
    }
    Ok(out)
}

/// Deterministic utterance-level split preserving language proportions
/// within ±1 utterance.
pub fn split(ds: &Dataset, fractions: (f64, f64), seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.is_empty() {
        return Err(Error::Corpus("cannot split an empty dataset".into()));
    }
    let (a, b) = fractions;
    if a < 0.0 || b < 0.0 || (a + b - 1.0).abs() > 1e-9 {
        return Err(Error::Corpus(format!("fractions must be nonnegative and sum to 1, got ({a}, {b})")));
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    for lang in 0..ds.languages.len() {
        let mut idx: Vec<usize> =
            (0..ds.len()).filter(|&i| ds.utterances[i].language == lang).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(lang as u64);
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng);
        let n_first = (a * idx.len() as f64 + 0.5).floor() as usize;
        for (k, &i) in idx.iter().enumerate() {
            if k < n_first {
                first.push(i);
            } else {
                second.push(i);
            }
        }
    }
    first.sort_unstable();
    second.sort_unstable();
    let take = |ids: &[usize]| Dataset {
        utterances: ids.iter().map(|&i| ds.utterances[i].clone()).collect(),
        languages: ds.languages.clone(),
        vocab_size: ds.vocab_size,
        feature_dim: ds.feature_dim,
    };
    Ok((take(&first), take(&second)))
}

// ── corpus serialization ─────────────────────────────────────────────
//
// Plain on-disk layout, documented in the README:
//   manifest.tsv   utt_id <TAB> language <TAB> frames <TAB> offset <TAB> tokens…
//   features.bin   concatenated row-major f64 little-endian frames
//   corpus.json    languages, vocab_size, feature_dim
// `offset` is the f64 index (not byte offset) into features.bin.

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    languages: Vec<String>,
    vocab_size: usize,
    feature_dim: usize,
}

pub fn write_dir(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let header = CorpusHeader {
        languages: ds.languages.clone(),
        vocab_size: ds.vocab_size,
        feature_dim: ds.feature_dim,
    };
    std::fs::write(
        dir.join("corpus.json"),
        serde_json::to_string_pretty(&header).expect("header serializes"),
    )?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.tsv"))?);
    let mut feats = std::io::BufWriter::new(std::fs::File::create(dir.join("features.bin"))?);
    let mut offset = 0usize;
    for utt in &ds.utterances {
        let t = utt.features.shape()[0];
        let tokens: Vec<String> = utt.target.tokens().iter().map(|t| t.to_string()).collect();
        writeln!(
            manifest,
            "{}\t{}\t{}\t{}\t{}",
            utt.utterance_id,
            ds.languages[utt.language],
            t,
            offset,
            tokens.join(" ")
        )?;
        for v in utt.features.data() {
            feats.write_all(&v.to_le_bytes())?;
        }
        offset += utt.features.numel();
    }
    Ok(())
}

pub fn read_dir(dir: &Path) -> Result<Dataset> {
    let header: CorpusHeader =
        serde_json::from_str(&std::fs::read_to_string(dir.join("corpus.json"))?)
            .map_err(|e| Error::Corpus(format!("corpus.json: {e}")))?;
    let mut feats = std::fs::File::open(dir.join("features.bin"))?;
    let manifest = std::io::BufReader::new(std::fs::File::open(dir.join("manifest.tsv"))?);
    let mut utterances = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Corpus(format!("manifest line {}: expected 5 fields", lineno + 1)));
        }
        let utt_id = fields[0].to_string();
        let language = header
            .languages
            .iter()
            .position(|l| l == fields[1])
            .ok_or_else(|| Error::Corpus(format!("manifest line {}: unknown language '{}'", lineno + 1, fields[1])))?;
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Corpus(format!("manifest line {}: bad number '{s}'", lineno + 1)))
        };
        let t = parse(fields[2])?;
        let offset = parse(fields[3])?;
        let tokens: Vec<usize> = if fields[4].is_empty() {
            Vec::new()
        } else {
            fields[4].split(' ').map(parse).collect::<Result<_>>()?
        };
        let numel = t * header.feature_dim;
        let mut bytes = vec![0u8; numel * 8];
        feats.seek(std::io::SeekFrom::Start((offset * 8) as u64))?;
        feats.read_exact(&mut bytes)?;
        let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        utterances.push(Batch {
            features: Tensor::new(data, vec![t, header.feature_dim])
                .map_err(|_| Error::Corpus(format!("manifest line {}: bad shape", lineno + 1)))?,
            target: LabelSequence::new(tokens, header.vocab_size)
                .map_err(|e| Error::Corpus(format!("manifest line {}: {e}", lineno + 1)))?,
            language,
            utterance_id: utt_id,
        });
    }
    Ok(Dataset {
        utterances,
        languages: header.languages,
        vocab_size: header.vocab_size,
        feature_dim: header.feature_dim,
    })
}
