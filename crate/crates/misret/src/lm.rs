//! Language-model prior: character-level next-token pretraining of the
//! transformer backbone on a small bundled text, plus the auxiliary
//! language batches used during policy training.
//!
//! The bundled corpus is synthesized deterministically from an embedded
//! grammar, so the artifact is reproducible from code alone.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{checkpoint::Checkpoint, FreezeMode, ModelConfig, PolicyModel};
use crate::nn::{Adam, Grads, Tape};
use crate::rng::{rng_for, stream_rng, Stream};

/// Character-level corpus with its vocabulary.
#[derive(Debug, Clone)]
pub struct TextCorpus {
    pub ids: Vec<usize>,
    /// Characters in id order.
    pub vocab: Vec<char>,
}

impl TextCorpus {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Token index splitting the pretraining region from the held-out tail
    /// (last 10%).
    pub fn holdout_split(&self) -> usize {
        (self.ids.len() * 9) / 10
    }

    /// Encode arbitrary text; characters outside the vocabulary map to the
    /// reserved fallback id 0.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| {
                self.vocab
                    .binary_search(&c)
                    .unwrap_or(Self::UNK_ID)
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.vocab[i]).collect()
    }

    /// Unknown characters collapse onto this id.
    pub const UNK_ID: usize = 0;
}

/// Build a character-level corpus from text; the vocabulary is the sorted
/// set of characters that occur.
pub fn tokenize_corpus(text: &str) -> Result<TextCorpus> {
    if text.is_empty() {
        return Err(Error::InvalidArgument("empty corpus text".into()));
    }
    let mut vocab: Vec<char> = text.chars().collect();
    vocab.sort_unstable();
    vocab.dedup();
    let ids = text
        .chars()
        .map(|c| vocab.binary_search(&c).expect("char in vocab"))
        .collect();
    Ok(TextCorpus { ids, vocab })
}

const NOUNS: &[&str] = &[
    "river", "mountain", "library", "garden", "engine", "harbor", "window", "signal", "winter",
    "market", "teacher", "village", "forest", "lantern", "captain", "letter", "bridge", "orchard",
    "meadow", "stranger", "workshop", "compass", "evening", "morning", "journey", "shadow",
    "anchor", "valley", "island", "mirror", "farmer", "sailor", "student", "painter", "doctor",
    "keeper", "road", "storm", "field", "tower",
];
const ADJECTIVES: &[&str] = &[
    "quiet", "old", "bright", "narrow", "heavy", "gentle", "distant", "early", "late", "golden",
    "silver", "broken", "steady", "curious", "patient", "hollow", "warm", "cold", "long", "small",
    "wide", "plain", "sudden", "familiar",
];
const VERBS: &[&str] = &[
    "watched", "crossed", "repaired", "followed", "carried", "opened", "closed", "remembered",
    "gathered", "painted", "measured", "guarded", "reached", "returned", "described", "counted",
    "studied", "borrowed", "signaled", "sheltered", "traded", "mapped", "visited", "answered",
];
const ADVERBS: &[&str] = &[
    "slowly", "quietly", "carefully", "often", "rarely", "together", "alone", "again", "early",
    "late", "steadily", "gladly",
];
const CONNECTORS: &[&str] = &[
    "and then", "while the rain fell", "before the light failed", "as the bell rang",
    "after the long season", "because the road was clear", "though the wind rose",
    "until the tide turned",
];

/// Deterministic ~100 KB English-like text. Plain lowercase prose with a
/// small character set keeps the char-level task cleanly learnable.
pub fn builtin_corpus_text() -> String {
    let mut rng = stream_rng(0x636f_7270, 1);
    let mut out = String::with_capacity(110_000);
    let pick = |rng: &mut rand_chacha::ChaCha12Rng, set: &[&str]| -> String {
        set[rng.random_range(0..set.len())].to_string()
    };
    while out.len() < 100_000 {
        let a = pick(&mut rng, ADJECTIVES);
        let n = pick(&mut rng, NOUNS);
        let v = pick(&mut rng, VERBS);
        let b = pick(&mut rng, ADJECTIVES);
        let m = pick(&mut rng, NOUNS);
        let sentence = match rng.random_range(0..4) {
            0 => format!("the {a} {n} {v} the {b} {m}."),
            1 => {
                let adv = pick(&mut rng, ADVERBS);
                format!("the {a} {n} {v} the {b} {m} {adv}.")
            }
            2 => {
                let c = pick(&mut rng, CONNECTORS);
                format!("the {a} {n} {v} the {b} {m}, {c}.")
            }
            _ => {
                let adv = pick(&mut rng, ADVERBS);
                format!("a {a} {n} {adv} {v} a {b} {m}.")
            }
        };
        out.push_str(&sentence);
        out.push(' ');
    }
    out
}

pub fn builtin_corpus() -> TextCorpus {
    tokenize_corpus(&builtin_corpus_text()).expect("builtin corpus is non-empty")
}

/// Uniform random contiguous token windows of exactly `len` tokens, drawn
/// from `ids[..limit]` (the whole corpus when `limit` is `None`).
pub fn make_language_batch(
    corpus: &TextCorpus,
    batch: usize,
    len: usize,
    seed: u64,
    stream: u64,
    limit: Option<usize>,
) -> Result<Vec<Vec<usize>>> {
    let limit = limit.unwrap_or(corpus.len());
    if len < 2 {
        return Err(Error::InvalidArgument("window length must be >= 2".into()));
    }
    if limit > corpus.len() || len > limit {
        return Err(Error::InvalidArgument(format!(
            "window length {len} exceeds corpus region {limit}"
        )));
    }
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be >= 1".into()));
    }
    let mut rng = rng_for(seed, Stream::LanguageBatch(stream));
    Ok((0..batch)
        .map(|_| {
            let start = rng.random_range(0..=limit - len);
            corpus.ids[start..start + len].to_vec()
        })
        .collect())
}

/// Mean next-token negative log-likelihood of one window.
pub fn language_loss(model: &PolicyModel, window: &[usize]) -> Result<f64> {
    let mut tape = Tape::new(&model.params);
    let logits = model.build_lm_logits(&mut tape, window)?;
    let targets = window[1..].to_vec();
    let weights = vec![1.0; targets.len()];
    let loss = tape.ce_rows(logits, targets, weights);
    Ok(tape.scalar(loss))
}

/// Mean held-out NLL over non-overlapping windows of `len` tokens.
pub fn heldout_nll(model: &PolicyModel, corpus: &TextCorpus, len: usize) -> Result<f64> {
    let split = corpus.holdout_split();
    let tail = &corpus.ids[split..];
    if tail.len() < len {
        return Err(Error::InvalidArgument(
            "held-out region shorter than the window length".into(),
        ));
    }
    let windows: Vec<&[usize]> = tail.chunks_exact(len).collect();
    let losses = windows
        .par_iter()
        .map(|w| language_loss(model, w))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub window_len: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            batch: 8,
            window_len: 48,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

pub struct PretrainOutcome {
    pub model: PolicyModel,
    pub losses: Vec<f64>,
    pub heldout_before: f64,
    pub heldout_after: f64,
}

/// Pretrain the backbone plus LM projections with next-token prediction.
/// The returned model's checkpoint is the prior for policy initialization.
pub fn pretrain_lm(
    template: &ModelConfig,
    corpus: &TextCorpus,
    pcfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if pcfg.steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    let mut cfg = template.clone();
    cfg.lm_vocab = corpus.vocab_size();
    cfg.lora_rank = 0;
    cfg.lora_alpha = 0.0;
    cfg.freeze_mode = FreezeMode::Full;
    let window_len = pcfg.window_len.min(cfg.lm_max_len()).max(2);
    let mut model = PolicyModel::init(cfg, None, pcfg.seed)?;
    model.vocab = Some(corpus.vocab.clone());

    let split = corpus.holdout_split();
    if split < window_len + 1 {
        return Err(Error::InvalidArgument("corpus too small to pretrain".into()));
    }
    let heldout_before = heldout_nll(&model, corpus, window_len)?;
    let mut opt = Adam::new(&model.params, pcfg.lr);
    let mut losses = Vec::with_capacity(pcfg.steps);
    for step in 0..pcfg.steps {
        let windows = make_language_batch(
            corpus,
            pcfg.batch,
            window_len + 1,
            pcfg.seed,
            step as u64,
            Some(split),
        )?;
        let per_sample: Vec<Result<(f64, Grads)>> = windows
            .par_iter()
            .map(|w| {
                let mut tape = Tape::new(&model.params);
                let logits = model.build_lm_logits(&mut tape, w)?;
                let targets = w[1..].to_vec();
                let weights = vec![1.0; targets.len()];
                let loss = tape.ce_rows(logits, targets, weights);
                let value = tape.scalar(loss);
                let grads = tape.backward(loss);
                Ok((value, grads))
            })
            .collect();
        let mut total = Grads::zeros(model.params.len());
        let mut loss_sum = 0.0;
        let scale = 1.0 / pcfg.batch as f64;
        for r in per_sample {
            let (value, grads) = r?;
            loss_sum += value * scale;
            total.add_scaled(&grads, scale);
        }
        if !loss_sum.is_finite() || !total.is_finite() {
            return Err(Error::NanLoss {
                step,
                term: "language".into(),
            });
        }
        opt.update(&mut model.params, &mut total, pcfg.grad_clip);
        losses.push(loss_sum);
    }
    let heldout_after = heldout_nll(&model, corpus, window_len)?;
    Ok(PretrainOutcome {
        model,
        losses,
        heldout_before,
        heldout_after,
    })
}

/// The prior checkpoint view of a pretrained model (backbone + LM parts).
pub fn as_prior(model: &PolicyModel) -> Checkpoint {
    Checkpoint {
        cfg: model.cfg.clone(),
        vocab: model.vocab.clone(),
        tag: "lm-prior".into(),
        tensors: model
            .params
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.clone()))
            .collect(),
    }
}
