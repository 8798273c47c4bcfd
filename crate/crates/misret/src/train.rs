//! Loss functions and the training loop.
//!
//! The asymmetric squared penalty weights residuals u = target - prediction
//! by alpha when u >= 0 and by 1 - alpha when u < 0, so for alpha near 1
//! under-prediction is expensive and the scalar minimizer approaches the
//! maximum of the targets. That is what lets the expectile head estimate
//! the maximal in-support return.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_batch_stream, ContextWindow, Dataset};
use crate::error::{Error, Result};
use crate::lm::{make_language_batch, TextCorpus};
use crate::model::checkpoint::save_model_tagged;
use crate::model::forward::{ForwardOpts, WindowInput};
use crate::model::PolicyModel;
use crate::nn::{Adam, Grads, Tape};
use crate::rng::{rng_for, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Expectile level for the maximal-return head.
    pub alpha: f64,
    /// Weight of the auxiliary language loss.
    pub lambda: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
    /// Save intermediate checkpoints every N steps (0 = final only).
    pub checkpoint_every: usize,
    pub aux_language: bool,
    /// Off reproduces the no-maximal-return ablation: the expectile head is
    /// not trained and inference falls back to full-length history.
    pub max_head: bool,
    /// Stop the expectile-head gradient at the backbone boundary.
    pub max_head_stop_grad: bool,
    pub lang_batch: usize,
    pub lang_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            lambda: 0.1,
            lr: 3e-4,
            batch: 64,
            steps: 20_000,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 0,
            aux_language: true,
            max_head: true,
            max_head_stop_grad: false,
            lang_batch: 8,
            lang_window: 48,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0,1)", self.alpha)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::Config("batch and steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Asymmetric squared penalty |alpha - 1(u < 0)| u^2.
pub fn expectile_penalty(u: f64, alpha: f64) -> f64 {
    let w = if u >= 0.0 { alpha } else { 1.0 - alpha };
    w * u * u
}

/// Mean asymmetric penalty of predictions against targets, residual
/// oriented as target - prediction.
pub fn expectile_loss(predictions: &[f64], targets: &[f64], alpha: f64) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("empty expectile batch".into()));
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(&p, &t)| expectile_penalty(t - p, alpha))
        .sum::<f64>()
        / targets.len() as f64)
}

/// Mean squared error of reward estimates.
pub fn reward_loss(estimates: &[f64], rewards: &[f64]) -> Result<f64> {
    if estimates.len() != rewards.len() {
        return Err(Error::InvalidArgument(format!(
            "{} estimates vs {} rewards",
            estimates.len(),
            rewards.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::InvalidArgument("empty reward batch".into()));
    }
    Ok(estimates
        .iter()
        .zip(rewards)
        .map(|(&e, &r)| (r - e) * (r - e))
        .sum::<f64>()
        / rewards.len() as f64)
}

fn log_softmax_pick(logits: &[f64], idx: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits[idx] - lse
}

/// Mean cross-entropy of action logits against the taken actions.
pub fn action_loss(logits: &[Vec<f64>], actions: &[u32]) -> Result<f64> {
    if logits.len() != actions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logit rows vs {} actions",
            logits.len(),
            actions.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::InvalidArgument("empty action batch".into()));
    }
    let mut total = 0.0;
    for (row, &a) in logits.iter().zip(actions) {
        if a as usize >= row.len() {
            return Err(Error::InvalidArgument(format!(
                "action {a} outside {} logits",
                row.len()
            )));
        }
        total -= log_softmax_pick(row, a as usize);
    }
    Ok(total / actions.len() as f64)
}

/// Cross-entropy of the return-distribution head against the binned
/// observed returns-to-go (out-of-range targets clamp to the edge bins).
pub fn return_bin_loss(logits: &[Vec<f64>], rtgs: &[f64], edges: &[f64]) -> Result<f64> {
    if logits.len() != rtgs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logit rows vs {} returns",
            logits.len(),
            rtgs.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::InvalidArgument("empty return batch".into()));
    }
    let n_bins = edges.len() - 1;
    let mut total = 0.0;
    for (row, &r) in logits.iter().zip(rtgs) {
        let idx = match edges.binary_search_by(|e| e.partial_cmp(&r).expect("finite")) {
            Ok(i) => i.min(n_bins - 1),
            Err(0) => 0,
            Err(i) => (i - 1).min(n_bins - 1),
        };
        total -= log_softmax_pick(row, idx);
    }
    Ok(total / rtgs.len() as f64)
}

/// Per-term values of one batch; `l_lang` is recorded after weighting by
/// lambda so the terms sum to `l_total`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_total: f64,
    pub l_ne: f64,
    pub l_ng: f64,
    pub l_lang: f64,
    pub l_max: f64,
    pub l_bin: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_total: f64,
    pub l_ne: f64,
    pub l_ng: f64,
    pub l_lang: f64,
    pub l_max: f64,
    pub l_bin: f64,
    pub grad_norm: f64,
}

struct SampleTerms {
    ne: f64,
    ng: f64,
    bin: f64,
    max_: f64,
}

/// Record one window's loss terms on a tape; returns term values and the
/// scalar root for backward.
fn build_sample_loss(
    model: &PolicyModel,
    tape: &mut Tape,
    window: &ContextWindow,
    tcfg: &TrainConfig,
    dropout_rng: Option<&mut rand_chacha::ChaCha12Rng>,
) -> Result<(SampleTerms, crate::nn::Tx)> {
    let input = WindowInput::training(window);
    let handles = model.build_forward(
        tape,
        &input,
        ForwardOpts {
            dropout_rng,
            stop_grad_expectile: tcfg.max_head_stop_grad,
        },
    )?;
    let rewards: Vec<f64> = window.steps.iter().map(|s| s.reward as f64).collect();
    let actions: Vec<usize> = window.steps.iter().map(|s| s.action as usize).collect();
    let rtgs = window.rtg.clone();
    let ones = vec![1.0; rewards.len()];

    let l_ne = tape.mse_mean(handles.reward_est, rewards, ones.clone());
    let l_ng = tape.ce_rows(handles.action_logits, actions, ones.clone());
    let bin_targets: Vec<usize> = rtgs.iter().map(|&r| model.cfg.bin_index(r)).collect();
    let l_bin = tape.ce_rows(handles.bin_logits, bin_targets, ones.clone());

    let mut total = tape.add(l_ne, l_ng);
    total = tape.add(total, l_bin);
    let mut max_value = 0.0;
    if tcfg.max_head {
        let l_max = tape.expectile_mean(handles.expectile, rtgs, tcfg.alpha, ones);
        max_value = tape.scalar(l_max);
        total = tape.add(total, l_max);
    }
    Ok((
        SampleTerms {
            ne: tape.scalar(l_ne),
            ng: tape.scalar(l_ng),
            bin: tape.scalar(l_bin),
            max_: max_value,
        },
        total,
    ))
}

/// Evaluate the full objective on explicit batches without touching the
/// model (dropout off). Returns the batch-mean breakdown.
pub fn total_loss(
    model: &PolicyModel,
    rl_batch: &[ContextWindow],
    lang_batch: Option<&[Vec<usize>]>,
    tcfg: &TrainConfig,
) -> Result<LossBreakdown> {
    if rl_batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut ne = 0.0;
    let mut ng = 0.0;
    let mut bin = 0.0;
    let mut max_ = 0.0;
    for w in rl_batch {
        let mut tape = Tape::new(&model.params);
        let (terms, _) = build_sample_loss(model, &mut tape, w, tcfg, None)?;
        ne += terms.ne;
        ng += terms.ng;
        bin += terms.bin;
        max_ += terms.max_;
    }
    let n = rl_batch.len() as f64;
    ne /= n;
    ng /= n;
    bin /= n;
    max_ /= n;
    let mut lang = 0.0;
    if tcfg.aux_language {
        if let Some(batch) = lang_batch {
            if !batch.is_empty() {
                for w in batch {
                    lang += crate::lm::language_loss(model, w)?;
                }
                lang = tcfg.lambda * lang / batch.len() as f64;
            }
        }
    }
    Ok(LossBreakdown {
        l_total: ne + ng + bin + max_ + lang,
        l_ne: ne,
        l_ng: ng,
        l_lang: lang,
        l_max: max_,
        l_bin: bin,
    })
}

fn check_finite(step: usize, term: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NanLoss {
            step,
            term: term.to_string(),
        })
    }
}

/// Gradient-descent training loop with per-step metrics. Deterministic for
/// a fixed seed: batches, dropout, and the gradient reduction all derive
/// from (seed, step, sample) and are reduced in sample order.
pub fn train(
    model: &mut PolicyModel,
    ds: &Dataset,
    corpus: Option<&TextCorpus>,
    tcfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<StepMetrics>> {
    tcfg.validate()?;
    if ds.trajectories.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    if ds.catalog_size != model.cfg.n_items || ds.state_dim != model.cfg.state_dim {
        return Err(Error::Config(format!(
            "dataset ({} items, d_s {}) does not match model ({}, {})",
            ds.catalog_size, ds.state_dim, model.cfg.n_items, model.cfg.state_dim
        )));
    }
    if tcfg.aux_language {
        if corpus.is_none() {
            return Err(Error::Config(
                "aux_language=on requires a corpus".into(),
            ));
        }
        if model.cfg.lm_vocab == 0 {
            return Err(Error::Config(
                "aux_language=on requires LM projections in the model".into(),
            ));
        }
    }
    let lang_window = tcfg
        .lang_window
        .min(model.cfg.lm_max_len().saturating_sub(1))
        .max(2);

    let mut opt = Adam::new(&model.params, tcfg.lr);
    let mut log = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps {
        let windows = sample_batch_stream(ds, tcfg.batch, model.cfg.t_max, tcfg.seed, step as u64)?;
        let per_sample: Vec<Result<(SampleTerms, Grads)>> = windows
            .par_iter()
            .enumerate()
            .map(|(i, w)| {
                let mut tape = Tape::new(&model.params);
                let mut rng = rng_for(
                    tcfg.seed,
                    Stream::Dropout(((step as u64) << 20) | i as u64),
                );
                let (terms, total) =
                    build_sample_loss(model, &mut tape, w, tcfg, Some(&mut rng))?;
                let grads = tape.backward(total);
                Ok((terms, grads))
            })
            .collect();

        let mut grads = Grads::zeros(model.params.len());
        let scale = 1.0 / tcfg.batch as f64;
        let (mut ne, mut ng, mut bin, mut max_) = (0.0, 0.0, 0.0, 0.0);
        for r in per_sample {
            let (terms, g) = r?;
            ne += terms.ne * scale;
            ng += terms.ng * scale;
            bin += terms.bin * scale;
            max_ += terms.max_ * scale;
            grads.add_scaled(&g, scale);
        }

        let mut lang = 0.0;
        if tcfg.aux_language {
            let corpus = corpus.expect("validated above");
            let batch = make_language_batch(
                corpus,
                tcfg.lang_batch,
                lang_window + 1,
                tcfg.seed,
                step as u64,
                Some(corpus.holdout_split()),
            )?;
            let lang_grads: Vec<Result<(f64, Grads)>> = batch
                .par_iter()
                .map(|w| {
                    let mut tape = Tape::new(&model.params);
                    let logits = model.build_lm_logits(&mut tape, w)?;
                    let targets = w[1..].to_vec();
                    let weights = vec![1.0; targets.len()];
                    let loss = tape.ce_rows(logits, targets, weights);
                    let v = tape.scalar(loss);
                    let g = tape.backward(loss);
                    Ok((v, g))
                })
                .collect();
            let lscale = tcfg.lambda / tcfg.lang_batch as f64;
            for r in lang_grads {
                let (v, g) = r?;
                lang += v * lscale;
                grads.add_scaled(&g, lscale);
            }
        }

        check_finite(step, "reward", ne)?;
        check_finite(step, "action", ng)?;
        check_finite(step, "return-bin", bin)?;
        check_finite(step, "max-return", max_)?;
        check_finite(step, "language", lang)?;
        if !grads.is_finite() {
            return Err(Error::NanLoss {
                step,
                term: "gradients".into(),
            });
        }

        let grad_norm = opt.update(&mut model.params, &mut grads, tcfg.grad_clip);
        log.push(StepMetrics {
            step,
            l_total: ne + ng + bin + max_ + lang,
            l_ne: ne,
            l_ng: ng,
            l_lang: lang,
            l_max: max_,
            l_bin: bin,
            grad_norm,
        });

        if tcfg.checkpoint_every > 0 && (step + 1) % tcfg.checkpoint_every == 0 {
            if let Some(dir) = checkpoint_dir {
                let path = dir.join(format!("model_step{}.ckpt", step + 1));
                save_model_tagged(model, &path, &format!("step{}", step + 1))?;
            }
        }
    }
    Ok(log)
}

/// Fraction of windows whose final action the model ranks first.
pub fn batch_action_accuracy(model: &PolicyModel, windows: &[ContextWindow]) -> Result<f64> {
    let mut hits = 0usize;
    for w in windows {
        let input = WindowInput::training(w);
        let out = model.forward(&input)?;
        let logits = out.action_logits_last();
        let best = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
            .map(|(i, _)| i as u32)
            .expect("non-empty logits");
        if best == w.steps.last().expect("non-empty window").action {
            hits += 1;
        }
    }
    Ok(hits as f64 / windows.len() as f64)
}

pub fn write_metrics_jsonl(log: &[StepMetrics], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for m in log {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
