//! Inference: history-length search over the maximal-return estimator,
//! expert-return sampling, action selection, and rollout evaluation.
//!
//! Acting re-runs the full pipeline every step: estimate the maximal
//! in-support return for each candidate history length, keep the best
//! truncation, read the return distribution there, tilt it toward high
//! returns, condition on the sampled value, and decode an action.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::WindowInput;
use crate::model::PolicyModel;
use crate::rng::{rng_for, Stream};
use crate::sim::{Env, LatentWorld};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieBreak {
    Longest,
    Shortest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Grid step for the history-length search.
    pub delta: usize,
    /// Inverse temperature of the expert-return tilt.
    pub kappa: f64,
    pub action_mode: ActionMode,
    pub tie_break: TieBreak,
    /// Off disables the search (fixed full-length history), reproducing the
    /// no-maximal-return ablation.
    pub use_max_head: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            delta: 2,
            kappa: 10.0,
            action_mode: ActionMode::Greedy,
            tie_break: TieBreak::Longest,
            use_max_head: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.delta == 0 || self.delta > t_max {
            return Err(Error::Config(format!(
                "delta {} outside 1..={t_max}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// One acted step as the policy saw it.
#[derive(Debug, Clone)]
pub struct HistStep {
    pub state: Vec<f64>,
    /// Conditioning value placed at this step's return token when acting.
    pub rtg_used: f64,
    pub action: u32,
    pub reward: f64,
}

/// Query context: everything observed so far plus the current state.
#[derive(Debug, Clone, Default)]
pub struct ActContext {
    pub past: Vec<HistStep>,
    pub current_state: Vec<f64>,
}

impl ActContext {
    pub fn available(&self) -> usize {
        self.past.len() + 1
    }

    /// Window of the last `t_len` steps ending at the current state.
    fn window_ending_at_state(&self, t_len: usize) -> WindowInput {
        let n_past = t_len - 1;
        let start = self.past.len() - n_past;
        let mut states: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        let mut rtgs = Vec::with_capacity(n_past);
        let mut actions = Vec::with_capacity(n_past);
        for h in &self.past[start..] {
            states.push(h.state.clone());
            rtgs.push(h.rtg_used);
            actions.push(h.action);
        }
        states.push(self.current_state.clone());
        WindowInput::ending_at_state(states, rtgs, actions)
    }

    /// Same window with the conditioning return placed at the newest slot.
    fn window_ending_at_return(&self, t_len: usize, target: f64) -> WindowInput {
        let mut w = self.window_ending_at_state(t_len);
        w.rtgs.push(target);
        WindowInput::ending_at_return(w.states, w.rtgs, w.actions)
    }
}

/// Candidate history lengths: 1, 1+delta, 1+2*delta, ... clipped to the
/// available history, with the full available length always appended so the
/// fixed-history baseline stays in the candidate set.
pub fn length_grid(delta: usize, t_max: usize, available: usize) -> Vec<usize> {
    let cap = t_max.min(available).max(1);
    let mut grid: Vec<usize> = (1..=cap).step_by(delta).collect();
    if *grid.last().expect("non-empty grid") != cap {
        grid.push(cap);
    }
    grid
}

/// Evaluate the maximal-return head on each candidate truncation; ascending
/// lengths, with the return distribution of each query kept for reuse.
fn estimate_with_distributions(
    model: &PolicyModel,
    ctx: &ActContext,
    scfg: &SearchConfig,
) -> Result<Vec<(usize, f64, Vec<f64>)>> {
    let grid = length_grid(scfg.delta, model.cfg.t_max, ctx.available());
    let mut out = Vec::with_capacity(grid.len());
    for t_len in grid {
        let fwd = model.forward(&ctx.window_ending_at_state(t_len))?;
        out.push((t_len, fwd.expectile_value(), fwd.bin_probs_last()));
    }
    Ok(out)
}

/// The (length, estimate) pairs of the history-length search.
pub fn estimate_max_returns(
    model: &PolicyModel,
    ctx: &ActContext,
    scfg: &SearchConfig,
) -> Result<Vec<(usize, f64)>> {
    Ok(estimate_with_distributions(model, ctx, scfg)?
        .into_iter()
        .map(|(t, r, _)| (t, r))
        .collect())
}

/// Argmax over estimates; ties go to the longer history by default.
pub fn select_history_length(estimates: &[(usize, f64)], tie_break: TieBreak) -> Result<usize> {
    if estimates.is_empty() {
        return Err(Error::InvalidArgument("no length estimates".into()));
    }
    let mut best = estimates[0];
    for &(t, r) in &estimates[1..] {
        let better = match tie_break {
            TieBreak::Longest => r >= best.1,
            TieBreak::Shortest => r > best.1,
        };
        if better {
            best = (t, r);
        }
    }
    Ok(best.0)
}

/// Tilted return distribution: posterior(b) proportional to
/// exp(kappa * center_b) * prior(b), computed in log space.
pub fn expert_posterior(prior: &[f64], centers: &[f64], kappa: f64) -> Result<Vec<f64>> {
    if prior.len() != centers.len() || prior.is_empty() {
        return Err(Error::InvalidArgument(
            "distribution and centers disagree".into(),
        ));
    }
    let logs: Vec<f64> = prior
        .iter()
        .zip(centers)
        .map(|(&p, &c)| p.max(1e-300).ln() + kappa * c)
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::NonFinite {
            context: "expert posterior".into(),
        });
    }
    Ok(weights.iter().map(|w| w / sum).collect())
}

/// Sample a bin from the tilted distribution and return its center.
pub fn sample_expert_return(
    prior: &[f64],
    centers: &[f64],
    kappa: f64,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let posterior = expert_posterior(prior, centers, kappa)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in posterior.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(centers[i]);
        }
    }
    Ok(*centers.last().expect("non-empty centers"))
}

/// Greedy argmax or temperature-1 sampling over action logits.
pub fn select_action(logits: &[f64], mode: ActionMode, rng: &mut ChaCha12Rng) -> u32 {
    match mode {
        ActionMode::Greedy => logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i as u32)
            .expect("non-empty logits"),
        ActionMode::Sample => {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = weights.iter().sum();
            let u: f64 = rng.random::<f64>() * sum;
            let mut acc = 0.0;
            for (i, &w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    return i as u32;
                }
            }
            (logits.len() - 1) as u32
        }
    }
}

/// Everything act() decided, for logging and tests.
#[derive(Debug, Clone)]
pub struct ActOutcome {
    pub action: u32,
    pub t_star: usize,
    pub estimates: Vec<(usize, f64)>,
    pub sampled_return: f64,
    pub conditioned_return: f64,
    pub clamped: bool,
    pub n_forwards: usize,
}

/// Full pipeline: length search, expert-return sampling, conditioning,
/// action selection.
pub fn act(
    model: &PolicyModel,
    ctx: &ActContext,
    scfg: &SearchConfig,
    rng: &mut ChaCha12Rng,
) -> Result<ActOutcome> {
    scfg.validate(model.cfg.t_max)?;
    let (t_star, estimates, prior) = if scfg.use_max_head {
        let ests = estimate_with_distributions(model, ctx, scfg)?;
        let pairs: Vec<(usize, f64)> = ests.iter().map(|(t, r, _)| (*t, *r)).collect();
        let t_star = select_history_length(&pairs, scfg.tie_break)?;
        let prior = ests
            .iter()
            .find(|(t, _, _)| *t == t_star)
            .expect("t_star from grid")
            .2
            .clone();
        (t_star, pairs, prior)
    } else {
        // Ablation: plain return-conditioned inference on the full window.
        let t_star = model.cfg.t_max.min(ctx.available());
        let fwd = model.forward(&ctx.window_ending_at_state(t_star))?;
        (t_star, Vec::new(), fwd.bin_probs_last())
    };
    let n_search_forwards = if scfg.use_max_head {
        estimates.len()
    } else {
        1
    };

    let centers = model.cfg.bin_centers();
    let sampled = sample_expert_return(&prior, &centers, scfg.kappa, rng)?;
    let (lo, hi) = model.cfg.bin_range();
    let conditioned = sampled.clamp(lo, hi);
    let query = ctx.window_ending_at_return(t_star, conditioned);
    let fwd = model.forward(&query)?;
    let action = select_action(fwd.action_logits_last(), scfg.action_mode, rng);
    Ok(ActOutcome {
        action,
        t_star,
        estimates,
        sampled_return: sampled,
        conditioned_return: conditioned,
        clamped: conditioned != sampled,
        n_forwards: n_search_forwards + 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

fn stat_over(values: &[f64]) -> Stat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Stat { mean, std }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub env: usize,
    pub episode: usize,
    pub r_cumu: f64,
    pub r_avg: f64,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub seed: u64,
    pub n_envs: usize,
    pub episodes_per_env: usize,
    pub r_cumu: Stat,
    pub r_avg: Stat,
    pub length_mean: f64,
    pub per_episode: Vec<EpisodeRecord>,
}

/// Run the policy on `n_envs` independent environments. Results are
/// independent of worker scheduling: every env owns derived RNG streams and
/// records are reduced in env order.
pub fn rollout_eval(
    model: &PolicyModel,
    world: &Arc<LatentWorld>,
    n_envs: usize,
    episodes_per_env: usize,
    scfg: &SearchConfig,
    seed: u64,
) -> Result<EvalReport> {
    if n_envs == 0 || episodes_per_env == 0 {
        return Err(Error::InvalidArgument(
            "n_envs and episodes_per_env must be >= 1".into(),
        ));
    }
    scfg.validate(model.cfg.t_max)?;
    let per_env: Vec<Result<Vec<EpisodeRecord>>> = (0..n_envs)
        .into_par_iter()
        .map(|env_idx| {
            let mut env = Env::new(Arc::clone(world), seed, env_idx as u64);
            let mut rng = rng_for(seed, Stream::ActSampler(env_idx as u64));
            let mut records = Vec::with_capacity(episodes_per_env);
            for episode in 0..episodes_per_env {
                let mut ctx = ActContext {
                    past: Vec::new(),
                    current_state: env.reset(None)?,
                };
                let mut r_cumu = 0.0;
                let mut length = 0usize;
                loop {
                    let outcome = act(model, &ctx, scfg, &mut rng)?;
                    let (next, reward, done) = env.step(outcome.action)?;
                    ctx.past.push(HistStep {
                        state: std::mem::take(&mut ctx.current_state),
                        rtg_used: outcome.conditioned_return,
                        action: outcome.action,
                        reward,
                    });
                    ctx.current_state = next;
                    r_cumu += reward;
                    length += 1;
                    if done {
                        break;
                    }
                }
                records.push(EpisodeRecord {
                    env: env_idx,
                    episode,
                    r_cumu,
                    r_avg: r_cumu / length as f64,
                    length,
                });
            }
            Ok(records)
        })
        .collect();

    let mut per_episode = Vec::with_capacity(n_envs * episodes_per_env);
    for r in per_env {
        per_episode.extend(r?);
    }
    let r_cumu = stat_over(&per_episode.iter().map(|e| e.r_cumu).collect::<Vec<_>>());
    let r_avg = stat_over(&per_episode.iter().map(|e| e.r_avg).collect::<Vec<_>>());
    let length_mean = per_episode.iter().map(|e| e.length as f64).sum::<f64>()
        / per_episode.len() as f64;
    Ok(EvalReport {
        config_digest: String::new(),
        seed,
        n_envs,
        episodes_per_env,
        r_cumu,
        r_avg,
        length_mean,
        per_episode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::tests::tiny_cfg;
    use crate::rng::stream_rng;
    use crate::sim::WorldConfig;

    #[test]
    fn grid_enumeration_matches_rule() {
        assert_eq!(
            length_grid(2, 20, 20),
            vec![1, 3, 5, 7, 9, 11, 13, 15, 17, 19, 20]
        );
        assert_eq!(length_grid(20, 20, 20), vec![1, 20]);
        assert_eq!(length_grid(2, 20, 1), vec![1]);
        assert_eq!(length_grid(1, 4, 9), vec![1, 2, 3, 4]);
        assert_eq!(length_grid(3, 8, 6), vec![1, 4, 6]);
    }

    #[test]
    fn tie_goes_to_longer_history() {
        let t = select_history_length(&[(1, 0.9), (3, 0.9)], TieBreak::Longest).unwrap();
        assert_eq!(t, 3);
        let t = select_history_length(&[(1, 1.0), (3, 0.2)], TieBreak::Longest).unwrap();
        assert_eq!(t, 1);
        let t = select_history_length(&[(5, 0.4)], TieBreak::Longest).unwrap();
        assert_eq!(t, 5);
        let t = select_history_length(&[(1, 0.9), (3, 0.9)], TieBreak::Shortest).unwrap();
        assert_eq!(t, 1);
    }

    #[test]
    fn posterior_matches_closed_form() {
        let p = expert_posterior(&[0.5, 0.5], &[0.0, 1.0], 10.0).unwrap();
        let expect = (10f64).exp() / (1.0 + (10f64).exp());
        assert!((p[1] - expect).abs() < 1e-12);
        // kappa = 0 keeps the prior.
        let p = expert_posterior(&[0.3, 0.7], &[0.0, 1.0], 0.0).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-12 && (p[1] - 0.7).abs() < 1e-12);
        // Degenerate prior is a fixed point for any kappa.
        let p = expert_posterior(&[1.0, 0.0], &[0.0, 1.0], 25.0).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn posterior_stochastically_dominates_prior() {
        let prior = [0.2, 0.3, 0.4, 0.1];
        let centers = [0.0, 1.0, 2.0, 3.0];
        for kappa in [0.5, 2.0, 10.0] {
            let post = expert_posterior(&prior, &centers, kappa).unwrap();
            let mut cdf_prior = 0.0;
            let mut cdf_post = 0.0;
            for i in 0..prior.len() {
                cdf_prior += prior[i];
                cdf_post += post[i];
                assert!(cdf_post <= cdf_prior + 1e-12, "kappa {kappa} bin {i}");
            }
        }
    }

    #[test]
    fn greedy_and_sampled_action_selection() {
        let mut logits = vec![0.0; 10];
        logits[7] = 5.0;
        let mut rng = stream_rng(1, 1);
        assert_eq!(select_action(&logits, ActionMode::Greedy, &mut rng), 7);
        assert_eq!(select_action(&logits, ActionMode::Greedy, &mut rng), 7);
        let mut r1 = stream_rng(2, 2);
        let mut r2 = stream_rng(2, 2);
        assert_eq!(
            select_action(&logits, ActionMode::Sample, &mut r1),
            select_action(&logits, ActionMode::Sample, &mut r2)
        );
    }

    fn ctx_with_history(n_past: usize, d_s: usize) -> ActContext {
        let mut rng = stream_rng(3, 77);
        let state = |rng: &mut rand_chacha::ChaCha12Rng| {
            (0..d_s).map(|_| rng.random::<f64>() - 0.5).collect::<Vec<f64>>()
        };
        ActContext {
            past: (0..n_past)
                .map(|_| HistStep {
                    state: state(&mut rng),
                    rtg_used: rng.random::<f64>(),
                    action: rng.random_range(0..5),
                    reward: rng.random::<f64>(),
                })
                .collect(),
            current_state: state(&mut rng),
        }
    }

    #[test]
    fn act_call_count_and_grid_dominance() {
        let m = crate::model::PolicyModel::init(tiny_cfg(), None, 21).unwrap();
        let ctx = ctx_with_history(6, 3);
        let mut scfg = SearchConfig {
            delta: 2,
            ..SearchConfig::default()
        };
        let mut rng = stream_rng(5, 5);
        m.reset_forward_count();
        let coarse = act(&m, &ctx, &scfg, &mut rng).unwrap();
        assert_eq!(m.forward_count() as usize, coarse.n_forwards);
        // t_max = 4, 4 available -> grid {1, 3, 4} plus the action query.
        assert_eq!(coarse.n_forwards, 4);

        scfg.delta = 1;
        let fine = act(&m, &ctx, &scfg, &mut rng).unwrap();
        let best = |o: &ActOutcome| {
            o.estimates
                .iter()
                .map(|&(_, r)| r)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        assert!(best(&fine) >= best(&coarse) - 1e-12);
    }

    #[test]
    fn ablation_disables_search() {
        let m = crate::model::PolicyModel::init(tiny_cfg(), None, 21).unwrap();
        let ctx = ctx_with_history(6, 3);
        let scfg = SearchConfig {
            use_max_head: false,
            ..SearchConfig::default()
        };
        let mut rng = stream_rng(5, 5);
        m.reset_forward_count();
        let out = act(&m, &ctx, &scfg, &mut rng).unwrap();
        assert_eq!(out.t_star, 4); // min(t_max, available)
        assert!(out.estimates.is_empty());
        assert_eq!(out.n_forwards, 2);
        assert_eq!(m.forward_count(), 2);
    }

    fn eval_setup() -> (crate::model::PolicyModel, Arc<LatentWorld>) {
        let wcfg = WorldConfig {
            n_users: 10,
            n_items: 5,
            d_f: 2,
            k: 4,
            max_steps: 6,
            noise_sigma: 0.0,
            world_seed: 3,
            ..WorldConfig::default()
        };
        let world = Arc::new(LatentWorld::generate(wcfg).unwrap());
        let mut cfg = tiny_cfg();
        cfg.state_dim = world.state_dim();
        cfg.n_items = 5;
        let m = crate::model::PolicyModel::init(cfg, None, 4).unwrap();
        (m, world)
    }

    #[test]
    fn rollout_metrics_consistent_and_deterministic() {
        let (m, world) = eval_setup();
        let scfg = SearchConfig::default();
        let a = rollout_eval(&m, &world, 8, 2, &scfg, 11).unwrap();
        let b = rollout_eval(&m, &world, 8, 2, &scfg, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_episode.len(), 16);
        for e in &a.per_episode {
            assert!((e.r_avg * e.length as f64 - e.r_cumu).abs() < 1e-9);
            assert!(e.length >= 1 && e.length <= 6);
        }
    }

    #[test]
    fn hundred_envs_produce_hundred_records() {
        let (m, world) = eval_setup();
        let scfg = SearchConfig::default();
        let report = rollout_eval(&m, &world, 100, 1, &scfg, 7).unwrap();
        assert_eq!(report.per_episode.len(), 100);
        let mut envs: Vec<usize> = report.per_episode.iter().map(|e| e.env).collect();
        envs.dedup();
        assert_eq!(envs.len(), 100);
    }
}
