//! Synthetic recommendation environments: a latent-factor user/item world
//! with a windowed interaction state tracker, session-termination rules,
//! behavior-policy data generation, and parallel evaluation envs.

pub mod mf;
pub mod stitch;

use std::collections::VecDeque;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Step, Trajectory};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream_rng, Stream};

/// Everything needed to rebuild a world deterministically.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_items: usize,
    /// Latent factor dimension; the state dimension is 2 * d_f.
    pub d_f: usize,
    /// History window length for the state tracker and repeat penalty.
    pub k: usize,
    pub max_steps: usize,
    pub quit_patience: usize,
    /// Session quit threshold as a fraction of r_max.
    pub quit_threshold_frac: f64,
    pub r_max: f64,
    pub reward_scale: f64,
    pub noise_sigma: f64,
    /// Multiplicative reward decay per prior occurrence of the same item
    /// within the history window.
    pub repeat_decay: f64,
    /// Seed for drawing the latent factors.
    pub world_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 50,
            d_f: 8,
            k: 10,
            max_steps: 30,
            quit_patience: 3,
            quit_threshold_frac: 0.2,
            r_max: 5.0,
            reward_scale: 5.0,
            noise_sigma: 0.2,
            repeat_decay: 0.5,
            world_seed: 0,
        }
    }
}

/// Latent-factor world; immutable after generation, shareable across envs.
#[derive(Debug, Clone)]
pub struct LatentWorld {
    pub cfg: WorldConfig,
    pub user_factors: Array2<f64>,
    pub item_factors: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LatentWorld {
    /// Draw factors so that u . v is approximately standard normal.
    pub fn generate(cfg: WorldConfig) -> Result<Self> {
        if cfg.d_f == 0 || cfg.n_users == 0 || cfg.n_items == 0 {
            return Err(Error::Config("world dimensions must be >= 1".into()));
        }
        if cfg.reward_scale <= 0.0 || cfg.noise_sigma < 0.0 {
            return Err(Error::Config(
                "reward_scale must be > 0 and noise_sigma >= 0".into(),
            ));
        }
        let mut rng = rng_for(cfg.world_seed, Stream::World);
        let std = (cfg.d_f as f64).powf(-0.25);
        let dist = rand_distr::Normal::new(0.0, std).expect("valid std");
        let mut draw = |n: usize, d: usize| {
            Array2::from_shape_fn((n, d), |_| rand_distr::Distribution::sample(&dist, &mut rng))
        };
        let user_factors = draw(cfg.n_users, cfg.d_f);
        let item_factors = draw(cfg.n_items, cfg.d_f);
        Ok(Self {
            cfg,
            user_factors,
            item_factors,
        })
    }

    pub fn state_dim(&self) -> usize {
        2 * self.cfg.d_f
    }

    pub fn quit_threshold(&self) -> f64 {
        self.cfg.quit_threshold_frac * self.cfg.r_max
    }

    /// Base affinity in [0, 1] before scaling, noise, and repeat decay.
    pub fn affinity(&self, user: usize, item: usize) -> f64 {
        sigmoid(self.user_factors.row(user).dot(&self.item_factors.row(item)))
    }

    /// Expected reward for recommending `item` right now, including the
    /// repeat penalty from the current history window.
    pub fn expected_reward(&self, user: usize, item: u32, history: &VecDeque<(u32, f64)>) -> f64 {
        let repeats = history.iter().filter(|(i, _)| *i == item).count();
        self.cfg.reward_scale
            * self.affinity(user, item as usize)
            * self.cfg.repeat_decay.powi(repeats as i32)
    }
}

/// State tracker: user factors concatenated with the reward-weighted mean
/// of the item factors of the last k interactions (zero block when the
/// history is empty).
pub fn state_tracker_encode(
    world: &LatentWorld,
    user: usize,
    history: &VecDeque<(u32, f64)>,
) -> Vec<f64> {
    let d = world.cfg.d_f;
    let mut out = Vec::with_capacity(2 * d);
    out.extend(world.user_factors.row(user).iter().copied());
    let mut agg = vec![0.0; d];
    if !history.is_empty() {
        for &(item, reward) in history {
            for (a, &v) in agg.iter_mut().zip(world.item_factors.row(item as usize)) {
                *a += reward * v;
            }
        }
        let n = history.len() as f64;
        for a in &mut agg {
            *a /= n;
        }
    }
    out.extend(agg);
    out
}

/// Per-session mutable state.
#[derive(Debug, Clone)]
pub struct SessionState {
    pub user_id: usize,
    pub history: VecDeque<(u32, f64)>,
    pub step_count: usize,
    pub done: bool,
    pub quit_counter: usize,
}

/// A single-owner environment handle over a shared world.
pub struct Env {
    pub world: Arc<LatentWorld>,
    pub session: SessionState,
    rng: ChaCha12Rng,
}

impl Env {
    pub fn new(world: Arc<LatentWorld>, seed: u64, stream: u64) -> Self {
        let session = SessionState {
            user_id: 0,
            history: VecDeque::new(),
            step_count: 0,
            done: true,
            quit_counter: 0,
        };
        Self {
            world,
            session,
            rng: rng_for(seed, Stream::EvalEnv(stream)),
        }
    }

    /// Start a session for `user` (or a random user) and return the initial
    /// state vector.
    pub fn reset(&mut self, user: Option<usize>) -> Result<Vec<f64>> {
        let user_id = match user {
            Some(u) => {
                if u >= self.world.cfg.n_users {
                    return Err(Error::UnknownUser(u));
                }
                u
            }
            None => self.rng.random_range(0..self.world.cfg.n_users),
        };
        self.session = SessionState {
            user_id,
            history: VecDeque::new(),
            step_count: 0,
            done: false,
            quit_counter: 0,
        };
        Ok(self.state())
    }

    pub fn state(&self) -> Vec<f64> {
        state_tracker_encode(&self.world, self.session.user_id, &self.session.history)
    }

    /// Recommend `action`; returns (next state, reward, done).
    pub fn step(&mut self, action: u32) -> Result<(Vec<f64>, f64, bool)> {
        if self.session.done {
            return Err(Error::SessionDone);
        }
        if (action as usize) >= self.world.cfg.n_items {
            return Err(Error::InvalidArgument(format!(
                "action {action} outside catalog of {}",
                self.world.cfg.n_items
            )));
        }
        let mean = self
            .world
            .expected_reward(self.session.user_id, action, &self.session.history);
        let noise = if self.world.cfg.noise_sigma > 0.0 {
            let dist = rand_distr::Normal::new(0.0, self.world.cfg.noise_sigma).expect("sigma");
            rand_distr::Distribution::sample(&dist, &mut self.rng)
        } else {
            0.0
        };
        let reward = (mean + noise).clamp(0.0, self.world.cfg.r_max);

        self.session.history.push_back((action, reward));
        while self.session.history.len() > self.world.cfg.k {
            self.session.history.pop_front();
        }
        self.session.step_count += 1;
        if reward < self.world.quit_threshold() {
            self.session.quit_counter += 1;
        } else {
            self.session.quit_counter = 0;
        }
        if self.session.step_count >= self.world.cfg.max_steps
            || self.session.quit_counter >= self.world.cfg.quit_patience
        {
            self.session.done = true;
        }
        Ok((self.state(), reward, self.session.done))
    }
}

/// `n` environments with independent derived RNG streams; per-env results
/// are identical however the envs are scheduled.
pub fn parallel_eval_envs(world: &Arc<LatentWorld>, n: usize, seed: u64) -> Vec<Env> {
    (0..n)
        .map(|i| Env::new(Arc::clone(world), seed, i as u64))
        .collect()
}

/// Greedy action: the item with the highest expected reward under the
/// current history (repeat penalty included).
pub fn oracle_action(world: &LatentWorld, user: usize, history: &VecDeque<(u32, f64)>) -> u32 {
    let mut best = 0u32;
    let mut best_val = f64::NEG_INFINITY;
    for item in 0..world.cfg.n_items as u32 {
        let v = world.expected_reward(user, item, history);
        if v > best_val {
            best_val = v;
            best = item;
        }
    }
    best
}

/// Roll out `episodes` sessions with an epsilon-noisy oracle: with
/// probability 1-eps the greedy action, otherwise uniform random.
/// Trajectories are tagged with the policy quality.
pub fn gen_behavior_trajectories(
    world: &Arc<LatentWorld>,
    eps: f64,
    episodes: usize,
    seed: u64,
    id_offset: u64,
) -> Result<Vec<Trajectory>> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("episodes must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [0, 1]")));
    }
    let source = format!("oracle-eps{eps:.2}");
    let mut out = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut env = Env::new(Arc::clone(world), seed, u64::MAX - ep as u64);
        let mut policy_rng = stream_rng(seed, 0x6265_6861_7600 ^ ep as u64);
        let mut state = env.reset(None)?;
        let mut steps = Vec::new();
        loop {
            let action = if policy_rng.random::<f64>() < eps {
                policy_rng.random_range(0..world.cfg.n_items) as u32
            } else {
                oracle_action(world, env.session.user_id, &env.session.history)
            };
            let (next, reward, done) = env.step(action)?;
            steps.push(Step {
                state: state.iter().map(|&v| v as f32).collect(),
                action,
                reward: reward as f32,
            });
            state = next;
            if done {
                break;
            }
        }
        out.push(Trajectory::new(id_offset + ep as u64, source.clone(), steps, 1.0)?);
    }
    Ok(out)
}

/// Single-quality dataset (see `gen_mixed_dataset` for the training corpus).
pub fn gen_behavior_data(
    world: &Arc<LatentWorld>,
    eps: f64,
    episodes: usize,
    seed: u64,
    n_bins: usize,
) -> Result<Dataset> {
    let trajs = gen_behavior_trajectories(world, eps, episodes, seed, 0)?;
    Dataset::with_uniform_bins(trajs, n_bins, world.cfg.n_items, world.state_dim(), 1.0)
}

/// Mixed-quality corpus: one slice of episodes per (eps, episodes) entry,
/// with distinct seeds per slice.
pub fn gen_mixed_dataset(
    world: &Arc<LatentWorld>,
    mix: &[(f64, usize)],
    seed: u64,
    n_bins: usize,
) -> Result<Dataset> {
    let mut trajs = Vec::new();
    for (slice, &(eps, episodes)) in mix.iter().enumerate() {
        let slice_seed = stream_rng(seed, 0x6d69_7800 ^ slice as u64).random();
        let mut part = gen_behavior_trajectories(
            world,
            eps,
            episodes,
            slice_seed,
            trajs.len() as u64,
        )?;
        trajs.append(&mut part);
    }
    Dataset::with_uniform_bins(trajs, n_bins, world.cfg.n_items, world.state_dim(), 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world(noise: f64) -> Arc<LatentWorld> {
        let cfg = WorldConfig {
            n_users: 20,
            n_items: 12,
            d_f: 4,
            k: 5,
            max_steps: 15,
            noise_sigma: noise,
            world_seed: 9,
            ..WorldConfig::default()
        };
        Arc::new(LatentWorld::generate(cfg).unwrap())
    }

    #[test]
    fn reset_deterministic_for_seed() {
        let world = small_world(0.3);
        let mut a = Env::new(Arc::clone(&world), 3, 0);
        let mut b = Env::new(Arc::clone(&world), 3, 0);
        assert_eq!(a.reset(None).unwrap(), b.reset(None).unwrap());
        assert_eq!(a.session.user_id, b.session.user_id);
    }

    #[test]
    fn empty_history_encoding_is_user_factors_and_zeros() {
        let world = small_world(0.0);
        let enc = state_tracker_encode(&world, 3, &VecDeque::new());
        let d = world.cfg.d_f;
        for (i, &v) in enc.iter().take(d).enumerate() {
            assert_eq!(v, world.user_factors[(3, i)]);
        }
        assert!(enc[d..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_interaction_encoding_is_reward_times_item() {
        let world = small_world(0.0);
        let mut h = VecDeque::new();
        h.push_back((5u32, 2.0));
        let enc = state_tracker_encode(&world, 0, &h);
        let d = world.cfg.d_f;
        for i in 0..d {
            assert!((enc[d + i] - 2.0 * world.item_factors[(5, i)]).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_reward_permutation_invariance() {
        let world = small_world(0.0);
        let mut h1 = VecDeque::new();
        h1.push_back((2u32, 1.5));
        h1.push_back((7u32, 1.5));
        let mut h2 = VecDeque::new();
        h2.push_back((7u32, 1.5));
        h2.push_back((2u32, 1.5));
        assert_eq!(
            state_tracker_encode(&world, 1, &h1),
            state_tracker_encode(&world, 1, &h2)
        );
    }

    #[test]
    fn reward_matches_formula_with_noise_off() {
        let world = small_world(0.0);
        let mut env = Env::new(Arc::clone(&world), 1, 0);
        env.reset(Some(4)).unwrap();
        let (_, r, _) = env.step(7).unwrap();
        let expect = (world.cfg.reward_scale * world.affinity(4, 7)).clamp(0.0, world.cfg.r_max);
        assert!((r - expect).abs() < 1e-12);
    }

    #[test]
    fn repeat_decay_halves_second_reward() {
        let world = small_world(0.0);
        let mut env = Env::new(Arc::clone(&world), 1, 0);
        env.reset(Some(2)).unwrap();
        let (_, r1, _) = env.step(3).unwrap();
        let (_, r2, _) = env.step(3).unwrap();
        assert!((r2 - 0.5 * r1).abs() < 1e-12);
    }

    #[test]
    fn three_low_rewards_quit() {
        // A world where every reward is far below the threshold.
        let cfg = WorldConfig {
            n_users: 4,
            n_items: 4,
            d_f: 2,
            reward_scale: 0.01,
            noise_sigma: 0.0,
            quit_threshold_frac: 0.2,
            r_max: 5.0,
            world_seed: 1,
            ..WorldConfig::default()
        };
        let world = Arc::new(LatentWorld::generate(cfg).unwrap());
        let mut env = Env::new(Arc::clone(&world), 1, 0);
        env.reset(Some(0)).unwrap();
        let (_, _, d1) = env.step(0).unwrap();
        let (_, _, d2) = env.step(1).unwrap();
        let (_, _, d3) = env.step(2).unwrap();
        assert!(!d1 && !d2 && d3);
        assert!(env.session.done);
        assert!(matches!(env.step(0), Err(Error::SessionDone)));
    }

    #[test]
    fn session_length_bounded_and_rewards_in_range() {
        let world = small_world(0.5);
        for stream in 0..10 {
            let mut env = Env::new(Arc::clone(&world), 5, stream);
            env.reset(None).unwrap();
            let mut len = 0;
            loop {
                let a = (len % world.cfg.n_items) as u32;
                let (_, r, done) = env.step(a).unwrap();
                assert!((0.0..=world.cfg.r_max).contains(&r));
                len += 1;
                if done {
                    break;
                }
            }
            assert!(len >= 1 && len <= world.cfg.max_steps);
        }
    }

    #[test]
    fn random_user_draw_covers_all_users() {
        let world = small_world(0.0);
        let n = 4000;
        let mut counts = vec![0usize; world.cfg.n_users];
        let mut env = Env::new(Arc::clone(&world), 11, 0);
        for _ in 0..n {
            env.reset(None).unwrap();
            counts[env.session.user_id] += 1;
        }
        let p = 1.0 / world.cfg.n_users as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - n as f64 * p).abs() < 4.0 * sigma);
        }
    }

    #[test]
    fn eps_zero_matches_oracle_argmax() {
        let world = small_world(0.0);
        let ds = gen_behavior_data(&world, 0.0, 5, 21, 8).unwrap();
        // Replay each trajectory and verify every action is the greedy one.
        for traj in &ds.trajectories {
            let mut history = VecDeque::new();
            // Recover the user from the state prefix (user factors block).
            let user = (0..world.cfg.n_users)
                .find(|&u| {
                    world
                        .user_factors
                        .row(u)
                        .iter()
                        .zip(&traj.steps[0].state)
                        .all(|(&a, &b)| (a - b as f64).abs() < 1e-5)
                })
                .expect("user identifiable");
            for step in &traj.steps {
                assert_eq!(step.action, oracle_action(&world, user, &history));
                history.push_back((step.action, step.reward as f64));
                while history.len() > world.cfg.k {
                    history.pop_front();
                }
            }
        }
    }

    #[test]
    fn eps_one_action_marginal_uniform() {
        let world = small_world(0.0);
        let ds = gen_behavior_data(&world, 1.0, 200, 13, 8).unwrap();
        let mut counts = vec![0usize; world.cfg.n_items];
        let mut total = 0usize;
        for t in &ds.trajectories {
            for s in &t.steps {
                counts[s.action as usize] += 1;
                total += 1;
            }
        }
        let p = 1.0 / world.cfg.n_items as f64;
        let sigma = (total as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!(
                (c as f64 - total as f64 * p).abs() < 3.5 * sigma,
                "counts {counts:?}"
            );
        }
    }

    #[test]
    fn behavior_data_byte_identical_across_runs() {
        let world = small_world(0.2);
        let a = gen_behavior_data(&world, 0.5, 10, 5, 8).unwrap();
        let b = gen_behavior_data(&world, 0.5, 10, 5, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.jsonl");
        let pb = dir.path().join("b.jsonl");
        crate::data::save_dataset(&a, &pa).unwrap();
        crate::data::save_dataset(&b, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn oracle_beats_random_with_noise_off() {
        let world = small_world(0.0);
        let greedy = gen_behavior_data(&world, 0.0, 40, 31, 8).unwrap();
        let random = gen_behavior_data(&world, 1.0, 40, 31, 8).unwrap();
        let mean_return = |ds: &Dataset| {
            ds.trajectories.iter().map(|t| t.rtg[0]).sum::<f64>() / ds.trajectories.len() as f64
        };
        assert!(mean_return(&greedy) > mean_return(&random));
    }

    #[test]
    fn parallel_envs_independent_of_order() {
        let world = small_world(0.4);
        let run = |reverse: bool| {
            let mut envs = parallel_eval_envs(&world, 8, 17);
            let mut order: Vec<usize> = (0..envs.len()).collect();
            if reverse {
                order.reverse();
            }
            let mut records = vec![Vec::new(); envs.len()];
            for &i in &order {
                let env = &mut envs[i];
                env.reset(None).unwrap();
                loop {
                    let (_, r, done) = env.step((i % 3) as u32).unwrap();
                    records[i].push(r);
                    if done {
                        break;
                    }
                }
            }
            records
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn mixed_dataset_tags_sources() {
        let world = small_world(0.1);
        let ds = gen_mixed_dataset(&world, &[(0.1, 3), (0.8, 3)], 7, 8).unwrap();
        assert_eq!(ds.trajectories.len(), 6);
        assert!(ds.trajectories.iter().any(|t| t.source == "oracle-eps0.10"));
        assert!(ds.trajectories.iter().any(|t| t.source == "oracle-eps0.80"));
    }
}
