//! The two-trajectory stitching toy: a deterministic 5-state chain MDP
//! whose offline dataset contains one good and one mediocre trajectory that
//! share a middle state. The optimal behavior from the mediocre start
//! (return 1.5) appears in neither trajectory; reaching it requires
//! composing the B-prefix with the A-continuation.

use crate::data::{Dataset, Step, Trajectory};
use crate::error::{Error, Result};

pub const TOY_STATE_DIM: usize = 5;
pub const TOY_N_ITEMS: usize = 2;

/// Named states, one-hot encoded in the order below.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyState {
    A0,
    B0,
    Mid,
    A1,
    B1,
}

impl ToyState {
    pub fn index(self) -> usize {
        match self {
            ToyState::A0 => 0,
            ToyState::B0 => 1,
            ToyState::Mid => 2,
            ToyState::A1 => 3,
            ToyState::B1 => 4,
        }
    }

    pub fn one_hot(self) -> Vec<f32> {
        let mut v = vec![0.0; TOY_STATE_DIM];
        v[self.index()] = 1.0;
        v
    }

    pub fn one_hot_f64(self) -> Vec<f64> {
        self.one_hot().iter().map(|&x| x as f64).collect()
    }
}

/// Deterministic chain env. Both start states funnel into Mid after one
/// step; at Mid, action 0 reaches A1 (reward 1) and action 1 reaches B1
/// (reward 0). Terminal after two steps.
pub struct ToyEnv {
    pub state: ToyState,
    pub done: bool,
}

impl ToyEnv {
    pub fn reset(start: ToyState) -> Result<Self> {
        match start {
            ToyState::A0 | ToyState::B0 => Ok(Self {
                state: start,
                done: false,
            }),
            _ => Err(Error::InvalidArgument(
                "toy episodes start at A0 or B0".into(),
            )),
        }
    }

    pub fn step(&mut self, action: u32) -> Result<(ToyState, f64, bool)> {
        if self.done {
            return Err(Error::SessionDone);
        }
        if action as usize >= TOY_N_ITEMS {
            return Err(Error::InvalidArgument(format!("toy action {action}")));
        }
        let (next, reward) = match self.state {
            ToyState::A0 => (ToyState::Mid, 0.0),
            ToyState::B0 => (ToyState::Mid, 0.5),
            ToyState::Mid => {
                if action == 0 {
                    (ToyState::A1, 1.0)
                } else {
                    (ToyState::B1, 0.0)
                }
            }
            ToyState::A1 | ToyState::B1 => unreachable!("terminal states"),
        };
        self.state = next;
        self.done = matches!(next, ToyState::A1 | ToyState::B1);
        Ok((next, reward, self.done))
    }
}

/// The fixed offline dataset:
///   A: A0 -(a=0, r=0)-> Mid -(a=0, r=1)-> A1     returns [1.0, 1.0]
///   B: B0 -(a=0, r=0.5)-> Mid -(a=1, r=0)-> B1   returns [0.5, 0.0]
/// Return bins are exact-value bins with centers {0, 0.5, 1}.
pub fn build_stitch_toy() -> Dataset {
    let traj_a = Trajectory::new(
        0,
        "toy-A",
        vec![
            Step {
                state: ToyState::A0.one_hot(),
                action: 0,
                reward: 0.0,
            },
            Step {
                state: ToyState::Mid.one_hot(),
                action: 0,
                reward: 1.0,
            },
        ],
        1.0,
    )
    .expect("trajectory A");
    let traj_b = Trajectory::new(
        1,
        "toy-B",
        vec![
            Step {
                state: ToyState::B0.one_hot(),
                action: 0,
                reward: 0.5,
            },
            Step {
                state: ToyState::Mid.one_hot(),
                action: 1,
                reward: 0.0,
            },
        ],
        1.0,
    )
    .expect("trajectory B");
    Dataset {
        trajectories: vec![traj_a, traj_b],
        return_bins: vec![-0.25, 0.25, 0.75, 1.25],
        catalog_size: TOY_N_ITEMS,
        state_dim: TOY_STATE_DIM,
        gamma: 1.0,
    }
}

/// Enumeration oracle: the maximum return-to-go at the end of any dataset
/// segment whose state suffix equals `suffix_states` (state vectors,
/// oldest first). Independent of the learned estimator.
pub fn enumerate_max_rtg(ds: &Dataset, suffix_states: &[Vec<f32>]) -> Option<f64> {
    let t_len = suffix_states.len();
    let mut best: Option<f64> = None;
    for traj in &ds.trajectories {
        for end in 0..traj.len() {
            if t_len > end + 1 {
                continue;
            }
            let start = end + 1 - t_len;
            let matches = (0..t_len).all(|i| traj.steps[start + i].state == suffix_states[i]);
            if matches {
                let r = traj.rtg[end];
                best = Some(best.map_or(r, |b: f64| b.max(r)));
            }
        }
    }
    best
}

/// Best achievable episode return from a start state, by exhaustive search
/// over the deterministic env.
pub fn toy_optimal_return(start: ToyState) -> f64 {
    fn best_from(state: ToyState) -> f64 {
        if matches!(state, ToyState::A1 | ToyState::B1) {
            return 0.0;
        }
        (0..TOY_N_ITEMS as u32)
            .map(|a| {
                let mut env = ToyEnv {
                    state,
                    done: false,
                };
                let (next, r, done) = env.step(a).expect("valid step");
                r + if done { 0.0 } else { best_from(next) }
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
    best_from(start)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_returns_match_construction() {
        let ds = build_stitch_toy();
        assert_eq!(ds.trajectories[0].rtg, vec![1.0, 1.0]);
        assert_eq!(ds.trajectories[1].rtg, vec![0.5, 0.0]);
        assert_eq!(ds.bin_centers(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn max_rtg_at_mid_with_t1_is_one() {
        let ds = build_stitch_toy();
        let got = enumerate_max_rtg(&ds, &[ToyState::Mid.one_hot()]).unwrap();
        assert_eq!(got, 1.0);
    }

    #[test]
    fn max_rtg_at_mid_with_b_prefix_is_zero() {
        let ds = build_stitch_toy();
        let got =
            enumerate_max_rtg(&ds, &[ToyState::B0.one_hot(), ToyState::Mid.one_hot()]).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn max_rtg_at_mid_with_a_prefix_is_one() {
        let ds = build_stitch_toy();
        let got =
            enumerate_max_rtg(&ds, &[ToyState::A0.one_hot(), ToyState::Mid.one_hot()]).unwrap();
        assert_eq!(got, 1.0);
    }

    #[test]
    fn stitched_optimum_from_b0_is_one_point_five() {
        assert_eq!(toy_optimal_return(ToyState::B0), 1.5);
        assert_eq!(toy_optimal_return(ToyState::A0), 1.0);
        // The stitched return exceeds every return present in the dataset.
        let ds = build_stitch_toy();
        let best_in_data = ds
            .trajectories
            .iter()
            .map(|t| t.rtg[0])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(toy_optimal_return(ToyState::B0) > best_in_data);
    }

    #[test]
    fn env_is_deterministic_and_terminal() {
        let mut env = ToyEnv::reset(ToyState::B0).unwrap();
        let (s1, r1, d1) = env.step(0).unwrap();
        assert_eq!((s1, r1, d1), (ToyState::Mid, 0.5, false));
        let (s2, r2, d2) = env.step(0).unwrap();
        assert_eq!((s2, r2, d2), (ToyState::A1, 1.0, true));
        assert!(env.step(0).is_err());
    }
}
