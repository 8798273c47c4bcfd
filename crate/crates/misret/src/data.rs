//! Trajectories, returns-to-go, context windows, the on-disk dataset
//! format, and batch sampling.
//!
//! Numeric fields are stored as `f32` (matching the file format, so a
//! save/load round trip is bitwise lossless); all derived quantities are
//! computed in `f64`.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One interaction: observed state, recommended item, feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: Vec<f32>,
    pub action: u32,
    pub reward: f32,
}

/// One episode with derived returns-to-go.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    /// Behavior-policy label, e.g. "oracle-eps0.10".
    pub source: String,
    pub steps: Vec<Step>,
    /// rtg[t] = sum_{k>=t} gamma^(k-t) reward[k]; recomputed on load.
    pub rtg: Vec<f64>,
}

impl Trajectory {
    pub fn new(id: u64, source: impl Into<String>, steps: Vec<Step>, gamma: f64) -> Result<Self> {
        let rewards: Vec<f64> = steps.iter().map(|s| s.reward as f64).collect();
        let rtg = compute_returns_to_go(&rewards, gamma)?;
        Ok(Self {
            id,
            source: source.into(),
            steps,
            rtg,
        })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// The last `T` steps of a trajectory ending at some query time, in
/// (s, R, a) interleaved token order, optionally left-padded for batching.
/// Padded slots carry no data; they are masked out of attention and losses.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextWindow {
    pub steps: Vec<Step>,
    pub rtg: Vec<f64>,
    pub pad_left: usize,
}

impl ContextWindow {
    pub fn real_len(&self) -> usize {
        self.steps.len()
    }

    /// Window length T including pad slots.
    pub fn total_len(&self) -> usize {
        self.pad_left + self.steps.len()
    }

    /// Linearized token count: 3 per slot (s, R, a).
    pub fn token_count(&self) -> usize {
        3 * self.total_len()
    }
}

/// Offline dataset with return discretization metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    /// B+1 strictly increasing edges defining B return bins.
    pub return_bins: Vec<f64>,
    pub catalog_size: usize,
    pub state_dim: usize,
    pub gamma: f64,
}

impl Dataset {
    /// Assemble a dataset, deriving uniform bin edges over the observed
    /// returns-to-go range.
    pub fn with_uniform_bins(
        trajectories: Vec<Trajectory>,
        n_bins: usize,
        catalog_size: usize,
        state_dim: usize,
        gamma: f64,
    ) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::Config("n_bins must be >= 1".into()));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in &trajectories {
            for &r in &t.rtg {
                lo = lo.min(r);
                hi = hi.max(r);
            }
        }
        if !lo.is_finite() {
            // Empty dataset: keep a valid placeholder range.
            lo = 0.0;
            hi = 1.0;
        }
        if hi - lo < 1e-9 {
            lo -= 0.5;
            hi += 0.5;
        }
        let width = (hi - lo) / n_bins as f64;
        let return_bins = (0..=n_bins).map(|i| lo + width * i as f64).collect();
        let ds = Self {
            trajectories,
            return_bins,
            catalog_size,
            state_dim,
            gamma,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_bins(&self) -> usize {
        self.return_bins.len() - 1
    }

    pub fn bin_min(&self) -> f64 {
        *self.return_bins.first().expect("bins non-empty")
    }

    pub fn bin_max(&self) -> f64 {
        *self.return_bins.last().expect("bins non-empty")
    }

    /// Bin index of a return value; out-of-range values clamp to the
    /// boundary bins.
    pub fn bin_index(&self, value: f64) -> usize {
        let b = self.n_bins();
        match self
            .return_bins
            .binary_search_by(|e| e.partial_cmp(&value).expect("finite"))
        {
            Ok(i) => i.min(b - 1),
            Err(0) => 0,
            Err(i) => (i - 1).min(b - 1),
        }
    }

    pub fn bin_center(&self, idx: usize) -> f64 {
        0.5 * (self.return_bins[idx] + self.return_bins[idx + 1])
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        (0..self.n_bins()).map(|i| self.bin_center(i)).collect()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.return_bins.len() < 2 {
            return Err(Error::Config("need at least one return bin".into()));
        }
        if !self.return_bins.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("bin edges must be strictly increasing".into()));
        }
        let (lo, hi) = (self.bin_min(), self.bin_max());
        for (i, t) in self.trajectories.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Parse {
                    record: i + 1,
                    message: "empty trajectory".into(),
                });
            }
            for s in &t.steps {
                if s.state.len() != self.state_dim {
                    return Err(Error::Parse {
                        record: i + 1,
                        message: format!(
                            "state dim {} != dataset state_dim {}",
                            s.state.len(),
                            self.state_dim
                        ),
                    });
                }
                if (s.action as usize) >= self.catalog_size {
                    return Err(Error::Parse {
                        record: i + 1,
                        message: format!(
                            "action {} out of catalog (size {})",
                            s.action, self.catalog_size
                        ),
                    });
                }
                if !s.reward.is_finite() || s.state.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Parse {
                        record: i + 1,
                        message: "non-finite state or reward".into(),
                    });
                }
            }
            for &r in &t.rtg {
                if r < lo - 1e-9 || r > hi + 1e-9 {
                    return Err(Error::Parse {
                        record: i + 1,
                        message: format!("rtg {r} outside bin range [{lo}, {hi}]"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// rtg[t] = sum_{k>=t} gamma^(k-t) * rewards[k].
pub fn compute_returns_to_go(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "gamma {gamma} outside [0, 1]"
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite {
            context: "rewards".into(),
        });
    }
    let mut rtg = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        rtg[t] = acc;
    }
    Ok(rtg)
}

/// Exact window of the last `t_len` steps ending at step `t` (no padding).
pub fn make_window(traj: &Trajectory, t: usize, t_len: usize) -> Result<ContextWindow> {
    if t >= traj.len() {
        return Err(Error::InvalidArgument(format!(
            "end index {t} outside trajectory of length {}",
            traj.len()
        )));
    }
    if t_len == 0 || t_len > t + 1 {
        return Err(Error::WindowExceedsHistory {
            requested: t_len,
            available: t + 1,
        });
    }
    let start = t + 1 - t_len;
    Ok(ContextWindow {
        steps: traj.steps[start..=t].to_vec(),
        rtg: traj.rtg[start..=t].to_vec(),
        pad_left: 0,
    })
}

/// Draw a training batch: the (trajectory, end-index) pair is uniform over
/// all steps in the dataset, and the segment length is uniform over
/// 1..=min(end+1, T) so the return heads see every history length the
/// inference-time search will query. Windows shorter than `T` are
/// left-padded. Deterministic for a fixed (seed, stream).
pub fn sample_batch_stream(
    ds: &Dataset,
    batch: usize,
    t_len: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<ContextWindow>> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be >= 1".into()));
    }
    if t_len == 0 {
        return Err(Error::InvalidArgument("window length must be >= 1".into()));
    }
    let total = ds.total_steps();
    if total == 0 {
        return Err(Error::EmptyTrajectory);
    }
    let mut rng = rng_for(seed, Stream::BatchSampler(stream));
    let mut cumulative = Vec::with_capacity(ds.trajectories.len());
    let mut acc = 0usize;
    for t in &ds.trajectories {
        acc += t.len();
        cumulative.push(acc);
    }
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let flat = rng.random_range(0..total);
        let ti = cumulative.partition_point(|&c| c <= flat);
        let before = if ti == 0 { 0 } else { cumulative[ti - 1] };
        let end = flat - before;
        let max_len = t_len.min(end + 1);
        let len = rng.random_range(1..=max_len);
        let mut w = make_window(&ds.trajectories[ti], end, len)?;
        w.pad_left = t_len - len;
        out.push(w);
    }
    Ok(out)
}

pub fn sample_batch(ds: &Dataset, batch: usize, t_len: usize, seed: u64) -> Result<Vec<ContextWindow>> {
    sample_batch_stream(ds, batch, t_len, seed, 0)
}

/// Result of re-targeting the newest return token for conditioning.
#[derive(Debug, Clone)]
pub struct Relabeled {
    pub window: ContextWindow,
    /// Carried target for the next step when an observed reward was given.
    pub next_target: Option<f64>,
    /// True when the requested target was clamped to the bin range.
    pub clamped: bool,
}

/// Set the newest return token to `target_return` (clamped to the bin
/// range); when `observed_reward` is given, also report the decremented
/// target to carry into the next step.
pub fn relabel_rtg(
    window: &ContextWindow,
    target_return: f64,
    observed_reward: Option<f64>,
    bin_range: (f64, f64),
) -> Relabeled {
    let (lo, hi) = bin_range;
    let clamped_target = target_return.clamp(lo, hi);
    let mut window = window.clone();
    if let Some(last) = window.rtg.last_mut() {
        *last = clamped_target;
    }
    Relabeled {
        window,
        next_target: observed_reward.map(|r| clamped_target - r),
        clamped: clamped_target != target_return,
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderRec {
    version: u32,
    catalog_size: usize,
    state_dim: usize,
    gamma: f64,
    return_bins: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TrajRec {
    id: u64,
    source: String,
    states: Vec<Vec<f32>>,
    actions: Vec<u32>,
    rewards: Vec<f32>,
}

/// Write a dataset as JSON lines: a header record followed by one record
/// per trajectory. Returns-to-go are derived data and are not stored.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = HeaderRec {
        version: DATASET_FORMAT_VERSION,
        catalog_size: ds.catalog_size,
        state_dim: ds.state_dim,
        gamma: ds.gamma,
        return_bins: ds.return_bins.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for t in &ds.trajectories {
        let rec = TrajRec {
            id: t.id,
            source: t.source.clone(),
            states: t.steps.iter().map(|s| s.state.clone()).collect(),
            actions: t.steps.iter().map(|s| s.action).collect(),
            rewards: t.steps.iter().map(|s| s.reward).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or_else(|| Error::Parse {
        record: 0,
        message: "missing header line".into(),
    })??;
    let header: HeaderRec = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        record: 0,
        message: e.to_string(),
    })?;
    if header.version != DATASET_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let mut trajectories = Vec::new();
    for (i, line) in lines.enumerate() {
        let record = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajRec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            record,
            message: e.to_string(),
        })?;
        if rec.states.len() != rec.actions.len() || rec.states.len() != rec.rewards.len() {
            return Err(Error::Parse {
                record,
                message: format!(
                    "field lengths disagree: {} states, {} actions, {} rewards",
                    rec.states.len(),
                    rec.actions.len(),
                    rec.rewards.len()
                ),
            });
        }
        let steps: Vec<Step> = rec
            .states
            .into_iter()
            .zip(rec.actions)
            .zip(rec.rewards)
            .map(|((state, action), reward)| Step {
                state,
                action,
                reward,
            })
            .collect();
        let traj = Trajectory::new(rec.id, rec.source, steps, header.gamma).map_err(|e| {
            Error::Parse {
                record,
                message: e.to_string(),
            }
        })?;
        trajectories.push(traj);
    }
    let ds = Dataset {
        trajectories,
        return_bins: header.return_bins,
        catalog_size: header.catalog_size,
        state_dim: header.state_dim,
        gamma: header.gamma,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_traj(rewards: &[f32]) -> Trajectory {
        let steps = rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| Step {
                state: vec![i as f32, 1.0],
                action: (i % 3) as u32,
                reward: r,
            })
            .collect();
        Trajectory::new(0, "test", steps, 1.0).unwrap()
    }

    fn toy_dataset() -> Dataset {
        let t0 = toy_traj(&[1.0, 1.0, 1.0]);
        let t1 = toy_traj(&[0.0, 0.5, 0.0]);
        Dataset::with_uniform_bins(vec![t0, t1], 8, 3, 2, 1.0).unwrap()
    }

    #[test]
    fn rtg_undiscounted_sum() {
        assert_eq!(
            compute_returns_to_go(&[1.0, 1.0, 1.0], 1.0).unwrap(),
            vec![3.0, 2.0, 1.0]
        );
    }

    #[test]
    fn rtg_hand_summed() {
        assert_eq!(
            compute_returns_to_go(&[0.0, 0.5, 0.0], 1.0).unwrap(),
            vec![0.5, 0.5, 0.0]
        );
    }

    #[test]
    fn rtg_single_step_discounted() {
        assert_eq!(compute_returns_to_go(&[2.0], 0.9).unwrap(), vec![2.0]);
    }

    #[test]
    fn rtg_rejects_empty_and_nonfinite() {
        assert!(matches!(
            compute_returns_to_go(&[], 1.0),
            Err(Error::EmptyTrajectory)
        ));
        assert!(matches!(
            compute_returns_to_go(&[1.0, f64::NAN], 1.0),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn window_suffix_slice() {
        let t = toy_traj(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let w = make_window(&t, 4, 2).unwrap();
        assert_eq!(w.steps.len(), 2);
        assert_eq!(w.steps[0].reward, 3.0);
        assert_eq!(w.steps[1].reward, 4.0);
        assert_eq!(w.rtg, vec![7.0, 4.0]);
        assert_eq!(w.token_count(), 6);
    }

    #[test]
    fn window_single_step() {
        let t = toy_traj(&[0.0, 1.0, 2.0]);
        let w = make_window(&t, 0, 1).unwrap();
        assert_eq!(w.steps.len(), 1);
        assert_eq!(w.rtg, vec![3.0]);
    }

    #[test]
    fn window_exceeds_history_errors() {
        let t = toy_traj(&[0.0, 1.0, 2.0]);
        assert!(matches!(
            make_window(&t, 2, 5),
            Err(Error::WindowExceedsHistory { .. })
        ));
    }

    #[test]
    fn dataset_roundtrip_is_lossless() {
        let ds = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
        // A second round trip is bytewise identical.
        let path2 = dir.path().join("ds2.jsonl");
        save_dataset(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let ds = Dataset::with_uniform_bins(vec![], 4, 3, 2, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert!(loaded.trajectories.is_empty());
    }

    #[test]
    fn truncated_record_names_index() {
        let ds = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        save_dataset(&ds, &path).unwrap();
        let mut content = std::fs::read_to_string(&path).unwrap();
        let keep = content.lines().next().unwrap().len() + 1 + 20;
        content.truncate(keep);
        std::fs::write(&path, content).unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { record, .. }) => assert_eq!(record, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn sample_batch_deterministic_for_seed() {
        let ds = toy_dataset();
        let a = sample_batch(&ds, 16, 3, 7).unwrap();
        let b = sample_batch(&ds, 16, 3, 7).unwrap();
        assert_eq!(a, b);
        let c = sample_batch(&ds, 16, 3, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sample_batch_t1_single_step_windows() {
        let ds = toy_dataset();
        for w in sample_batch(&ds, 32, 1, 3).unwrap() {
            assert_eq!(w.real_len(), 1);
            assert_eq!(w.pad_left, 0);
        }
    }

    #[test]
    fn sample_batch_end_index_uniform() {
        let t = toy_traj(&[1.0, 2.0, 3.0]);
        let ds = Dataset::with_uniform_bins(vec![t], 4, 3, 2, 1.0).unwrap();
        let n = 1000;
        let batch = sample_batch(&ds, n, 1, 42).unwrap();
        let mut counts = [0usize; 3];
        for w in &batch {
            // With T=1 the window is the end step itself; reward identifies it.
            let r = w.steps[0].reward as usize - 1;
            counts[r] += 1;
        }
        let p = 1.0 / 3.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!(
                (c as f64 - n as f64 * p).abs() < 3.0 * sigma,
                "counts {counts:?} not uniform"
            );
        }
    }

    #[test]
    fn sample_batch_pads_short_histories() {
        let ds = toy_dataset();
        let batch = sample_batch(&ds, 64, 3, 5).unwrap();
        for w in &batch {
            assert_eq!(w.total_len(), 3);
            assert_eq!(w.token_count(), 9);
        }
        assert!(batch.iter().any(|w| w.pad_left > 0));
    }

    #[test]
    fn sample_batch_rejects_zero() {
        let ds = toy_dataset();
        assert!(sample_batch(&ds, 0, 3, 7).is_err());
    }

    #[test]
    fn relabel_decrements_carried_target() {
        let ds = toy_dataset();
        let w = make_window(&ds.trajectories[0], 2, 2).unwrap();
        let out = relabel_rtg(&w, 1.5, Some(0.5), (ds.bin_min(), ds.bin_max()));
        assert_eq!(out.next_target, Some(1.0));
        assert_eq!(*out.window.rtg.last().unwrap(), 1.5);
        assert!(!out.clamped);
    }

    #[test]
    fn relabel_without_observation_only_replaces_last() {
        let ds = toy_dataset();
        let w = make_window(&ds.trajectories[0], 2, 2).unwrap();
        let out = relabel_rtg(&w, 1.5, None, (ds.bin_min(), ds.bin_max()));
        assert_eq!(out.next_target, None);
        assert_eq!(out.window.rtg[0], w.rtg[0]);
        assert_eq!(*out.window.rtg.last().unwrap(), 1.5);
    }

    #[test]
    fn relabel_clamps_out_of_range() {
        let ds = toy_dataset();
        let w = make_window(&ds.trajectories[0], 2, 2).unwrap();
        let out = relabel_rtg(&w, 99.0, None, (ds.bin_min(), ds.bin_max()));
        assert!(out.clamped);
        assert_eq!(*out.window.rtg.last().unwrap(), ds.bin_max());
    }

    #[test]
    fn bin_index_clamps_and_centers() {
        let ds = toy_dataset();
        assert_eq!(ds.bin_index(ds.bin_min() - 10.0), 0);
        assert_eq!(ds.bin_index(ds.bin_max() + 10.0), ds.n_bins() - 1);
        let c = ds.bin_center(0);
        assert!(c > ds.bin_min() && c < ds.bin_max());
    }

    proptest! {
        #[test]
        fn rtg_recursion_holds(
            rewards in proptest::collection::vec(-5.0f64..5.0, 1..40),
            gamma in 0.0f64..=1.0,
        ) {
            let rtg = compute_returns_to_go(&rewards, gamma).unwrap();
            prop_assert_eq!(rtg.len(), rewards.len());
            for t in 0..rewards.len() - 1 {
                let lhs = rtg[t] - gamma * rtg[t + 1];
                prop_assert!((lhs - rewards[t]).abs() < 1e-9);
            }
            prop_assert!((rtg[rewards.len() - 1] - rewards[rewards.len() - 1]).abs() < 1e-12);
        }

        #[test]
        fn window_linearization_is_3t(
            len in 1usize..20,
            t_len in 1usize..20,
        ) {
            let rewards: Vec<f32> = (0..len).map(|i| i as f32 * 0.1).collect();
            let t = toy_traj(&rewards);
            let end = len - 1;
            if t_len <= end + 1 {
                let w = make_window(&t, end, t_len).unwrap();
                prop_assert_eq!(w.token_count(), 3 * t_len);
                prop_assert_eq!(w.real_len(), t_len);
            } else {
                prop_assert!(make_window(&t, end, t_len).is_err());
            }
        }

        #[test]
        fn serialization_roundtrip(
            n_traj in 1usize..5,
            len in 1usize..10,
        ) {
            let trajs: Vec<Trajectory> = (0..n_traj)
                .map(|i| {
                    let rewards: Vec<f32> = (0..len).map(|k| ((i + k) % 7) as f32 * 0.25).collect();
                    let mut t = toy_traj(&rewards);
                    t.id = i as u64;
                    t
                })
                .collect();
            let ds = Dataset::with_uniform_bins(trajs, 8, 3, 2, 1.0).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ds.jsonl");
            save_dataset(&ds, &path).unwrap();
            let loaded = load_dataset(&path).unwrap();
            prop_assert_eq!(ds, loaded);
        }
    }
}
