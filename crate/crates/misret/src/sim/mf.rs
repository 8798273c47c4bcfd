//! Matrix-factorization completion of a sparse user x item reward matrix:
//! SGD on observed entries with L2 regularization, predictions centered on
//! the global mean. Rows/columns with no observations predict the global
//! mean exactly.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

#[derive(Debug, Clone, Copy)]
pub struct MfParams {
    pub learning_rate: f64,
    pub regularization: f64,
}

impl Default for MfParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            regularization: 0.1,
        }
    }
}

#[derive(Debug)]
pub struct MfCompletion {
    pub predicted: Array2<f64>,
    pub global_mean: f64,
    /// True when there were no observations at all (all predictions zero).
    pub degenerate: bool,
}

/// Complete a sparse matrix from `(row, col, value)` observations.
pub fn mf_complete(
    observations: &[(usize, usize, f64)],
    n_rows: usize,
    n_cols: usize,
    rank: usize,
    epochs: usize,
    seed: u64,
    params: MfParams,
) -> Result<MfCompletion> {
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be >= 1".into()));
    }
    if observations.is_empty() {
        return Ok(MfCompletion {
            predicted: Array2::zeros((n_rows, n_cols)),
            global_mean: 0.0,
            degenerate: true,
        });
    }
    for &(r, c, v) in observations {
        if r >= n_rows || c >= n_cols {
            return Err(Error::InvalidArgument(format!(
                "observation ({r}, {c}) outside {n_rows} x {n_cols}"
            )));
        }
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "observations".into(),
            });
        }
    }

    let global_mean = observations.iter().map(|o| o.2).sum::<f64>() / observations.len() as f64;
    let mut rng = rng_for(seed, Stream::MfInit);
    let std = 0.1 / (rank as f64).sqrt();
    let mut row_f = Array2::from_shape_fn((n_rows, rank), |_| (rng.random::<f64>() - 0.5) * std);
    let mut col_f = Array2::from_shape_fn((n_cols, rank), |_| (rng.random::<f64>() - 0.5) * std);

    let mut order: Vec<usize> = (0..observations.len()).collect();
    for epoch in 0..epochs {
        // Geometric decay to 2% of the initial rate; constant-rate SGD
        // stalls in a limit cycle proportional to the step size.
        let lr = params.learning_rate * 0.02f64.powf(epoch as f64 / epochs.max(1) as f64);
        order.shuffle(&mut rng);
        for &oi in &order {
            let (r, c, v) = observations[oi];
            let pred = row_f.row(r).dot(&col_f.row(c));
            let err = v - pred;
            for k in 0..rank {
                let ru = row_f[(r, k)];
                let cv = col_f[(c, k)];
                row_f[(r, k)] += lr * (err * cv - params.regularization * ru);
                col_f[(c, k)] += lr * (err * ru - params.regularization * cv);
            }
        }
    }

    let mut predicted = row_f.dot(&col_f.t());

    // Rows/columns with no observations predict the global mean exactly.
    let mut row_seen = vec![false; n_rows];
    let mut col_seen = vec![false; n_cols];
    for &(r, c, _) in observations {
        row_seen[r] = true;
        col_seen[c] = true;
    }
    for (r, seen) in row_seen.iter().enumerate() {
        if !seen {
            predicted.row_mut(r).fill(global_mean);
        }
    }
    for (c, seen) in col_seen.iter().enumerate() {
        if !seen {
            predicted.column_mut(c).fill(global_mean);
        }
    }

    if predicted.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "mf predictions".into(),
        });
    }
    Ok(MfCompletion {
        predicted,
        global_mean,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    /// Synthetic low-rank matrix plus noise; the oracle for the held-out
    /// check is reconstruction from the true factors.
    fn synthetic(
        n: usize,
        m: usize,
        rank: usize,
        noise: f64,
        seed: u64,
    ) -> (Array2<f64>, Vec<(usize, usize, f64)>, Vec<(usize, usize, f64)>) {
        let mut rng = stream_rng(seed, 77);
        let dist = rand_distr::Normal::new(0.0, (rank as f64).powf(-0.25)).unwrap();
        let u = Array2::from_shape_fn((n, rank), |_| {
            rand_distr::Distribution::sample(&dist, &mut rng)
        });
        let v = Array2::from_shape_fn((m, rank), |_| {
            rand_distr::Distribution::sample(&dist, &mut rng)
        });
        let truth = u.dot(&v.t());
        let mut observed = Vec::new();
        let mut held_out = Vec::new();
        let noise_dist = rand_distr::Normal::new(0.0, noise.max(1e-12)).unwrap();
        for r in 0..n {
            for c in 0..m {
                let val = truth[(r, c)]
                    + if noise > 0.0 {
                        rand_distr::Distribution::sample(&noise_dist, &mut rng)
                    } else {
                        0.0
                    };
                if rng.random::<f64>() < 0.3 {
                    observed.push((r, c, val));
                } else {
                    held_out.push((r, c, truth[(r, c)]));
                }
            }
        }
        (truth, observed, held_out)
    }

    #[test]
    fn rank2_heldout_rmse_below_tenth() {
        let (_, observed, held_out) = synthetic(40, 30, 2, 0.05, 3);
        let params = MfParams {
            learning_rate: 0.05,
            regularization: 0.01,
        };
        let done = mf_complete(&observed, 40, 30, 2, 300, 5, params).unwrap();
        let mse: f64 = held_out
            .iter()
            .map(|&(r, c, truth)| {
                let d = done.predicted[(r, c)] - truth;
                d * d
            })
            .sum::<f64>()
            / held_out.len() as f64;
        assert!(mse.sqrt() < 0.1, "held-out rmse {}", mse.sqrt());
    }

    #[test]
    fn rank1_noiseless_fits_exactly() {
        let (truth, _, _) = synthetic(15, 12, 1, 0.0, 4);
        let mut observed = Vec::new();
        for r in 0..15 {
            for c in 0..12 {
                observed.push((r, c, truth[(r, c)]));
            }
        }
        // Exact interpolation of noiseless data wants no shrinkage.
        let params = MfParams {
            learning_rate: 0.1,
            regularization: 0.0,
        };
        let done = mf_complete(&observed, 15, 12, 1, 2000, 6, params).unwrap();
        let mse: f64 = observed
            .iter()
            .map(|&(r, c, v)| {
                let d = done.predicted[(r, c)] - v;
                d * d
            })
            .sum::<f64>()
            / observed.len() as f64;
        assert!(mse.sqrt() < 1e-3, "training rmse {}", mse.sqrt());
    }

    #[test]
    fn empty_observations_predict_zero_with_flag() {
        let done = mf_complete(&[], 4, 5, 2, 10, 1, MfParams::default()).unwrap();
        assert!(done.degenerate);
        assert!(done.predicted.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_rank_rejected() {
        assert!(mf_complete(&[(0, 0, 1.0)], 2, 2, 0, 10, 1, MfParams::default()).is_err());
    }

    #[test]
    fn unobserved_row_predicts_global_mean() {
        let observations = vec![(0, 0, 2.0), (0, 1, 2.0), (1, 0, 4.0), (1, 1, 4.0)];
        let done = mf_complete(&observations, 3, 2, 1, 200, 2, MfParams::default()).unwrap();
        for c in 0..2 {
            assert!((done.predicted[(2, c)] - done.global_mean).abs() < 1e-12);
        }
    }
}
