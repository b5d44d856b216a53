//! Continuous-time Markov chain sampling and queries.
//!
//! The chain is the game's common noise: its path decides which regime's
//! coefficients are in force. Paths are sampled exactly (exponential
//! holding times, embedded jump chain) rather than by grid thinning.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand_chacha::rand_core::RngCore;

use crate::error::{Error, Result};
use crate::rng;

/// One realization of the chain: jump times and visited regimes.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPath {
    pub initial_regime: usize,
    /// Strictly increasing jump times in `(0, T]`.
    pub jump_times: Vec<f64>,
    /// Regime entered at each jump; consecutive entries differ.
    pub post_jump_regimes: Vec<usize>,
    pub horizon: f64,
}

impl ChainPath {
    /// Path with no jumps.
    pub fn constant(initial_regime: usize, horizon: f64) -> Self {
        Self {
            initial_regime,
            jump_times: Vec::new(),
            post_jump_regimes: Vec::new(),
            horizon,
        }
    }

    pub fn jump_count(&self) -> usize {
        self.jump_times.len()
    }

    /// Regime in force at time `t`, cadlag: at a jump time the post-jump
    /// regime applies.
    pub fn regime_at(&self, t: f64) -> Result<usize> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::OutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        // partition_point gives the count of jump times <= t.
        let jumps_before = self.jump_times.partition_point(|&s| s <= t);
        if jumps_before == 0 {
            Ok(self.initial_regime)
        } else {
            Ok(self.post_jump_regimes[jumps_before - 1])
        }
    }

    /// Total time spent in each of `regime_count` regimes; sums to the
    /// horizon.
    pub fn occupation_times(&self, regime_count: usize) -> Vec<f64> {
        let mut occ = vec![0.0; regime_count];
        let mut current = self.initial_regime;
        let mut last_t = 0.0;
        for (idx, &t) in self.jump_times.iter().enumerate() {
            occ[current] += t - last_t;
            current = self.post_jump_regimes[idx];
            last_t = t;
        }
        occ[current] += self.horizon - last_t;
        occ
    }
}

/// Exact simulation of the chain path on `[0, T]`.
///
/// Holding time in state `i` is exponential with rate `-lambda_ii`; the
/// next state is `j != i` with probability `lambda_ij / (-lambda_ii)`.
/// States with zero exit rate are absorbing. Deterministic given the
/// stream.
pub fn sample_path<R: RngCore>(
    generator: &DMatrix<f64>,
    initial_regime: usize,
    horizon: f64,
    stream: &mut R,
) -> ChainPath {
    let k = generator.nrows();
    debug_assert!(initial_regime < k);
    debug_assert!(horizon > 0.0);

    let mut jump_times = Vec::new();
    let mut post_jump_regimes = Vec::new();
    let mut current = initial_regime;
    let mut t = 0.0;

    loop {
        let exit_rate = -generator[(current, current)];
        if exit_rate <= 0.0 {
            break; // absorbing
        }
        t += rng::exponential(stream, exit_rate);
        if t > horizon {
            break;
        }
        // Embedded jump chain: CDF scan over off-diagonal rates.
        let u = rng::uniform_open01(stream) * exit_rate;
        let mut acc = 0.0;
        let mut next = current;
        for j in 0..k {
            if j == current {
                continue;
            }
            acc += generator[(current, j)];
            if u <= acc {
                next = j;
                break;
            }
        }
        if next == current {
            // float-edge fallback: assign the last positive-rate state
            next = (0..k)
                .rev()
                .find(|&j| j != current && generator[(current, j)] > 0.0)
                .unwrap_or(current);
            if next == current {
                break;
            }
        }
        jump_times.push(t);
        post_jump_regimes.push(next);
        current = next;
    }

    ChainPath {
        initial_regime,
        jump_times,
        post_jump_regimes,
        horizon,
    }
}

/// Maximum-likelihood rate estimates from observed paths.
///
/// `rates[(i, j)] = (count of i -> j transitions) / (occupation time in i)`
/// with the diagonal set to the negative row sum. Rows for regimes that
/// were never occupied are marked undefined (`visited[i] == false`, NaN
/// entries).
#[derive(Debug, Clone)]
pub struct EmpiricalGenerator {
    pub rates: DMatrix<f64>,
    pub visited: Vec<bool>,
}

pub fn empirical_generator(paths: &[ChainPath], regime_count: usize) -> EmpiricalGenerator {
    let mut occupation = vec![0.0; regime_count];
    let mut transitions = DMatrix::<f64>::zeros(regime_count, regime_count);

    for path in paths {
        for (i, occ) in path.occupation_times(regime_count).iter().enumerate() {
            occupation[i] += occ;
        }
        let mut current = path.initial_regime;
        for &next in &path.post_jump_regimes {
            transitions[(current, next)] += 1.0;
            current = next;
        }
    }

    let mut rates = DMatrix::<f64>::zeros(regime_count, regime_count);
    let mut visited = vec![false; regime_count];
    for i in 0..regime_count {
        if occupation[i] > 0.0 {
            visited[i] = true;
            let mut row_sum = 0.0;
            for j in 0..regime_count {
                if i != j {
                    let rate = transitions[(i, j)] / occupation[i];
                    rates[(i, j)] = rate;
                    row_sum += rate;
                }
            }
            rates[(i, i)] = -row_sum;
        } else {
            for j in 0..regime_count {
                rates[(i, j)] = f64::NAN;
            }
        }
    }

    EmpiricalGenerator { rates, visited }
}
