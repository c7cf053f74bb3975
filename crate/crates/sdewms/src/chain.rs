//! Exact simulation and interrogation of the driving continuous-time Markov
//! chain.
//!
//! The chain lives on a finite state space `{0, .., m0-1}` with generator `Q`:
//! off-diagonal entries are jump rates, each row sums to zero, and
//! `q = max(-q_ii)` bounds the total jump intensity. Paths are simulated
//! exactly (exponential holding times via inverse CDF, embedded-chain jump
//! targets) and stored as jump times plus visited states, so any quantity the
//! schemes need (state at a time, jump counts per step, first jump time,
//! occupation times) is read off the exact trajectory.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

/// Absolute tolerance on generator row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("generator must be square: row {row} has {len} entries, expected {expected}")]
    NotSquare {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("generator must have at least one state")]
    Empty,
    #[error("generator entry ({row},{col}) is not finite")]
    NotFinite { row: usize, col: usize },
    #[error("negative off-diagonal rate {value} at ({row},{col})")]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    #[error("generator row {row} sums to {residual:e}, expected 0")]
    RowSumNonZero { row: usize, residual: f64 },
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("invalid interval ({s}, {t}): need 0 <= s < t <= {horizon}")]
    InvalidInterval { s: f64, t: f64, horizon: f64 },
    #[error("step h={h} violates h < 1/(2q) = {limit} for q = {q}")]
    StepTooLarge { h: f64, q: f64, limit: f64 },
    #[error("state {state} outside the {count}-state space")]
    StateOutOfRange { state: usize, count: usize },
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("invalid chain path: {0}")]
    InvalidPath(String),
}

/// Validated generator matrix of a continuous-time Markov chain.
#[derive(Debug, Clone, Serialize)]
pub struct GeneratorMatrix {
    rates: Vec<Vec<f64>>,
    q_max: f64,
}

impl GeneratorMatrix {
    /// Validate a row-major rate matrix: square, finite, non-negative
    /// off-diagonals, zero row sums (within [`ROW_SUM_TOLERANCE`]).
    pub fn validate(rates: Vec<Vec<f64>>) -> Result<Self, ChainError> {
        let m0 = rates.len();
        if m0 == 0 {
            return Err(ChainError::Empty);
        }
        for (i, row) in rates.iter().enumerate() {
            if row.len() != m0 {
                return Err(ChainError::NotSquare {
                    row: i,
                    len: row.len(),
                    expected: m0,
                });
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(ChainError::NotFinite { row: i, col: j });
                }
                if i != j && v < 0.0 {
                    return Err(ChainError::NegativeOffDiagonal {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
            let residual: f64 = row.iter().sum();
            if residual.abs() > ROW_SUM_TOLERANCE {
                return Err(ChainError::RowSumNonZero { row: i, residual });
            }
        }
        let q_max = rates
            .iter()
            .enumerate()
            .map(|(i, row)| -row[i])
            .fold(0.0_f64, f64::max);
        Ok(GeneratorMatrix { rates, q_max })
    }

    pub fn num_states(&self) -> usize {
        self.rates.len()
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.rates[from][to]
    }

    /// `q = max(-q_ii)`, the intensity bound entering the step constraint
    /// `h < 1/(2q)`.
    pub fn q_max(&self) -> f64 {
        self.q_max
    }

    pub fn rates(&self) -> &[Vec<f64>] {
        &self.rates
    }

    /// Check the step constraint `h < 1/(2q)`; trivially satisfied when the
    /// generator is zero.
    pub fn check_step(&self, h: f64) -> Result<(), ChainError> {
        if self.q_max > 0.0 {
            let limit = 1.0 / (2.0 * self.q_max);
            if !h.is_finite() || h <= 0.0 || h >= limit {
                return Err(ChainError::StepTooLarge {
                    h,
                    q: self.q_max,
                    limit,
                });
            }
        } else if h <= 0.0 {
            return Err(ChainError::StepTooLarge {
                h,
                q: self.q_max,
                limit: f64::INFINITY,
            });
        }
        Ok(())
    }
}

/// One exact trajectory of the chain on `[0, T]`: strictly increasing jump
/// times in `(0, T)` and the state entered at each jump.
///
/// Paths are right-continuous: at a jump instant the post-jump state is in
/// force.
#[derive(Debug, Clone, Serialize)]
pub struct ChainPath {
    horizon: f64,
    initial_state: usize,
    jump_times: Vec<f64>,
    post_jump_states: Vec<usize>,
}

impl ChainPath {
    /// Build a path from raw parts, enforcing the structural invariants
    /// (ordering, open interval, no self-jumps).
    pub fn new(
        horizon: f64,
        initial_state: usize,
        jump_times: Vec<f64>,
        post_jump_states: Vec<usize>,
    ) -> Result<Self, ChainError> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(ChainError::BadHorizon(horizon));
        }
        if jump_times.len() != post_jump_states.len() {
            return Err(ChainError::InvalidPath(format!(
                "{} jump times vs {} states",
                jump_times.len(),
                post_jump_states.len()
            )));
        }
        let mut prev_t = 0.0;
        let mut prev_state = initial_state;
        for (k, (&t, &s)) in jump_times.iter().zip(&post_jump_states).enumerate() {
            if !t.is_finite() || t <= prev_t || t >= horizon {
                return Err(ChainError::InvalidPath(format!(
                    "jump time {t} at index {k} not strictly inside ({prev_t}, {horizon})"
                )));
            }
            if s == prev_state {
                return Err(ChainError::InvalidPath(format!(
                    "self-jump to state {s} at index {k}"
                )));
            }
            prev_t = t;
            prev_state = s;
        }
        Ok(ChainPath {
            horizon,
            initial_state,
            jump_times,
            post_jump_states,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn post_jump_states(&self) -> &[usize] {
        &self.post_jump_states
    }

    pub fn num_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// State in force at time `t` (right-continuous: at a jump instant the
    /// post-jump state is returned).
    pub fn state_at(&self, t: f64) -> Result<usize, ChainError> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(ChainError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        // Number of jump times <= t.
        let idx = self.jump_times.partition_point(|&tau| tau <= t);
        Ok(if idx == 0 {
            self.initial_state
        } else {
            self.post_jump_states[idx - 1]
        })
    }

    /// Jump count over the open interval `(s, t)` and the first jump time in
    /// it, if any.
    pub fn interval_jump_info(&self, s: f64, t: f64) -> Result<(usize, Option<f64>), ChainError> {
        if !s.is_finite() || !t.is_finite() || s < 0.0 || s >= t || t > self.horizon {
            return Err(ChainError::InvalidInterval {
                s,
                t,
                horizon: self.horizon,
            });
        }
        let lo = self.jump_times.partition_point(|&tau| tau <= s);
        let hi = self.jump_times.partition_point(|&tau| tau < t);
        let count = hi - lo;
        let first = if count > 0 {
            Some(self.jump_times[lo])
        } else {
            None
        };
        Ok((count, first))
    }

    /// Time spent in each of `num_states` states over `[0, t]`.
    pub fn occupation_times(&self, num_states: usize, t: f64) -> Result<Vec<f64>, ChainError> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(ChainError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        let mut occ = vec![0.0; num_states];
        let mut state = self.initial_state;
        let mut last = 0.0;
        for (&tau, &next) in self.jump_times.iter().zip(&self.post_jump_states) {
            if tau >= t {
                break;
            }
            if state >= num_states {
                return Err(ChainError::StateOutOfRange {
                    state,
                    count: num_states,
                });
            }
            occ[state] += tau - last;
            last = tau;
            state = next;
        }
        if state >= num_states {
            return Err(ChainError::StateOutOfRange {
                state,
                count: num_states,
            });
        }
        occ[state] += t - last;
        Ok(occ)
    }
}

/// Exponential holding time via inverse CDF, `-ln(U)/rate` with `U` drawn
/// from `(0, 1]` so `ln` never sees zero.
fn holding_time<R: Rng>(rate: f64, rng: &mut R) -> f64 {
    let u: f64 = 1.0 - rng.random::<f64>();
    -u.ln() / rate
}

/// Pick the jump target from state `from`: state `j != from` with probability
/// `q_fj / (-q_ff)`.
fn jump_target<R: Rng>(gen: &GeneratorMatrix, from: usize, rng: &mut R) -> usize {
    let total = -gen.rate(from, from);
    let draw: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = from;
    for j in 0..gen.num_states() {
        if j == from {
            continue;
        }
        let r = gen.rate(from, j);
        if r <= 0.0 {
            continue;
        }
        acc += r;
        last = j;
        if draw < acc {
            return j;
        }
    }
    // Rounding fell through the cumulative scan; take the last admissible
    // target.
    last
}

/// Sample an exact chain trajectory on `[0, horizon]`.
///
/// Holding time in state `i` is Exponential(-q_ii); absorbing states
/// (`q_ii = 0`) simply stop jumping.
pub fn sample_chain_path<R: Rng>(
    gen: &GeneratorMatrix,
    initial_state: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<ChainPath, ChainError> {
    if initial_state >= gen.num_states() {
        return Err(ChainError::StateOutOfRange {
            state: initial_state,
            count: gen.num_states(),
        });
    }
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(ChainError::BadHorizon(horizon));
    }
    let mut jump_times = Vec::new();
    let mut post_jump_states = Vec::new();
    let mut t = 0.0;
    let mut state = initial_state;
    loop {
        let rate = -gen.rate(state, state);
        if rate <= 0.0 {
            break; // absorbing
        }
        t += holding_time(rate, rng);
        if t >= horizon {
            break;
        }
        state = jump_target(gen, state, rng);
        jump_times.push(t);
        post_jump_states.push(state);
    }
    ChainPath::new(horizon, initial_state, jump_times, post_jump_states)
}

/// Number of jumps within `(0, h)` starting from `state`, without building a
/// path.
fn single_step_jump_count<R: Rng>(
    gen: &GeneratorMatrix,
    mut state: usize,
    h: f64,
    rng: &mut R,
) -> u64 {
    let mut t = 0.0;
    let mut count = 0;
    loop {
        let rate = -gen.rate(state, state);
        if rate <= 0.0 {
            return count;
        }
        t += holding_time(rate, rng);
        if t >= h {
            return count;
        }
        state = jump_target(gen, state, rng);
        count += 1;
    }
}

/// Empirical tail probabilities and moments of the per-step jump count, with
/// standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct JumpStatistics {
    pub step: f64,
    pub trials: u64,
    pub p_ge1: f64,
    pub p_ge1_se: f64,
    pub p_ge2: f64,
    pub p_ge2_se: f64,
    pub mean: f64,
    pub mean_se: f64,
    pub mean_square: f64,
    pub mean_square_se: f64,
}

impl JumpStatistics {
    /// Binomial standard error for an empirical probability.
    fn binom_se(p: f64, trials: u64) -> f64 {
        (p * (1.0 - p) / trials as f64).sqrt()
    }
}

/// Monte Carlo statistics of the jump count over a single step of length `h`,
/// with the initial state drawn uniformly from the state space.
///
/// Requires the step constraint `h < 1/(2q)` when the generator is non-zero.
pub fn jump_count_statistics<R: Rng>(
    gen: &GeneratorMatrix,
    h: f64,
    trials: u64,
    rng: &mut R,
) -> Result<JumpStatistics, ChainError> {
    gen.check_step(h)?;
    let m0 = gen.num_states();
    let mut ge1 = 0u64;
    let mut ge2 = 0u64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut sum_4 = 0.0;
    for _ in 0..trials {
        let start = rng.random_range(0..m0);
        let n = single_step_jump_count(gen, start, h, rng);
        if n >= 1 {
            ge1 += 1;
        }
        if n >= 2 {
            ge2 += 1;
        }
        let nf = n as f64;
        sum += nf;
        sum_sq += nf * nf;
        sum_4 += nf * nf * nf * nf;
    }
    let tf = trials as f64;
    let p_ge1 = ge1 as f64 / tf;
    let p_ge2 = ge2 as f64 / tf;
    let mean = sum / tf;
    let mean_square = sum_sq / tf;
    let var_n = (sum_sq / tf - mean * mean).max(0.0);
    let var_n2 = (sum_4 / tf - mean_square * mean_square).max(0.0);
    Ok(JumpStatistics {
        step: h,
        trials,
        p_ge1,
        p_ge1_se: JumpStatistics::binom_se(p_ge1, trials),
        p_ge2,
        p_ge2_se: JumpStatistics::binom_se(p_ge2, trials),
        mean,
        mean_se: (var_n / tf).sqrt(),
        mean_square,
        mean_square_se: (var_n2 / tf).sqrt(),
    })
}
