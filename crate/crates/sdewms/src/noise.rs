//! Brownian driving noise on nested grids.
//!
//! One fine grid per Monte Carlo sample is the single source of randomness
//! for every scheme at every coarse resolution: coarse increments are
//! differences of the stored cumulative path, off-grid values (chain jump
//! times) come from Brownian-bridge refinement against the nearest known
//! values and are cached so repeated queries, whether from the reference
//! solver or from any coarse scheme, agree exactly.
//!
//! Gaussian variates are drawn from `rand_distr::StandardNormal` (fixed-table
//! ziggurat); together with the pinned ChaCha streams this makes grids
//! bitwise reproducible for a given seed.

use std::collections::BTreeMap;
use std::ops::Bound::Excluded;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("coarse step count {coarse} does not divide fine step count {fine}")]
    GridMismatch { coarse: usize, fine: usize },
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("step index {k} outside 0..{count}")]
    StepOutOfRange { k: usize, count: usize },
    #[error("refinement ratio {ratio} does not divide the {available} fine steps per coarse step")]
    RatioMismatch { ratio: usize, available: usize },
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("grid needs at least one step and one dimension")]
    EmptyGrid,
}

/// An m-dimensional Brownian path sampled on a uniform fine grid, plus a
/// cache of bridge-refined values at off-grid times.
#[derive(Debug, Clone)]
pub struct BrownianGrid {
    dimension: usize,
    horizon: f64,
    n_fine: usize,
    fine_step: f64,
    /// `n_fine x m`, row-major by step.
    increments: Vec<f64>,
    /// `(n_fine + 1) x m` running path values, `cumulative[0] = 0`.
    cumulative: Vec<f64>,
    /// Off-grid time (as ordered f64 bits) -> sampled W value.
    bridge_cache: BTreeMap<u64, Vec<f64>>,
}

/// Generate a grid of `n_fine` i.i.d. N(0, horizon/n_fine) increments per
/// coordinate and their cumulative sums.
pub fn generate_brownian<R: Rng>(
    dimension: usize,
    horizon: f64,
    n_fine: usize,
    rng: &mut R,
) -> Result<BrownianGrid, NoiseError> {
    if dimension == 0 || n_fine == 0 {
        return Err(NoiseError::EmptyGrid);
    }
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(NoiseError::BadHorizon(horizon));
    }
    let fine_step = horizon / n_fine as f64;
    let scale = fine_step.sqrt();
    let mut increments = vec![0.0; n_fine * dimension];
    for v in increments.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = scale * z;
    }
    let mut cumulative = vec![0.0; (n_fine + 1) * dimension];
    for j in 0..n_fine {
        for l in 0..dimension {
            cumulative[(j + 1) * dimension + l] =
                cumulative[j * dimension + l] + increments[j * dimension + l];
        }
    }
    Ok(BrownianGrid {
        dimension,
        horizon,
        n_fine,
        fine_step,
        increments,
        cumulative,
        bridge_cache: BTreeMap::new(),
    })
}

impl BrownianGrid {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_fine(&self) -> usize {
        self.n_fine
    }

    pub fn fine_step(&self) -> f64 {
        self.fine_step
    }

    /// Fine increment over step `j`.
    pub fn increment(&self, j: usize) -> &[f64] {
        &self.increments[j * self.dimension..(j + 1) * self.dimension]
    }

    /// Stored path value at fine grid index `j` (time `j * fine_step`).
    pub fn value_at_index(&self, j: usize) -> &[f64] {
        &self.cumulative[j * self.dimension..(j + 1) * self.dimension]
    }

    pub fn bridge_cache_len(&self) -> usize {
        self.bridge_cache.len()
    }

    /// Zero every increment and path value, keeping the grid structure.
    /// Tests use this to drive schemes with the deterministic drift map.
    #[cfg(test)]
    pub(crate) fn zero_for_tests(&mut self) {
        self.increments.iter_mut().for_each(|v| *v = 0.0);
        self.cumulative.iter_mut().for_each(|v| *v = 0.0);
        self.bridge_cache.clear();
    }

    /// Increment over coarse step `k` of a `coarse_n`-step partition, taken
    /// as the difference of stored cumulative values so every resolution
    /// reads the same underlying path.
    pub fn coarse_increment(&self, coarse_n: usize, k: usize) -> Result<Vec<f64>, NoiseError> {
        let ratio = self.coarse_ratio(coarse_n)?;
        if k >= coarse_n {
            return Err(NoiseError::StepOutOfRange { k, count: coarse_n });
        }
        if ratio == 1 {
            return Ok(self.increment(k).to_vec());
        }
        let a = self.value_at_index(k * ratio);
        let b = self.value_at_index((k + 1) * ratio);
        Ok(b.iter().zip(a).map(|(x, y)| x - y).collect())
    }

    fn coarse_ratio(&self, coarse_n: usize) -> Result<usize, NoiseError> {
        if coarse_n == 0 || !self.n_fine.is_multiple_of(coarse_n) {
            return Err(NoiseError::GridMismatch {
                coarse: coarse_n,
                fine: self.n_fine,
            });
        }
        Ok(self.n_fine / coarse_n)
    }

    /// Path value at an arbitrary time in `[0, horizon]`.
    ///
    /// Fine grid points return the stored value. Off-grid times are sampled
    /// by Brownian bridge against the nearest known values (grid endpoints
    /// or previously cached samples in the same fine interval), cached, and
    /// returned identically on repeat queries. Bracketing against nearest
    /// known values keeps the joint law exact for any query order.
    pub fn value_at<R: Rng>(&mut self, t: f64, rng: &mut R) -> Result<Vec<f64>, NoiseError> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(NoiseError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        let near = (t / self.fine_step).round() as usize;
        if near <= self.n_fine && near as f64 * self.fine_step == t {
            return Ok(self.value_at_index(near).to_vec());
        }
        let key = t.to_bits();
        if let Some(v) = self.bridge_cache.get(&key) {
            return Ok(v.clone());
        }
        let j0 = ((t / self.fine_step).floor() as usize).min(self.n_fine - 1);
        let a = j0 as f64 * self.fine_step;
        let b = (j0 + 1) as f64 * self.fine_step;
        // Guard the 1-ulp cases where t sits on a grid point that the exact
        // comparison above missed.
        if t <= a {
            return Ok(self.value_at_index(j0).to_vec());
        }
        if t >= b {
            return Ok(self.value_at_index(j0 + 1).to_vec());
        }
        let left = self
            .bridge_cache
            .range((Excluded(a.to_bits()), Excluded(key)))
            .next_back()
            .map(|(k, v)| (f64::from_bits(*k), v.clone()))
            .unwrap_or_else(|| (a, self.value_at_index(j0).to_vec()));
        let right = self
            .bridge_cache
            .range((Excluded(key), Excluded(b.to_bits())))
            .next()
            .map(|(k, v)| (f64::from_bits(*k), v.clone()))
            .unwrap_or_else(|| (b, self.value_at_index(j0 + 1).to_vec()));
        let (tl, wl) = left;
        let (tr, wr) = right;
        let span = tr - tl;
        let frac = (t - tl) / span;
        let sd = ((t - tl) * (tr - t) / span).sqrt();
        let mut value = Vec::with_capacity(self.dimension);
        for l in 0..self.dimension {
            let mean = wl[l] + (wr[l] - wl[l]) * frac;
            let z: f64 = rng.sample(StandardNormal);
            value.push(mean + sd * z);
        }
        self.bridge_cache.insert(key, value.clone());
        Ok(value)
    }
}

/// How off-diagonal iterated integrals are realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IteratedMode {
    /// Diagonal closed form plus the symmetrized identity
    /// `I[l1][l] = dW_l1 dW_l / 2` off the diagonal; valid when only the
    /// symmetric part enters the scheme (commutative noise).
    ExactDiagonal,
    /// Diagonal closed form plus a left-point Riemann-Ito sum over the fine
    /// sub-steps for the off-diagonal entries.
    FineSum,
}

/// Iterated stochastic integrals `I[l1][l] ~ int int dW^{l1} dW^{l}` over one
/// coarse step.
#[derive(Debug, Clone)]
pub struct IteratedIntegrals {
    pub step_index: usize,
    pub dimension: usize,
    /// `m x m`, `values[l1 * m + l] = I[l1][l]`.
    values: Vec<f64>,
    /// Worst symmetrization defect `|I[l1][l] + I[l][l1] - dW_l1 dW_l|`
    /// across pairs; zero in `ExactDiagonal` mode, the realized
    /// approximation tolerance in `FineSum` mode.
    pub sym_residual_max: f64,
}

impl IteratedIntegrals {
    pub fn get(&self, l1: usize, l: usize) -> f64 {
        self.values[l1 * self.dimension + l]
    }

    /// Closed commutative form for a step with increment `dw` over `dt`:
    /// `(dW_l1 dW_l - 1{l=l1} dt) / 2`.
    pub fn closed_form(step_index: usize, dw: &[f64], dt: f64) -> Self {
        let m = dw.len();
        let mut values = vec![0.0; m * m];
        for l1 in 0..m {
            for l in 0..m {
                let ind = if l == l1 { dt } else { 0.0 };
                values[l1 * m + l] = (dw[l1] * dw[l] - ind) / 2.0;
            }
        }
        IteratedIntegrals {
            step_index,
            dimension: m,
            values,
            sym_residual_max: 0.0,
        }
    }
}

/// Iterated integrals over coarse step `k`, using every fine sub-step for
/// the `FineSum` off-diagonal approximation.
pub fn iterated_integrals(
    grid: &BrownianGrid,
    coarse_n: usize,
    k: usize,
    mode: IteratedMode,
) -> Result<IteratedIntegrals, NoiseError> {
    let available = grid.coarse_ratio(coarse_n)?;
    iterated_integrals_with_ratio(grid, coarse_n, k, mode, available)
}

/// Iterated integrals over coarse step `k` with an explicit refinement
/// ratio: the `FineSum` off-diagonal sum runs over `ratio` sub-increments
/// (each aggregating `available/ratio` fine steps).
///
/// The diagonal is always the closed form `(dW_l^2 - h)/2` of the full
/// coarse increment, exactly.
pub fn iterated_integrals_with_ratio(
    grid: &BrownianGrid,
    coarse_n: usize,
    k: usize,
    mode: IteratedMode,
    ratio: usize,
) -> Result<IteratedIntegrals, NoiseError> {
    let available = grid.coarse_ratio(coarse_n)?;
    if k >= coarse_n {
        return Err(NoiseError::StepOutOfRange { k, count: coarse_n });
    }
    if ratio == 0 || !available.is_multiple_of(ratio) {
        return Err(NoiseError::RatioMismatch { ratio, available });
    }
    let m = grid.dimension();
    let h = grid.fine_step() * available as f64;
    let dw = grid.coarse_increment(coarse_n, k)?;

    let mut values = vec![0.0; m * m];
    for l in 0..m {
        values[l * m + l] = (dw[l] * dw[l] - h) / 2.0;
    }
    let mut sym_residual_max = 0.0_f64;
    if m > 1 {
        match mode {
            IteratedMode::ExactDiagonal => {
                for l1 in 0..m {
                    for l in 0..m {
                        if l1 != l {
                            values[l1 * m + l] = dw[l1] * dw[l] / 2.0;
                        }
                    }
                }
            }
            IteratedMode::FineSum => {
                let per_block = available / ratio;
                let start = k * available;
                for l1 in 0..m {
                    for l in 0..m {
                        if l1 == l {
                            continue;
                        }
                        let mut sum = 0.0;
                        let w_start = grid.value_at_index(start)[l1];
                        for i in 0..ratio {
                            let blk_start = start + i * per_block;
                            let blk_end = blk_start + per_block;
                            let w_l1 = grid.value_at_index(blk_start)[l1] - w_start;
                            let dw_l =
                                grid.value_at_index(blk_end)[l] - grid.value_at_index(blk_start)[l];
                            sum += w_l1 * dw_l;
                        }
                        values[l1 * m + l] = sum;
                    }
                }
                for l1 in 0..m {
                    for l in (l1 + 1)..m {
                        let defect =
                            (values[l1 * m + l] + values[l * m + l1] - dw[l1] * dw[l]).abs();
                        sym_residual_max = sym_residual_max.max(defect);
                    }
                }
            }
        }
    }
    Ok(IteratedIntegrals {
        step_index: k,
        dimension: m,
        values,
        sym_residual_max,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::seed::{stream, StreamRole};
    use proptest::prelude::*;

    #[test]
    fn single_step_grid() {
        let mut rng = stream(1, 0, StreamRole::Brownian);
        let g = generate_brownian(1, 1.0, 1, &mut rng).unwrap();
        assert_eq!(g.value_at_index(0), &[0.0]);
        assert_eq!(g.value_at_index(1)[0], g.increment(0)[0]);
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let mut r1 = stream(9, 4, StreamRole::Brownian);
        let mut r2 = stream(9, 4, StreamRole::Brownian);
        let a = generate_brownian(3, 2.0, 64, &mut r1).unwrap();
        let b = generate_brownian(3, 2.0, 64, &mut r2).unwrap();
        assert_eq!(a.increments, b.increments);
        assert_eq!(a.cumulative, b.cumulative);
    }

    #[test]
    fn increment_variance_matches_chi_square_oracle() {
        // Pooled sample variance of N(0, h) increments over k draws sits
        // within 3 standard errors of h, with SE = h * sqrt(2/k).
        let n_fine = 1 << 14;
        let paths = 100;
        let h = 1.0 / n_fine as f64;
        for coord in 0..2 {
            let mut sum_sq = 0.0;
            let mut count = 0usize;
            for p in 0..paths {
                let mut rng = stream(17, p, StreamRole::Brownian);
                let g = generate_brownian(2, 1.0, n_fine, &mut rng).unwrap();
                for j in 0..n_fine {
                    let v = g.increment(j)[coord];
                    sum_sq += v * v;
                    count += 1;
                }
            }
            let var = sum_sq / count as f64;
            let se = h * (2.0 / count as f64).sqrt();
            assert!(
                (var - h).abs() < 3.0 * se,
                "coordinate {coord}: variance {var} vs {h} +/- {}",
                3.0 * se
            );
        }
    }

    #[test]
    fn identity_coarsening_returns_fine_increment() {
        let mut rng = stream(2, 0, StreamRole::Brownian);
        let g = generate_brownian(2, 1.0, 8, &mut rng).unwrap();
        for k in 0..8 {
            assert_eq!(g.coarse_increment(8, k).unwrap(), g.increment(k).to_vec());
        }
    }

    #[test]
    fn first_coarse_step_telescopes_exactly() {
        let mut rng = stream(3, 0, StreamRole::Brownian);
        let g = generate_brownian(1, 1.0, 4, &mut rng).unwrap();
        let coarse = g.coarse_increment(2, 0).unwrap();
        assert_eq!(coarse[0], g.increment(0)[0] + g.increment(1)[0]);
        assert_eq!(coarse[0], g.value_at_index(2)[0] - g.value_at_index(0)[0]);
    }

    #[test]
    fn mismatched_coarsening_is_rejected() {
        let mut rng = stream(3, 1, StreamRole::Brownian);
        let g = generate_brownian(1, 1.0, 4, &mut rng).unwrap();
        assert!(matches!(
            g.coarse_increment(3, 0),
            Err(NoiseError::GridMismatch { coarse: 3, fine: 4 })
        ));
    }

    #[test]
    fn value_at_grid_points_returns_stored_values() {
        let mut rng = stream(4, 0, StreamRole::Brownian);
        let mut g = generate_brownian(2, 1.0, 16, &mut rng).unwrap();
        let mut bridge = stream(4, 0, StreamRole::Bridge);
        for j in 0..=16 {
            let t = j as f64 / 16.0;
            let v = g.value_at(t, &mut bridge).unwrap();
            assert_eq!(v, g.value_at_index(j).to_vec());
        }
        assert_eq!(g.bridge_cache_len(), 0);
    }

    #[test]
    fn bridge_queries_are_cached() {
        let mut rng = stream(4, 1, StreamRole::Brownian);
        let mut g = generate_brownian(1, 1.0, 4, &mut rng).unwrap();
        let mut bridge = stream(4, 1, StreamRole::Bridge);
        let t = 0.3;
        let v1 = g.value_at(t, &mut bridge).unwrap();
        let v2 = g.value_at(t, &mut bridge).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(g.bridge_cache_len(), 1);
    }

    #[test]
    fn bridge_moments_match_closed_form() {
        // At the midpoint of (a, b) = (0, h): mean (W_a + W_b)/2, variance h/4.
        let n_draws = 100_000;
        let h = 1.0 / 4.0;
        let mut rng = stream(21, 0, StreamRole::Brownian);
        let g = generate_brownian(1, 1.0, 4, &mut rng).unwrap();
        let wa = g.value_at_index(0)[0];
        let wb = g.value_at_index(1)[0];
        let mut bridge = stream(21, 0, StreamRole::Bridge);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n_draws {
            // Cache disabled by cloning the grid each draw.
            let mut fresh = g.clone();
            let v = fresh.value_at(h / 2.0, &mut bridge).unwrap()[0];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n_draws as f64;
        let var = sum_sq / n_draws as f64 - mean * mean;
        let expect_mean = (wa + wb) / 2.0;
        let expect_var = h / 4.0;
        let se_mean = expect_var.sqrt() / (n_draws as f64).sqrt();
        let se_var = expect_var * (2.0 / n_draws as f64).sqrt();
        assert!((mean - expect_mean).abs() < 3.0 * se_mean);
        assert!((var - expect_var).abs() < 3.0 * se_var);
    }

    #[test]
    fn bridge_respects_known_interior_points() {
        // A second query in the same fine interval must bracket against the
        // first sample, so the triple is time-monotone in law; here we only
        // check the interpolation skeleton: querying between two cached
        // points uses them, not the interval endpoints.
        let mut rng = stream(22, 0, StreamRole::Brownian);
        let mut g = generate_brownian(1, 1.0, 1, &mut rng).unwrap();
        let mut bridge = stream(22, 0, StreamRole::Bridge);
        let w25 = g.value_at(0.25, &mut bridge).unwrap()[0];
        let w75 = g.value_at(0.75, &mut bridge).unwrap()[0];
        let w50 = g.value_at(0.50, &mut bridge).unwrap()[0];
        // Var of the middle bridge is (0.25*0.25)/0.5 = 0.125, sd ~ 0.35; 6 sd.
        assert!((w50 - (w25 + w75) / 2.0).abs() < 6.0 * 0.125_f64.sqrt());
        assert_eq!(g.bridge_cache_len(), 3);
    }

    #[test]
    fn iterated_single_dimension_matches_closed_form() {
        let mut rng = stream(5, 0, StreamRole::Brownian);
        let g = generate_brownian(1, 1.0, 16, &mut rng).unwrap();
        for k in 0..4 {
            let a = iterated_integrals(&g, 4, k, IteratedMode::ExactDiagonal).unwrap();
            let b = iterated_integrals(&g, 4, k, IteratedMode::FineSum).unwrap();
            let dw = g.coarse_increment(4, k).unwrap()[0];
            let expect = (dw * dw - 0.25) / 2.0;
            assert_eq!(a.get(0, 0), expect);
            assert_eq!(b.get(0, 0), expect);
        }
    }

    #[test]
    fn zero_increments_give_minus_half_h_diagonal() {
        let mut rng = stream(5, 1, StreamRole::Brownian);
        let mut g = generate_brownian(2, 1.0, 8, &mut rng).unwrap();
        g.zero_for_tests();
        let it = iterated_integrals(&g, 2, 1, IteratedMode::FineSum).unwrap();
        assert_eq!(it.get(0, 0), -0.25);
        assert_eq!(it.get(1, 1), -0.25);
        assert_eq!(it.get(0, 1), 0.0);
    }

    #[test]
    fn fine_sum_symmetrization_residual_is_cross_variation() {
        // Ito product rule: I01 + I10 - dW0 dW1 = -sum_j dW0_j dW1_j over the
        // sub-blocks, an independent algebraic oracle for the left-point sum.
        let mut rng = stream(6, 0, StreamRole::Brownian);
        let g = generate_brownian(2, 1.0, 64, &mut rng).unwrap();
        let it = iterated_integrals(&g, 4, 2, IteratedMode::FineSum).unwrap();
        let dw = g.coarse_increment(4, 2).unwrap();
        let mut cross = 0.0;
        for j in 32..48 {
            cross += g.increment(j)[0] * g.increment(j)[1];
        }
        let residual = it.get(0, 1) + it.get(1, 0) - dw[0] * dw[1];
        assert!((residual + cross).abs() < 1e-14);
        assert!((it.sym_residual_max - residual.abs()).abs() < 1e-15);
    }

    #[test]
    fn symmetrization_residual_decays_as_inverse_sqrt_ratio() {
        // RMS over many steps scales like h / sqrt(r).
        let coarse_n = 1000;
        let mut rms = Vec::new();
        for (i, ratio) in [4usize, 16, 64].into_iter().enumerate() {
            let mut rng = stream(30 + i as u64, 0, StreamRole::Brownian);
            let g = generate_brownian(2, 1.0, coarse_n * ratio, &mut rng).unwrap();
            let mut sum_sq = 0.0;
            for k in 0..coarse_n {
                let it = iterated_integrals(&g, coarse_n, k, IteratedMode::FineSum).unwrap();
                let dw = g.coarse_increment(coarse_n, k).unwrap();
                let r = it.get(0, 1) + it.get(1, 0) - dw[0] * dw[1];
                sum_sq += r * r;
            }
            rms.push((sum_sq / coarse_n as f64).sqrt());
        }
        let s1 = (rms[1] / rms[0]).log2() / 2.0; // ratios step by factor 4
        let s2 = (rms[2] / rms[1]).log2() / 2.0;
        assert!((s1 + 0.5).abs() < 0.15, "slope {s1}");
        assert!((s2 + 0.5).abs() < 0.15, "slope {s2}");
    }

    proptest! {
        #[test]
        fn coarse_increments_telescope_to_path_values(
            seed in 0u64..100,
            log_ratio in 0u32..4,
            coarse_n in 1usize..16,
        ) {
            let ratio = 1usize << log_ratio;
            let n_fine = coarse_n * ratio;
            let mut rng = stream(seed, 7, StreamRole::Brownian);
            let g = generate_brownian(2, 1.0, n_fine, &mut rng).unwrap();
            for k in 0..coarse_n {
                let inc = g.coarse_increment(coarse_n, k).unwrap();
                for l in 0..2 {
                    let expect = if ratio == 1 {
                        g.increment(k)[l]
                    } else {
                        g.value_at_index((k + 1) * ratio)[l] - g.value_at_index(k * ratio)[l]
                    };
                    prop_assert_eq!(inc[l], expect);
                }
            }
        }

        #[test]
        fn diagonal_identity_holds_to_machine_epsilon(
            seed in 0u64..100,
            coarse_n in 1usize..8,
        ) {
            let n_fine = coarse_n * 8;
            let mut rng = stream(seed, 8, StreamRole::Brownian);
            let g = generate_brownian(2, 1.0, n_fine, &mut rng).unwrap();
            let h = 1.0 / coarse_n as f64;
            for k in 0..coarse_n {
                let it = iterated_integrals(&g, coarse_n, k, IteratedMode::FineSum).unwrap();
                let dw = g.coarse_increment(coarse_n, k).unwrap();
                for l in 0..2 {
                    let expect = (dw[l] * dw[l] - h) / 2.0;
                    prop_assert!((it.get(l, l) - expect).abs() <= f64::EPSILON * h.max(1.0));
                }
            }
        }
    }
}
