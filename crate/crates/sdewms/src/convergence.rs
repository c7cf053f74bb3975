//! Monte Carlo strong-error measurement and order fitting.
//!
//! One sample = one chain path + one fine Brownian grid. The reference
//! trajectory and every `(scheme, n)` trajectory for that sample consume the
//! same chain and the same grid (bridge values included), so the measured
//! error is discretization error only. Strong error per `(scheme, n)` is
//! `max_k sqrt(mean_s |X_ref(t_k) - X^n(t_k)|^2)` over the coarse grid
//! points, and the empirical order is the negated slope of `log2 e` against
//! `log2 n`.
//!
//! Samples are independent work units; per-sample seeds derive from
//! `(base_seed, sample, role)`, and reductions use fixed-order pairwise
//! summation over the sample index, so the report is bitwise identical
//! whether samples run serially or in parallel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{
    jump_count_statistics, sample_chain_path, ChainError, GeneratorMatrix, JumpStatistics,
};
use crate::model::{builtin, euclid, ModelSpec};
use crate::noise::{generate_brownian, IteratedMode, NoiseError};
use crate::scheme::{reference_solution, simulate, SchemeError, SchemeId, SimOptions};
use crate::seed::{derive_base, stream, StreamRole};

/// Trials per step size for the jump-count diagnostics.
pub const JUMP_TRIALS: u64 = 100_000;

/// Kendall-correlation magnitude above which the moment diagnostic flags a
/// trend in n.
pub const MOMENT_TREND_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ConvergenceError {
    #[error("unknown model `{0}` (built-ins: m1, m2, m3)")]
    UnknownModel(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("ablation is vacuous: diffusion of `{0}` does not depend on the chain state")]
    AblationVacuous(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Full description of one experiment; every emitted report embeds this
/// verbatim so runs are reproducible from the report alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: String,
    pub schemes: Vec<SchemeId>,
    pub n_list: Vec<usize>,
    pub n_ref: usize,
    /// Time horizon T.
    pub horizon: f64,
    /// Monte Carlo sample count M.
    pub samples: usize,
    pub seed: u64,
    /// Sub-increments per coarse step for `FineSum` iterated integrals.
    pub refinement_ratio: usize,
    /// Moment exponent p for the boundedness diagnostics.
    pub moment_order: f64,
    /// Generator override (row-major); defaults to the model's generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Vec<Vec<f64>>>,
    /// Initial-value override.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Grid for single-trajectory runs (the `simulate` command).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_single: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: "m1".to_string(),
            schemes: vec![SchemeId::TamedMilstein, SchemeId::TamedEm],
            n_list: vec![16, 32, 64, 128, 256, 512],
            n_ref: 8192,
            horizon: 1.0,
            samples: 1000,
            seed: 0,
            refinement_ratio: 16,
            moment_order: 4.0,
            generator: None,
            x0: None,
            n_single: None,
        }
    }
}

impl ExperimentConfig {
    /// Resolve the model and generator this config names, applying the
    /// generator and initial-value overrides.
    pub fn resolve(&self) -> Result<(ModelSpec, GeneratorMatrix), ConvergenceError> {
        let (mut model, mut gen) = builtin(&self.model)
            .ok_or_else(|| ConvergenceError::UnknownModel(self.model.clone()))?;
        if let Some(rates) = &self.generator {
            gen = GeneratorMatrix::validate(rates.clone())?;
            if gen.num_states() != model.num_chain_states {
                return Err(ConvergenceError::InvalidConfig(format!(
                    "generator has {} states but model `{}` expects {}",
                    gen.num_states(),
                    model.name,
                    model.num_chain_states
                )));
            }
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != model.dim_state {
                return Err(ConvergenceError::InvalidConfig(format!(
                    "x0 has {} components but model `{}` has dimension {}",
                    x0.len(),
                    model.name,
                    model.dim_state
                )));
            }
            model = model.with_initial_point(x0.clone());
        }
        Ok((model, gen))
    }

    /// Check every structural invariant the harness relies on.
    pub fn validate(&self) -> Result<(), ConvergenceError> {
        let (model, gen) = self.resolve()?;
        self.validate_against(&model, &gen)
    }

    /// Validation against an explicitly supplied model and generator, for
    /// programmatic (non-catalog) models.
    pub fn validate_against(
        &self,
        model: &ModelSpec,
        gen: &GeneratorMatrix,
    ) -> Result<(), ConvergenceError> {
        let fail = |msg: String| Err(ConvergenceError::InvalidConfig(msg));
        if self.samples < 2 {
            return fail(format!("samples = {} must be >= 2", self.samples));
        }
        if self.schemes.is_empty() {
            return fail("schemes must be non-empty".into());
        }
        if self.schemes.contains(&SchemeId::CommutativeMilstein) && !model.commutative {
            return fail(format!(
                "scheme `commutative_milstein` requires a commutative model, but `{}` is not \
                 (its noise columns do not commute); use `tamed_milstein` instead",
                model.name
            ));
        }
        if self.n_list.is_empty() {
            return fail("n_list must be non-empty".into());
        }
        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            return fail(format!("T = {} must be positive", self.horizon));
        }
        for &n in &self.n_list {
            if n == 0 {
                return fail("n_list entries must be >= 1".into());
            }
            if !self.n_ref.is_multiple_of(n) {
                return fail(format!("n = {n} does not divide n_ref = {}", self.n_ref));
            }
            integral_steps(n, self.horizon)?;
            gen.check_step(1.0 / n as f64)?;
        }
        let n_max = *self.n_list.iter().max().expect("non-empty");
        if self.n_ref < 8 * n_max {
            return fail(format!(
                "n_ref = {} must be at least 8x the largest n = {n_max}",
                self.n_ref
            ));
        }
        integral_steps(self.n_ref, self.horizon)?;
        if self.refinement_ratio == 0 {
            return fail("refinement_ratio must be >= 1".into());
        }
        if !self.moment_order.is_finite() || self.moment_order < 2.0 {
            return fail(format!("p = {} must be >= 2", self.moment_order));
        }
        Ok(())
    }
}

fn integral_steps(n: usize, horizon: f64) -> Result<usize, ConvergenceError> {
    let product = n as f64 * horizon;
    let total = product.round();
    if total < 1.0 || (product - total).abs() > 1e-9 {
        return Err(ConvergenceError::InvalidConfig(format!(
            "n*T = {product} is not an integer number of steps"
        )));
    }
    Ok(total as usize)
}

/// FNV-1a hash of the serialized config, embedded in every output file.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Fixed-order pairwise summation: deterministic under any execution order
/// of the producers, with bounded rounding.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

// ---------------------------------------------------------------------------
// Order fitting
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum FitError {
    #[error("degenerate errors: {0}")]
    DegenerateErrors(String),
}

/// Least-squares estimate of the empirical convergence order.
#[derive(Debug, Clone, Serialize)]
pub struct OrderEstimate {
    /// Negated slope of `log2 e` vs `log2 n`.
    pub order: f64,
    pub slope_stderr: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
}

/// Ordinary least squares of `log2 e(n)` against `log2 n`; the order is the
/// negated slope.
pub fn fit_order(points: &[(usize, f64)]) -> Result<OrderEstimate, FitError> {
    if points.len() < 3 {
        return Err(FitError::DegenerateErrors(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    for &(n, e) in points {
        if !e.is_finite() || e <= 0.0 {
            return Err(FitError::DegenerateErrors(format!(
                "error {e} at n = {n} is not positive and finite"
            )));
        }
    }
    let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).log2()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, e)| e.log2()).collect();
    let len = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / len;
    let y_mean = ys.iter().sum::<f64>() / len;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean) * (x - x_mean)).sum();
    if sxx == 0.0 {
        return Err(FitError::DegenerateErrors("all n identical".into()));
    }
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - x_mean) * (y - y_mean))
        .sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let residuals: Vec<f64> = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| y - (intercept + slope * x))
        .collect();
    let ssr: f64 = residuals.iter().map(|r| r * r).sum();
    let dof = (points.len() as f64 - 2.0).max(1.0);
    let slope_stderr = (ssr / dof / sxx).sqrt();
    Ok(OrderEstimate {
        order: -slope,
        slope_stderr,
        intercept,
        residuals,
    })
}

/// Outcome of the per-scheme order fit.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OrderFit {
    /// All errors are exactly zero (the scheme reproduces the reference).
    Exact,
    Fitted {
        order: f64,
        slope_stderr: f64,
        intercept: f64,
        residuals: Vec<f64>,
    },
    Degenerate {
        reason: String,
    },
}

impl OrderFit {
    pub fn fitted_order(&self) -> Option<f64> {
        match self {
            OrderFit::Fitted { order, .. } => Some(*order),
            _ => None,
        }
    }
}

fn classify_fit(points: &[(usize, f64)]) -> OrderFit {
    if points.iter().all(|&(_, e)| e == 0.0) {
        return OrderFit::Exact;
    }
    match fit_order(points) {
        Ok(est) => OrderFit::Fitted {
            order: est.order,
            slope_stderr: est.slope_stderr,
            intercept: est.intercept,
            residuals: est.residuals,
        },
        Err(e) => OrderFit::Degenerate {
            reason: e.to_string(),
        },
    }
}

// ---------------------------------------------------------------------------
// The experiment
// ---------------------------------------------------------------------------

/// Strong error at one grid resolution.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorPoint {
    pub n: usize,
    /// `max_k sqrt(mean_s |X_ref(t_k) - X^n(t_k)|^2)`.
    pub error: f64,
    /// Delta-method standard error of the RMS at the maximizing grid point.
    pub stderr: f64,
    /// Grid time attaining the maximum.
    pub argmax_time: f64,
    /// Samples excluded because this scheme's trajectory blew up.
    pub excluded: usize,
}

/// Errors and fitted order for one scheme.
#[derive(Debug, Clone, Serialize)]
pub struct SchemeResult {
    pub scheme: SchemeId,
    pub points: Vec<ErrorPoint>,
    pub order: OrderFit,
}

/// Jump-count statistics at one step size, next to the bounds they must
/// respect.
#[derive(Debug, Clone, Serialize)]
pub struct JumpDiagnostic {
    pub n: usize,
    pub stats: JumpStatistics,
    /// First-order tail bound `q h`.
    pub bound_qh: f64,
    /// Second-order tail bound `(q h)^2`.
    pub bound_qh_sq: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentRow {
    pub n: usize,
    /// Empirical `E[sup_k |X^n_{t_k}|^p]`.
    pub moment: f64,
    pub stderr: f64,
    pub excluded: usize,
}

/// Uniform-in-n moment boundedness check: Kendall correlation of the
/// moment against n, flagged when `|tau|` exceeds
/// [`MOMENT_TREND_THRESHOLD`].
#[derive(Debug, Clone, Serialize)]
pub struct MomentDiagnostics {
    pub moment_order: f64,
    pub scheme: SchemeId,
    pub rows: Vec<MomentRow>,
    pub kendall_tau: f64,
    pub trend_flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub jumps: Vec<JumpDiagnostic>,
    pub moments: MomentDiagnostics,
}

/// Everything `run_experiment` produces: per-scheme errors and orders,
/// diagnostics, blow-up counts, and the full config echo.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub results: Vec<SchemeResult>,
    /// Samples whose reference trajectory blew up (excluded everywhere).
    pub reference_blowups: usize,
    pub diagnostics: DiagnosticsReport,
}

impl ConvergenceReport {
    pub fn scheme_result(&self, scheme: SchemeId) -> Option<&SchemeResult> {
        self.results.iter().find(|r| r.scheme == scheme)
    }
}

/// Per-sample squared deviations: `cells[scheme_idx][n_idx]` holds one value
/// per coarse grid point, or `None` when that trajectory blew up.
struct SampleOutcome {
    cells: Vec<Vec<Option<Vec<f64>>>>,
    reference_blew_up: bool,
}

fn sample_worker(
    sample: u64,
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    gen: &GeneratorMatrix,
) -> Result<SampleOutcome, ConvergenceError> {
    let horizon = cfg.horizon;
    let total_ref = integral_steps(cfg.n_ref, horizon)?;
    let mut chain_rng = stream(cfg.seed, sample, StreamRole::Chain);
    let mut brownian_rng = stream(cfg.seed, sample, StreamRole::Brownian);
    let mut bridge_rng = stream(cfg.seed, sample, StreamRole::Bridge);

    let chain = sample_chain_path(gen, model.initial_chain_state, horizon, &mut chain_rng)?;
    let mut noise = generate_brownian(model.dim_noise, horizon, total_ref, &mut brownian_rng)?;
    let x0 = model.initial_point(&mut bridge_rng);

    let mode = if model.commutative {
        IteratedMode::ExactDiagonal
    } else {
        IteratedMode::FineSum
    };
    let opts = SimOptions {
        iterated_mode: mode,
        levy_ratio: Some(cfg.refinement_ratio),
        n_tame: None,
        max_rate: gen.q_max(),
        initial_override: Some(x0),
    };

    let reference =
        reference_solution(model, cfg.n_ref, &chain, &mut noise, &opts, &mut bridge_rng)?;
    let reference_blew_up = reference.blew_up.is_some();

    let mut cells = vec![vec![None; cfg.n_list.len()]; cfg.schemes.len()];
    if !reference_blew_up {
        for (si, &scheme) in cfg.schemes.iter().enumerate() {
            for (ni, &n) in cfg.n_list.iter().enumerate() {
                let traj = simulate(model, scheme, n, &chain, &mut noise, &opts, &mut bridge_rng)?;
                if traj.blew_up.is_some() {
                    continue;
                }
                let total_n = traj.values.len() - 1;
                let stride = total_ref / total_n;
                let devs: Vec<f64> = (0..=total_n)
                    .map(|k| {
                        let r = &reference.values[k * stride];
                        let x = &traj.values[k];
                        r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                    })
                    .collect();
                cells[si][ni] = Some(devs);
            }
        }
    }
    Ok(SampleOutcome {
        cells,
        reference_blew_up,
    })
}

/// Execution mode of the sample loop; results are bitwise identical either
/// way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Serial,
    Rayon,
}

/// Run the full convergence experiment (parallel sample loop).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ConvergenceReport, ConvergenceError> {
    run_experiment_with(cfg, Parallelism::Rayon)
}

/// Run the full convergence experiment with an explicit execution mode.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    mode: Parallelism,
) -> Result<ConvergenceReport, ConvergenceError> {
    let (model, gen) = cfg.resolve()?;
    experiment_inner(cfg, mode, &model, &gen)
}

/// Run the experiment with an explicitly supplied model and generator; the
/// config's `model`, `generator`, and `x0` fields are ignored in favor of
/// the arguments.
pub fn run_experiment_custom(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    gen: &GeneratorMatrix,
) -> Result<ConvergenceReport, ConvergenceError> {
    experiment_inner(cfg, Parallelism::Rayon, model, gen)
}

fn experiment_inner(
    cfg: &ExperimentConfig,
    mode: Parallelism,
    model: &ModelSpec,
    gen: &GeneratorMatrix,
) -> Result<ConvergenceReport, ConvergenceError> {
    cfg.validate_against(model, gen)?;

    let outcomes: Vec<SampleOutcome> = match mode {
        Parallelism::Rayon => (0..cfg.samples as u64)
            .into_par_iter()
            .map(|s| sample_worker(s, cfg, model, gen))
            .collect::<Result<Vec<_>, _>>()?,
        Parallelism::Serial => (0..cfg.samples as u64)
            .map(|s| sample_worker(s, cfg, model, gen))
            .collect::<Result<Vec<_>, _>>()?,
    };

    let reference_blowups = outcomes.iter().filter(|o| o.reference_blew_up).count();
    let mut results = Vec::with_capacity(cfg.schemes.len());
    let mut scratch = Vec::with_capacity(cfg.samples);
    for (si, &scheme) in cfg.schemes.iter().enumerate() {
        let mut points = Vec::with_capacity(cfg.n_list.len());
        for (ni, &n) in cfg.n_list.iter().enumerate() {
            let included: Vec<&Vec<f64>> = outcomes
                .iter()
                .filter_map(|o| o.cells[si][ni].as_ref())
                .collect();
            let excluded = cfg.samples - included.len();
            if included.len() < 2 {
                points.push(ErrorPoint {
                    n,
                    error: f64::NAN,
                    stderr: f64::NAN,
                    argmax_time: f64::NAN,
                    excluded,
                });
                continue;
            }
            let grid_len = included[0].len();
            let count = included.len() as f64;
            let mut best = (0usize, f64::NEG_INFINITY);
            let mut means = vec![0.0; grid_len];
            for (k, mean) in means.iter_mut().enumerate() {
                scratch.clear();
                scratch.extend(included.iter().map(|v| v[k]));
                *mean = pairwise_sum(&scratch) / count;
                if *mean > best.1 {
                    best = (k, *mean);
                }
            }
            let (k_star, mean_sq) = best;
            scratch.clear();
            scratch.extend(included.iter().map(|v| {
                let d = v[k_star] - mean_sq;
                d * d
            }));
            let var = pairwise_sum(&scratch) / (count - 1.0);
            let se_mean = (var / count).sqrt();
            let rms = mean_sq.sqrt();
            let stderr = if rms > 0.0 {
                se_mean / (2.0 * rms)
            } else {
                0.0
            };
            let total_n = grid_len - 1;
            let argmax_time = cfg.horizon * k_star as f64 / total_n as f64;
            points.push(ErrorPoint {
                n,
                error: rms,
                stderr,
                argmax_time,
                excluded,
            });
        }
        let finite: Vec<(usize, f64)> = points
            .iter()
            .filter(|p| p.error.is_finite())
            .map(|p| (p.n, p.error))
            .collect();
        let order = if finite.len() == points.len() {
            classify_fit(&finite)
        } else {
            OrderFit::Degenerate {
                reason: "some resolutions lost every sample".into(),
            }
        };
        results.push(SchemeResult {
            scheme,
            points,
            order,
        });
    }

    let diagnostics = diagnostics_inner(cfg, model, gen)?;
    Ok(ConvergenceReport {
        config: cfg.clone(),
        config_hash: config_hash(cfg),
        results,
        reference_blowups,
        diagnostics,
    })
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

const SALT_JUMP: u64 = 0x4a55;
const SALT_MOMENT: u64 = 0x4d4f;

/// Kendall rank correlation of `values` against their index order.
fn kendall_tau_by_index(values: &[f64]) -> f64 {
    let len = values.len();
    if len < 2 {
        return 0.0;
    }
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..len {
        for j in (i + 1)..len {
            let d = values[j] - values[i];
            if d > 0.0 {
                concordant += 1;
            } else if d < 0.0 {
                discordant += 1;
            }
        }
    }
    let total = (len * (len - 1) / 2) as f64;
    (concordant - discordant) as f64 / total
}

/// Report-only verification of the jump-count bounds and the uniform-in-n
/// moment bound, at the config's resolutions.
pub fn run_diagnostics(cfg: &ExperimentConfig) -> Result<DiagnosticsReport, ConvergenceError> {
    cfg.validate()?;
    let (model, gen) = cfg.resolve()?;
    diagnostics_inner(cfg, &model, &gen)
}

fn diagnostics_inner(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    gen: &GeneratorMatrix,
) -> Result<DiagnosticsReport, ConvergenceError> {
    let mut jumps = Vec::with_capacity(cfg.n_list.len());
    for &n in &cfg.n_list {
        let h = 1.0 / n as f64;
        let mut rng = stream(
            derive_base(cfg.seed, SALT_JUMP.wrapping_add(n as u64)),
            0,
            StreamRole::Chain,
        );
        let stats = jump_count_statistics(gen, h, JUMP_TRIALS, &mut rng)?;
        let qh = gen.q_max() * h;
        jumps.push(JumpDiagnostic {
            n,
            stats,
            bound_qh: qh,
            bound_qh_sq: qh * qh,
        });
    }

    // Moment runs use streams independent across n so the trend test sees
    // independent Monte Carlo noise per resolution. The sup is taken over
    // the grid points every resolution shares (the coarsest grid): sampling
    // a finer trajectory at finer times systematically enlarges its discrete
    // sup, which would read as a spurious trend in n.
    let scheme = SchemeId::TamedMilstein;
    let mode = if model.commutative {
        IteratedMode::ExactDiagonal
    } else {
        IteratedMode::FineSum
    };
    let n_min = *cfg.n_list.iter().min().expect("non-empty n_list");
    let common_total = integral_steps(n_min, cfg.horizon)?;
    let mut rows = Vec::with_capacity(cfg.n_list.len());
    for &n in &cfg.n_list {
        let base = derive_base(cfg.seed, SALT_MOMENT.wrapping_add(n as u64));
        let total = integral_steps(n, cfg.horizon)?;
        let stride = total / common_total;
        let n_fine = total * cfg.refinement_ratio;
        let per_sample = |s: u64| -> Result<Option<f64>, ConvergenceError> {
            let mut chain_rng = stream(base, s, StreamRole::Chain);
            let mut brownian_rng = stream(base, s, StreamRole::Brownian);
            let mut bridge_rng = stream(base, s, StreamRole::Bridge);
            let chain =
                sample_chain_path(gen, model.initial_chain_state, cfg.horizon, &mut chain_rng)?;
            let mut noise =
                generate_brownian(model.dim_noise, cfg.horizon, n_fine, &mut brownian_rng)?;
            let x0 = model.initial_point(&mut bridge_rng);
            let opts = SimOptions {
                iterated_mode: mode,
                levy_ratio: Some(cfg.refinement_ratio),
                n_tame: None,
                max_rate: gen.q_max(),
                initial_override: Some(x0),
            };
            let traj = simulate(model, scheme, n, &chain, &mut noise, &opts, &mut bridge_rng)?;
            if traj.blew_up.is_some() {
                return Ok(None);
            }
            let sup = (0..=common_total)
                .map(|k| euclid(&traj.values[k * stride]))
                .fold(0.0_f64, f64::max);
            Ok(Some(sup.powf(cfg.moment_order)))
        };
        let values: Vec<Option<f64>> = (0..cfg.samples as u64)
            .into_par_iter()
            .map(per_sample)
            .collect::<Result<Vec<_>, _>>()?;
        let kept: Vec<f64> = values.iter().filter_map(|v| *v).collect();
        let excluded = cfg.samples - kept.len();
        let count = kept.len() as f64;
        let mean = pairwise_sum(&kept) / count;
        let sq: Vec<f64> = kept.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = pairwise_sum(&sq) / (count - 1.0).max(1.0);
        rows.push(MomentRow {
            n,
            moment: mean,
            stderr: (var / count).sqrt(),
            excluded,
        });
    }
    let tau = kendall_tau_by_index(&rows.iter().map(|r| r.moment).collect::<Vec<_>>());
    let moments = MomentDiagnostics {
        moment_order: cfg.moment_order,
        scheme,
        rows,
        kendall_tau: tau,
        trend_flagged: tau.abs() >= MOMENT_TREND_THRESHOLD,
    };
    Ok(DiagnosticsReport { jumps, moments })
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

/// Side-by-side comparison of the full scheme against the variant with the
/// jump-correction term deleted, on one coupled run.
#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub full: SchemeResult,
    pub ablated: SchemeResult,
    /// Per-n error ratio ablated / full.
    pub ratios: Vec<(usize, f64)>,
    /// Fitted-order gap full - ablated, when both fits exist.
    pub order_gap: Option<f64>,
}

/// Run the coupled ablation study. Errors with `AblationVacuous` when the
/// model's diffusion does not depend on the chain state (the correction term
/// is identically zero there).
pub fn ablation_study(cfg: &ExperimentConfig) -> Result<AblationReport, ConvergenceError> {
    let (model, _) = cfg.resolve()?;
    if !model.sigma_state_dependent {
        return Err(ConvergenceError::AblationVacuous(model.name));
    }
    let mut run_cfg = cfg.clone();
    run_cfg.schemes = vec![SchemeId::TamedMilstein, SchemeId::AblatedMilstein];
    let report = run_experiment(&run_cfg)?;
    let full = report
        .scheme_result(SchemeId::TamedMilstein)
        .expect("ran")
        .clone();
    let ablated = report
        .scheme_result(SchemeId::AblatedMilstein)
        .expect("ran")
        .clone();
    let ratios = full
        .points
        .iter()
        .zip(&ablated.points)
        .map(|(f, a)| (f.n, a.error / f.error))
        .collect();
    let order_gap = match (full.order.fitted_order(), ablated.order.fitted_order()) {
        (Some(f), Some(a)) => Some(f - a),
        _ => None,
    };
    Ok(AblationReport {
        config: run_cfg.clone(),
        config_hash: config_hash(&run_cfg),
        full,
        ablated,
        ratios,
        order_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn fit_order_recovers_exact_power_laws() {
        let pts: Vec<(usize, f64)> = [16, 32, 64, 128]
            .iter()
            .map(|&n| (n, 3.0 / n as f64))
            .collect();
        let est = fit_order(&pts).unwrap();
        assert!((est.order - 1.0).abs() < 1e-12);
        assert!(est.residuals.iter().all(|r| r.abs() < 1e-12));
        assert!(est.slope_stderr < 1e-12);

        let pts: Vec<(usize, f64)> = [16, 32, 64, 128]
            .iter()
            .map(|&n| (n, 0.7 / (n as f64).sqrt()))
            .collect();
        let est = fit_order(&pts).unwrap();
        assert!((est.order - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fit_order_on_mixed_power_law_sits_between_orders() {
        // e(n) = c/n + d/n^2 with d/c = 10: fitted order lies in (1, 2) and
        // moves toward 1 on larger-n windows.
        let eval = |ns: &[usize]| {
            let pts: Vec<(usize, f64)> = ns
                .iter()
                .map(|&n| (n, 1.0 / n as f64 + 10.0 / (n as f64).powi(2)))
                .collect();
            fit_order(&pts).unwrap().order
        };
        let low = eval(&[16, 32, 64, 128, 256, 512]);
        let high = eval(&[128, 256, 512, 1024, 2048, 4096]);
        assert!(low > 1.0 && low < 2.0, "low-window order {low}");
        assert!(high > 1.0 && high < low, "high-window order {high}");
    }

    #[test]
    fn fit_order_rejects_degenerate_inputs() {
        assert!(fit_order(&[(16, 1.0), (32, 0.5)]).is_err());
        assert!(fit_order(&[(16, 1.0), (32, 0.0), (64, 0.2)]).is_err());
    }

    #[test]
    fn pairwise_sum_is_fixed_order() {
        let values: Vec<f64> = (0..1000)
            .map(|i| ((i * 2654435761_usize) % 997) as f64 / 997.0)
            .collect();
        let a = pairwise_sum(&values);
        let b = pairwise_sum(&values);
        assert_eq!(a, b);
        let plain: f64 = values.iter().sum();
        assert!((a - plain).abs() < 1e-9);
    }

    #[test]
    fn kendall_tau_detects_monotone_sequences() {
        assert_eq!(kendall_tau_by_index(&[1.0, 2.0, 3.0, 4.0]), 1.0);
        assert_eq!(kendall_tau_by_index(&[4.0, 3.0, 2.0, 1.0]), -1.0);
        let tau = kendall_tau_by_index(&[1.0, 3.0, 2.0, 4.0]);
        assert!((tau - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation_catches_structural_mistakes() {
        let mut cfg = ExperimentConfig {
            samples: 10,
            ..ExperimentConfig::default()
        };
        cfg.validate().unwrap();
        cfg.n_ref = 1000; // 16 does not divide 1000... it does not: 1000/16=62.5
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            n_list: vec![512],
            n_ref: 1024, // less than 8 * 512
            samples: 10,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            model: "m3".into(),
            schemes: vec![SchemeId::CommutativeMilstein],
            samples: 10,
            ..ExperimentConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("commutative"), "{err}");
        let cfg = ExperimentConfig {
            model: "nope".into(),
            ..ExperimentConfig::default()
        };
        assert!(matches!(
            cfg.validate().unwrap_err(),
            ConvergenceError::UnknownModel(_)
        ));
    }

    #[test]
    fn generator_override_must_match_state_count() {
        let cfg = ExperimentConfig {
            generator: Some(vec![
                vec![-1.0, 0.5, 0.5],
                vec![1.0, -2.0, 1.0],
                vec![0.0, 1.0, -1.0],
            ]),
            ..ExperimentConfig::default()
        };
        assert!(cfg.resolve().is_err());
        let cfg = ExperimentConfig {
            generator: Some(vec![vec![-2.0, 2.0], vec![3.0, -3.0]]),
            ..ExperimentConfig::default()
        };
        let (_, gen) = cfg.resolve().unwrap();
        assert_eq!(gen.q_max(), 3.0);
    }

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            schemes: vec![SchemeId::TamedMilstein],
            n_list: vec![8, 16, 32],
            n_ref: 256,
            samples: 20,
            seed: 77,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_coefficient_model_reports_exact() {
        // A zero generator and x0 = 0 freeze M2 entirely: the trajectory is
        // constant at every resolution and the order fit degenerates to
        // "exact".
        let cfg = ExperimentConfig {
            model: "m2".into(),
            generator: Some(vec![vec![0.0, 0.0], vec![0.0, 0.0]]),
            x0: Some(vec![0.0]),
            ..small_cfg()
        };
        let report = run_experiment(&cfg).unwrap();
        let res = &report.results[0];
        assert!(res.points.iter().all(|p| p.error == 0.0));
        assert!(matches!(res.order, OrderFit::Exact));
    }

    #[test]
    fn serial_and_parallel_runs_agree_bitwise() {
        let cfg = small_cfg();
        let a = run_experiment_with(&cfg, Parallelism::Serial).unwrap();
        let b = run_experiment_with(&cfg, Parallelism::Rayon).unwrap();
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn errors_shrink_with_n_on_every_builtin() {
        // Statistical monotonicity: e(n) non-increasing up to 2 standard
        // errors, for each scheme on each catalog model. m3 also exercises
        // the d = 2 non-commutative path end to end.
        for model in ["m1", "m2", "m3"] {
            let cfg = ExperimentConfig {
                model: model.into(),
                schemes: vec![SchemeId::TamedMilstein, SchemeId::TamedEm],
                ..small_cfg()
            };
            let report = run_experiment(&cfg).unwrap();
            assert_eq!(report.reference_blowups, 0, "{model}");
            for res in &report.results {
                for w in res.points.windows(2) {
                    assert!(
                        w[1].error <= w[0].error + 2.0 * (w[0].stderr + w[1].stderr),
                        "{model}/{}: errors not non-increasing: {:?}",
                        res.scheme,
                        res.points
                    );
                }
            }
        }
    }

    #[test]
    fn halving_reference_step_barely_moves_errors() {
        // Reference dominance: against n_ref and 2 * n_ref references, the
        // reported coarse errors agree within 5 percent.
        let cfg = ExperimentConfig {
            schemes: vec![SchemeId::TamedMilstein],
            n_list: vec![64],
            n_ref: 2048,
            samples: 300,
            seed: 5,
            ..ExperimentConfig::default()
        };
        let coarse_ref = run_experiment(&cfg).unwrap();
        let fine_ref = run_experiment(&ExperimentConfig { n_ref: 4096, ..cfg }).unwrap();
        let a = coarse_ref.results[0].points[0].error;
        let b = fine_ref.results[0].points[0].error;
        assert!(
            (a - b).abs() / b < 0.05,
            "errors {a} vs {b} differ by more than 5 percent"
        );
    }

    #[test]
    fn zero_generator_diagnostics_have_silent_jumps_but_live_moments() {
        let cfg = ExperimentConfig {
            model: "m2".into(),
            generator: Some(vec![vec![0.0, 0.0], vec![0.0, 0.0]]),
            samples: 30,
            n_list: vec![8, 16, 32],
            n_ref: 256,
            ..ExperimentConfig::default()
        };
        let report = run_diagnostics(&cfg).unwrap();
        for j in &report.jumps {
            assert_eq!(j.stats.p_ge1, 0.0);
            assert_eq!(j.stats.mean, 0.0);
            assert_eq!(j.bound_qh, 0.0);
        }
        assert_eq!(report.moments.rows.len(), 3);
        assert!(report.moments.rows.iter().all(|r| r.moment > 0.0));
    }

    #[test]
    fn ablation_is_vacuous_without_sigma_switching() {
        let cfg = ExperimentConfig {
            model: "m2".into(),
            ..small_cfg()
        };
        assert!(matches!(
            ablation_study(&cfg),
            Err(ConvergenceError::AblationVacuous(_))
        ));
    }

    #[test]
    fn sampled_initial_values_are_shared_across_schemes() {
        // With a random initial value, both schemes must still start from the
        // same point in every sample (error zero at t = 0).
        let cfg = ExperimentConfig {
            schemes: vec![SchemeId::TamedMilstein, SchemeId::TamedEm],
            ..small_cfg()
        };
        let (mut model, gen) = cfg.resolve().unwrap();
        model.initial = crate::model::InitialValue::Sampled(Arc::new(|rng| {
            use rand::Rng;
            vec![rng.random::<f64>()]
        }));
        // Inline worker call: t = 0 deviation must be exactly zero.
        let outcome = sample_worker(3, &cfg, &model, &gen).unwrap();
        for cell in outcome.cells.iter().flatten().flatten() {
            assert_eq!(cell[0], 0.0);
        }
    }
}
