//! One-step maps and trajectory drivers.
//!
//! The full one-step map advances the state by four contributions: tamed
//! drift, diffusion against the Brownian increment, the Milstein term built
//! from iterated integrals, and, only on steps where the chain jumps exactly
//! once, a correction that re-evaluates the diffusion in the post-jump chain
//! state against the Brownian motion accrued after the jump:
//!
//! ```text
//! x+ = x + b^n(x, a) h + sum_l sigma_l(x, a) dW_l
//!        + sum_{l,l1} Dsigma_l(x, a) sigma_l1(x, a) I[l1][l]
//!        + 1{N=1} sum_l (sigma_l(x, a') - sigma_l(x, a)) (W_end - W_tau1)_l
//! ```
//!
//! Both diffusion arguments of the correction use the pre-step state `x`;
//! only the chain state changes. Baselines (tamed and plain Euler-Maruyama),
//! an ablated map without the correction, and a fine-grid reference driver
//! whose step points include every chain jump time complete the set.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ChainError, ChainPath};
use crate::model::ModelSpec;
use crate::noise::{
    iterated_integrals_with_ratio, BrownianGrid, IteratedIntegrals, IteratedMode, NoiseError,
};

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error("single-jump step is missing its bridge value")]
    MissingBridgeValue,
    #[error("invalid step inputs: {0}")]
    InvalidInputs(String),
    #[error("commutative step requested on a model not declared commutative")]
    NotCommutative,
    #[error("step h={h} violates h < 1/(2q) = {limit}")]
    StepTooLarge { h: f64, limit: f64 },
    #[error("chain horizon {chain} does not match noise horizon {noise}")]
    HorizonMismatch { chain: f64, noise: f64 },
    #[error("n*T = {product} is not an integer number of steps")]
    FractionalSteps { product: f64 },
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

/// Identifier of a one-step map, also the config-file vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeId {
    TamedMilstein,
    CommutativeMilstein,
    AblatedMilstein,
    TamedEm,
    Em,
    Reference,
}

impl SchemeId {
    pub const ALL: [SchemeId; 6] = [
        SchemeId::TamedMilstein,
        SchemeId::CommutativeMilstein,
        SchemeId::AblatedMilstein,
        SchemeId::TamedEm,
        SchemeId::Em,
        SchemeId::Reference,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeId::TamedMilstein => "tamed_milstein",
            SchemeId::CommutativeMilstein => "commutative_milstein",
            SchemeId::AblatedMilstein => "ablated_milstein",
            SchemeId::TamedEm => "tamed_em",
            SchemeId::Em => "em",
            SchemeId::Reference => "reference",
        }
    }
}

impl std::fmt::Display for SchemeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SchemeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchemeId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| format!("unknown scheme `{s}`"))
    }
}

/// Everything one step consumes: no information beyond the step's right
/// endpoint enters.
#[derive(Debug, Clone)]
pub struct StepInputs {
    /// Current state `X^n_{t_k}`.
    pub x: Vec<f64>,
    /// Chain state at the step start.
    pub state_now: usize,
    /// Chain state at the step end.
    pub state_next: usize,
    pub dt: f64,
    /// Coarse Brownian increment over the step.
    pub dw: Vec<f64>,
    pub iterated: IteratedIntegrals,
    /// Chain jumps strictly inside the step.
    pub jump_count: usize,
    /// `W_{t_{k+1}} - W_{tau_1}`, present iff `jump_count == 1`.
    pub w_after_first_jump: Option<Vec<f64>>,
}

impl StepInputs {
    fn validate(&self) -> Result<(), SchemeError> {
        if !self.dt.is_finite() || self.dt <= 0.0 {
            return Err(SchemeError::InvalidInputs(format!(
                "dt = {} must be > 0",
                self.dt
            )));
        }
        match (&self.w_after_first_jump, self.jump_count) {
            (None, 1) => Err(SchemeError::MissingBridgeValue),
            (Some(_), n) if n != 1 => Err(SchemeError::InvalidInputs(format!(
                "bridge value present but jump count is {n}"
            ))),
            _ => Ok(()),
        }
    }
}

/// A realized discrete trajectory on the scheme's grid.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub scheme: SchemeId,
    /// Steps per unit time.
    pub steps_per_unit: usize,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub chain_states: Vec<usize>,
    /// Index of the first non-finite state, if the trajectory blew up; the
    /// last finite value is frozen from there on.
    pub blew_up: Option<usize>,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.values
            .last()
            .expect("trajectory has at least the initial value")
    }
}

/// Driver options; the defaults are what production runs use.
#[derive(Debug, Clone)]
pub struct SimOptions {
    /// Off-diagonal treatment of the iterated integrals; `ExactDiagonal` is
    /// valid under commutative noise, `FineSum` otherwise.
    pub iterated_mode: IteratedMode,
    /// Sub-increments per coarse step for the `FineSum` off-diagonal sum;
    /// `None` uses every available fine step.
    pub levy_ratio: Option<usize>,
    /// Taming-index override for consistency-ladder tests only; production
    /// runs tame with the grid's own n.
    pub n_tame: Option<f64>,
    /// Generator intensity bound `q` for the step constraint `h < 1/(2q)`;
    /// zero skips the check.
    pub max_rate: f64,
    /// Initial value override, used by harnesses that draw a random initial
    /// value once per sample and share it across schemes.
    pub initial_override: Option<Vec<f64>>,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            iterated_mode: IteratedMode::ExactDiagonal,
            levy_ratio: None,
            n_tame: None,
            max_rate: 0.0,
            initial_override: None,
        }
    }
}

fn matvec(mat: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..d {
        for j in 0..d {
            out[i] += mat[i * d + j] * v[j];
        }
    }
    out
}

/// Shared arithmetic of the Milstein-type maps.
#[allow(clippy::needless_range_loop)]
fn milstein_core(
    spec: &ModelSpec,
    n_tame: f64,
    input: &StepInputs,
    iterated: &IteratedIntegrals,
    with_correction: bool,
) -> Result<Vec<f64>, SchemeError> {
    input.validate()?;
    let d = spec.dim_state;
    let m = spec.dim_noise;
    let x = &input.x;
    let mut out = x.clone();

    let bn = spec.tamed_drift(n_tame, x, input.state_now);
    for i in 0..d {
        out[i] += bn[i] * input.dt;
    }

    let cols: Vec<Vec<f64>> = (0..m)
        .map(|l| spec.diffusion_column(x, l, input.state_now))
        .collect();
    for l in 0..m {
        for i in 0..d {
            out[i] += cols[l][i] * input.dw[l];
        }
    }

    let jacs: Vec<Vec<f64>> = (0..m)
        .map(|l| spec.diffusion_jacobian(x, l, input.state_now))
        .collect();
    for l in 0..m {
        for l1 in 0..m {
            let prod = matvec(&jacs[l], &cols[l1], d);
            let weight = iterated.get(l1, l);
            for i in 0..d {
                out[i] += prod[i] * weight;
            }
        }
    }

    if with_correction && input.jump_count == 1 {
        let w_after = input
            .w_after_first_jump
            .as_ref()
            .ok_or(SchemeError::MissingBridgeValue)?;
        for l in 0..m {
            let new_col = spec.diffusion_column(x, l, input.state_next);
            for i in 0..d {
                out[i] += (new_col[i] - cols[l][i]) * w_after[l];
            }
        }
    }
    Ok(out)
}

/// Full tamed Milstein-type step, jump correction included.
pub fn tamed_milstein_step(
    spec: &ModelSpec,
    n_tame: f64,
    input: &StepInputs,
) -> Result<Vec<f64>, SchemeError> {
    milstein_core(spec, n_tame, input, &input.iterated, true)
}

/// Tamed Milstein step with the iterated integrals collapsed to the closed
/// commutative form `(dW_l1 dW_l - 1{l=l1} h)/2`.
pub fn commutative_milstein_step(
    spec: &ModelSpec,
    n_tame: f64,
    input: &StepInputs,
) -> Result<Vec<f64>, SchemeError> {
    if !spec.commutative {
        return Err(SchemeError::NotCommutative);
    }
    let closed = IteratedIntegrals::closed_form(input.iterated.step_index, &input.dw, input.dt);
    milstein_core(spec, n_tame, input, &closed, true)
}

/// Tamed Milstein step without the jump-correction term.
pub fn ablated_milstein_step(
    spec: &ModelSpec,
    n_tame: f64,
    input: &StepInputs,
) -> Result<Vec<f64>, SchemeError> {
    milstein_core(spec, n_tame, input, &input.iterated, false)
}

/// Tamed Euler-Maruyama step.
pub fn tamed_em_step(spec: &ModelSpec, n_tame: f64, input: &StepInputs) -> Vec<f64> {
    em_like_step(
        spec,
        input,
        spec.tamed_drift(n_tame, &input.x, input.state_now),
    )
}

/// Plain Euler-Maruyama step (raw drift; blows up under super-linear drift).
pub fn em_step(spec: &ModelSpec, input: &StepInputs) -> Vec<f64> {
    em_like_step(spec, input, spec.drift(&input.x, input.state_now))
}

fn em_like_step(spec: &ModelSpec, input: &StepInputs, b: Vec<f64>) -> Vec<f64> {
    let d = spec.dim_state;
    let mut out = input.x.clone();
    for i in 0..d {
        out[i] += b[i] * input.dt;
    }
    for l in 0..spec.dim_noise {
        let col = spec.diffusion_column(&input.x, l, input.state_now);
        for i in 0..d {
            out[i] += col[i] * input.dw[l];
        }
    }
    out
}

fn apply(
    scheme: SchemeId,
    spec: &ModelSpec,
    n_tame: f64,
    input: &StepInputs,
) -> Result<Vec<f64>, SchemeError> {
    match scheme {
        SchemeId::TamedMilstein | SchemeId::Reference => tamed_milstein_step(spec, n_tame, input),
        SchemeId::CommutativeMilstein => commutative_milstein_step(spec, n_tame, input),
        SchemeId::AblatedMilstein => ablated_milstein_step(spec, n_tame, input),
        SchemeId::TamedEm => Ok(tamed_em_step(spec, n_tame, input)),
        SchemeId::Em => Ok(em_step(spec, input)),
    }
}

fn steps_for(n: usize, horizon: f64) -> Result<usize, SchemeError> {
    let product = n as f64 * horizon;
    let total = product.round();
    if total < 1.0 || (product - total).abs() > 1e-9 {
        return Err(SchemeError::FractionalSteps { product });
    }
    Ok(total as usize)
}

/// Drive the chosen one-step map over the coarse grid with `n` steps per
/// unit time, consuming the shared chain path and Brownian grid.
///
/// The per-step bridge query (only when exactly one jump falls inside the
/// step) is bracketed by the fine grid, so every resolution sees one
/// consistent Brownian world. The first non-finite state freezes the
/// trajectory and sets the blow-up flag.
pub fn simulate<R: Rng>(
    spec: &ModelSpec,
    scheme: SchemeId,
    n: usize,
    chain: &ChainPath,
    noise: &mut BrownianGrid,
    opts: &SimOptions,
    bridge_rng: &mut R,
) -> Result<Trajectory, SchemeError> {
    if scheme == SchemeId::Reference {
        return reference_solution(spec, n, chain, noise, opts, bridge_rng);
    }
    let horizon = chain.horizon();
    if noise.horizon() != horizon {
        return Err(SchemeError::HorizonMismatch {
            chain: horizon,
            noise: noise.horizon(),
        });
    }
    let total = steps_for(n, horizon)?;
    if !noise.n_fine().is_multiple_of(total) {
        return Err(NoiseError::GridMismatch {
            coarse: total,
            fine: noise.n_fine(),
        }
        .into());
    }
    let ratio = noise.n_fine() / total;
    let h = horizon / total as f64;
    check_step(h, opts.max_rate)?;
    let levy_ratio = effective_levy_ratio(opts, ratio);

    let n_tame = opts.n_tame.unwrap_or(n as f64);
    let mut x = initial_value(spec, opts, bridge_rng);
    let mut times = Vec::with_capacity(total + 1);
    let mut values = Vec::with_capacity(total + 1);
    let mut chain_states = Vec::with_capacity(total + 1);
    times.push(0.0);
    values.push(x.clone());
    chain_states.push(chain.state_at(0.0)?);
    let mut blew_up = None;

    for k in 0..total {
        let t_k = k as f64 * h;
        let t_k1 = if k + 1 == total {
            horizon
        } else {
            (k + 1) as f64 * h
        };
        let (jump_count, first_jump) = chain.interval_jump_info(t_k, t_k1)?;
        let state_now = chain.state_at(t_k)?;
        let state_next = chain.state_at(t_k1)?;
        let dw = noise.coarse_increment(total, k)?;
        let iterated =
            iterated_integrals_with_ratio(noise, total, k, opts.iterated_mode, levy_ratio)?;
        let w_after_first_jump = match (jump_count, first_jump) {
            (1, Some(tau)) => {
                let w_end = noise.value_at_index((k + 1) * ratio).to_vec();
                let w_tau = noise.value_at(tau, bridge_rng)?;
                Some(w_end.iter().zip(&w_tau).map(|(a, b)| a - b).collect())
            }
            _ => None,
        };
        let input = StepInputs {
            x: x.clone(),
            state_now,
            state_next,
            dt: h,
            dw,
            iterated,
            jump_count,
            w_after_first_jump,
        };
        let next = apply(scheme, spec, n_tame, &input)?;
        if next.iter().any(|v| !v.is_finite()) {
            blew_up = Some(k + 1);
            for kk in (k + 1)..=total {
                times.push(if kk == total { horizon } else { kk as f64 * h });
                values.push(x.clone());
                chain_states.push(chain.state_at((kk as f64 * h).min(horizon))?);
            }
            break;
        }
        x = next;
        times.push(t_k1);
        values.push(x.clone());
        chain_states.push(state_next);
    }

    Ok(Trajectory {
        scheme,
        steps_per_unit: n,
        times,
        values,
        chain_states,
        blew_up,
    })
}

/// Fine-grid proxy for the true solution: tamed Milstein on the union of the
/// uniform `n_ref` grid and every chain jump time, so no step contains a
/// jump in its interior and the switch is in force from the exact jump
/// boundary on. Values are reported at the uniform grid points.
pub fn reference_solution<R: Rng>(
    spec: &ModelSpec,
    n_ref: usize,
    chain: &ChainPath,
    noise: &mut BrownianGrid,
    opts: &SimOptions,
    bridge_rng: &mut R,
) -> Result<Trajectory, SchemeError> {
    let horizon = chain.horizon();
    if noise.horizon() != horizon {
        return Err(SchemeError::HorizonMismatch {
            chain: horizon,
            noise: noise.horizon(),
        });
    }
    let total = steps_for(n_ref, horizon)?;
    if !noise.n_fine().is_multiple_of(total) {
        return Err(NoiseError::GridMismatch {
            coarse: total,
            fine: noise.n_fine(),
        }
        .into());
    }
    let ratio = noise.n_fine() / total;
    let h = horizon / total as f64;
    check_step(h, opts.max_rate)?;

    let n_tame = opts.n_tame.unwrap_or(n_ref as f64);
    let mut x = initial_value(spec, opts, bridge_rng);
    let mut times = Vec::with_capacity(total + 1);
    let mut values = Vec::with_capacity(total + 1);
    let mut chain_states = Vec::with_capacity(total + 1);
    times.push(0.0);
    values.push(x.clone());
    chain_states.push(chain.state_at(0.0)?);
    let mut blew_up = None;

    'outer: for k in 0..total {
        let t_k = k as f64 * h;
        let t_k1 = if k + 1 == total {
            horizon
        } else {
            (k + 1) as f64 * h
        };
        // Union sub-steps: fine boundaries plus the jump times inside.
        let (_, _) = chain.interval_jump_info(t_k, t_k1)?;
        let jumps: Vec<f64> = chain
            .jump_times()
            .iter()
            .copied()
            .filter(|&tau| tau > t_k && tau < t_k1)
            .collect();
        let mut a = t_k;
        let mut w_a = noise.value_at_index(k * ratio).to_vec();
        for (idx, &b) in jumps.iter().chain(std::iter::once(&t_k1)).enumerate() {
            let is_last = idx == jumps.len();
            let w_b = if is_last {
                noise.value_at_index((k + 1) * ratio).to_vec()
            } else {
                noise.value_at(b, bridge_rng)?
            };
            let dt = b - a;
            if dt > 0.0 {
                let dw: Vec<f64> = w_b.iter().zip(&w_a).map(|(u, v)| u - v).collect();
                let iterated = IteratedIntegrals::closed_form(k, &dw, dt);
                let input = StepInputs {
                    x: x.clone(),
                    state_now: chain.state_at(a)?,
                    state_next: chain.state_at(b)?,
                    dt,
                    dw,
                    iterated,
                    jump_count: 0,
                    w_after_first_jump: None,
                };
                let next = tamed_milstein_step(spec, n_tame, &input)?;
                if next.iter().any(|v| !v.is_finite()) {
                    blew_up = Some(k + 1);
                    for kk in (k + 1)..=total {
                        times.push(if kk == total { horizon } else { kk as f64 * h });
                        values.push(x.clone());
                        chain_states.push(chain.state_at((kk as f64 * h).min(horizon))?);
                    }
                    break 'outer;
                }
                x = next;
            }
            a = b;
            w_a = w_b;
        }
        times.push(t_k1);
        values.push(x.clone());
        chain_states.push(chain.state_at(t_k1)?);
    }

    Ok(Trajectory {
        scheme: SchemeId::Reference,
        steps_per_unit: n_ref,
        times,
        values,
        chain_states,
        blew_up,
    })
}

fn check_step(h: f64, max_rate: f64) -> Result<(), SchemeError> {
    if max_rate > 0.0 {
        let limit = 1.0 / (2.0 * max_rate);
        if h >= limit {
            return Err(SchemeError::StepTooLarge { h, limit });
        }
    }
    Ok(())
}

fn effective_levy_ratio(opts: &SimOptions, available: usize) -> usize {
    match opts.levy_ratio {
        Some(r) => r.min(available),
        None => available,
    }
}

fn initial_value<R: Rng>(spec: &ModelSpec, opts: &SimOptions, rng: &mut R) -> Vec<f64> {
    match &opts.initial_override {
        Some(x) => x.clone(),
        None => spec.initial_point(rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{sample_chain_path, GeneratorMatrix};
    use crate::model::{m1, m2, InitialValue, ModelSpec};
    use crate::noise::generate_brownian;
    use crate::seed::{stream, StreamRole};
    use std::sync::Arc;

    fn unit_iterated(dw: &[f64], dt: f64) -> IteratedIntegrals {
        IteratedIntegrals::closed_form(0, dw, dt)
    }

    #[test]
    fn hand_evaluated_step() {
        // Scalar switching model with b(x,0) = x - x^3, sigma(x,0) = 0.4x,
        // sigma(x,1) = 0.3x + 0.1, rho = 2. At x = 1, chain 0 -> 1, N = 1,
        // h = 0.25, dW = 0.1, bridge 0.04, n = 4: drift 0, diffusion 0.04,
        // Milstein 0.16 * (-0.12) = -0.0192, correction
        // (sigma(1,1) - sigma(1,0)) * 0.04 = 0. Total 1.0208.
        let spec = ModelSpec::new(
            "hand",
            1,
            1,
            2,
            2.0,
            true,
            true,
            InitialValue::Point(vec![1.0]),
            Arc::new(|x: &[f64], i0: usize| {
                let x = x[0];
                vec![if i0 == 0 {
                    x - x * x * x
                } else {
                    -2.0 * x - x * x * x
                }]
            }),
            Arc::new(|x: &[f64], _l, i0: usize| {
                let x = x[0];
                vec![if i0 == 0 { 0.4 * x } else { 0.3 * x + 0.1 }]
            }),
            Arc::new(|x: &[f64], i0: usize| {
                let x = x[0];
                vec![if i0 == 0 {
                    1.0 - 3.0 * x * x
                } else {
                    -2.0 - 3.0 * x * x
                }]
            }),
            Arc::new(|_x: &[f64], _l, i0: usize| vec![if i0 == 0 { 0.4 } else { 0.3 }]),
        );
        let input = StepInputs {
            x: vec![1.0],
            state_now: 0,
            state_next: 1,
            dt: 0.25,
            dw: vec![0.1],
            iterated: unit_iterated(&[0.1], 0.25),
            jump_count: 1,
            w_after_first_jump: Some(vec![0.04]),
        };
        let out = tamed_milstein_step(&spec, 4.0, &input).unwrap();
        assert!((out[0] - 1.0208).abs() < 1e-14, "got {}", out[0]);
        let out = commutative_milstein_step(&spec, 4.0, &input).unwrap();
        assert!((out[0] - 1.0208).abs() < 1e-14, "got {}", out[0]);

        // Catalog M1 has sigma(x,1) = 0.3x - 0.6, so the correction becomes
        // (0.3 - 0.6 - 0.4) * 0.04 = -0.028 and the total 0.9928.
        let (m1, _) = m1();
        let out = tamed_milstein_step(&m1, 4.0, &input).unwrap();
        assert!((out[0] - 0.9928).abs() < 1e-14, "got {}", out[0]);
    }

    #[test]
    fn all_terms_vanish_without_motion() {
        let zero = ModelSpec::new(
            "zero",
            1,
            1,
            1,
            0.0,
            true,
            false,
            InitialValue::Point(vec![0.5]),
            Arc::new(|_: &[f64], _| vec![0.0]),
            Arc::new(|_: &[f64], _, _| vec![0.0]),
            Arc::new(|_: &[f64], _| vec![0.0]),
            Arc::new(|_: &[f64], _, _| vec![0.0]),
        );
        let input = StepInputs {
            x: vec![0.5],
            state_now: 0,
            state_next: 0,
            dt: 0.25,
            dw: vec![0.0],
            iterated: unit_iterated(&[0.0], 0.25),
            jump_count: 0,
            w_after_first_jump: None,
        };
        let out = tamed_milstein_step(&zero, 4.0, &input).unwrap();
        assert_eq!(out, vec![0.5]);
    }

    #[test]
    fn constant_sigma_reduces_to_tamed_em() {
        let additive = ModelSpec::new(
            "additive",
            1,
            1,
            2,
            2.0,
            true,
            false,
            InitialValue::Point(vec![1.0]),
            Arc::new(|x: &[f64], _| vec![x[0] - x[0].powi(3)]),
            Arc::new(|_: &[f64], _, _| vec![0.7]),
            Arc::new(|x: &[f64], _| vec![1.0 - 3.0 * x[0] * x[0]]),
            Arc::new(|_: &[f64], _, _| vec![0.0]),
        );
        let input = StepInputs {
            x: vec![0.8],
            state_now: 0,
            state_next: 0,
            dt: 0.125,
            dw: vec![-0.21],
            iterated: unit_iterated(&[-0.21], 0.125),
            jump_count: 0,
            w_after_first_jump: None,
        };
        let mil = tamed_milstein_step(&additive, 8.0, &input).unwrap();
        let em = tamed_em_step(&additive, 8.0, &input);
        assert_eq!(mil, em);
    }

    #[test]
    fn missing_bridge_value_is_rejected() {
        let (spec, _) = m1();
        let input = StepInputs {
            x: vec![1.0],
            state_now: 0,
            state_next: 1,
            dt: 0.25,
            dw: vec![0.1],
            iterated: unit_iterated(&[0.1], 0.25),
            jump_count: 1,
            w_after_first_jump: None,
        };
        assert!(matches!(
            tamed_milstein_step(&spec, 4.0, &input),
            Err(SchemeError::MissingBridgeValue)
        ));
    }

    #[test]
    fn commutative_step_requires_the_flag() {
        let (mut spec, _) = m1();
        spec.commutative = false;
        let input = StepInputs {
            x: vec![1.0],
            state_now: 0,
            state_next: 0,
            dt: 0.25,
            dw: vec![0.1],
            iterated: unit_iterated(&[0.1], 0.25),
            jump_count: 0,
            w_after_first_jump: None,
        };
        assert!(matches!(
            commutative_milstein_step(&spec, 4.0, &input),
            Err(SchemeError::NotCommutative)
        ));
    }

    #[test]
    fn ablation_differs_exactly_by_the_correction_term() {
        let (spec, _) = m1();
        let input = StepInputs {
            x: vec![1.4],
            state_now: 0,
            state_next: 1,
            dt: 0.25,
            dw: vec![0.1],
            iterated: unit_iterated(&[0.1], 0.25),
            jump_count: 1,
            w_after_first_jump: Some(vec![0.03]),
        };
        let full = tamed_milstein_step(&spec, 4.0, &input).unwrap();
        let ablated = ablated_milstein_step(&spec, 4.0, &input).unwrap();
        let sig_new = spec.diffusion_column(&[1.4], 0, 1)[0];
        let sig_old = spec.diffusion_column(&[1.4], 0, 0)[0];
        let correction = (sig_new - sig_old) * 0.03;
        assert!((full[0] - ablated[0] - correction).abs() < 1e-15);

        // No jump: identical.
        let mut no_jump = input.clone();
        no_jump.jump_count = 0;
        no_jump.w_after_first_jump = None;
        assert_eq!(
            tamed_milstein_step(&spec, 4.0, &no_jump).unwrap(),
            ablated_milstein_step(&spec, 4.0, &no_jump).unwrap()
        );
    }

    #[test]
    fn dw_zero_no_jump_step_is_minus_half_h_milstein() {
        // dW = 0 with the closed-form I forces x - (h/2) sum_l Dsigma sigma.
        let (spec, _) = m1();
        let x = 1.3;
        let h = 0.25;
        let input = StepInputs {
            x: vec![x],
            state_now: 0,
            state_next: 0,
            dt: h,
            dw: vec![0.0],
            iterated: unit_iterated(&[0.0], h),
            jump_count: 0,
            w_after_first_jump: None,
        };
        let out = commutative_milstein_step(&spec, f64::INFINITY, &input).unwrap();
        // Taming disabled; drift b(x, 0) h still contributes.
        let b = spec.drift(&[x], 0)[0];
        let dss = 0.4 * (0.4 * x);
        assert!((out[0] - (x + b * h - 0.5 * h * dss)).abs() < 1e-15);
    }

    #[test]
    fn tamed_and_plain_em_agree_in_the_untamed_limit() {
        let (spec, _) = m1();
        let input = StepInputs {
            x: vec![1.9],
            state_now: 1,
            state_next: 1,
            dt: 0.0625,
            dw: vec![0.33],
            iterated: unit_iterated(&[0.33], 0.0625),
            jump_count: 0,
            w_after_first_jump: None,
        };
        let tamed = tamed_em_step(&spec, f64::INFINITY, &input);
        let plain = em_step(&spec, &input);
        assert_eq!(tamed, plain);

        // At finite n the gap obeys |b| |x|^(2 rho) h / n.
        let n = 1024.0;
        let tamed = tamed_em_step(&spec, n, &input);
        let b = spec.drift(&[1.9], 1)[0];
        let bound = b.abs() * 1.9_f64.powi(4) * input.dt / n;
        assert!((tamed[0] - plain[0]).abs() <= bound + 1e-15);
    }

    #[test]
    fn plain_em_blows_up_from_large_initial_value() {
        // Deterministic overshoot oracle: x -> x + h (x - x^3) from x = 10
        // grows in magnitude every step and overflows.
        let spec = m1().0.with_initial_point(vec![10.0]);
        let gen = GeneratorMatrix::validate(vec![vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let mut chain_rng = stream(50, 0, StreamRole::Chain);
        let chain = sample_chain_path(&gen, 0, 1.0, &mut chain_rng).unwrap();
        let mut noise_rng = stream(50, 0, StreamRole::Brownian);
        let mut noise = generate_brownian(1, 1.0, 64, &mut noise_rng).unwrap();
        // Zero the noise so the iteration is the pure drift map.
        noise.zero_for_tests();
        let mut bridge_rng = stream(50, 0, StreamRole::Bridge);
        let opts = SimOptions::default();
        let traj = simulate(
            &spec,
            SchemeId::Em,
            16,
            &chain,
            &mut noise,
            &opts,
            &mut bridge_rng,
        )
        .unwrap();
        assert!(traj.blew_up.is_some());
        let mags: Vec<f64> = traj.values.iter().map(|v| v[0].abs()).collect();
        let bad = traj.blew_up.unwrap();
        for k in 0..bad.min(5) {
            assert!(mags[k + 1] > mags[k], "magnitude should grow: {mags:?}");
        }
        // The tamed scheme on the same inputs stays finite.
        let mut bridge_rng = stream(50, 0, StreamRole::Bridge);
        let traj = simulate(
            &spec,
            SchemeId::TamedMilstein,
            16,
            &chain,
            &mut noise,
            &opts,
            &mut bridge_rng,
        )
        .unwrap();
        assert!(traj.blew_up.is_none());
    }

    #[test]
    fn zero_generator_chain_matches_switch_free_driver() {
        // With a frozen chain the trajectory must equal a hand-rolled
        // no-switching tamed Milstein driven by the same increments.
        let (spec, _) = m1();
        let gen = GeneratorMatrix::validate(vec![vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let mut chain_rng = stream(51, 0, StreamRole::Chain);
        let chain = sample_chain_path(&gen, 0, 1.0, &mut chain_rng).unwrap();
        let mut noise_rng = stream(51, 0, StreamRole::Brownian);
        let mut noise = generate_brownian(1, 1.0, 256, &mut noise_rng).unwrap();
        let mut bridge_rng = stream(51, 0, StreamRole::Bridge);
        let n = 64;
        let traj = simulate(
            &spec,
            SchemeId::TamedMilstein,
            n,
            &chain,
            &mut noise,
            &SimOptions::default(),
            &mut bridge_rng,
        )
        .unwrap();

        let h = 1.0 / n as f64;
        let mut x = 1.0;
        for k in 0..n {
            let dw = noise.coarse_increment(n, k).unwrap()[0];
            let bn = spec.tamed_drift(n as f64, &[x], 0)[0];
            let sig = spec.diffusion_column(&[x], 0, 0)[0];
            let dsig = spec.diffusion_jacobian(&[x], 0, 0)[0];
            x = x + bn * h + sig * dw + dsig * sig * (dw * dw - h) / 2.0;
            assert!(
                (traj.values[k + 1][0] - x).abs() < 1e-14,
                "mismatch at step {k}"
            );
        }
    }

    #[test]
    fn m2_terminal_error_decays_at_first_order() {
        // Exact occupation-time solution as oracle; errors on dyadic n fall
        // roughly like 1/n.
        let (spec, gen) = m2();
        let mut errs = Vec::new();
        for (i, n) in [16usize, 64, 256].into_iter().enumerate() {
            let mut err_sum = 0.0;
            let paths = 200;
            for s in 0..paths {
                let mut chain_rng = stream(52 + i as u64, s, StreamRole::Chain);
                let chain = sample_chain_path(&gen, 0, 1.0, &mut chain_rng).unwrap();
                let mut noise_rng = stream(52 + i as u64, s, StreamRole::Brownian);
                let mut noise = generate_brownian(1, 1.0, n, &mut noise_rng).unwrap();
                let mut bridge_rng = stream(52 + i as u64, s, StreamRole::Bridge);
                let traj = simulate(
                    &spec,
                    SchemeId::TamedMilstein,
                    n,
                    &chain,
                    &mut noise,
                    &SimOptions {
                        max_rate: gen.q_max(),
                        ..SimOptions::default()
                    },
                    &mut bridge_rng,
                )
                .unwrap();
                let occ = chain.occupation_times(2, 1.0).unwrap();
                let exact =
                    (crate::model::M2_RATES[0] * occ[0] + crate::model::M2_RATES[1] * occ[1]).exp();
                err_sum += (traj.terminal()[0] - exact).powi(2);
            }
            errs.push((err_sum / paths as f64).sqrt());
        }
        // Order ~1: quadrupling n divides the error by roughly 4.
        let r1 = errs[0] / errs[1];
        let r2 = errs[1] / errs[2];
        assert!(r1 > 2.5 && r1 < 6.5, "ratios {errs:?}");
        assert!(r2 > 2.5 && r2 < 6.5, "ratios {errs:?}");
    }

    #[test]
    fn reference_without_jumps_coincides_with_simulate() {
        let (spec, _) = m1();
        let gen = GeneratorMatrix::validate(vec![vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let mut chain_rng = stream(53, 0, StreamRole::Chain);
        let chain = sample_chain_path(&gen, 1, 1.0, &mut chain_rng).unwrap();
        let mut noise_rng = stream(53, 0, StreamRole::Brownian);
        let mut noise = generate_brownian(1, 1.0, 128, &mut noise_rng).unwrap();
        let mut bridge_rng = stream(53, 0, StreamRole::Bridge);
        let opts = SimOptions::default();
        let refr =
            reference_solution(&spec, 128, &chain, &mut noise, &opts, &mut bridge_rng).unwrap();
        let mut bridge_rng = stream(53, 0, StreamRole::Bridge);
        let sim = simulate(
            &spec,
            SchemeId::TamedMilstein,
            128,
            &chain,
            &mut noise,
            &opts,
            &mut bridge_rng,
        )
        .unwrap();
        for (a, b) in refr.values.iter().zip(&sim.values) {
            assert!((a[0] - b[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn reference_matches_m2_exact_solution_closely() {
        let (spec, gen) = m2();
        let n_ref = 8192;
        let mut chain_rng = stream(12, 0, StreamRole::Chain);
        let chain = sample_chain_path(&gen, 0, 1.0, &mut chain_rng).unwrap();
        assert!(
            chain.num_jumps() > 0,
            "want a switching path for this check"
        );
        let mut noise_rng = stream(12, 0, StreamRole::Brownian);
        let mut noise = generate_brownian(1, 1.0, n_ref, &mut noise_rng).unwrap();
        let mut bridge_rng = stream(12, 0, StreamRole::Bridge);
        let opts = SimOptions {
            max_rate: gen.q_max(),
            ..SimOptions::default()
        };
        let refr =
            reference_solution(&spec, n_ref, &chain, &mut noise, &opts, &mut bridge_rng).unwrap();
        let occ = chain.occupation_times(2, 1.0).unwrap();
        let exact = (crate::model::M2_RATES[0] * occ[0] + crate::model::M2_RATES[1] * occ[1]).exp();
        let rel = (refr.terminal()[0] - exact).abs() / exact;
        assert!(rel < 1e-3, "relative error {rel}");
    }

    #[test]
    fn fractional_step_counts_are_rejected() {
        let (spec, _) = m2();
        let gen = GeneratorMatrix::validate(vec![vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let mut chain_rng = stream(54, 0, StreamRole::Chain);
        let chain = sample_chain_path(&gen, 0, 1.5, &mut chain_rng).unwrap();
        let mut noise_rng = stream(54, 0, StreamRole::Brownian);
        let mut noise = generate_brownian(1, 1.5, 96, &mut noise_rng).unwrap();
        let mut bridge_rng = stream(54, 0, StreamRole::Bridge);
        // n = 3 over T = 1.5 gives 4.5 steps.
        let err = simulate(
            &spec,
            SchemeId::TamedMilstein,
            3,
            &chain,
            &mut noise,
            &SimOptions::default(),
            &mut bridge_rng,
        )
        .unwrap_err();
        assert!(matches!(err, SchemeError::FractionalSteps { .. }));
    }

    #[test]
    fn step_constraint_is_enforced() {
        let (spec, _) = m1();
        let gen = GeneratorMatrix::validate(vec![vec![-4.0, 4.0], vec![4.0, -4.0]]).unwrap();
        let mut chain_rng = stream(55, 0, StreamRole::Chain);
        let chain = sample_chain_path(&gen, 0, 1.0, &mut chain_rng).unwrap();
        let mut noise_rng = stream(55, 0, StreamRole::Brownian);
        let mut noise = generate_brownian(1, 1.0, 64, &mut noise_rng).unwrap();
        let mut bridge_rng = stream(55, 0, StreamRole::Bridge);
        let opts = SimOptions {
            max_rate: gen.q_max(),
            ..SimOptions::default()
        };
        // h = 1/4 >= 1/(2*4) = 1/8.
        let err = simulate(
            &spec,
            SchemeId::TamedMilstein,
            4,
            &chain,
            &mut noise,
            &opts,
            &mut bridge_rng,
        )
        .unwrap_err();
        assert!(matches!(err, SchemeError::StepTooLarge { .. }));
    }
}
