//! Problem definitions: coefficients, their first derivatives, drift taming,
//! and sampled verification of the structural assumptions the convergence
//! analysis rests on.
//!
//! A [`ModelSpec`] bundles the drift `b(x, i0)`, the diffusion columns
//! `sigma^(l)(x, i0)`, their Jacobians, the growth exponent `rho`, and the
//! initial condition. The tamed drift used by every explicit scheme is
//! `b^n = b / (1 + |x|^(2 rho) / n)`, which keeps one-step maps stable under
//! super-linear drift growth and deviates from `b` only at order `1/n`.
//!
//! Assumption checking is sampling-based and advisory: it reports the
//! smallest constants making each inequality hold on random points and flags
//! an assumption only when its constant diverges as the sample box grows.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::Serialize;

use crate::chain::GeneratorMatrix;

type VecFn = Arc<dyn Fn(&[f64], usize) -> Vec<f64> + Send + Sync>;
type ColFn = Arc<dyn Fn(&[f64], usize, usize) -> Vec<f64> + Send + Sync>;
type SamplerFn = Arc<dyn Fn(&mut dyn RngCore) -> Vec<f64> + Send + Sync>;

/// Initial condition for the state process.
#[derive(Clone)]
pub enum InitialValue {
    /// Deterministic starting point (the default for every built-in model;
    /// sharing it across schemes satisfies the initial-coupling requirement
    /// exactly).
    Point(Vec<f64>),
    /// Random initial value drawn once per Monte Carlo sample.
    Sampled(SamplerFn),
}

impl fmt::Debug for InitialValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialValue::Point(x) => write!(f, "Point({x:?})"),
            InitialValue::Sampled(_) => write!(f, "Sampled(..)"),
        }
    }
}

/// An SDE-with-switching problem instance.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    /// State dimension d.
    pub dim_state: usize,
    /// Noise dimension m.
    pub dim_noise: usize,
    /// Chain state count m0.
    pub num_chain_states: usize,
    /// Drift-derivative growth exponent.
    pub rho: f64,
    /// Taming exponent; the shipped taming satisfies the growth and
    /// closeness conditions with `rho1 = 3 rho`.
    pub rho1: f64,
    /// Declared truth of the commutative condition
    /// `Dsigma^(l) sigma^(l1) = Dsigma^(l1) sigma^(l)`.
    pub commutative: bool,
    /// Whether any diffusion column actually depends on the chain state
    /// (drives the jump-correction term; ablation is vacuous without it).
    pub sigma_state_dependent: bool,
    pub initial: InitialValue,
    pub initial_chain_state: usize,
    drift: VecFn,
    diffusion: ColFn,
    drift_jacobian: VecFn,
    diffusion_jacobian: ColFn,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("num_chain_states", &self.num_chain_states)
            .field("rho", &self.rho)
            .field("rho1", &self.rho1)
            .field("commutative", &self.commutative)
            .finish_non_exhaustive()
    }
}

#[allow(clippy::too_many_arguments)]
impl ModelSpec {
    /// Assemble a model from coefficient callables.
    ///
    /// `drift(x, i0)` and `drift_jacobian(x, i0)` return a d-vector and a
    /// row-major d x d matrix; `diffusion(x, l, i0)` and
    /// `diffusion_jacobian(x, l, i0)` the l-th column and its Jacobian.
    /// `rho1` is set to `3 rho`, matching the shipped taming.
    pub fn new(
        name: impl Into<String>,
        dim_state: usize,
        dim_noise: usize,
        num_chain_states: usize,
        rho: f64,
        commutative: bool,
        sigma_state_dependent: bool,
        initial: InitialValue,
        drift: VecFn,
        diffusion: ColFn,
        drift_jacobian: VecFn,
        diffusion_jacobian: ColFn,
    ) -> Self {
        assert!(dim_state >= 1 && dim_noise >= 1 && num_chain_states >= 1);
        assert!(rho >= 0.0);
        ModelSpec {
            name: name.into(),
            dim_state,
            dim_noise,
            num_chain_states,
            rho,
            rho1: 3.0 * rho,
            commutative,
            sigma_state_dependent,
            initial,
            initial_chain_state: 0,
            drift,
            diffusion,
            drift_jacobian,
            diffusion_jacobian,
        }
    }

    pub fn drift(&self, x: &[f64], state: usize) -> Vec<f64> {
        (self.drift)(x, state)
    }

    /// l-th diffusion column `sigma^(l)(x, i0)`.
    pub fn diffusion_column(&self, x: &[f64], l: usize, state: usize) -> Vec<f64> {
        (self.diffusion)(x, l, state)
    }

    /// Row-major d x d drift Jacobian.
    pub fn drift_jacobian(&self, x: &[f64], state: usize) -> Vec<f64> {
        (self.drift_jacobian)(x, state)
    }

    /// Row-major d x d Jacobian of the l-th diffusion column.
    pub fn diffusion_jacobian(&self, x: &[f64], l: usize, state: usize) -> Vec<f64> {
        (self.diffusion_jacobian)(x, l, state)
    }

    /// Tamed drift `b(x, i0) / (1 + |x|^(2 rho) / n)`.
    ///
    /// The taming index `n` is a float so the untamed limit can be emulated
    /// with `n = +inf` in consistency tests.
    pub fn tamed_drift(&self, n: f64, x: &[f64], state: usize) -> Vec<f64> {
        let norm = euclid(x);
        let denom = 1.0 + norm.powf(2.0 * self.rho) / n;
        let mut b = self.drift(x, state);
        for v in b.iter_mut() {
            *v /= denom;
        }
        b
    }

    /// Resolve the initial state value, drawing from `rng` when random.
    pub fn initial_point<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match &self.initial {
            InitialValue::Point(x) => x.clone(),
            InitialValue::Sampled(f) => f(rng),
        }
    }

    /// Replace the initial condition with a deterministic point.
    pub fn with_initial_point(mut self, x: Vec<f64>) -> Self {
        assert_eq!(x.len(), self.dim_state);
        self.initial = InitialValue::Point(x);
        self
    }
}

pub(crate) fn euclid(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
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

// ---------------------------------------------------------------------------
// Built-in catalog
// ---------------------------------------------------------------------------

/// Look up a built-in model (and its default generator) by name,
/// case-insensitively: `m1`, `m2`, `m3`.
pub fn builtin(name: &str) -> Option<(ModelSpec, GeneratorMatrix)> {
    match name.to_ascii_lowercase().as_str() {
        "m1" => Some(m1()),
        "m2" => Some(m2()),
        "m3" => Some(m3()),
        _ => None,
    }
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 3] = ["m1", "m2", "m3"];

fn symmetric_two_state() -> GeneratorMatrix {
    GeneratorMatrix::validate(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]).expect("valid generator")
}

/// M1: scalar cubic-drift model with switching drift and diffusion.
///
/// `b(x, 0) = x - x^3`, `b(x, 1) = -2x - x^3`; `sigma(x, 0) = 0.4 x`,
/// `sigma(x, 1) = 0.3 x - 0.6`; `rho = 2`. The workhorse rate experiment:
/// the drift grows super-linearly and the diffusion switches with the chain,
/// so the jump-correction term is active. The regime gap
/// `sigma(x, 1) - sigma(x, 0) = -0.1 x - 0.6` stays away from zero along
/// typical paths, which keeps the correction term's effect measurable at
/// desk scale (a gap that vanishes near the attractor would make the
/// ablation and the Euler baseline indistinguishable from the full scheme
/// until far smaller step sizes).
pub fn m1() -> (ModelSpec, GeneratorMatrix) {
    let spec = ModelSpec::new(
        "m1",
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
        Arc::new(|x: &[f64], _l: usize, i0: usize| {
            let x = x[0];
            vec![if i0 == 0 { 0.4 * x } else { 0.3 * x - 0.6 }]
        }),
        Arc::new(|x: &[f64], i0: usize| {
            let x = x[0];
            vec![if i0 == 0 {
                1.0 - 3.0 * x * x
            } else {
                -2.0 - 3.0 * x * x
            }]
        }),
        Arc::new(|_x: &[f64], _l: usize, i0: usize| vec![if i0 == 0 { 0.4 } else { 0.3 }]),
    );
    (spec, symmetric_two_state())
}

/// M2: pure-switching linear drift, zero diffusion.
///
/// `b(x, i) = a_i x` with `a = (1, -1)` and `sigma = 0`; the exact solution
/// `X_t = X_0 exp(int a_{alpha_s} ds)` follows from the chain's occupation
/// times, giving an independent oracle for trajectory error.
pub fn m2() -> (ModelSpec, GeneratorMatrix) {
    let spec = ModelSpec::new(
        "m2",
        1,
        1,
        2,
        0.0,
        true,
        false,
        InitialValue::Point(vec![1.0]),
        Arc::new(|x: &[f64], i0: usize| vec![M2_RATES[i0] * x[0]]),
        Arc::new(|_x: &[f64], _l: usize, _i0: usize| vec![0.0]),
        Arc::new(|_x: &[f64], i0: usize| vec![M2_RATES[i0]]),
        Arc::new(|_x: &[f64], _l: usize, _i0: usize| vec![0.0]),
    );
    (spec, symmetric_two_state())
}

/// Per-state drift rates of M2.
pub const M2_RATES: [f64; 2] = [1.0, -1.0];

/// M3: planar model with non-commutative noise and tamed cubic drift.
///
/// `sigma^(1)(x) = (x_2, 0)`, `sigma^(2)(x) = (0, x_1)` do not commute
/// (`Dsigma^(1) sigma^(2) = (x_1, 0)` vs `Dsigma^(2) sigma^(1) = (0, x_2)`),
/// exercising the Riemann-Ito Levy-area path and the d > 1 code paths.
pub fn m3() -> (ModelSpec, GeneratorMatrix) {
    let spec = ModelSpec::new(
        "m3",
        2,
        2,
        2,
        2.0,
        false,
        false,
        InitialValue::Point(vec![1.0, 1.0]),
        Arc::new(|x: &[f64], i0: usize| {
            let a = if i0 == 0 { 1.0 } else { -1.0 };
            let n2 = x[0] * x[0] + x[1] * x[1];
            vec![a * x[0] - n2 * x[0], a * x[1] - n2 * x[1]]
        }),
        Arc::new(|x: &[f64], l: usize, _i0: usize| {
            if l == 0 {
                vec![x[1], 0.0]
            } else {
                vec![0.0, x[0]]
            }
        }),
        Arc::new(|x: &[f64], i0: usize| {
            let a = if i0 == 0 { 1.0 } else { -1.0 };
            let n2 = x[0] * x[0] + x[1] * x[1];
            // D(a x - |x|^2 x) = a I - (|x|^2 I + 2 x x^T)
            vec![
                a - n2 - 2.0 * x[0] * x[0],
                -2.0 * x[0] * x[1],
                -2.0 * x[1] * x[0],
                a - n2 - 2.0 * x[1] * x[1],
            ]
        }),
        Arc::new(|_x: &[f64], l: usize, _i0: usize| {
            if l == 0 {
                vec![0.0, 1.0, 0.0, 0.0]
            } else {
                vec![0.0, 0.0, 1.0, 0.0]
            }
        }),
    );
    (spec, symmetric_two_state())
}

// ---------------------------------------------------------------------------
// Assumption checks
// ---------------------------------------------------------------------------

/// Axis-aligned sampling region for assumption checks.
#[derive(Debug, Clone, Serialize)]
pub struct SampleBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SampleBox {
    /// Cube `[-half_width, half_width]^d`.
    pub fn centered(dim: usize, half_width: f64) -> Self {
        SampleBox {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&a, &b)| a + (b - a) * rng.random::<f64>())
            .collect()
    }
}

/// Empirical constants making each assumption hold on the sampled points.
///
/// These are report-only surrogates for the existential constants of the
/// theory; an assumption is suspect when its constant keeps growing as the
/// box does (see [`AssumptionReport::diverging_versus`]).
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub sample_box: SampleBox,
    pub pairs: usize,
    /// Smallest L in `(x-y).(b(x)-b(y)) v |sigma(x)-sigma(y)|^2 <= L |x-y|^2`.
    pub one_sided_lipschitz: f64,
    /// Smallest L in `|Db(x)-Db(y)| <= L (1+|x|+|y|)^(rho-1) |x-y|`.
    pub drift_jacobian_growth: f64,
    /// Smallest L in `|Dsigma_l(x)-Dsigma_l(y)| <= L |x-y|`.
    pub diffusion_jacobian_lipschitz: f64,
    /// Smallest L in `x . b^n(x) <= L (1+|x|)^2`.
    pub taming_inner_product: f64,
    /// c1 in `|b^n| <= c1 sqrt(n) (1 + |x|)`.
    pub taming_root_n_growth: f64,
    /// c2 in `|b^n| <= c2 (1 + |x|)^(rho1 + 1)`.
    pub taming_polynomial_growth: f64,
    /// Smallest L in `|b - b^n| <= L n^-1 (1+|x|)^(rho1+1)`.
    pub taming_closeness: f64,
}

/// Assumption labels in report order.
pub const ASSUMPTION_NAMES: [&str; 7] = [
    "one-sided-lipschitz",
    "drift-jacobian-growth",
    "diffusion-jacobian-lipschitz",
    "taming-inner-product",
    "taming-root-n-growth",
    "taming-polynomial-growth",
    "taming-closeness",
];

impl AssumptionReport {
    fn constants(&self) -> [f64; 7] {
        [
            self.one_sided_lipschitz,
            self.drift_jacobian_growth,
            self.diffusion_jacobian_lipschitz,
            self.taming_inner_product,
            self.taming_root_n_growth,
            self.taming_polynomial_growth,
            self.taming_closeness,
        ]
    }

    /// Names of assumptions whose empirical constant grew by more than
    /// `factor` relative to a report on a smaller box.
    pub fn diverging_versus(&self, smaller: &AssumptionReport, factor: f64) -> Vec<&'static str> {
        let big = self.constants();
        let small = smaller.constants();
        ASSUMPTION_NAMES
            .iter()
            .zip(big.iter().zip(small.iter()))
            .filter(|(_, (b, s))| **b > factor * s.abs().max(1e-12))
            .map(|(name, _)| *name)
            .collect()
    }
}

/// Frobenius norm of a flat matrix.
fn frob(mat: &[f64]) -> f64 {
    euclid(mat)
}

/// Sample point pairs in `sample_box` and report the smallest constants
/// making the assumption inequalities hold, across all chain states and all
/// taming indices in `n_list`.
pub fn check_assumptions<R: Rng>(
    spec: &ModelSpec,
    sample_box: &SampleBox,
    sample_count: usize,
    n_list: &[usize],
    rng: &mut R,
) -> AssumptionReport {
    let d = spec.dim_state;
    let m = spec.dim_noise;
    assert_eq!(sample_box.lo.len(), d);
    assert!(sample_count >= 2);
    let mut one_sided_lipschitz = f64::NEG_INFINITY;
    let mut drift_jacobian_growth = 0.0_f64;
    let mut diffusion_jacobian_lipschitz = 0.0_f64;
    let mut taming_inner_product = f64::NEG_INFINITY;
    let mut taming_root_n_growth = 0.0_f64;
    let mut taming_polynomial_growth = 0.0_f64;
    let mut taming_closeness = 0.0_f64;

    for _ in 0..sample_count {
        let x = sample_box.sample(rng);
        let y = sample_box.sample(rng);
        let diff: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let dist_sq = diff.iter().map(|v| v * v).sum::<f64>();
        let dist = dist_sq.sqrt();
        let one_plus_x = 1.0 + euclid(&x);
        for i0 in 0..spec.num_chain_states {
            if dist > 1e-9 {
                // (x-y).(b(x)-b(y)) v |sigma(x)-sigma(y)|^2 <= L |x-y|^2
                let bx = spec.drift(&x, i0);
                let by = spec.drift(&y, i0);
                let inner: f64 = diff
                    .iter()
                    .zip(bx.iter().zip(&by))
                    .map(|(d, (a, b))| d * (a - b))
                    .sum();
                let mut sig_sq = 0.0;
                for l in 0..m {
                    let sx = spec.diffusion_column(&x, l, i0);
                    let sy = spec.diffusion_column(&y, l, i0);
                    sig_sq += sx
                        .iter()
                        .zip(&sy)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
                }
                one_sided_lipschitz = one_sided_lipschitz.max(inner.max(sig_sq) / dist_sq);

                // |Db(x)-Db(y)| <= L (1+|x|+|y|)^(rho-1) |x-y|
                let jx = spec.drift_jacobian(&x, i0);
                let jy = spec.drift_jacobian(&y, i0);
                let jdiff: Vec<f64> = jx.iter().zip(&jy).map(|(a, b)| a - b).collect();
                let weight =
                    (1.0 + euclid(&x) + euclid(&y)).powf(self_or_zero(spec.rho - 1.0)) * dist;
                drift_jacobian_growth = drift_jacobian_growth.max(frob(&jdiff) / weight);

                // |Dsigma^(l)(x)-Dsigma^(l)(y)| <= L |x-y|
                for l in 0..m {
                    let sx = spec.diffusion_jacobian(&x, l, i0);
                    let sy = spec.diffusion_jacobian(&y, l, i0);
                    let sdiff: Vec<f64> = sx.iter().zip(&sy).map(|(a, b)| a - b).collect();
                    diffusion_jacobian_lipschitz =
                        diffusion_jacobian_lipschitz.max(frob(&sdiff) / dist);
                }
            }
            for &n in n_list {
                let nf = n as f64;
                let bn = spec.tamed_drift(nf, &x, i0);
                let b = spec.drift(&x, i0);
                let xbn: f64 = x.iter().zip(&bn).map(|(a, b)| a * b).sum();
                taming_inner_product = taming_inner_product.max(xbn / (one_plus_x * one_plus_x));
                let bn_norm = euclid(&bn);
                taming_root_n_growth = taming_root_n_growth.max(bn_norm / (nf.sqrt() * one_plus_x));
                let growth = one_plus_x.powf(spec.rho1 + 1.0);
                taming_polynomial_growth = taming_polynomial_growth.max(bn_norm / growth);
                let close: f64 = b
                    .iter()
                    .zip(&bn)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
                    .sqrt();
                taming_closeness = taming_closeness.max(nf * close / growth);
            }
        }
    }
    AssumptionReport {
        sample_box: sample_box.clone(),
        pairs: sample_count,
        one_sided_lipschitz,
        drift_jacobian_growth,
        diffusion_jacobian_lipschitz,
        taming_inner_product,
        taming_root_n_growth,
        taming_polynomial_growth,
        taming_closeness,
    }
}

fn self_or_zero(v: f64) -> f64 {
    v.max(0.0)
}

/// Maximum commutativity residual
/// `|Dsigma^(l) sigma^(l1) - Dsigma^(l1) sigma^(l)|` over sampled points,
/// chain states, and column pairs. Exactly zero whenever `d = 1` or `m = 1`.
pub fn check_commutativity<R: Rng>(
    spec: &ModelSpec,
    sample_box: &SampleBox,
    sample_count: usize,
    rng: &mut R,
) -> f64 {
    let d = spec.dim_state;
    let m = spec.dim_noise;
    let mut worst = 0.0_f64;
    for _ in 0..sample_count {
        let x = sample_box.sample(rng);
        for i0 in 0..spec.num_chain_states {
            for l in 0..m {
                for l1 in (l + 1)..m {
                    let jl = spec.diffusion_jacobian(&x, l, i0);
                    let jl1 = spec.diffusion_jacobian(&x, l1, i0);
                    let sl = spec.diffusion_column(&x, l, i0);
                    let sl1 = spec.diffusion_column(&x, l1, i0);
                    let a = matvec(&jl, &sl1, d);
                    let b = matvec(&jl1, &sl, d);
                    let res: Vec<f64> = a.iter().zip(&b).map(|(u, v)| u - v).collect();
                    worst = worst.max(euclid(&res));
                }
            }
        }
    }
    worst
}

/// Compare the supplied Jacobians of `b` and every `sigma^(l)` against
/// central finite differences at `x`; returns the worst relative deviation.
pub fn finite_difference_jacobian_check(
    spec: &ModelSpec,
    x: &[f64],
    state: usize,
    step: f64,
) -> f64 {
    assert!(step > 0.0);
    let d = spec.dim_state;
    let m = spec.dim_noise;
    let mut worst = 0.0_f64;

    let check = |f: &dyn Fn(&[f64]) -> Vec<f64>, jac: &[f64]| -> f64 {
        let mut fd = vec![0.0; d * d];
        for j in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += step;
            xm[j] -= step;
            let fp = f(&xp);
            let fm = f(&xm);
            for i in 0..d {
                fd[i * d + j] = (fp[i] - fm[i]) / (2.0 * step);
            }
        }
        let inf = |mat: &[f64]| mat.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let scale = inf(jac).max(inf(&fd)).max(1e-12);
        let mut err = 0.0_f64;
        for (a, b) in fd.iter().zip(jac) {
            err = err.max((a - b).abs());
        }
        err / scale
    };

    let jb = spec.drift_jacobian(x, state);
    worst = worst.max(check(&|p| spec.drift(p, state), &jb));
    for l in 0..m {
        let js = spec.diffusion_jacobian(x, l, state);
        worst = worst.max(check(&|p| spec.diffusion_column(p, l, state), &js));
    }
    worst
}
