//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! One step with sampling rate `q` and noise multiplier `sigma` has, at order
//! `alpha`, the Rényi divergence bound `log(A_alpha) / (alpha - 1)` with
//!
//! ```text
//! A_alpha = E_{z ~ N(0, sigma^2)} [ ((1 - q) + q * exp((2z - 1) / (2 sigma^2)))^alpha ]
//! ```
//!
//! Integer orders use the exact binomial expansion of that expectation;
//! fractional orders use the convergent two-sided series in terms of `erfc`.
//! Everything is evaluated in the log domain. `T` steps compose additively and
//! the curve is converted to `(epsilon, delta)` by minimizing over the order grid.

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Sampling rate `q` and noise multiplier `sigma` of one mechanism invocation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismParams {
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
}

impl MechanismParams {
    pub fn new(sampling_rate: f64, noise_multiplier: f64) -> Result<Self> {
        if !(sampling_rate > 0.0 && sampling_rate <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sampling rate must lie in (0, 1], got {sampling_rate}"
            )));
        }
        if !(noise_multiplier > 0.0) || !noise_multiplier.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise multiplier must be finite and > 0 for accounting, got {noise_multiplier}"
            )));
        }
        Ok(Self {
            sampling_rate,
            noise_multiplier,
        })
    }

    /// `q = lot_size / dataset_size`, capped at 1.
    pub fn from_lot(lot_size: usize, dataset_size: usize, noise_multiplier: f64) -> Result<Self> {
        if dataset_size == 0 {
            return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
        }
        Self::new((lot_size as f64 / dataset_size as f64).min(1.0), noise_multiplier)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
        }
        check_delta(delta)?;
        Ok(Self { epsilon, delta })
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// RDP to `(epsilon, delta)` conversion rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conversion {
    /// `eps = rdp + log(1/delta) / (alpha - 1)`.
    #[default]
    Classic,
    /// `eps = rdp + log((alpha - 1)/alpha) - (log delta + log alpha) / (alpha - 1)`.
    Improved,
}

impl std::str::FromStr for Conversion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "classic" => Ok(Conversion::Classic),
            "improved" => Ok(Conversion::Improved),
            other => Err(format!("unknown conversion `{other}` (expected classic or improved)")),
        }
    }
}

impl std::fmt::Display for Conversion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Conversion::Classic => "classic",
            Conversion::Improved => "improved",
        })
    }
}

/// `{1.25, 1.5, 1.75, 2, 2.5, 3, 4, ..., 64, 128, 256}`.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75, 2.0, 2.5];
    orders.extend((3..=64).map(f64::from));
    orders.extend([128.0, 256.0]);
    orders
}

/// Rényi divergence bound per order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<f64>,
    pub values: Vec<f64>,
}

impl RdpCurve {
    fn scaled(&self, steps: u64) -> RdpCurve {
        let t = steps as f64;
        RdpCurve {
            orders: self.orders.clone(),
            values: self.values.iter().map(|v| t * v).collect(),
        }
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_sub(a: f64, b: f64) -> Result<f64> {
    if b == f64::NEG_INFINITY {
        return Ok(a);
    }
    if a == b {
        return Ok(f64::NEG_INFINITY);
    }
    if b > a {
        return Err(Error::Overflow("negative intermediate in fractional-order series".into()));
    }
    Ok(a + (-(b - a).exp()).ln_1p())
}

/// `ln erfc(x)`, accurate in the far tail where `erfc` underflows.
fn ln_erfc(x: f64) -> f64 {
    if x < 20.0 {
        return erfc(x).ln();
    }
    let x2 = x * x;
    let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2);
    -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + series.ln()
}

/// `ln A_alpha` for integer `alpha >= 2` via the binomial expansion.
fn ln_a_integer(q: f64, sigma: f64, alpha: u64) -> f64 {
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let mut ln_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        if k > 0 {
            ln_binom += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        let term = ln_binom + kf * ln_q + (alpha - k) as f64 * ln_1mq + (kf * kf - kf) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc
}

/// `ln A_alpha` for fractional `alpha > 1` via the two-sided erfc series.
fn ln_a_fractional(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    const MAX_TERMS: u64 = 100_000;
    let mut ln_a0 = f64::NEG_INFINITY;
    let mut ln_a1 = f64::NEG_INFINITY;
    let s2 = sigma * sigma;
    let z0 = s2 * (1.0 / q - 1.0).ln() + 0.5;
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let half_ln = 0.5_f64.ln();
    let sqrt2_sigma = std::f64::consts::SQRT_2 * sigma;
    // ln |C(alpha, i)| and its sign, advanced by C(alpha, i+1) = C(alpha, i) (alpha - i) / (i + 1)
    let mut ln_coef = 0.0;
    let mut sign = 1.0;
    for i in 0..MAX_TERMS {
        if i > 0 {
            let num = alpha - (i - 1) as f64;
            if num == 0.0 {
                sign = 0.0;
            } else {
                if num < 0.0 {
                    sign = -sign;
                }
                ln_coef += num.abs().ln() - (i as f64).ln();
            }
        }
        let fi = i as f64;
        let j = alpha - fi;
        let ln_t0 = ln_coef + fi * ln_q + j * ln_1mq;
        let ln_t1 = ln_coef + j * ln_q + fi * ln_1mq;
        let ln_e0 = half_ln + ln_erfc((fi - z0) / sqrt2_sigma);
        let ln_e1 = half_ln + ln_erfc((z0 - j) / sqrt2_sigma);
        let ln_s0 = ln_t0 + (fi * fi - fi) / (2.0 * s2) + ln_e0;
        let ln_s1 = ln_t1 + (j * j - j) / (2.0 * s2) + ln_e1;
        if sign > 0.0 {
            ln_a0 = log_add(ln_a0, ln_s0);
            ln_a1 = log_add(ln_a1, ln_s1);
        } else if sign < 0.0 {
            ln_a0 = log_sub(ln_a0, ln_s0)?;
            ln_a1 = log_sub(ln_a1, ln_s1)?;
        }
        if ln_s0.max(ln_s1) < -30.0 {
            return Ok(log_add(ln_a0, ln_a1));
        }
    }
    Err(Error::Overflow(format!(
        "fractional-order series did not converge for q={q}, sigma={sigma}, alpha={alpha}"
    )))
}

/// Rényi divergence bound of order `alpha` for one subsampled Gaussian step.
pub fn rdp_single_step(params: &MechanismParams, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("RDP order must be > 1, got {alpha}")));
    }
    let q = params.sampling_rate;
    let sigma = params.noise_multiplier;
    let value = if q == 1.0 {
        alpha / (2.0 * sigma * sigma)
    } else if alpha.fract() == 0.0 && alpha <= u32::MAX as f64 {
        ln_a_integer(q, sigma, alpha as u64) / (alpha - 1.0)
    } else {
        ln_a_fractional(q, sigma, alpha)? / (alpha - 1.0)
    };
    if !value.is_finite() {
        return Err(Error::Overflow(format!(
            "RDP at order {alpha} for q={q}, sigma={sigma} is not finite"
        )));
    }
    // rounding in the log-sum can dip a hair below zero for tiny q
    Ok(value.max(0.0))
}

pub fn rdp_curve(params: &MechanismParams, orders: &[f64]) -> Result<RdpCurve> {
    let values = orders
        .iter()
        .map(|&a| rdp_single_step(params, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(RdpCurve {
        orders: orders.to_vec(),
        values,
    })
}

/// `T` compositions of the same mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    pub params: MechanismParams,
    pub steps: u64,
    single_step: RdpCurve,
}

impl AccountantState {
    pub fn new(params: MechanismParams) -> Result<Self> {
        Self::with_orders(params, &default_orders())
    }

    pub fn with_orders(params: MechanismParams, orders: &[f64]) -> Result<Self> {
        Ok(Self {
            params,
            steps: 0,
            single_step: rdp_curve(&params, orders)?,
        })
    }

    pub fn single_step(&self) -> &RdpCurve {
        &self.single_step
    }

    /// `steps * single_step`, computed by multiplication so composition is exactly additive.
    pub fn accumulated(&self) -> RdpCurve {
        self.single_step.scaled(self.steps)
    }

    pub fn compose(&self, additional_steps: u64) -> Self {
        let mut next = self.clone();
        next.steps = self.steps.saturating_add(additional_steps);
        next
    }

    /// State after exactly `steps` compositions.
    pub fn at_steps(&self, steps: u64) -> Self {
        let mut next = self.clone();
        next.steps = steps;
        next
    }

    pub fn epsilon(&self, delta: f64) -> Result<EpsilonReport> {
        to_epsilon_with(self, delta, Conversion::Classic)
    }
}

/// Result of converting an RDP curve to `(epsilon, delta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    pub epsilon: f64,
    pub best_order: f64,
    /// `false` when the minimizing order sits on the edge of the grid.
    pub interior: bool,
}

fn order_epsilon(total_rdp: f64, alpha: f64, ln_inv_delta: f64, conversion: Conversion) -> f64 {
    match conversion {
        Conversion::Classic => total_rdp + ln_inv_delta / (alpha - 1.0),
        Conversion::Improved => {
            let e = total_rdp + ((alpha - 1.0) / alpha).ln() + (ln_inv_delta - alpha.ln()) / (alpha - 1.0);
            e.max(0.0)
        }
    }
}

fn total_rdp(single: f64, steps: u64) -> f64 {
    steps as f64 * single
}

/// Minimizes the conversion over the curve's orders.
pub fn epsilon_from_curve(
    single: &RdpCurve,
    steps: u64,
    delta: f64,
    conversion: Conversion,
) -> Result<EpsilonReport> {
    check_delta(delta)?;
    if single.orders.is_empty() {
        return Err(Error::Empty("RDP order grid".into()));
    }
    let ln_inv_delta = -delta.ln();
    let mut best: Option<(usize, f64)> = None;
    for (i, (&alpha, &r)) in single.orders.iter().zip(&single.values).enumerate() {
        let e = order_epsilon(total_rdp(r, steps), alpha, ln_inv_delta, conversion);
        if e.is_finite() && best.is_none_or(|(_, b)| e < b) {
            best = Some((i, e));
        }
    }
    let (idx, epsilon) = best.ok_or_else(|| Error::Overflow("epsilon is infinite at every order".into()))?;
    let interior = idx > 0 && idx + 1 < single.orders.len();
    Ok(EpsilonReport {
        epsilon,
        best_order: single.orders[idx],
        interior,
    })
}

/// Classic conversion over the state's accumulated curve.
pub fn to_epsilon(state: &AccountantState, delta: f64) -> Result<EpsilonReport> {
    to_epsilon_with(state, delta, Conversion::Classic)
}

pub fn to_epsilon_with(state: &AccountantState, delta: f64, conversion: Conversion) -> Result<EpsilonReport> {
    let rep = epsilon_from_curve(&state.single_step, state.steps, delta, conversion)?;
    if !rep.interior && state.steps > 0 {
        warn!(
            "epsilon minimized at the edge of the order grid (alpha = {}); the grid may be too narrow",
            rep.best_order
        );
    }
    Ok(rep)
}

/// Upper limit returned by [`max_steps`] when the budget never binds.
pub const STEP_CAP: u64 = 1 << 50;

/// Largest `T` whose epsilon stays within the budget.
pub fn max_steps(params: &MechanismParams, budget: &PrivacyBudget) -> Result<u64> {
    max_steps_with(&AccountantState::new(*params)?, budget, Conversion::Classic)
}

pub fn max_steps_with(state: &AccountantState, budget: &PrivacyBudget, conversion: Conversion) -> Result<u64> {
    check_delta(budget.delta)?;
    let curve = &state.single_step;
    let ln_inv_delta = -budget.delta.ln();
    let fits = |r: f64, alpha: f64, t: u64| order_epsilon(total_rdp(r, t), alpha, ln_inv_delta, conversion) <= budget.epsilon;
    let mut best = 0u64;
    let mut any = false;
    for (&alpha, &r) in curve.orders.iter().zip(&curve.values) {
        if !fits(r, alpha, 0) {
            continue;
        }
        any = true;
        let mut t = if r == 0.0 {
            STEP_CAP
        } else {
            let c = order_epsilon(0.0, alpha, ln_inv_delta, conversion);
            ((budget.epsilon - c) / r).floor().clamp(0.0, STEP_CAP as f64) as u64
        };
        while t > 0 && !fits(r, alpha, t) {
            t -= 1;
        }
        while t < STEP_CAP && fits(r, alpha, t + 1) {
            t += 1;
        }
        best = best.max(t);
    }
    if !any {
        return Ok(0);
    }
    Ok(best)
}

/// Grid for [`sigma_for_budget`]: candidates are `k * step` for `k = 1..=max/step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSearch {
    pub step: f64,
    pub max: f64,
}

impl Default for SigmaSearch {
    fn default() -> Self {
        Self { step: 1e-3, max: 100.0 }
    }
}

/// Smallest grid noise multiplier whose epsilon after `steps` stays within budget.
pub fn sigma_for_budget(sampling_rate: f64, steps: u64, budget: &PrivacyBudget) -> Result<f64> {
    sigma_for_budget_with(sampling_rate, steps, budget, SigmaSearch::default(), Conversion::Classic)
}

pub fn sigma_for_budget_with(
    sampling_rate: f64,
    steps: u64,
    budget: &PrivacyBudget,
    search: SigmaSearch,
    conversion: Conversion,
) -> Result<f64> {
    if !(search.step > 0.0) || !(search.max >= search.step) {
        return Err(Error::InvalidArgument("sigma search grid is empty".into()));
    }
    let orders = default_orders();
    let k_max = (search.max / search.step).round() as u64;
    let inv = (1.0 / search.step).round();
    // k / 1000 is the nearest double to k * 0.001; the product may not be
    let grid = |k: u64| {
        if (inv * search.step - 1.0).abs() < 1e-12 {
            k as f64 / inv
        } else {
            k as f64 * search.step
        }
    };
    let eps_at = |k: u64| -> Result<f64> {
        let params = MechanismParams::new(sampling_rate, grid(k))?;
        let curve = rdp_curve(&params, &orders)?;
        Ok(epsilon_from_curve(&curve, steps, budget.delta, conversion)?.epsilon)
    };
    if eps_at(k_max)? > budget.epsilon {
        return Err(Error::BudgetInfeasible(format!(
            "no sigma <= {} reaches epsilon {} after {steps} steps",
            search.max, budget.epsilon
        )));
    }
    let (mut lo, mut hi) = (0u64, k_max); // eps(lo) > target (lo = 0 means sigma 0), eps(hi) <= target
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if eps_at(mid)? <= budget.epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(grid(hi))
}
