//! Growth-based inference: fit the shared monomial power w from observed
//! mean group cardinalities, predict final group cardinalities, and scale
//! raw aggregates into unbiased estimates of the final answer.
//!
//! The growth model is a streaming linear regression on the log-log pairs
//! (log t, log x̄_t): E[log x̄_t] = log b + w·log t. A group with x rows at
//! progress t is predicted to end with x̂ = x/t^w rows; aggregate values
//! are scaled accordingly. All estimators collapse to the identity with
//! zero variance at t = 1.

use crate::edf::Progress;
use crate::{Error, Result};

use statrs::function::gamma::{digamma, ln_gamma};

/// One group's raw observation at progress t: cardinality and aggregate
/// value as accumulated so far.
#[derive(Debug, Clone, Copy)]
pub struct GroupObservation {
    pub x_it: u64,
    pub y_it: f64,
    pub t: Progress,
}

/// Predicted final cardinality of one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CardinalityEstimate {
    pub xhat: f64,
    pub var_xhat: f64,
}

/// An extrinsic estimate for one cell: value plus variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateCell {
    pub value: f64,
    pub variance: f64,
}

impl EstimateCell {
    pub fn exact(value: f64) -> Self {
        EstimateCell { value, variance: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggregateKind {
    Count,
    Sum,
    Avg,
    Var,
    StdDev,
    Min,
    Max,
    CountDistinct,
    /// Quantile at q scaled to integer parts per million, so the kind stays
    /// hashable and totally ordered. Use `order_stat(q)` to construct.
    OrderStat(u32),
}

pub fn order_stat(q: f64) -> AggregateKind {
    assert!((0.0..=1.0).contains(&q), "quantile out of range");
    AggregateKind::OrderStat((q * 1_000_000.0).round() as u32)
}

impl AggregateKind {
    pub fn quantile(self) -> Option<f64> {
        match self {
            AggregateKind::OrderStat(ppm) => Some(ppm as f64 / 1_000_000.0),
            _ => None,
        }
    }

    pub fn name(self) -> String {
        match self {
            AggregateKind::Count => "count".into(),
            AggregateKind::Sum => "sum".into(),
            AggregateKind::Avg => "avg".into(),
            AggregateKind::Var => "var".into(),
            AggregateKind::StdDev => "stddev".into(),
            AggregateKind::Min => "min".into(),
            AggregateKind::Max => "max".into(),
            AggregateKind::CountDistinct => "count_distinct".into(),
            AggregateKind::OrderStat(_) => {
                format!("quantile({})", self.quantile().unwrap())
            }
        }
    }

    /// Inverse of [`name`](Self::name).
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "count" => AggregateKind::Count,
            "sum" => AggregateKind::Sum,
            "avg" => AggregateKind::Avg,
            "var" => AggregateKind::Var,
            "stddev" => AggregateKind::StdDev,
            "min" => AggregateKind::Min,
            "max" => AggregateKind::Max,
            "count_distinct" => AggregateKind::CountDistinct,
            other => {
                let q = other
                    .strip_prefix("quantile(")
                    .and_then(|rest| rest.strip_suffix(')'))
                    .and_then(|inner| inner.parse::<f64>().ok())
                    .filter(|q| (0.0..=1.0).contains(q));
                match q {
                    Some(q) => order_stat(q),
                    None => {
                        return Err(Error::QuerySpec(format!("unknown aggregate kind `{other}`")))
                    }
                }
            }
        })
    }

    /// True for kinds whose estimator needs no input value column (count)
    /// or accepts any value kind (count_distinct). All others aggregate
    /// numeric columns.
    pub fn accepts_any_kind(self) -> bool {
        matches!(self, AggregateKind::Count | AggregateKind::CountDistinct)
    }
}

/// Streaming log-log regression over (t, mean group cardinality)
/// observations. Constant work and space per observation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GrowthModel {
    pub n_obs: u64,
    pub sum_lx: f64,
    pub sum_ly: f64,
    pub sum_lxlx: f64,
    pub sum_lxly: f64,
    pub sum_lyly: f64,
}

/// Fallback variance when the fit is underdetermined.
pub const VAR_W_SENTINEL: f64 = f64::INFINITY;

impl GrowthModel {
    pub fn new() -> Self {
        GrowthModel::default()
    }

    pub fn observe(&mut self, t: Progress, mean_card: f64) -> Result<()> {
        observe(self, t, mean_card)
    }

    pub fn fit_power(&self) -> (f64, f64) {
        fit_power(self)
    }
}

pub fn observe(model: &mut GrowthModel, t: Progress, mean_card: f64) -> Result<()> {
    let tr = t.ratio();
    if tr <= 0.0 || mean_card <= 0.0 {
        return Err(Error::Domain(format!(
            "growth observation needs t > 0 and mean cardinality > 0 (got t={tr}, x̄={mean_card})"
        )));
    }
    let lx = tr.ln();
    let ly = mean_card.ln();
    model.n_obs += 1;
    model.sum_lx += lx;
    model.sum_ly += ly;
    model.sum_lxlx += lx * lx;
    model.sum_lxly += lx * ly;
    model.sum_lyly += ly * ly;
    Ok(())
}

/// OLS slope and its parameter variance (residual variance times the
/// inverse-Gram diagonal). With fewer than two distinct t values the fit
/// is underdetermined: falls back to w = 1 (base-table-like growth) with
/// a +∞ variance sentinel.
pub fn fit_power(model: &GrowthModel) -> (f64, f64) {
    let n = model.n_obs as f64;
    if model.n_obs < 2 {
        return (1.0, VAR_W_SENTINEL);
    }
    let sxx = model.sum_lxlx - model.sum_lx * model.sum_lx / n;
    // All observations at one t collapse the Gram matrix; detect via the
    // centered sum against fp noise from the raw-sum form.
    if sxx <= 1e-12 * model.sum_lxlx.abs().max(1e-300) {
        return (1.0, VAR_W_SENTINEL);
    }
    let sxy = model.sum_lxly - model.sum_lx * model.sum_ly / n;
    let syy = model.sum_lyly - model.sum_ly * model.sum_ly / n;
    let w = sxy / sxx;
    let sse = (syy - w * sxy).max(0.0);
    let var_w = if model.n_obs > 2 {
        sse / (n - 2.0) / sxx
    } else {
        // Two points fit exactly; zero residuals by construction.
        0.0
    };
    (w, var_w)
}

/// x̂ = x/t^w with Var(x̂) = (x̂·ln(1/t))²·Var(w). Exact (x̂ = x, zero
/// variance) at t = 1.
pub fn estimate_final_cardinality(
    obs: &GroupObservation,
    w: f64,
    var_w: f64,
) -> CardinalityEstimate {
    let t = obs.t.ratio();
    debug_assert!(t > 0.0 && t <= 1.0);
    let x = obs.x_it as f64;
    if obs.t.is_final() {
        return CardinalityEstimate { xhat: x, var_xhat: 0.0 };
    }
    let xhat = x / t.powf(w);
    let spread = xhat * (1.0 / t).ln();
    let var_xhat = if var_w.is_infinite() {
        f64::INFINITY
    } else {
        spread * spread * var_w
    };
    CardinalityEstimate { xhat, var_xhat }
}

pub fn estimate_count(card: &CardinalityEstimate) -> EstimateCell {
    EstimateCell { value: card.xhat, variance: card.var_xhat }
}

/// Scaled summation: value = (y/x)·x̂. At x̂ = x the raw sum is returned
/// bit-exactly (no scale-and-divide round trip).
pub fn estimate_sum(y: f64, x: u64, card: &CardinalityEstimate, var_y: f64) -> EstimateCell {
    assert!(x >= 1, "estimate_sum needs at least one observed row");
    let xf = x as f64;
    let value = if card.xhat == xf { y } else { (y / xf) * card.xhat };
    // guard 0·∞ when the cardinality variance is the infinite sentinel
    let card_term = if y == 0.0 { 0.0 } else { card.var_xhat * y * y };
    let variance = (var_y * card.xhat * card.xhat + card_term) / (xf * xf);
    EstimateCell { value, variance }
}

/// Ratio of two scaled sums; the x̂ scaling cancels, so the value is the
/// plain ratio and only the raw-sum uncertainties (with their covariance)
/// reach the variance.
pub fn estimate_weighted_avg(
    y_num: f64,
    y_den: f64,
    _x: u64,
    _card: &CardinalityEstimate,
    cov: [[f64; 2]; 2],
) -> Result<EstimateCell> {
    if y_den == 0.0 {
        return Err(Error::Domain("weighted average over zero denominator".into()));
    }
    let value = y_num / y_den;
    // First-order expansion of n/d: Var(n)/d² + n²·Var(d)/d⁴ − 2n·Cov/d³.
    // This form stays finite (and correct) when the numerator is zero.
    let d2 = y_den * y_den;
    let variance = (cov[0][0] / d2 + y_num * y_num * cov[1][1] / (d2 * d2)
        - 2.0 * y_num * cov[0][1] / (d2 * y_den))
        .max(0.0);
    Ok(EstimateCell { value, variance })
}

pub fn estimate_order_stat(y_latest: f64) -> EstimateCell {
    // Latest value passes through; the bootstrap variance is attached by
    // the confidence layer, which holds the group sample.
    EstimateCell { value: y_latest, variance: 0.0 }
}

/// Hypergeometric miss probability h(z): the chance that a value class of
/// size z is entirely absent from an x-row sample of an x̂-row population.
/// Evaluated in log-gamma space; continuously extended by 0 where a class
/// of size z cannot be missed (z > x̂ − x).
pub fn cd_h(z: f64, x: f64, xhat: f64) -> f64 {
    let a = xhat - z + 1.0;
    let b = xhat - x + 1.0;
    let c = xhat - x - z + 1.0;
    let d = xhat + 1.0;
    if c <= 0.0 {
        return 0.0;
    }
    (ln_gamma(a) + ln_gamma(b) - ln_gamma(c) - ln_gamma(d)).exp()
}

/// ∂h/∂z at fixed population parameters.
pub fn cd_h_dz(z: f64, x: f64, xhat: f64) -> f64 {
    let a = xhat - z + 1.0;
    let c = xhat - x - z + 1.0;
    if c <= 0.0 {
        return 0.0;
    }
    cd_h(z, x, xhat) * (digamma(c) - digamma(a))
}

/// ∂h/∂x̂ at fixed z: x̂ also appears inside the gamma parameters, and this
/// direct term nearly cancels the indirect one, which is why the solved
/// count barely moves with x̂ in the Poisson limit.
pub fn cd_h_dxhat(z: f64, x: f64, xhat: f64) -> f64 {
    let a = xhat - z + 1.0;
    let b = xhat - x + 1.0;
    let c = xhat - x - z + 1.0;
    let d = xhat + 1.0;
    if c <= 0.0 {
        return 0.0;
    }
    cd_h(z, x, xhat) * (digamma(a) + digamma(b) - digamma(c) - digamma(d))
}

/// Root and sensitivities of the method-of-moments distinct-count
/// equation y = Y·(1 − h(x̂/Y)).
#[derive(Debug, Clone, Copy)]
pub struct CountDistinctSolution {
    pub y_final: f64,
    /// ∂Y/∂y
    pub d_dy: f64,
    /// ∂Y/∂x̂ (total derivative; includes the parametric dependence of h)
    pub d_dxhat: f64,
}

/// Solves y = Y·(1 − h(x̂/Y)) for the final distinct count Y.
///
/// Newton-Raphson from Y₀ = y·x̂/x, at most 100 iterations; any step that
/// leaves the root bracket [y, x̂] degrades to a bisection step, so the
/// iteration cannot diverge. The residual g(Y) scales with y, so y sets
/// the convergence tolerance (and y ≤ x̂ keeps it within 1e-9·x̂).
pub fn solve_count_distinct(y: u64, x: u64, xhat: f64) -> Result<CountDistinctSolution> {
    if y > x {
        return Err(Error::Domain(format!(
            "distinct count {y} exceeds observed rows {x}"
        )));
    }
    if (x as f64) > xhat {
        return Err(Error::Domain(format!(
            "observed rows {x} exceed estimated final cardinality {xhat}"
        )));
    }
    if y == 0 {
        return Ok(CountDistinctSolution { y_final: 0.0, d_dy: 0.0, d_dxhat: 0.0 });
    }
    let yf = y as f64;
    let xf = x as f64;

    let g = |cand: f64| cand * (1.0 - cd_h(xhat / cand, xf, xhat)) - yf;

    // g(y) ≤ 0 and g(x̂) = x − y ≥ 0: the root is bracketed.
    let mut lo = yf;
    let mut hi = xhat;
    let tol = 1e-9 * yf;
    let mut cand = (yf * xhat / xf).clamp(lo, hi);
    let mut converged = false;
    for _ in 0..100 {
        let z = xhat / cand;
        let h = cd_h(z, xf, xhat);
        let gv = cand * (1.0 - h) - yf;
        if gv.abs() <= tol {
            converged = true;
            break;
        }
        if gv > 0.0 {
            hi = cand;
        } else {
            lo = cand;
        }
        let slope = (1.0 - h) + z * cd_h_dz(z, xf, xhat);
        let next = cand - gv / slope;
        cand = if slope > 0.0 && next.is_finite() && next > lo && next < hi {
            next
        } else {
            0.5 * (lo + hi)
        };
    }
    if !converged {
        // Newton stalled; finish with plain bisection on the bracket.
        for _ in 0..200 {
            cand = 0.5 * (lo + hi);
            let gv = g(cand);
            if gv.abs() <= tol || hi - lo <= tol {
                break;
            }
            if gv > 0.0 {
                hi = cand;
            } else {
                lo = cand;
            }
        }
    }

    let z = xhat / cand;
    let h = cd_h(z, xf, xhat);
    let hz = cd_h_dz(z, xf, xhat);
    let denom = (1.0 - h) + z * hz;
    let d_dy = 1.0 / denom;
    let d_dxhat = (hz + cand * cd_h_dxhat(z, xf, xhat)) / denom;
    Ok(CountDistinctSolution { y_final: cand, d_dy, d_dxhat })
}

/// Estimated final distinct count. The returned variance covers only the
/// cardinality-estimate term; the confidence layer combines it with the
/// sampled-count variance (see `confidence::var_count_distinct`).
pub fn estimate_count_distinct(
    y: u64,
    x: u64,
    card: &CardinalityEstimate,
) -> Result<EstimateCell> {
    if card.xhat == x as f64 {
        // All data observed; the observed distinct count is exact.
        return Ok(EstimateCell::exact(y as f64));
    }
    let sol = solve_count_distinct(y, x, card.xhat)?;
    let variance = if card.var_xhat == 0.0 || sol.d_dxhat == 0.0 {
        0.0
    } else {
        sol.d_dxhat * sol.d_dxhat * card.var_xhat
    };
    Ok(EstimateCell { value: sol.y_final, variance })
}
