//! Uncertainty bookkeeping: initial variances for freshly aggregated
//! groups, first-order propagation through operators (Σ_out = J·Σ_in·Jᵀ),
//! and distribution-free Chebyshev intervals.
//!
//! Everything here is a pure function; the bootstrap takes the caller's
//! seeded generator so replays stay deterministic.

use rand::Rng;

use crate::inference::solve_count_distinct;
use crate::{Error, Result};

/// Uncertainty of one group across its mutable attributes: per-attribute
/// variances plus sparse covariance entries for the attribute pairs a
/// downstream operator consumes. `unstable` marks attributes whose
/// variance came from an untrustworthy derivative.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UncertaintyCell {
    pub variance: Vec<f64>,
    pub cross: Vec<(usize, usize, f64)>,
    pub unstable: Vec<bool>,
}

impl UncertaintyCell {
    pub fn of_variances(variance: Vec<f64>) -> Self {
        let unstable = vec![false; variance.len()];
        UncertaintyCell { variance, cross: Vec::new(), unstable }
    }

    pub fn width(&self) -> usize {
        self.variance.len()
    }

    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.variance[i];
        }
        self.cross
            .iter()
            .find(|(a, b, _)| (*a == i && *b == j) || (*a == j && *b == i))
            .map(|(_, _, c)| *c)
            .unwrap_or(0.0)
    }

    /// Dense covariance matrix view (small: one row per mutable attribute).
    pub fn to_matrix(&self) -> Vec<Vec<f64>> {
        let k = self.width();
        let mut m = vec![vec![0.0; k]; k];
        for i in 0..k {
            m[i][i] = self.variance[i];
        }
        for &(i, j, c) in &self.cross {
            m[i][j] = c;
            m[j][i] = c;
        }
        m
    }

    fn from_matrix(m: &[Vec<f64>], unstable: Vec<bool>) -> Self {
        let k = m.len();
        let mut variance = Vec::with_capacity(k);
        let mut cross = Vec::new();
        for i in 0..k {
            variance.push(m[i][i].max(0.0));
            for j in i + 1..k {
                if m[i][j] != 0.0 {
                    cross.push((i, j, m[i][j]));
                }
            }
        }
        UncertaintyCell { variance, cross, unstable }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

/// CLT plug-in variance of the group mean: s²/n with the n−1 divisor.
/// For a sum the caller scales by n² (Var(Σ) = n·s²). Size-1 and constant
/// samples report 0.
pub fn initial_variance_sum_avg(sample: &[f64]) -> f64 {
    let n = sample.len();
    assert!(n >= 1, "initial variance over an empty group");
    if n == 1 {
        return 0.0;
    }
    let nf = n as f64;
    let mean = sample.iter().sum::<f64>() / nf;
    let ss: f64 = sample.iter().map(|v| (v - mean) * (v - mean)).sum();
    ss / (nf - 1.0) / nf
}

/// Linear-interpolation quantile of an already sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Bootstrap variance of the q-quantile over B resamples. Deterministic
/// given the caller's generator state.
pub fn initial_variance_order_stat(
    sample: &[f64],
    q: f64,
    b: usize,
    rng: &mut impl Rng,
) -> f64 {
    assert!(b >= 100, "too few bootstrap resamples");
    let n = sample.len();
    if n < 2 || sample.iter().all(|v| *v == sample[0]) {
        return 0.0;
    }
    let mut stats = Vec::with_capacity(b);
    let mut resample = vec![0.0; n];
    for _ in 0..b {
        for slot in resample.iter_mut() {
            *slot = sample[rng.random_range(0..n)];
        }
        resample.sort_by(f64::total_cmp);
        stats.push(quantile_sorted(&resample, q));
    }
    let bf = b as f64;
    let mean = stats.iter().sum::<f64>() / bf;
    stats.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (bf - 1.0)
}

/// Σ_out = J·Σ_in·Jᵀ. `jacobian[i][k]` is ∂f_i/∂u_k; the input cell spans
/// the u dimension. Unstable inputs taint every output they feed.
pub fn propagate(jacobian: &[Vec<f64>], sigma_in: &UncertaintyCell) -> Result<UncertaintyCell> {
    let k_in = sigma_in.width();
    let k_out = jacobian.len();
    for row in jacobian {
        if row.len() != k_in {
            return Err(Error::Domain(format!(
                "jacobian row has {} entries for {} inputs",
                row.len(),
                k_in
            )));
        }
    }
    let sigma = sigma_in.to_matrix();
    // J·Σ
    let mut js = vec![vec![0.0; k_in]; k_out];
    for i in 0..k_out {
        for l in 0..k_in {
            let mut acc = 0.0;
            for k in 0..k_in {
                acc += jacobian[i][k] * sigma[k][l];
            }
            js[i][l] = acc;
        }
    }
    // (J·Σ)·Jᵀ
    let mut out = vec![vec![0.0; k_out]; k_out];
    for i in 0..k_out {
        for j in 0..k_out {
            let mut acc = 0.0;
            for l in 0..k_in {
                acc += js[i][l] * jacobian[j][l];
            }
            out[i][j] = acc;
        }
    }
    let unstable_out = (0..k_out)
        .map(|i| {
            jacobian[i]
                .iter()
                .enumerate()
                .any(|(k, dj)| *dj != 0.0 && sigma_in.unstable.get(k).copied().unwrap_or(false))
        })
        .collect();
    Ok(UncertaintyCell::from_matrix(&out, unstable_out))
}

/// Result of numerically differentiating a scalar-vector map at a point.
pub struct MapDerivatives {
    pub jacobian: Vec<Vec<f64>>,
    /// per-output flag: one-sided differences disagreed or were non-finite
    pub unstable: Vec<bool>,
}

/// Central finite differences with per-coordinate step max(1e-6, 1e-6·|v|).
/// An output is unstable when its two one-sided differences disagree by
/// more than 10% or fail to be finite.
pub fn numeric_jacobian(
    f: &dyn Fn(&[f64]) -> Vec<f64>,
    point: &[f64],
) -> MapDerivatives {
    let base = f(point);
    let m = base.len();
    let n = point.len();
    let mut jacobian = vec![vec![0.0; n]; m];
    let mut unstable = vec![false; m];
    let mut probe = point.to_vec();
    for k in 0..n {
        let step = (1e-6 * point[k].abs()).max(1e-6);
        probe[k] = point[k] + step;
        let up = f(&probe);
        probe[k] = point[k] - step;
        let dn = f(&probe);
        probe[k] = point[k];
        for i in 0..m {
            let fwd = (up[i] - base[i]) / step;
            let bwd = (base[i] - dn[i]) / step;
            let central = (up[i] - dn[i]) / (2.0 * step);
            if !central.is_finite() || !fwd.is_finite() || !bwd.is_finite() {
                unstable[i] = true;
                jacobian[i][k] = if central.is_finite() { central } else { 0.0 };
                continue;
            }
            let scale = fwd.abs().max(bwd.abs());
            if (fwd - bwd).abs() > 0.1 * scale + 1e-9 {
                unstable[i] = true;
            }
            jacobian[i][k] = central;
        }
    }
    MapDerivatives { jacobian, unstable }
}

/// Propagates uncertainty through a numeric map by finite differences.
pub fn propagate_map(
    f: &dyn Fn(&[f64]) -> Vec<f64>,
    point: &[f64],
    sigma_in: &UncertaintyCell,
) -> Result<UncertaintyCell> {
    if point.len() != sigma_in.width() {
        return Err(Error::Domain(format!(
            "map point has {} coordinates for {} uncertainty entries",
            point.len(),
            sigma_in.width()
        )));
    }
    let derivs = numeric_jacobian(f, point);
    let mut out = propagate(&derivs.jacobian, sigma_in)?;
    for (flag, diff_bad) in out.unstable.iter_mut().zip(&derivs.unstable) {
        *flag = *flag || *diff_bad;
    }
    Ok(out)
}

/// Variance of the estimated final distinct count, from the closed-form
/// implicit-differentiation sensitivities of the solver root.
pub fn var_count_distinct(y: u64, x: u64, xhat: f64, var_y: f64, var_xhat: f64) -> Result<f64> {
    if y == 0 || (var_y == 0.0 && var_xhat == 0.0) {
        return Ok(0.0);
    }
    let sol = solve_count_distinct(y, x, xhat)?;
    let mut var = sol.d_dy * sol.d_dy * var_y;
    // a zero derivative kills the term even against an infinite variance
    if var_xhat != 0.0 && sol.d_dxhat != 0.0 {
        var += sol.d_dxhat * sol.d_dxhat * var_xhat;
    }
    Ok(var.max(0.0))
}

/// Distribution-free interval [value − kσ, value + kσ] with k = √(1/δ);
/// δ = 0.05 gives the k ≈ 4.47 bound at the 95% level.
pub fn chebyshev_interval(value: f64, variance: f64, delta: f64) -> ConfidenceInterval {
    debug_assert!(variance >= 0.0);
    debug_assert!(delta > 0.0 && delta < 1.0);
    let k = (1.0 / delta).sqrt();
    let sigma = variance.sqrt();
    ConfidenceInterval {
        lo: value - k * sigma,
        hi: value + k * sigma,
        level: 1.0 - delta,
    }
}
