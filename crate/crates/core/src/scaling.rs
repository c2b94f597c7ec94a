//! Error-versus-density scaling law for pruned networks:
//!
//! ```text
//! e(d) = eps_np * [ (d^2 + p^2 (eps_up/eps_np)^(2/gamma)) / (d^2 + p^2) ]^(gamma/2)
//! ```
//!
//! `eps_np` is the unpruned error, `eps_up` the error at maximal pruning,
//! `gamma` the power-law exponent in between and `p` the density at which the
//! power-law regime begins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub eps_np: f64,
    pub eps_up: f64,
    pub gamma: f64,
    pub p: f64,
}

/// `ln(e^a + e^b)` without overflow.
fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let hi = a.max(b);
    hi + (-(a - b).abs()).exp().ln_1p()
}

fn check_params(params: &ScalingParams) -> Result<()> {
    let ScalingParams { eps_np, eps_up, gamma, p } = *params;
    if gamma == 0.0 || !gamma.is_finite() {
        return Err(Error::Domain(format!("gamma must be finite and nonzero, got {gamma}")));
    }
    if !(eps_np > 0.0 && eps_np.is_finite()) || !(eps_up > 0.0 && eps_up.is_finite()) {
        return Err(Error::Domain(format!("errors must be positive, got eps_np={eps_np}, eps_up={eps_up}")));
    }
    if !(p >= 0.0 && p.is_finite()) {
        return Err(Error::Domain(format!("p must be non-negative, got {p}")));
    }
    Ok(())
}

/// Pieces shared by the value and its derivatives at one density.
struct Terms {
    /// `ln e(d)`
    log_value: f64,
    value: f64,
    /// `ln(d^2 + q) - ln(d^2 + p^2)` with `q = p^2 (eps_up/eps_np)^(2/gamma)`
    log_bracket: f64,
    /// `q / (d^2 + q)`
    w: f64,
    /// `p^2 / (d^2 + p^2)`
    v: f64,
}

fn terms(params: &ScalingParams, d: f64) -> Terms {
    let ScalingParams { eps_np, eps_up, gamma, p } = *params;
    let ln_d2 = 2.0 * d.ln();
    if p == 0.0 {
        return Terms {
            log_value: eps_np.ln(),
            value: eps_np,
            log_bracket: 0.0,
            w: 0.0,
            v: 0.0,
        };
    }
    let ln_p2 = 2.0 * p.ln();
    let ln_q = ln_p2 + (2.0 / gamma) * (eps_up / eps_np).ln();
    let log_bracket = log_add_exp(ln_d2, ln_q) - log_add_exp(ln_d2, ln_p2);
    let share = |ln_x: f64| 1.0 / (1.0 + (ln_d2 - ln_x).exp());
    Terms {
        log_value: eps_np.ln() + 0.5 * gamma * log_bracket,
        value: eps_np * (0.5 * gamma * log_bracket).exp(),
        log_bracket,
        w: share(ln_q),
        v: share(ln_p2),
    }
}

/// Evaluates the scaling law at density `d > 0`.
///
/// Computed in log space, so extreme ratios `eps_up/eps_np` do not overflow.
/// `p = 0` is accepted and gives `eps_np` exactly.
pub fn eval_scaling(params: &ScalingParams, d: f64) -> Result<f64> {
    check_params(params)?;
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::Domain(format!("density must be positive, got {d}")));
    }
    if params.p == 0.0 {
        return Ok(params.eps_np);
    }
    Ok(terms(params, d).value)
}

/// Measured (density, error) pairs, stored in strictly decreasing density order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityErrorCurve {
    points: Vec<(f64, f64)>,
    dense_error: f64,
}

impl DensityErrorCurve {
    pub fn new(mut points: Vec<(f64, f64)>, dense_error: f64) -> Result<Self> {
        for &(d, e) in &points {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Domain(format!("density {d} outside (0, 1]")));
            }
            if !(e > 0.0 && e < 100.0) {
                return Err(Error::Domain(format!("error {e} outside (0, 100)")));
            }
        }
        if !(dense_error > 0.0 && dense_error < 100.0) {
            return Err(Error::Domain(format!("dense error {dense_error} outside (0, 100)")));
        }
        points.sort_by(|a, b| b.0.total_cmp(&a.0));
        if let Some(w) = points.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Argument(format!("duplicate density {}", w[0].0)));
        }
        Ok(DensityErrorCurve { points, dense_error })
    }

    /// Uses the error at the highest density as the dense error.
    pub fn from_points(points: Vec<(f64, f64)>) -> Result<Self> {
        let dense = points
            .iter()
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|p| p.1)
            .ok_or_else(|| Error::Argument("empty curve".into()))?;
        DensityErrorCurve::new(points, dense)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn dense_error(&self) -> f64 {
        self.dense_error
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Argument(format!("bad interval [{lo}, {hi}]")));
        }
        Ok(Interval { lo, hi })
    }

    fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitBounds {
    pub eps_np: Interval,
    pub eps_up: Interval,
    pub gamma: Interval,
    pub p: Interval,
}

/// Default half-width of the `eps_np` interval, relative to the dense error.
pub const DEFAULT_EPS_NP_WIDTH: f64 = 0.1;

impl FitBounds {
    pub fn default_for(dense_error: f64, eps_np_width: f64) -> Result<Self> {
        if !(eps_np_width >= 0.0 && eps_np_width < 1.0) {
            return Err(Error::Argument(format!("eps_np width {eps_np_width} outside [0, 1)")));
        }
        Ok(FitBounds {
            eps_np: Interval::new(dense_error * (1.0 - eps_np_width), dense_error * (1.0 + eps_np_width))?,
            eps_up: Interval { lo: 1e-3, hi: 100.0 },
            gamma: Interval { lo: -3.0, hi: -0.005 },
            p: Interval { lo: 1e-4, hi: 1.0 },
        })
    }

    fn validate(&self) -> Result<()> {
        for (name, iv) in [("eps_np", self.eps_np), ("eps_up", self.eps_up), ("gamma", self.gamma), ("p", self.p)] {
            Interval::new(iv.lo, iv.hi).map_err(|_| Error::Argument(format!("bounds for {name} are not ordered")))?;
        }
        if self.eps_np.lo <= 0.0 || self.eps_up.lo <= 0.0 || self.p.lo <= 0.0 {
            return Err(Error::Argument("eps_np, eps_up and p bounds must be positive".into()));
        }
        if self.gamma.lo <= 0.0 && self.gamma.hi >= 0.0 {
            return Err(Error::Argument("gamma bounds must exclude 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Overrides the default bounds entirely when set.
    pub bounds: Option<FitBounds>,
    pub eps_np_width: f64,
    /// Number of multi-start points, rounded up to a square grid over (gamma, p).
    pub starts: usize,
    /// Fit `ln e` instead of `e`.
    pub log_space: bool,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            bounds: None,
            eps_np_width: DEFAULT_EPS_NP_WIDTH,
            starts: 25,
            log_space: false,
            max_iterations: 500,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BoundsActive {
    pub eps_np: bool,
    pub eps_up: bool,
    pub gamma: bool,
    pub p: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ScalingParams,
    /// Root mean square residual on the fitted points, in the space that was fitted.
    pub rms_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub bounds_active: BoundsActive,
    pub log_space: bool,
    pub bounds: FitBounds,
    /// Residual of each multi-start initialization before refinement.
    pub start_residuals: Vec<f64>,
}

// Internal coordinates: (eps_np, ln eps_up, gamma, ln p).
type Vec4 = [f64; 4];

fn to_params(t: &Vec4) -> ScalingParams {
    ScalingParams {
        eps_np: t[0],
        eps_up: t[1].exp(),
        gamma: t[2],
        p: t[3].exp(),
    }
}

fn internal_bounds(b: &FitBounds) -> [Interval; 4] {
    [
        b.eps_np,
        Interval { lo: b.eps_up.lo.ln(), hi: b.eps_up.hi.ln() },
        b.gamma,
        Interval { lo: b.p.lo.ln(), hi: b.p.hi.ln() },
    ]
}

struct Problem<'a> {
    points: &'a [(f64, f64)],
    log_space: bool,
}

impl Problem<'_> {
    fn residuals(&self, t: &Vec4) -> Vec<f64> {
        let params = to_params(t);
        self.points
            .iter()
            .map(|&(d, e)| {
                let tm = terms(&params, d);
                if self.log_space {
                    tm.log_value - e.ln()
                } else {
                    tm.value - e
                }
            })
            .collect()
    }

    /// Residuals and their Jacobian with respect to the internal coordinates.
    fn linearize(&self, t: &Vec4) -> (Vec<f64>, Vec<Vec4>) {
        let params = to_params(t);
        let ln_ratio = (params.eps_up / params.eps_np).ln();
        let g = params.gamma;
        let mut r = Vec::with_capacity(self.points.len());
        let mut jac = Vec::with_capacity(self.points.len());
        for &(d, e) in self.points {
            let tm = terms(&params, d);
            // derivatives of ln e(d)
            let dl = [
                (1.0 - tm.w) / params.eps_np,
                tm.w,
                0.5 * tm.log_bracket - tm.w * ln_ratio / g,
                g * (tm.w - tm.v),
            ];
            if self.log_space {
                r.push(tm.log_value - e.ln());
                jac.push(dl);
            } else {
                let value = tm.value;
                r.push(value - e);
                jac.push(dl.map(|x| x * value));
            }
        }
        (r, jac)
    }
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut b: Vec4) -> Option<Vec4> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

struct LocalFit {
    theta: Vec4,
    cost: f64,
    iterations: usize,
    converged: bool,
}

/// Levenberg-Marquardt with steps projected onto the box.
fn levenberg_marquardt(problem: &Problem, start: Vec4, bounds: &[Interval; 4], options: &FitOptions) -> LocalFit {
    let mut theta = start;
    let (mut r, mut jac) = problem.linearize(&theta);
    let mut cost = sum_sq(&r);
    let mut mu = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        iterations += 1;
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (row, ri) in jac.iter().zip(&r) {
            for i in 0..4 {
                jtr[i] += row[i] * ri;
                for k in 0..4 {
                    jtj[i][k] += row[i] * row[k];
                }
            }
        }
        let mut accepted = false;
        while mu < 1e20 {
            let mut a = jtj;
            for (i, row) in a.iter_mut().enumerate() {
                row[i] += mu * jtj[i][i].max(1e-12);
            }
            let Some(step) = solve4(a, jtr.map(|v| -v)) else {
                mu *= 10.0;
                continue;
            };
            let mut candidate = theta;
            for i in 0..4 {
                candidate[i] = bounds[i].clamp(theta[i] + step[i]);
            }
            let rc = problem.residuals(&candidate);
            let cc = sum_sq(&rc);
            if cc.is_finite() && cc <= cost {
                let change = (0..4).map(|i| (candidate[i] - theta[i]).powi(2)).sum::<f64>().sqrt();
                let scale = theta.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                theta = candidate;
                cost = cc;
                mu = (mu / 3.0).max(1e-12);
                accepted = true;
                if change / scale < options.tolerance {
                    converged = true;
                }
                break;
            }
            mu *= 4.0;
        }
        if !accepted {
            // no descent direction left at any damping: a stationary point of the projected problem
            converged = true;
        }
        if converged {
            break;
        }
        (r, jac) = problem.linearize(&theta);
    }
    LocalFit {
        theta,
        cost,
        iterations,
        converged,
    }
}

/// Least-squares fit of the scaling law with bounded parameters and a
/// multi-start grid over `(gamma, p)`.
///
/// Every start begins at `eps_np = dense_error` and `eps_up = max error`
/// (clamped into their bounds). The lowest-cost result is returned; ties go
/// to the earlier start.
pub fn fit_scaling(curve: &DensityErrorCurve, options: &FitOptions) -> Result<FitResult> {
    if curve.len() < 6 {
        return Err(Error::Argument(format!("fit needs at least 6 points, got {}", curve.len())));
    }
    if options.starts == 0 {
        return Err(Error::Argument("at least one start is required".into()));
    }
    let bounds = match options.bounds {
        Some(b) => b,
        None => FitBounds::default_for(curve.dense_error(), options.eps_np_width)?,
    };
    bounds.validate()?;
    let ib = internal_bounds(&bounds);
    let problem = Problem {
        points: curve.points(),
        log_space: options.log_space,
    };

    let max_error = curve.points().iter().map(|p| p.1).fold(f64::MIN, f64::max);
    let eps_np0 = ib[0].clamp(curve.dense_error());
    let eps_up0 = ib[1].clamp(max_error.ln());
    let side = (options.starts as f64).sqrt().ceil() as usize;
    let cell = |iv: &Interval, k: usize| iv.lo + (iv.hi - iv.lo) * (k as f64 + 0.5) / side as f64;

    let mut best: Option<LocalFit> = None;
    let mut start_residuals = Vec::with_capacity(side * side);
    for gi in 0..side {
        for pi in 0..side {
            let start = [eps_np0, eps_up0, cell(&ib[2], gi), cell(&ib[3], pi)];
            let r0 = problem.residuals(&start);
            start_residuals.push((sum_sq(&r0) / r0.len() as f64).sqrt());
            let local = levenberg_marquardt(&problem, start, &ib, options);
            let better = match &best {
                None => true,
                Some(b) => local.cost < b.cost || (!b.cost.is_finite() && local.cost.is_finite()),
            };
            if better {
                best = Some(local);
            }
        }
    }
    let best = best.expect("at least one start");
    let params = to_params(&best.theta);
    let near = |v: f64, iv: &Interval| {
        let tol = 1e-9 * (iv.hi - iv.lo).abs().max(1e-300);
        (v - iv.lo).abs() <= tol || (iv.hi - v).abs() <= tol
    };
    let bounds_active = BoundsActive {
        eps_np: near(best.theta[0], &ib[0]),
        eps_up: near(best.theta[1], &ib[1]),
        gamma: near(best.theta[2], &ib[2]),
        p: near(best.theta[3], &ib[3]),
    };
    let residuals = problem.residuals(&best.theta);
    Ok(FitResult {
        params,
        rms_residual: (sum_sq(&residuals) / residuals.len() as f64).sqrt(),
        iterations: best.iterations,
        converged: best.converged,
        bounds_active,
        log_space: options.log_space,
        bounds,
        start_residuals,
    })
}

/// `n` densities spaced evenly in log between `lo` and `hi`, descending.
pub fn log_spaced_densities(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let (a, b) = (hi.ln(), lo.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted() -> ScalingParams {
        ScalingParams {
            eps_np: 5.0,
            eps_up: 90.0,
            gamma: -0.3,
            p: 0.05,
        }
    }

    #[test]
    fn domain_errors() {
        let mut bad = planted();
        bad.gamma = 0.0;
        assert!(matches!(eval_scaling(&bad, 0.5), Err(Error::Domain(_))));
        let mut bad = planted();
        bad.eps_np = 0.0;
        assert!(matches!(eval_scaling(&bad, 0.5), Err(Error::Domain(_))));
        let mut bad = planted();
        bad.eps_up = -1.0;
        assert!(matches!(eval_scaling(&bad, 0.5), Err(Error::Domain(_))));
        assert!(matches!(eval_scaling(&planted(), 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn limits() {
        let mut flat = planted();
        flat.p = 0.0;
        assert_eq!(eval_scaling(&flat, 0.5).unwrap(), 5.0);
        flat.p = 1e-300;
        assert_eq!(eval_scaling(&flat, 0.5).unwrap(), 5.0);
        let low = eval_scaling(&planted(), 1e-12).unwrap();
        assert!((low / 90.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matches_direct_real_form() {
        let s = planted();
        for d in log_spaced_densities(1e-3, 1.0, 10) {
            let direct = s.eps_np
                * ((d * d + s.p * s.p * (s.eps_up / s.eps_np).powf(2.0 / s.gamma)) / (d * d + s.p * s.p))
                    .powf(s.gamma / 2.0);
            let ours = eval_scaling(&s, d).unwrap();
            assert!((ours / direct - 1.0).abs() < 1e-13, "d={d}");
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let pts: Vec<(f64, f64)> = log_spaced_densities(1e-3, 1.0, 12)
            .into_iter()
            .map(|d| (d, 10.0))
            .collect();
        for log_space in [false, true] {
            let problem = Problem { points: &pts, log_space };
            let theta = [4.0, 70f64.ln(), -0.45, 0.08f64.ln()];
            let (_, jac) = problem.linearize(&theta);
            for k in 0..4 {
                let h = 1e-6 * theta[k].abs().max(1.0);
                let mut up = theta;
                let mut dn = theta;
                up[k] += h;
                dn[k] -= h;
                let (ru, rd) = (problem.residuals(&up), problem.residuals(&dn));
                for i in 0..pts.len() {
                    let fd = (ru[i] - rd[i]) / (2.0 * h);
                    assert!((fd - jac[i][k]).abs() <= 1e-6 * fd.abs().max(1.0), "k={k} i={i}: {fd} vs {}", jac[i][k]);
                }
            }
        }
    }

    #[test]
    fn recovers_planted_parameters() {
        let s = ScalingParams {
            eps_np: 5.0,
            eps_up: 60.0,
            gamma: -0.5,
            p: 0.1,
        };
        let pts: Vec<(f64, f64)> = log_spaced_densities(1e-3, 1.0, 30)
            .into_iter()
            .map(|d| (d, eval_scaling(&s, d).unwrap()))
            .collect();
        let curve = DensityErrorCurve::new(pts, 5.0).unwrap();
        let fit = fit_scaling(&curve, &FitOptions::default()).unwrap();
        let rel = |a: f64, b: f64| (a / b - 1.0).abs();
        assert!(rel(fit.params.eps_np, 5.0) < 0.02, "{:?}", fit.params);
        assert!(rel(fit.params.eps_up, 60.0) < 0.02, "{:?}", fit.params);
        assert!(rel(fit.params.gamma, -0.5) < 0.02, "{:?}", fit.params);
        assert!(rel(fit.params.p, 0.1) < 0.02, "{:?}", fit.params);
        assert!(fit.start_residuals.iter().all(|&r| fit.rms_residual <= r));
        assert_eq!(fit.start_residuals.len(), 25);
    }

    #[test]
    fn constant_curve() {
        let pts: Vec<(f64, f64)> = log_spaced_densities(1e-3, 1.0, 10).into_iter().map(|d| (d, 7.5)).collect();
        let fit = fit_scaling(&DensityErrorCurve::new(pts, 7.5).unwrap(), &FitOptions::default()).unwrap();
        assert!(fit.rms_residual <= 1e-6);
        assert!(fit.converged);
    }

    #[test]
    fn curve_validation() {
        assert!(DensityErrorCurve::new(vec![(0.5, 1.0), (0.5, 2.0)], 1.0).is_err());
        assert!(DensityErrorCurve::new(vec![(1.5, 1.0)], 1.0).is_err());
        assert!(DensityErrorCurve::new(vec![(0.5, 100.0)], 1.0).is_err());
        let c = DensityErrorCurve::from_points(vec![(0.1, 9.0), (1.0, 3.0), (0.5, 4.0)]).unwrap();
        assert_eq!(c.dense_error(), 3.0);
        assert_eq!(c.points()[1], (0.5, 4.0));
        let short = DensityErrorCurve::from_points(vec![(1.0, 3.0), (0.5, 4.0)]).unwrap();
        assert!(matches!(fit_scaling(&short, &FitOptions::default()), Err(Error::Argument(_))));
    }

    #[test]
    fn bad_bounds_rejected() {
        let pts: Vec<(f64, f64)> = log_spaced_densities(1e-3, 1.0, 8).into_iter().map(|d| (d, 7.5)).collect();
        let curve = DensityErrorCurve::new(pts, 7.5).unwrap();
        let mut b = FitBounds::default_for(7.5, 0.1).unwrap();
        b.gamma = Interval { lo: -1.0, hi: 1.0 };
        let opts = FitOptions { bounds: Some(b), ..FitOptions::default() };
        assert!(matches!(fit_scaling(&curve, &opts), Err(Error::Argument(_))));
        assert!(Interval::new(2.0, 1.0).is_err());
    }

    #[test]
    fn log_spacing() {
        let d = log_spaced_densities(1e-3, 1.0, 4);
        assert!((d[0] - 1.0).abs() < 1e-15);
        assert!((d[1] - 0.1).abs() < 1e-12);
        assert!((d[3] - 1e-3).abs() < 1e-15);
    }
}
