//! Numerical checks of the gradient-variance integrals for mismatched
//! training, with and without logit-normal time sampling.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::flowcore::{residual_with_complement, spd_matrix};
use crate::ndmath::{sigmoid, Tensor};
use crate::quadrature::integrate;
use crate::stats::{boundary_grid, log_log_slope, normal_cdf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    Continuous,
    Binary,
}

impl Case {
    /// Exponent of the boundary growth after the logit substitution:
    /// 4 for a residual floor, 2 when the residual itself vanishes as `(1-t)²`.
    pub fn overflow_exponent(self) -> f64 {
        match self {
            Case::Continuous => 2.0,
            Case::Binary => 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConstants {
    /// Lipschitz capacity of the network in its parameters.
    pub k: f64,
    /// Jacobian non-degeneracy constant.
    pub c: f64,
    /// Residual floor of a binary predictor.
    pub eps_resid_sq: f64,
    pub d: usize,
}

impl Default for AnalysisConstants {
    fn default() -> Self {
        Self {
            k: 1.0,
            c: 1.0,
            eps_resid_sq: 1.0,
            d: 16,
        }
    }
}

impl AnalysisConstants {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.k > 0.0 && self.c > 0.0 && self.eps_resid_sq > 0.0 && self.d > 0,
            Config,
            "analysis constants must be strictly positive: {self:?}"
        );
        Ok(())
    }
}

/// Lower bound `4c·R(t)/(1-t)⁴` on the gradient second moment of the
/// mismatched objective.
#[derive(Debug, Clone)]
pub struct VarianceModel {
    case: Case,
    constants: AnalysisConstants,
    sigma: DMatrix<f64>,
}

impl VarianceModel {
    /// `sigma` defaults to the identity of size `constants.d`.
    pub fn new(case: Case, constants: AnalysisConstants, sigma: Option<&Tensor>) -> Result<Self> {
        constants.validate()?;
        let sigma = match sigma {
            Some(s) => spd_matrix(s)?,
            None => DMatrix::identity(constants.d, constants.d),
        };
        Ok(Self { case, constants, sigma })
    }

    fn residual(&self, t: f64, one_minus_t: f64) -> Result<f64> {
        match self.case {
            Case::Binary => Ok(self.constants.eps_resid_sq),
            Case::Continuous => residual_with_complement(&self.sigma, t, one_minus_t),
        }
    }

    fn integrand_parts(&self, t: f64, one_minus_t: f64) -> Result<f64> {
        Ok(4.0 * self.constants.c * self.residual(t, one_minus_t)? / one_minus_t.powi(4))
    }

    pub fn integrand(&self, t: f64) -> Result<f64> {
        ensure!(t > 0.0 && t < 1.0, Domain, "t = {t} outside (0, 1)");
        self.integrand_parts(t, 1.0 - t)
    }

    /// `∫₀^{t_max}` of the integrand.
    pub fn truncated(&self, t_max: f64) -> Result<f64> {
        ensure!(t_max > 0.0 && t_max < 1.0, Domain, "t_max = {t_max} outside (0, 1)");
        let f = |t: f64| self.integrand_parts(t, 1.0 - t).unwrap_or(f64::NAN);
        let est = integrate(f, 0.0, t_max, 1e-11, 0.0, 20_000);
        Ok(est.value)
    }

    /// Expectation of the integrand under `t = σ(u)`, `u ~ N(m, s²)`.
    ///
    /// With `dt = t(1-t)du` the logit-normal density cancels the Jacobian,
    /// leaving a Gaussian weight in `u`; `1 - t` is evaluated as `σ(-u)`.
    pub fn weighted(&self, s: f64, m: f64) -> Result<f64> {
        ensure!(s > 0.0, Domain, "scale must be positive, got {s}");
        let norm = 1.0 / (s * (2.0 * std::f64::consts::PI).sqrt());
        let f = |u: f64| {
            let g = norm * (-(u - m).powi(2) / (2.0 * s * s)).exp();
            if g == 0.0 {
                return 0.0;
            }
            g * self.integrand_parts(sigmoid(u), sigmoid(-u)).unwrap_or(f64::NAN)
        };
        let est = integrate(f, -40.0, 40.0, 1e-11, 0.0, 20_000);
        Ok(est.value)
    }
}

fn isotropic(case: Case, constants: &AnalysisConstants) -> Result<VarianceModel> {
    VarianceModel::new(case, *constants, None)
}

pub fn variance_integrand(t: f64, case: Case, constants: &AnalysisConstants, sigma: Option<&Tensor>) -> Result<f64> {
    VarianceModel::new(case, *constants, sigma)?.integrand(t)
}

pub fn truncated_variance_integral(t_max: f64, case: Case, constants: &AnalysisConstants) -> Result<f64> {
    isotropic(case, constants)?.truncated(t_max)
}

pub fn weighted_variance_integral(s: f64, m: f64, case: Case, constants: &AnalysisConstants) -> Result<f64> {
    isotropic(case, constants)?.weighted(s, m)
}

/// Boundary form of the logit-space integrand, `exp(n·u - (u-m)²/(2s²))`.
pub fn effective_integrand(u: f64, s: f64, m: f64, n: f64) -> f64 {
    (n * u - (u - m).powi(2) / (2.0 * s * s)).exp()
}

pub const PEAK_GRID_STEP: f64 = 0.01;

/// Arg-max of [`effective_integrand`] over a `u` grid on `[-40, 40]`.
pub fn effective_peak(s: f64, m: f64, n: f64, step: f64) -> f64 {
    let cells = (80.0 / step).round() as usize;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..=cells {
        let u = -40.0 + i as f64 * step;
        // compare in log space so large exponents cannot overflow
        let lv = n * u - (u - m).powi(2) / (2.0 * s * s);
        if lv > best.0 {
            best = (lv, u);
        }
    }
    best.1
}

/// Logit-normal mass on `[t, 1)`.
pub fn mass_above(t: f64, m: f64, s: f64) -> f64 {
    let u = (t / (1.0 - t)).ln();
    normal_cdf((m - u) / s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub u_peak: f64,
    pub t_peak: f64,
    pub mass_above: f64,
}

/// Where the effective integrand peaks and how much sampling mass lies beyond.
pub fn sampling_gap_report(s: f64, m: f64, overflow_exponent: f64) -> Result<GapReport> {
    ensure!(s > 0.0, Domain, "scale must be positive, got {s}");
    let u_peak = effective_peak(s, m, overflow_exponent, PEAK_GRID_STEP);
    Ok(GapReport {
        u_peak,
        t_peak: sigmoid(u_peak),
        mass_above: normal_cdf((m - u_peak) / s),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub case: Case,
    pub slope_integrand: f64,
    pub slope_integral: f64,
    pub u_peak: f64,
    pub t_peak: f64,
    pub mass_above: f64,
    pub weighted_integral: f64,
    pub s: f64,
    pub m: f64,
}

/// Slope of `log integrand` against `log(1-t)` for `t ∈ [0.99, 0.9999]`.
pub fn integrand_slope(model: &VarianceModel) -> Result<f64> {
    let ts = boundary_grid(0.99, 0.9999, 25);
    let ys = ts.iter().map(|&t| model.integrand(t)).collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = ts.iter().map(|t| 1.0 - t).collect();
    Ok(log_log_slope(&xs, &ys))
}

/// Slope of `log I(t_max)` against `log(1-t_max)` for `t_max ∈ [0.9, 0.999]`.
pub fn integral_slope(model: &VarianceModel) -> Result<f64> {
    let ts = boundary_grid(0.9, 0.999, 15);
    let ys = ts.iter().map(|&t| model.truncated(t)).collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = ts.iter().map(|t| 1.0 - t).collect();
    Ok(log_log_slope(&xs, &ys))
}

pub fn analyze(case: Case, s: f64, m: f64, constants: &AnalysisConstants) -> Result<AnalysisReport> {
    let model = isotropic(case, constants)?;
    let gap = sampling_gap_report(s, m, case.overflow_exponent())?;
    Ok(AnalysisReport {
        case,
        slope_integrand: integrand_slope(&model)?,
        slope_integral: integral_slope(&model)?,
        u_peak: gap.u_peak,
        t_peak: gap.t_peak,
        mass_above: gap.mass_above,
        weighted_integral: model.weighted(s, m)?,
        s,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> AnalysisConstants {
        AnalysisConstants::default()
    }

    #[test]
    fn binary_integrand_arithmetic() {
        let c = AnalysisConstants { d: 1, ..k() };
        assert_eq!(variance_integrand(0.5, Case::Binary, &c, None).unwrap(), 64.0);
        assert!(variance_integrand(1.0, Case::Binary, &c, None).is_err());
        assert!(variance_integrand(0.0, Case::Binary, &c, None).is_err());
    }

    #[test]
    fn integrand_boundary_orders() {
        let b = integrand_slope(&isotropic(Case::Binary, &k()).unwrap()).unwrap();
        let c = integrand_slope(&isotropic(Case::Continuous, &k()).unwrap()).unwrap();
        assert!((b + 4.0).abs() < 0.05, "{b}");
        assert!((c + 2.0).abs() < 0.05, "{c}");
    }

    #[test]
    fn binary_truncated_matches_antiderivative() {
        let c = AnalysisConstants { c: 0.7, eps_resid_sq: 0.3, ..k() };
        for &t in &[0.5, 0.9, 0.99, 0.999] {
            let q = truncated_variance_integral(t, Case::Binary, &c).unwrap();
            let exact = 4.0 * 0.7 * 0.3 / 3.0 * ((1.0 - t).powi(-3) - 1.0);
            assert!((q / exact - 1.0).abs() < 1e-8, "t={t}: {q} vs {exact}");
        }
    }

    #[test]
    fn continuous_truncated_matches_log_space_simpson() {
        // substitute w = -ln(1-t): dt = (1-t) dw, integrate by composite Simpson
        let d = 16.0;
        let f = |w: f64| {
            let omt = (-w).exp();
            let t = 1.0 - omt;
            let r = d * omt * omt / (t * t + omt * omt);
            4.0 * r / omt.powi(4) * omt
        };
        for &t_max in &[0.9, 0.99, 0.999] {
            let wmax = -(1.0f64 - t_max).ln();
            let n = 200_000;
            let h = wmax / n as f64;
            let mut acc = f(0.0) + f(wmax);
            for i in 1..n {
                acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            let simpson = acc * h / 3.0;
            let q = truncated_variance_integral(t_max, Case::Continuous, &k()).unwrap();
            assert!((q / simpson - 1.0).abs() < 1e-8, "{q} vs {simpson}");
        }
    }

    #[test]
    fn truncated_growth_orders_and_monotonicity() {
        let b = integral_slope(&isotropic(Case::Binary, &k()).unwrap()).unwrap();
        let c = integral_slope(&isotropic(Case::Continuous, &k()).unwrap()).unwrap();
        assert!((b + 3.0).abs() < 0.1, "{b}");
        assert!((c + 1.0).abs() < 0.1, "{c}");
        for case in [Case::Binary, Case::Continuous] {
            let vals: Vec<f64> = boundary_grid(0.5, 0.999, 10)
                .into_iter()
                .map(|t| truncated_variance_integral(t, case, &k()).unwrap())
                .collect();
            assert!(vals.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn weighted_integral_finite_and_increasing_in_scale() {
        for case in [Case::Binary, Case::Continuous] {
            let vals: Vec<f64> = [0.4, 0.8, 1.2]
                .iter()
                .map(|&s| weighted_variance_integral(s, 0.0, case, &k()).unwrap())
                .collect();
            assert!(vals.iter().all(|v| v.is_finite() && *v > 0.0), "{vals:?}");
            assert!(vals.windows(2).all(|w| w[1] > w[0]), "{vals:?}");
        }
    }

    #[test]
    fn weighted_binary_matches_lognormal_moments() {
        // (1-t)^-4 = (1+e^u)^4 expands into lognormal moments E[e^{ju}] = e^{j m + j² s²/2}
        let (s, m) = (0.8, -0.3);
        let binom = [1.0, 4.0, 6.0, 4.0, 1.0];
        let exact: f64 = 4.0
            * binom
                .iter()
                .enumerate()
                .map(|(j, c)| c * (j as f64 * m + (j * j) as f64 * s * s / 2.0).exp())
                .sum::<f64>();
        let q = weighted_variance_integral(s, m, Case::Binary, &k()).unwrap();
        assert!((q / exact - 1.0).abs() < 1e-9, "{q} vs {exact}");
    }

    #[test]
    fn effective_peak_locations() {
        for &s in &[0.4, 0.8, 1.2] {
            for case in [Case::Binary, Case::Continuous] {
                let n = case.overflow_exponent();
                let u = effective_peak(s, 0.0, n, PEAK_GRID_STEP);
                assert!((u - n * s * s).abs() <= PEAK_GRID_STEP, "s={s} n={n}: {u}");
            }
        }
        let r = sampling_gap_report(0.8, 0.0, 4.0).unwrap();
        assert!((r.u_peak - 2.56).abs() <= PEAK_GRID_STEP);
        assert!((r.t_peak - 0.928).abs() < 1e-3);
    }

    #[test]
    fn gap_mass_examples() {
        let r = sampling_gap_report(0.8, 0.0, 4.0).unwrap();
        assert!((r.mass_above - 6.871e-4).abs() < 2e-5, "{}", r.mass_above);
        let threshold = sigmoid(2.56);
        let shrinking: Vec<f64> = [0.8, 0.4, 0.2, 0.1, 0.01].iter().map(|&s| mass_above(threshold, 0.0, s)).collect();
        assert!(shrinking.windows(2).all(|w| w[1] < w[0]));
        assert!(*shrinking.last().unwrap() < 1e-100);
        for &kk in &[0.5, 1.3, 2.56] {
            let above = mass_above(sigmoid(kk), 0.0, 0.7);
            let below = 1.0 - mass_above(sigmoid(-kk), 0.0, 0.7);
            assert!((above - below).abs() < 1e-15);
        }
        assert!(sampling_gap_report(0.0, 0.0, 4.0).is_err());
    }

    #[test]
    fn report_serializes_required_keys() {
        let r = analyze(Case::Binary, 0.8, 0.0, &k()).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for key in ["case", "slope_integrand", "slope_integral", "u_peak", "t_peak", "mass_above"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["case"], "binary");
    }

    #[test]
    fn anisotropic_sigma_is_accepted() {
        let sigma = Tensor::matrix(2, 2, &[2.0, 0.5, 0.5, 1.0]).unwrap();
        let c = AnalysisConstants { d: 2, ..k() };
        let v = variance_integrand(0.7, Case::Continuous, &c, Some(&sigma)).unwrap();
        let r = crate::flowcore::gaussian_bayes_residual(&sigma, 0.7).unwrap();
        assert!((v - 4.0 * r / 0.3f64.powi(4)).abs() < 1e-9 * v);
    }
}
