//! Return-time statistics: moments from the amplitude series, the
//! topological value `n_w / eta`, and closed spectral sums over the
//! eigenvalues of `Q_eta U`.
//!
//! With `phi_{eta,n} = sqrt(eta) sum_j a_j lambda_j^(n-1)` and
//! `g = lambda_j conj(lambda_k)`,
//!
//! ```text
//! <n>   = eta sum_{j,k} a_j conj(a_k) / (1 - g)^2
//! <n^2> = eta sum_{j,k} a_j conj(a_k) (1 + g) / (1 - g)^3
//! ```

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde_json::json;

use crate::amplitudes::{monitored_series, monitored_series_adaptive, AmplitudeSeries, Neumaier, DEFAULT_TAIL_EPS};
use crate::error::{Error, Result};
use crate::genfunc::{winding_number, WindingMethod, WindingReport};
use crate::io::{complex_json, fmt_f64};
use crate::linalg::{eigen_general, order_by_modulus_then_phase};
use crate::spectral::{eta_from_shear, MonitoredEvolution, SpectralSystem};
use crate::twolevel::{closed_lambdas, TwoLevelParams};

/// Above this eigenbasis condition number the spectral route is refused.
pub const CONDITION_LIMIT: f64 = 1e8;
/// Pairs with `|lambda_j conj(lambda_k)|` at or above this are singular.
pub const PAIR_LIMIT: f64 = 1.0 - 1e-12;
/// Relative size of the imaginary part of a moment sum that is discarded.
pub const IMAGINARY_TOL: f64 = 1e-8;
/// Captured probability below `1 - CAPTURE_TOL` marks series stats unreliable.
pub const CAPTURE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMethod {
    Series,
    Topological,
    Spectral,
}

impl StatsMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            StatsMethod::Series => "series",
            StatsMethod::Topological => "topological",
            StatsMethod::Spectral => "spectral",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReturnStats {
    pub total_probability: f64,
    pub mean_n: f64,
    pub second_moment_n: f64,
    pub variance_n: f64,
    pub mean_time: f64,
    pub variance_time: f64,
    pub method: StatsMethod,
    pub tau: f64,
    /// False when a series did not capture `1 - 1e-6` of the probability.
    pub reliable: bool,
    /// Estimated contribution of the truncated tail to `mean_n`.
    pub tail_mean: f64,
    /// Estimated contribution of the truncated tail to `second_moment_n`.
    pub tail_second: f64,
    /// Largest discarded imaginary part (spectral route).
    pub imaginary_residual: f64,
}

impl ReturnStats {
    fn new(total: f64, mean_n: f64, second: f64, method: StatsMethod, tau: f64) -> Self {
        let variance_n = second - mean_n * mean_n;
        Self {
            total_probability: total,
            mean_n,
            second_moment_n: second,
            variance_n,
            mean_time: tau * mean_n,
            variance_time: tau * tau * variance_n,
            method,
            tau,
            reliable: true,
            tail_mean: 0.0,
            tail_second: 0.0,
            imaginary_residual: 0.0,
        }
    }

    pub fn to_json(&self, eta: f64, n_w: Option<usize>) -> serde_json::Value {
        json!({
            "eta": eta,
            "tau": self.tau,
            "n_w": n_w,
            "method": self.method.tag(),
            "total_probability": self.total_probability,
            "mean_n": self.mean_n,
            "second_moment_n": self.second_moment_n,
            "var_n": self.variance_n,
            "mean_t": self.mean_time,
            "var_t": self.variance_time,
            "reliable": self.reliable,
            "residuals": {
                "tail_mean": self.tail_mean,
                "tail_second": self.tail_second,
                "imaginary": self.imaginary_residual,
            },
        })
    }
}

/// Moments `sum n |phi_n|^2`, `sum n^2 |phi_n|^2` over the truncated range.
///
/// The missing tail is estimated by assuming geometric decay at the rate
/// seen over the last quarter of the series.
pub fn mean_return_series(series: &AmplitudeSeries) -> ReturnStats {
    let mut total = Neumaier::default();
    let mut first = Neumaier::default();
    let mut second = Neumaier::default();
    for (i, p) in series.probabilities().enumerate() {
        let n = (i + 1) as f64;
        total.add(p);
        first.add(n * p);
        second.add(n * n * p);
    }
    let mut stats = ReturnStats::new(total.sum(), first.sum(), second.sum(), StatsMethod::Series, series.tau);
    let missing = (1.0 - total.sum()).max(0.0);
    stats.reliable = missing < CAPTURE_TOL;
    if missing > 0.0 {
        let q = tail_ratio(series);
        let n = series.n_max() as f64;
        let excess = if q < 1.0 { 1.0 / (1.0 - q) } else { f64::INFINITY };
        stats.tail_mean = missing * (n + excess);
        stats.tail_second = missing * ((n + excess).powi(2) + q * excess * excess);
    }
    if !stats.reliable {
        log::warn!(
            "series captured only {} of the return probability; moments are estimates",
            stats.total_probability
        );
    }
    stats
}

/// Per-step decay ratio of `|phi_n|^2` estimated from the last two quarters.
fn tail_ratio(series: &AmplitudeSeries) -> f64 {
    let probs: Vec<f64> = series.probabilities().collect();
    let q = probs.len() / 4;
    if q == 0 {
        return 1.0;
    }
    let last: f64 = probs[probs.len() - q..].iter().sum();
    let before: f64 = probs[probs.len() - 2 * q..probs.len() - q].iter().sum();
    if before <= 0.0 || last <= 0.0 {
        return 0.0;
    }
    (last / before).powf(1.0 / q as f64).min(1.0)
}

/// `<n> = n_w / eta`, refused when the winding number is not certified.
pub fn mean_return_topological(winding: &WindingReport, eta: f64) -> Result<f64> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidParameter(format!("eta must lie in (0, 1], got {eta}")));
    }
    Ok(winding.certified_n_w()? as f64 / eta)
}

/// Eigen-expansion `<psi|U (Q_eta U)^(n-1)|psi> = sum_j a_j lambda_j^(n-1)`
/// on the detector-visible subspace.
#[derive(Debug, Clone)]
pub struct SpectralDecompositionQ {
    pub lambdas: Vec<C64>,
    pub coefficients: Vec<C64>,
    pub condition_estimate: f64,
    /// `|lambda_j| < 1`.
    pub bright_mask: Vec<bool>,
    pub eta: f64,
    pub tau: f64,
}

impl SpectralDecompositionQ {
    /// `sqrt(eta) sum_j a_j lambda_j^(n-1)`.
    pub fn amplitude(&self, n: usize) -> C64 {
        let k = (n - 1) as i32;
        let s: C64 = self
            .lambdas
            .iter()
            .zip(&self.coefficients)
            .map(|(l, a)| a * l.powi(k))
            .sum();
        s * self.eta.sqrt()
    }

    /// Eigenvalues in descending modulus, then descending phase.
    pub fn ordered_lambdas(&self) -> Vec<C64> {
        let mut l = self.lambdas.clone();
        order_by_modulus_then_phase(&mut l);
        l
    }
}

pub fn spectral_decompose(evo: &MonitoredEvolution) -> Result<SpectralDecompositionQ> {
    let spectrum = evo.effective_levels();
    let step = spectrum.rank_one_step(1.0, evo.x());
    let d = spectrum.detector();
    let u = spectrum.step_unitary();
    let eig = eigen_general(&step)?;
    if !(eig.condition < CONDITION_LIMIT) {
        return Err(Error::IllConditioned { condition: eig.condition });
    }
    let bra = u.adjoint() * &d;
    let coefficients = (0..eig.values.len())
        .map(|j| bra.dotc(&eig.right.column(j)) * (eig.left.row(j) * &d)[(0, 0)])
        .collect();
    Ok(SpectralDecompositionQ {
        bright_mask: eig.values.iter().map(|l| l.norm() < 1.0).collect(),
        lambdas: eig.values,
        coefficients,
        condition_estimate: eig.condition,
        eta: evo.eta(),
        tau: evo.tau(),
    })
}

fn real_part(sum: C64, what: &str) -> Result<(f64, f64)> {
    if sum.im.abs() > IMAGINARY_TOL * sum.re.abs().max(1.0) || !sum.re.is_finite() {
        log::error!("{what} has imaginary part {}", sum.im);
        return Err(Error::ImaginaryResidual { residual: sum.im.abs() });
    }
    Ok((sum.re, sum.im.abs()))
}

/// Closed-form moments from the spectral decomposition.
pub fn moments_spectral(dec: &SpectralDecompositionQ) -> Result<ReturnStats> {
    let mut total = C64::new(0.0, 0.0);
    let mut first = C64::new(0.0, 0.0);
    let mut second = C64::new(0.0, 0.0);
    for (lj, aj) in dec.lambdas.iter().zip(&dec.coefficients) {
        for (lk, ak) in dec.lambdas.iter().zip(&dec.coefficients) {
            let g = lj * lk.conj();
            if g.norm() >= PAIR_LIMIT {
                return Err(Error::NearSingularDenominator { modulus: g.norm() });
            }
            let w = aj * ak.conj();
            let one_minus = C64::new(1.0, 0.0) - g;
            total += w / one_minus;
            first += w / (one_minus * one_minus);
            second += w * (C64::new(1.0, 0.0) + g) / one_minus.powi(3);
        }
    }
    let (total, r0) = real_part(total * dec.eta, "total probability")?;
    let (first, r1) = real_part(first * dec.eta, "<n>")?;
    let (second, r2) = real_part(second * dec.eta, "<n^2>")?;
    let mut stats = ReturnStats::new(total, first, second, StatsMethod::Spectral, dec.tau);
    stats.imaginary_residual = r0.max(r1).max(r2);
    if stats.imaginary_residual > 0.0 {
        log::debug!("discarded imaginary residual {:.3e}", stats.imaginary_residual);
    }
    Ok(stats)
}

/// Spectral moments, falling back to an adaptive series when the
/// eigenbasis is ill-conditioned.
pub fn moments_auto(evo: &MonitoredEvolution) -> Result<ReturnStats> {
    match spectral_decompose(evo).and_then(|d| moments_spectral(&d)) {
        Ok(s) => Ok(s),
        Err(e @ (Error::IllConditioned { .. } | Error::NearSingularDenominator { .. } | Error::Linalg(_))) => {
            log::info!("spectral moments unavailable ({e}); using the series");
            Ok(mean_return_series(&monitored_series_adaptive(evo, DEFAULT_TAIL_EPS)?))
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub eta: f64,
    /// `eta <n>`.
    pub scaled_mean: f64,
    /// `eta^2 <n^2>`.
    pub scaled_second: f64,
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub rho1: f64,
    pub rho2: f64,
    pub rows: Vec<ScalingRow>,
    /// `max |eta <n> - rho1|` over the grid.
    pub rho1_spread: f64,
    /// `(eta, relative change of eta^2 <n^2> from eta to eta / 10)` for grid
    /// points at or below 0.1.
    pub decade_drifts: Vec<(f64, f64)>,
    pub plateau_detected: bool,
    pub n_w: Option<usize>,
    pub rho1_matches_winding: bool,
}

impl ScalingReport {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "rho1": self.rho1,
            "rho2": self.rho2,
            "rho1_spread": self.rho1_spread,
            "n_w": self.n_w,
            "rho1_matches_winding": self.rho1_matches_winding,
            "plateau_detected": self.plateau_detected,
            "decade_drifts": self.decade_drifts,
            "rows": self.rows.iter().map(|r| json!({
                "eta": r.eta, "eta_mean_n": r.scaled_mean, "eta2_second_n": r.scaled_second,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Relative drift per decade allowed for a plateau.
pub const PLATEAU_DRIFT: f64 = 0.05;

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Extracts `rho1 = eta <n>` and `rho2 = eta^2 <n^2>` at small `eta` as
/// medians over the grid (`rho2` over `eta <= 0.1`).
pub fn small_eta_scaling(system: &SpectralSystem, tau: f64, eta_grid: &[f64]) -> Result<ScalingReport> {
    if !eta_grid.iter().any(|&e| e <= 0.1) {
        return Err(Error::InvalidParameter(
            "eta grid needs points at or below 0.1 to detect a plateau".into(),
        ));
    }
    let scaled = |eta: f64| -> Result<ScalingRow> {
        let stats = moments_auto(&MonitoredEvolution::new(system, tau, eta)?)?;
        Ok(ScalingRow {
            eta,
            scaled_mean: eta * stats.mean_n,
            scaled_second: eta * eta * stats.second_moment_n,
        })
    };
    let rows = eta_grid.iter().map(|&e| scaled(e)).collect::<Result<Vec<_>>>()?;
    let rho1 = median(&mut rows.iter().map(|r| r.scaled_mean).collect::<Vec<_>>());
    let rho2 = median(
        &mut rows
            .iter()
            .filter(|r| r.eta <= 0.1)
            .map(|r| r.scaled_second)
            .collect::<Vec<_>>(),
    );
    let rho1_spread = rows.iter().map(|r| (r.scaled_mean - rho1).abs()).fold(0.0, f64::max);
    let mut decade_drifts = Vec::new();
    for r in rows.iter().filter(|r| r.eta <= 0.1) {
        let next = scaled(r.eta / 10.0)?;
        decade_drifts.push((r.eta, (next.scaled_second - r.scaled_second).abs() / next.scaled_second.abs()));
    }
    let plateau_detected = decade_drifts.iter().all(|&(_, d)| d < PLATEAU_DRIFT);
    if !plateau_detected {
        log::warn!("no plateau of eta^2 <n^2>: decade drifts {decade_drifts:?}");
    }
    let n_w = winding_number(system, tau, WindingMethod::Roots)?.certified_n_w().ok();
    let rho1_matches_winding = n_w.is_some_and(|n| (rho1 - n as f64).abs() < 1e-3);
    Ok(ScalingReport {
        rho1,
        rho2,
        rows,
        rho1_spread,
        decade_drifts,
        plateau_detected,
        n_w,
        rho1_matches_winding,
    })
}

/// `nu_jk = (1 + g) / (1 - g)^3` with `g = lambda_j conj(lambda_k)`, in the
/// order given.
pub fn nu_from_lambdas(lambdas: &[C64]) -> Result<DMatrix<C64>> {
    let n = lambdas.len();
    let mut nu = DMatrix::<C64>::zeros(n, n);
    for j in 0..n {
        for k in 0..n {
            let g = lambdas[j] * lambdas[k].conj();
            if g.norm() >= PAIR_LIMIT {
                return Err(Error::NearSingularDenominator { modulus: g.norm() });
            }
            let one = C64::new(1.0, 0.0);
            nu[(j, k)] = (one + g) / (one - g).powi(3);
        }
    }
    Ok(nu)
}

/// `nu` matrix with eigenvalues ordered by descending modulus, then phase.
pub fn nu_matrix(dec: &SpectralDecompositionQ) -> Result<DMatrix<C64>> {
    nu_from_lambdas(&dec.ordered_lambdas())
}

#[derive(Debug, Clone)]
pub struct Figure1Row {
    pub cos_j_tau: f64,
    pub lambdas: [C64; 2],
    /// `|nu_++|, |nu_--|, |nu_+-|, |nu_-+|`.
    pub nu_abs: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct Figure1Table {
    pub x: f64,
    pub rows: Vec<Figure1Row>,
}

impl Figure1Table {
    pub fn write_csv<W: Write>(&self, mut out: W, header: &[String]) -> Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "# x = {}", fmt_f64(self.x))?;
        writeln!(out, "cos_J_tau,|nu_pp|,|nu_mm|,|nu_pm|,|nu_mp|")?;
        for r in &self.rows {
            let v: Vec<String> = r.nu_abs.iter().map(|&a| fmt_f64(a)).collect();
            writeln!(out, "{},{}", fmt_f64(r.cos_j_tau), v.join(","))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "x": self.x,
            "rows": self.rows.iter().map(|r| json!({
                "cos_J_tau": r.cos_j_tau,
                "lambda_plus": complex_json(r.lambdas[0]),
                "lambda_minus": complex_json(r.lambdas[1]),
                "abs_nu_pp": r.nu_abs[0], "abs_nu_mm": r.nu_abs[1],
                "abs_nu_pm": r.nu_abs[2], "abs_nu_mp": r.nu_abs[3],
            })).collect::<Vec<_>>(),
        })
    }
}

/// `|nu_jk|` of the two-level system at fixed shear `x` over `cos J tau`.
pub fn figure1_data(x: f64, cos_grid: &[f64]) -> Result<Figure1Table> {
    if !(x > 0.0 && x <= 1.0) {
        return Err(Error::InvalidParameter(format!("x must lie in (0, 1], got {x}")));
    }
    let eta = eta_from_shear(x);
    let rows = cos_grid
        .iter()
        .map(|&c| {
            let params = TwoLevelParams::from_cos(c, eta)?;
            let (lp, lm) = closed_lambdas(&params);
            let nu = nu_from_lambdas(&[lp, lm])?;
            Ok(Figure1Row {
                cos_j_tau: c,
                lambdas: [lp, lm],
                nu_abs: [nu[(0, 0)].norm(), nu[(1, 1)].norm(), nu[(0, 1)].norm(), nu[(1, 0)].norm()],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Figure1Table { x, rows })
}

/// Largest `|sqrt(eta) sum_j a_j lambda_j^(n-1) - phi_{eta,n}|` for `n <= n_max`.
pub fn reconstruction_error(dec: &SpectralDecompositionQ, evo: &MonitoredEvolution, n_max: usize) -> Result<f64> {
    let series = monitored_series(evo, n_max)?;
    Ok(series
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| (dec.amplitude(i + 1) - v).norm())
        .fold(0.0, f64::max))
}
