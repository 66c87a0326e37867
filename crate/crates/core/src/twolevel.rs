//! Closed forms for the single qubit with `H = J (|up><up| - |down><down|)`,
//! detector state `(|up> + |down>)/sqrt 2` and target `(|up> - |down>)/sqrt 2`.
//!
//! Everything here is written from the explicit two-level expressions and
//! never calls the generic engine, so it can serve as an oracle for it.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::linalg::order_by_modulus_then_phase;
use crate::spectral::{shear_parameter, SpectralSystem};

/// The two-level system as a generic [`SpectralSystem`], with the
/// transition target set.
pub fn qubit_system(j: f64) -> SpectralSystem {
    let up_down = DMatrix::<C64>::identity(2, 2);
    let h = FRAC_1_SQRT_2;
    let psi = DVector::from_vec(vec![C64::new(h, 0.0), C64::new(h, 0.0)]);
    let target = DVector::from_vec(vec![C64::new(h, 0.0), C64::new(-h, 0.0)]);
    SpectralSystem::new(vec![j, -j], up_down, psi, Some(target)).expect("qubit system is valid")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoLevelParams {
    pub j: f64,
    pub tau: f64,
    /// `cos(J tau)`
    pub c: f64,
    /// `sin(J tau)`
    pub s: f64,
    pub eta: f64,
    pub x: f64,
}

impl TwoLevelParams {
    pub fn new(j: f64, tau: f64, eta: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
        }
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::InvalidParameter(format!("eta must lie in (0, 1], got {eta}")));
        }
        let (s, c) = (j * tau).sin_cos();
        Ok(Self {
            j,
            tau,
            c,
            s,
            eta,
            x: shear_parameter(eta),
        })
    }

    /// `J = 1` and `tau = arccos(c)` (so `sin(J tau) >= 0`); `c = 1` maps to
    /// `tau = 2 pi`.
    pub fn from_cos(c: f64, eta: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&c) {
            return Err(Error::InvalidParameter(format!("cos(J tau) must lie in [-1, 1], got {c}")));
        }
        let tau = if c == 1.0 { 2.0 * PI } else { c.acos() };
        let mut p = Self::new(1.0, tau, eta)?;
        // Keep c exactly as requested; s follows from it.
        p.c = c;
        p.s = (1.0 - c * c).sqrt();
        Ok(p)
    }

    /// `sqrt(1 - eta) = 1 - x`.
    fn damping(&self) -> f64 {
        1.0 - self.x
    }
}

/// Projective return amplitude: `phi_1 = c`, `phi_k = -s^2 c^(k-2)`.
pub fn closed_phi_k(params: &TwoLevelParams, k: usize) -> Result<C64> {
    let (c, s) = (params.c, params.s);
    match k {
        0 => Err(Error::InvalidParameter("amplitude index starts at 1".into())),
        1 => Ok(C64::new(c, 0.0)),
        _ => Ok(C64::new(-s * s * c.powi(k as i32 - 2), 0.0)),
    }
}

/// Projective transition amplitude `phi'_k = -i c^(k-1) s`.
pub fn closed_phi_prime_k(params: &TwoLevelParams, k: usize) -> Result<C64> {
    if k == 0 {
        return Err(Error::InvalidParameter("amplitude index starts at 1".into()));
    }
    Ok(C64::new(0.0, -params.c.powi(k as i32 - 1) * params.s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClosedGf {
    Phi,
    PhiPrime,
    PhiEta,
    PhiEtaPrime,
}

const POLE_TOL: f64 = 1e-13;

pub fn closed_gf(params: &TwoLevelParams, z: C64, which: ClosedGf) -> Result<C64> {
    let (c, s) = (params.c, params.s);
    let one = C64::new(1.0, 0.0);
    let (num, den) = match which {
        ClosedGf::Phi => (z * (c - z), one - z * c),
        ClosedGf::PhiPrime => (C64::new(0.0, -s) * z, one - z * c),
        ClosedGf::PhiEta | ClosedGf::PhiEtaPrime => {
            let r = params.damping();
            let den = one + z * z * r - z * (1.0 + r) * c;
            let num = if which == ClosedGf::PhiEta {
                z * (c - z) * params.eta.sqrt()
            } else {
                C64::new(0.0, -params.eta.sqrt() * s) * z
            };
            (num, den)
        }
    };
    if den.norm() < POLE_TOL {
        return Err(Error::Singularity { z });
    }
    Ok(num / den)
}

/// Eigenvalues of `Q_eta U`, `[(2 - x) c +- sqrt(x^2 c^2 - 4 (1 - x) s^2)] / 2`,
/// with the principal square root, ordered by descending modulus and then
/// descending phase.
pub fn closed_lambdas(params: &TwoLevelParams) -> (C64, C64) {
    let (c, s, x) = (params.c, params.s, params.x);
    let radicand = C64::new(x * x * c * c - 4.0 * (1.0 - x) * s * s, 0.0);
    let root = radicand.sqrt();
    let mean = C64::new((2.0 - x) * c, 0.0);
    let mut l = vec![(mean + root) * 0.5, (mean - root) * 0.5];
    order_by_modulus_then_phase(&mut l);
    (l[0], l[1])
}

/// First `n_max` monitored return amplitudes `phi_{eta,n}`, read off the
/// closed generating function through its two-term recurrence.
pub fn closed_phi_eta_series(params: &TwoLevelParams, n_max: usize) -> Vec<f64> {
    let (t, d) = trace_and_det(params);
    let root_eta = params.eta.sqrt();
    let mut out = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let b = match n {
            1 => root_eta * params.c,
            2 => t * out[0] - root_eta,
            _ => t * out[n - 2] - d * out[n - 3],
        };
        out.push(b);
    }
    out
}

/// `sum_{n >= 1} |phi_{eta,n}|^2` summed in closed form (discrete Lyapunov
/// equation for the recurrence).
pub fn closed_total_probability(params: &TwoLevelParams) -> f64 {
    let (t, d) = trace_and_det(params);
    let b = closed_phi_eta_series(params, 2);
    let (b1, b2) = (b[0], b[1]);
    let xa = 1.0 / (1.0 - d * d - t * t * (1.0 - d) / (1.0 + d));
    let xb = -xa * d * t / (1.0 + d);
    let xc = d * d * xa;
    b1 * b1 + xa * b2 * b2 + 2.0 * xb * b1 * b2 + xc * b1 * b1
}

/// Trace `(2 - x) c` and determinant `1 - x` of `Q_eta U`.
fn trace_and_det(params: &TwoLevelParams) -> (f64, f64) {
    ((2.0 - params.x) * params.c, 1.0 - params.x)
}

/// Return probabilities `|phi_{eta,n}|^2` for a grid of measurement strengths.
#[derive(Debug, Clone)]
pub struct Figure2Table {
    pub cos_j_tau: f64,
    pub etas: Vec<f64>,
    pub n_max: usize,
    /// `probabilities[i][n - 1]` is `|phi_{eta_i, n}|^2`.
    pub probabilities: Vec<Vec<f64>>,
    /// Per-eta total over all `n >= 1`, summed analytically.
    pub totals: Vec<f64>,
}

impl Figure2Table {
    /// One row per `eta`: `eta, |phi_1|^2, ..., |phi_nmax|^2, total`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W, header: &[String]) -> Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "# cos_J_tau = {}", fmt_f64(self.cos_j_tau))?;
        let cols: Vec<String> = (1..=self.n_max).map(|n| format!("abs2_phi_{n}")).collect();
        writeln!(out, "eta,{},total", cols.join(","))?;
        for (i, eta) in self.etas.iter().enumerate() {
            let row: Vec<String> = self.probabilities[i].iter().map(|&p| fmt_f64(p)).collect();
            writeln!(out, "{},{},{}", fmt_f64(*eta), row.join(","), fmt_f64(self.totals[i]))?;
        }
        Ok(())
    }
}

pub fn figure2_data(c: f64, eta_grid: &[f64], n_max: usize) -> Result<Figure2Table> {
    let mut probabilities = Vec::with_capacity(eta_grid.len());
    let mut totals = Vec::with_capacity(eta_grid.len());
    for &eta in eta_grid {
        let params = TwoLevelParams::from_cos(c, eta)?;
        let amps = closed_phi_eta_series(&params, n_max);
        probabilities.push(amps.iter().map(|a| a * a).collect());
        totals.push(closed_total_probability(&params));
    }
    Ok(Figure2Table {
        cos_j_tau: c,
        etas: eta_grid.to_vec(),
        n_max,
        probabilities,
        totals,
    })
}
