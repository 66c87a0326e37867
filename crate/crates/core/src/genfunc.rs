//! Generating functions of the amplitude series and their analytic structure.
//!
//! With `w_j = exp(i E_j tau)` the unitary generating function is
//! `u(z) = sum_j p_j z / (w_j - z) = z P_N(z) / D_{N+1}(z)`, the projective one
//! is `phi(z) = u / (1 + u)`, and the monitored one follows from either:
//!
//! ```text
//! phi_eta = sqrt(eta) u / (1 + x u) = sqrt(eta) phi / (1 - (1 - x) phi)
//! ```
//!
//! On the unit circle `phi` is a finite Blaschke product whose zeros are
//! the origin and the zeros of `P_N`; the number of them inside the disk is
//! the winding number `n_w`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde_json::json;

use crate::error::{Error, Result};
use crate::io::complex_json;
use crate::linalg::{self, poly_eval, poly_mul};
use crate::spectral::{EffectiveSpectrum, MonitoredEvolution, SpectralSystem, DEGENERACY_TOL};

/// Zeros with `||z| - 1| < CIRCLE_TOL` count as lying on the unit circle.
pub const CIRCLE_TOL: f64 = 1e-8;
/// Zeros closer than this are reported as degenerate.
pub const ZERO_DEGENERACY_TOL: f64 = 1e-7;
/// Evaluations closer than this to a pole `exp(i E_j tau)` are refused.
pub const POLE_TOL: f64 = 1e-13;
pub const CONTOUR_NODES: usize = 4096;
pub const CONTOUR_MAX_NODES: usize = 1 << 20;
/// Integer residual required to certify a contour winding number.
pub const CONTOUR_RESIDUAL_TOL: f64 = 1e-6;

fn one() -> C64 {
    C64::new(1.0, 0.0)
}

/// `(w_j, weight_j)` over bright levels, weight being `p_j` or any other
/// per-level numerator.
fn bright_terms<'a>(
    system: &'a SpectralSystem,
    tau: f64,
    weights: &'a [C64],
) -> impl Iterator<Item = (C64, C64)> + 'a {
    system
        .bright_levels()
        .into_iter()
        .map(move |j| (C64::from_polar(1.0, system.energies()[j] * tau), weights[j]))
}

fn pole_sum(terms: impl Iterator<Item = (C64, C64)>, z: C64) -> Result<C64> {
    let mut acc = C64::new(0.0, 0.0);
    for (w, weight) in terms {
        let gap = w - z;
        if gap.norm() < POLE_TOL {
            return Err(Error::Singularity { z });
        }
        acc += weight * z / gap;
    }
    Ok(acc)
}

fn overlap_weights(system: &SpectralSystem) -> Vec<C64> {
    system.overlaps().iter().map(|&p| C64::new(p, 0.0)).collect()
}

/// `u(z) = sum_j p_j / (exp(i E_j tau) / z - 1)`; dark levels are skipped.
pub fn eval_u_hat(system: &SpectralSystem, tau: f64, z: C64) -> Result<C64> {
    let w = overlap_weights(system);
    pole_sum(bright_terms(system, tau, &w), z)
}

/// `u'(z) = z <target|U (1 - z U)^-1|psi>`.
pub fn eval_u_prime_hat(system: &SpectralSystem, tau: f64, target: &DVector<C64>, z: C64) -> Result<C64> {
    let w = system.transition_weights(target);
    pole_sum(bright_terms(system, tau, &w), z)
}

fn checked_ratio(num: C64, den: C64, z: C64) -> Result<C64> {
    let r = num / den;
    if !r.re.is_finite() || !r.im.is_finite() || den.norm() == 0.0 {
        return Err(Error::Singularity { z });
    }
    Ok(r)
}

/// Projective generating function `u / (1 + u)`.
pub fn eval_phi_hat(system: &SpectralSystem, tau: f64, z: C64) -> Result<C64> {
    let u = eval_u_hat(system, tau, z)?;
    checked_ratio(u, one() + u, z)
}

/// Projective transition generating function `u' / (1 + u)`.
pub fn eval_phi_prime_hat(system: &SpectralSystem, tau: f64, target: &DVector<C64>, z: C64) -> Result<C64> {
    let u = eval_u_hat(system, tau, z)?;
    let up = eval_u_prime_hat(system, tau, target, z)?;
    checked_ratio(up, one() + u, z)
}

/// Evaluation route for the monitored generating functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// Renormalised unitary function, `sqrt(eta) u / (1 + x u)`.
    ViaU,
    /// Renormalised projective function, `sqrt(eta) phi / (1 - (1 - x) phi)`.
    ViaPhi,
    /// Direct linear solve of `z sqrt(eta) <.|U (1 - z Q_eta U)^-1|psi>`.
    Resolvent,
}

pub fn eval_phi_eta_hat(evo: &MonitoredEvolution, z: C64, route: Route) -> Result<C64> {
    let psi = evo.system().detector().clone();
    eval_monitored(evo, &psi, z, route)
}

pub fn eval_phi_eta_prime_hat(
    evo: &MonitoredEvolution,
    target: &DVector<C64>,
    z: C64,
    route: Route,
) -> Result<C64> {
    eval_monitored(evo, target, z, route)
}

fn eval_monitored(evo: &MonitoredEvolution, bra: &DVector<C64>, z: C64, route: Route) -> Result<C64> {
    let sys = evo.system();
    let (tau, x, root_eta) = (evo.tau(), evo.x(), evo.eta().sqrt());
    let is_return = bra == sys.detector();
    match route {
        Route::ViaU => {
            let u = eval_u_hat(sys, tau, z)?;
            let num = if is_return { u } else { eval_u_prime_hat(sys, tau, bra, z)? };
            checked_ratio(num * root_eta, one() + u * x, z)
        }
        Route::ViaPhi => {
            let phi = eval_phi_hat(sys, tau, z)?;
            let num = if is_return { phi } else { eval_phi_prime_hat(sys, tau, bra, z)? };
            checked_ratio(num * root_eta, one() - phi * (1.0 - x), z)
        }
        Route::Resolvent => {
            let n = sys.dim();
            let a = DMatrix::<C64>::identity(n, n) - evo.monitored_step() * z;
            let v = linalg::solve(&a, sys.detector()).map_err(|_| Error::Singularity { z })?;
            Ok(bra.dotc(&(evo.step_unitary() * v)) * z * root_eta)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormTag {
    UHat,
    PhiHat,
}

/// Polynomial and Blaschke data of the generating functions.
#[derive(Debug, Clone)]
pub struct RationalGF {
    /// `P_N(z) = sum_j p_j prod_{k != j} (w_k - z)`, ascending coefficients.
    pub p_coeffs: Vec<C64>,
    /// `D_{N+1}(z) = prod_k (w_k - z)`, ascending coefficients.
    pub d_coeffs: Vec<C64>,
    /// `0` followed by the zeros of `P_N`.
    pub numerator_zeros: Vec<C64>,
    /// `prod_k (-exp(-i E_k tau))`.
    pub phase_prefactor: C64,
    /// Reflected points `1 / conj(z_k)` of the non-zero zeros of `P_N`.
    pub pole_list: Vec<C64>,
    pub form_tag: FormTag,
    /// Degenerate levels merged before the construction.
    pub merged_levels: Vec<Vec<usize>>,
    pub dark_levels: Vec<usize>,
}

impl RationalGF {
    /// Builds the forms from `(energy, weight)` pairs.
    pub fn from_levels(levels: &[(f64, f64)], tau: f64) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidParameter("no detector-visible levels".into()));
        }
        let factors: Vec<[C64; 2]> = levels
            .iter()
            .map(|&(e, _)| [C64::from_polar(1.0, e * tau), -one()])
            .collect();
        let mut d_coeffs = vec![one()];
        for f in &factors {
            d_coeffs = poly_mul(&d_coeffs, f);
        }
        let mut p_coeffs = vec![C64::new(0.0, 0.0); levels.len()];
        for (j, &(_, weight)) in levels.iter().enumerate() {
            let mut prod = vec![C64::new(weight, 0.0)];
            for (k, f) in factors.iter().enumerate() {
                if k != j {
                    prod = poly_mul(&prod, f);
                }
            }
            for (acc, c) in p_coeffs.iter_mut().zip(prod) {
                *acc += c;
            }
        }
        let roots = linalg::poly_roots(&p_coeffs)?;
        let mut numerator_zeros = vec![C64::new(0.0, 0.0)];
        numerator_zeros.extend(roots.iter().copied());
        let pole_list = roots
            .iter()
            .filter(|r| r.norm() > f64::EPSILON)
            .map(|r| one() / r.conj())
            .collect();
        let phase_prefactor = levels
            .iter()
            .map(|&(e, _)| -C64::from_polar(1.0, -e * tau))
            .product();
        Ok(Self {
            p_coeffs,
            d_coeffs,
            numerator_zeros,
            phase_prefactor,
            pole_list,
            form_tag: FormTag::PhiHat,
            merged_levels: Vec::new(),
            dark_levels: Vec::new(),
        })
    }

    fn from_spectrum(spectrum: &EffectiveSpectrum) -> Result<Self> {
        let levels: Vec<(f64, f64)> = spectrum.levels.iter().map(|l| (l.energy, l.weight)).collect();
        let mut gf = Self::from_levels(&levels, spectrum.tau)?;
        gf.merged_levels = spectrum.merged_groups();
        gf.dark_levels = spectrum.dark.clone();
        Ok(gf)
    }

    /// Number of levels `N + 1`.
    pub fn level_count(&self) -> usize {
        self.d_coeffs.len() - 1
    }

    /// `z P_N / D_{N+1}`.
    pub fn eval_u_hat(&self, z: C64) -> C64 {
        let (p, _) = poly_eval(&self.p_coeffs, z);
        let (d, _) = poly_eval(&self.d_coeffs, z);
        z * p / d
    }

    /// `z P_N / (D_{N+1} + z P_N)`.
    pub fn eval_phi_hat(&self, z: C64) -> C64 {
        let (p, _) = poly_eval(&self.p_coeffs, z);
        let (d, _) = poly_eval(&self.d_coeffs, z);
        z * p / (d + z * p)
    }

    /// `-z prod_k (z - z_k) / (1 - z conj(z_k)) prod_k (-exp(-i E_k tau))`.
    pub fn eval_blaschke(&self, z: C64) -> C64 {
        let product: C64 = self.numerator_zeros[1..]
            .iter()
            .map(|&zk| (z - zk) / (one() - z * zk.conj()))
            .product();
        -z * product * self.phase_prefactor
    }

    /// `d/dz log phi(z)`.
    pub fn log_derivative(&self, z: C64) -> C64 {
        let (p, dp) = poly_eval(&self.p_coeffs, z);
        let (d, dd) = poly_eval(&self.d_coeffs, z);
        one() / z + dp / p - (dd + p + z * dp) / (d + z * p)
    }
}

/// Rational and Blaschke forms for the bright levels of `system`, degenerate
/// levels merged.
pub fn build_rational_forms(system: &SpectralSystem, tau: f64) -> Result<RationalGF> {
    RationalGF::from_spectrum(&system.effective_levels(tau))
}

/// `(1 / 2 pi i) \oint g(z) dz` over `|z| = radius` by the trapezoidal rule.
pub fn contour_integral<F: Fn(C64) -> C64>(g: F, radius: f64, nodes: usize) -> C64 {
    let mut acc = C64::new(0.0, 0.0);
    for k in 0..nodes {
        let z = C64::from_polar(radius, 2.0 * PI * k as f64 / nodes as f64);
        acc += g(z) * z;
    }
    acc / nodes as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindingMethod {
    Roots,
    Contour,
}

#[derive(Debug, Clone)]
pub struct WindingReport {
    pub method: WindingMethod,
    /// Zeros strictly inside the unit disk, counted with multiplicity.
    pub n_w: usize,
    pub boundary_case: bool,
    /// All zeros of `z P_N`, the origin first.
    pub zeros: Vec<C64>,
    pub zeros_inside: Vec<C64>,
    pub zeros_on_circle: Vec<C64>,
    pub zeros_outside: Vec<C64>,
    /// Index sets into `zeros` of mutually close zeros.
    pub degenerate_groups: Vec<Vec<usize>>,
    /// Groups of degenerate energy levels (modulo `2 pi / tau`).
    pub degenerate_levels: Vec<Vec<usize>>,
    pub dark_levels: Vec<usize>,
    pub bright_count: usize,
    /// Raw contour integral before rounding.
    pub contour_value: Option<C64>,
    pub contour_nodes: Option<usize>,
    pub contour_radius: Option<f64>,
    pub warnings: Vec<String>,
}

impl WindingReport {
    pub fn certified(&self) -> bool {
        !self.boundary_case
    }

    /// The winding number, or a [`Error::BoundaryCase`] when a zero sits on
    /// the unit circle.
    pub fn certified_n_w(&self) -> Result<usize> {
        if self.boundary_case {
            return Err(Error::BoundaryCase(format!(
                "{} zero(s) of the generating function lie on the unit circle; the winding number is not certified",
                self.zeros_on_circle.len()
            )));
        }
        Ok(self.n_w)
    }

    /// `|contour_value - n_w|`, when the contour was evaluated.
    pub fn contour_residual(&self) -> Option<f64> {
        self.contour_value.map(|v| (v - C64::new(self.n_w as f64, 0.0)).norm())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let list = |zs: &[C64]| zs.iter().map(|&z| complex_json(z)).collect::<Vec<_>>();
        json!({
            "n_w": if self.boundary_case { serde_json::Value::Null } else { json!(self.n_w) },
            "n_w_uncertified": self.n_w,
            "certified": self.certified(),
            "boundary_case": self.boundary_case,
            "method": match self.method { WindingMethod::Roots => "roots", WindingMethod::Contour => "contour" },
            "bright_count": self.bright_count,
            "zeros": list(&self.zeros),
            "zeros_inside": list(&self.zeros_inside),
            "zeros_on_circle": list(&self.zeros_on_circle),
            "zeros_outside": list(&self.zeros_outside),
            "degenerate_groups": self.degenerate_groups,
            "degenerate_levels": self.degenerate_levels,
            "dark_levels": self.dark_levels,
            "contour_value": self.contour_value.map(complex_json),
            "contour_residual": self.contour_residual(),
            "contour_nodes": self.contour_nodes,
            "contour_radius": self.contour_radius,
            "warnings": self.warnings,
        })
    }
}

fn cluster(points: &[C64], tol: f64) -> Vec<Vec<usize>> {
    let mut group_of: Vec<usize> = (0..points.len()).collect();
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            if (points[i] - points[j]).norm() < tol {
                let (gi, gj) = (group_of[i], group_of[j]);
                for g in group_of.iter_mut() {
                    if *g == gj {
                        *g = gi;
                    }
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for root in 0..points.len() {
        let members: Vec<usize> = (0..points.len()).filter(|&i| group_of[i] == root).collect();
        if members.len() > 1 {
            groups.push(members);
        }
    }
    groups
}

/// Bright levels with equal energies merged. Only one combination inside a
/// degenerate eigenspace is visible to the detector, independently of `tau`.
fn energy_merged_levels(system: &SpectralSystem) -> Vec<(f64, f64)> {
    let mut levels: Vec<(f64, f64)> = Vec::new();
    for j in system.bright_levels() {
        let (e, w) = (system.energies()[j], system.overlaps()[j]);
        match levels
            .iter_mut()
            .find(|(f, _)| (f - e).abs() < DEGENERACY_TOL * e.abs().max(1.0))
        {
            Some(level) => level.1 += w,
            None => levels.push((e, w)),
        }
    }
    levels
}

/// Winding number of the projective generating function.
///
/// Zeros are always located (companion matrix of `P_N`). Levels with equal
/// energies are merged first, but levels whose energies differ by a multiple
/// of `2 pi / tau` are not, so such stroboscopic degeneracies surface as
/// zeros on the unit circle and make the result a boundary case. `Roots` counts the interior zeros; `Contour` additionally
/// integrates `d log phi` around the unit circle and reports the rounded
/// value, doubling the node count until the integer residual is below
/// [`CONTOUR_RESIDUAL_TOL`].
pub fn winding_number(system: &SpectralSystem, tau: f64, method: WindingMethod) -> Result<WindingReport> {
    let bright = system.bright_levels();
    let levels = energy_merged_levels(system);
    let gf = RationalGF::from_levels(&levels, tau)?;
    let spectrum = system.effective_levels(tau);

    let zeros = gf.numerator_zeros.clone();
    let mut inside = Vec::new();
    let mut on_circle = Vec::new();
    let mut outside = Vec::new();
    for &z in &zeros {
        let r = z.norm();
        if (r - 1.0).abs() < CIRCLE_TOL {
            on_circle.push(z);
        } else if r < 1.0 {
            inside.push(z);
        } else {
            outside.push(z);
        }
    }
    let degenerate_groups = cluster(&zeros, ZERO_DEGENERACY_TOL);
    let mut warnings = Vec::new();
    if !outside.is_empty() {
        warnings.push(format!(
            "{} zero(s) of u(z) lie outside the unit disk, contrary to the expected analytic structure",
            outside.len()
        ));
    }
    if !degenerate_groups.is_empty() {
        warnings.push(
            "degenerate zeros are counted with multiplicity; degenerate poles may reduce the physical winding number"
                .into(),
        );
    }
    let degenerate_levels = spectrum.merged_groups();
    if !degenerate_levels.is_empty() {
        warnings.push(format!(
            "{} group(s) of degenerate levels; merged they give {} distinct bright level(s)",
            degenerate_levels.len(),
            spectrum.len()
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let mut report = WindingReport {
        method,
        n_w: inside.len(),
        boundary_case: !on_circle.is_empty(),
        zeros,
        zeros_inside: inside,
        zeros_on_circle: on_circle,
        zeros_outside: outside,
        degenerate_groups,
        degenerate_levels,
        dark_levels: system.dark_levels(),
        bright_count: bright.len(),
        contour_value: None,
        contour_nodes: None,
        contour_radius: None,
        warnings,
    };

    if method == WindingMethod::Contour && !report.boundary_case {
        let (value, nodes, radius) = winding_contour(&gf)?;
        let rounded = value.re.round();
        report.contour_value = Some(value);
        report.contour_nodes = Some(nodes);
        report.contour_radius = Some(radius);
        if rounded as usize != report.n_w {
            report.warnings.push(format!(
                "contour gives {rounded} but {} interior zeros were found",
                report.n_w
            ));
        }
        report.n_w = rounded.max(0.0) as usize;
    }
    Ok(report)
}

fn winding_contour(gf: &RationalGF) -> Result<(C64, usize, f64)> {
    for radius in [1.0, 1.0 - 1e-9] {
        let mut nodes = CONTOUR_NODES;
        loop {
            let v = contour_integral(|z| gf.log_derivative(z), radius, nodes);
            if !(v.re.is_finite() && v.im.is_finite()) {
                break;
            }
            let residual = (v - C64::new(v.re.round(), 0.0)).norm();
            if residual < CONTOUR_RESIDUAL_TOL {
                return Ok((v, nodes, radius));
            }
            if nodes >= CONTOUR_MAX_NODES {
                return Err(Error::NotConverged(format!(
                    "winding contour residual {residual:.3e} with {nodes} nodes"
                )));
            }
            nodes *= 2;
        }
    }
    Err(Error::NotConverged("winding contour integrand is not finite".into()))
}

#[derive(Debug, Clone, Copy)]
pub struct QuadratureResult {
    pub value: f64,
    pub nodes: usize,
    /// Change from the previous node count.
    pub change: f64,
}

/// `(1 / 2 pi i) \oint |phi_eta(z)|^2 / z dz` over the unit circle.
pub fn return_probability_integral(evo: &MonitoredEvolution) -> Result<QuadratureResult> {
    let gf = build_rational_forms(evo.system(), evo.tau())?;
    if let Some(z) = gf.numerator_zeros.iter().find(|z| (z.norm() - 1.0).abs() < CIRCLE_TOL) {
        return Err(Error::BoundaryCase(format!("zero of the generating function on the unit circle at {z}")));
    }
    let (x, root_eta) = (evo.x(), evo.eta().sqrt());
    let integrand = |z: C64| {
        let phi = gf.eval_phi_hat(z);
        let phi_eta = phi * root_eta / (one() - phi * (1.0 - x));
        C64::new(phi_eta.norm_sqr(), 0.0) / z
    };
    let mut nodes = CONTOUR_NODES;
    let mut previous = contour_integral(integrand, 1.0, nodes).re;
    while nodes < CONTOUR_MAX_NODES {
        nodes *= 2;
        let value = contour_integral(integrand, 1.0, nodes).re;
        let change = (value - previous).abs();
        if change < 1e-14 {
            return Ok(QuadratureResult { value, nodes, change });
        }
        previous = value;
    }
    Err(Error::NotConverged(format!(
        "return probability quadrature did not settle with {nodes} nodes"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amplitudes::{monitored_series, monitored_series_adaptive, transition_series};
    use crate::sampling::{random_bright_system, random_system};
    use crate::spectral::build_evolution;
    use crate::twolevel::{closed_gf, qubit_system, ClosedGf, TwoLevelParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    /// Taylor coefficient `n` of `f` by a Cauchy sum on `|z| = r`.
    fn taylor_coefficient<F: Fn(C64) -> C64>(f: F, n: usize, r: f64, m: usize) -> C64 {
        let mut acc = c(0.0, 0.0);
        for k in 0..m {
            let z = C64::from_polar(r, 2.0 * PI * k as f64 / m as f64);
            acc += f(z) / z.powi(n as i32);
        }
        acc / m as f64
    }

    #[test]
    fn u_hat_vanishes_at_origin() {
        let sys = qubit_system(1.0);
        assert_eq!(eval_u_hat(&sys, 0.7, c(0.0, 0.0)).unwrap(), c(0.0, 0.0));
        assert_eq!(eval_phi_hat(&sys, 0.7, c(0.0, 0.0)).unwrap(), c(0.0, 0.0));
    }

    #[test]
    fn u_hat_matches_truncated_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sys = random_system(&mut rng, 3);
        let tau = 0.9;
        let z = C64::from_polar(0.5, 0.7);
        let mut sum = c(0.0, 0.0);
        for n in 1..=200 {
            let un: C64 = sys
                .energies()
                .iter()
                .zip(sys.overlaps())
                .map(|(&e, &p)| C64::from_polar(p, -(n as f64) * e * tau))
                .sum();
            sum += un * z.powi(n);
        }
        assert!((eval_u_hat(&sys, tau, z).unwrap() - sum).norm() < 1e-10);
    }

    #[test]
    fn pole_is_refused() {
        let sys = qubit_system(1.0);
        let z = C64::from_polar(1.0, 0.4);
        assert!(matches!(eval_u_hat(&sys, 0.4, z), Err(Error::Singularity { .. })));
    }

    #[test]
    fn qubit_phi_hat_closed_form() {
        let params = TwoLevelParams::from_cos(0.3, 1.0).unwrap();
        let sys = qubit_system(1.0);
        for &z in &[c(0.2, 0.1), c(-0.5, 0.4), C64::from_polar(1.0, 1.0)] {
            let a = eval_phi_hat(&sys, params.tau, z).unwrap();
            let b = closed_gf(&params, z, ClosedGf::Phi).unwrap();
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn phi_hat_unimodular_on_circle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sys = random_bright_system(&mut rng, 5, 1.0);
        for k in 0..512 {
            let z = C64::from_polar(1.0, 2.0 * PI * (k as f64 + 0.5) / 512.0);
            let v = eval_phi_hat(&sys, 1.0, z).unwrap();
            assert!((v.norm() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn eta_routes_agree_on_random_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sys = random_system(&mut rng, 4);
        let evo = build_evolution(&sys, 0.8, 0.4).unwrap();
        let z = c(0.3, 0.2);
        let a = eval_phi_eta_hat(&evo, z, Route::ViaU).unwrap();
        let b = eval_phi_eta_hat(&evo, z, Route::Resolvent).unwrap();
        let d = eval_phi_eta_hat(&evo, z, Route::ViaPhi).unwrap();
        assert!((a - b).norm() < 1e-11);
        assert!((a - d).norm() < 1e-11);
    }

    #[test]
    fn eta_one_equals_projective() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let sys = random_system(&mut rng, 3);
        let evo = build_evolution(&sys, 1.1, 1.0).unwrap();
        let z = c(-0.2, 0.5);
        let a = eval_phi_eta_hat(&evo, z, Route::ViaU).unwrap();
        let b = eval_phi_hat(&sys, 1.1, z).unwrap();
        assert!((a - b).norm() < 1e-14);
    }

    #[test]
    fn qubit_eta_closed_forms() {
        let params = TwoLevelParams::from_cos(0.5, 0.75).unwrap();
        let sys = qubit_system(1.0);
        let evo = build_evolution(&sys, params.tau, 0.75).unwrap();
        let target = sys.target().unwrap().clone();
        let z = c(0.4, 0.0);
        for route in [Route::ViaU, Route::ViaPhi, Route::Resolvent] {
            let a = eval_phi_eta_hat(&evo, z, route).unwrap();
            assert!((a - closed_gf(&params, z, ClosedGf::PhiEta).unwrap()).norm() < 1e-12);
            let a = eval_phi_eta_prime_hat(&evo, &target, z, route).unwrap();
            assert!((a - closed_gf(&params, z, ClosedGf::PhiEtaPrime).unwrap()).norm() < 1e-12);
        }
    }

    #[test]
    fn transition_gf_vanishes_for_unreachable_target() {
        // Level 2 is dark and the target is that eigenstate.
        let v = DMatrix::<C64>::identity(3, 3);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let psi = DVector::from_vec(vec![c(h, 0.0), c(h, 0.0), c(0.0, 0.0)]);
        let target = DVector::from_vec(vec![c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        let sys = SpectralSystem::new(vec![0.3, -0.8, 1.7], v, psi, Some(target.clone())).unwrap();
        let evo = build_evolution(&sys, 1.0, 0.6).unwrap();
        for &z in &[c(0.1, 0.2), c(-0.7, 0.1), c(0.5, -0.5)] {
            for route in [Route::ViaU, Route::ViaPhi, Route::Resolvent] {
                assert!(eval_phi_eta_prime_hat(&evo, &target, z, route).unwrap().norm() < 1e-15);
            }
        }
    }

    #[test]
    fn coefficients_match_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sys = random_system(&mut rng, 4);
        let evo = build_evolution(&sys, 0.7, 0.5).unwrap();
        let target = sys.target().unwrap().clone();
        let ret = monitored_series(&evo, 50).unwrap();
        let tr = transition_series(&evo, &target, 30).unwrap();
        for n in 1..=50 {
            let coef = taylor_coefficient(|z| eval_phi_eta_hat(&evo, z, Route::ViaU).unwrap(), n, 0.9, 2048);
            assert!((coef - ret.values[n - 1]).norm() < 1e-10, "n = {n}");
        }
        for n in 1..=30 {
            let coef = taylor_coefficient(
                |z| eval_phi_eta_prime_hat(&evo, &target, z, Route::ViaU).unwrap(),
                n,
                0.9,
                2048,
            );
            assert!((coef - tr.values[n - 1]).norm() < 1e-10, "n = {n}");
        }
    }

    #[test]
    fn rational_forms_for_qubit() {
        let params = TwoLevelParams::from_cos(0.5, 1.0).unwrap();
        let gf = build_rational_forms(&qubit_system(1.0), params.tau).unwrap();
        assert_eq!(gf.numerator_zeros.len(), 2);
        assert!((gf.numerator_zeros[1] - c(0.5, 0.0)).norm() < 1e-14);
        assert!((gf.pole_list[0] - c(2.0, 0.0)).norm() < 1e-13);
        let z = c(0.3, -0.6);
        assert!((gf.eval_blaschke(z) - closed_gf(&params, z, ClosedGf::Phi).unwrap()).norm() < 1e-14);
    }

    #[test]
    fn single_bright_level_rational_form() {
        let v = DMatrix::<C64>::identity(2, 2);
        let psi = DVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]);
        let sys = SpectralSystem::new(vec![0.9, -0.4], v, psi, None).unwrap();
        let gf = build_rational_forms(&sys, 1.3).unwrap();
        assert_eq!(gf.p_coeffs.len(), 1);
        assert_eq!(gf.numerator_zeros, vec![c(0.0, 0.0)]);
        assert_eq!(gf.dark_levels, vec![1]);
        let z = c(0.2, 0.7);
        let expected = z * C64::from_polar(1.0, -0.9 * 1.3);
        assert!((gf.eval_phi_hat(z) - expected).norm() < 1e-15);
        assert!((gf.eval_blaschke(z) - expected).norm() < 1e-15);
    }

    #[test]
    fn rational_polynomials_reconstruct_from_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let sys = random_system(&mut rng, 5);
        let gf = build_rational_forms(&sys, 0.9).unwrap();
        let lead = *gf.p_coeffs.last().unwrap();
        let mut rebuilt = vec![lead];
        for &zk in &gf.numerator_zeros[1..] {
            rebuilt = poly_mul(&rebuilt, &[-zk, one()]);
        }
        for (a, b) in rebuilt.iter().zip(&gf.p_coeffs) {
            assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn winding_for_qubit_and_single_level() {
        let params = TwoLevelParams::from_cos(0.5, 1.0).unwrap();
        for method in [WindingMethod::Roots, WindingMethod::Contour] {
            let r = winding_number(&qubit_system(1.0), params.tau, method).unwrap();
            assert_eq!(r.certified_n_w().unwrap(), 2);
        }
        let v = DMatrix::<C64>::identity(3, 3);
        let psi = DVector::from_vec(vec![c(0.0, 0.0), c(0.0, 1.0), c(0.0, 0.0)]);
        let sys = SpectralSystem::new(vec![0.9, -0.4, 2.0], v, psi, None).unwrap();
        let r = winding_number(&sys, 1.0, WindingMethod::Contour).unwrap();
        assert_eq!(r.certified_n_w().unwrap(), 1);
        assert!(r.contour_residual().unwrap() < 1e-6);
        assert_eq!(r.dark_levels, vec![0, 2]);
    }

    #[test]
    fn qubit_at_j_tau_pi_is_boundary_case() {
        for tau in [PI, 2.0 * PI, 3.0 * PI] {
            let r = winding_number(&qubit_system(1.0), tau, WindingMethod::Contour).unwrap();
            assert!(r.boundary_case);
            assert!(!r.zeros_on_circle.is_empty());
            assert!(r.contour_value.is_none());
            assert!(matches!(r.certified_n_w(), Err(Error::BoundaryCase(_))));
            assert_eq!(r.degenerate_levels, vec![vec![0, 1]]);
        }
    }

    #[test]
    fn energy_degeneracy_is_not_a_boundary_case() {
        // Ring of four sites: energies -2, 0, 0, 2 with the detector on one site.
        let mut h = DMatrix::<C64>::zeros(4, 4);
        for i in 0..4 {
            h[(i, (i + 1) % 4)] = c(-1.0, 0.0);
            h[((i + 1) % 4, i)] = c(-1.0, 0.0);
        }
        let mut psi = DVector::<C64>::zeros(4);
        psi[0] = c(1.0, 0.0);
        let sys = SpectralSystem::from_hamiltonian(&h, psi, None).unwrap();
        let r = winding_number(&sys, 1.0, WindingMethod::Contour).unwrap();
        assert!(!r.boundary_case);
        assert_eq!(r.certified_n_w().unwrap(), 3);
        // Stroboscopic coincidence of -2 and 2 at tau = pi / 2.
        let r = winding_number(&sys, std::f64::consts::FRAC_PI_2, WindingMethod::Roots).unwrap();
        assert!(r.boundary_case);
    }

    #[test]
    fn winding_report_json_has_fields() {
        let r = winding_number(&qubit_system(1.0), 1.0, WindingMethod::Contour).unwrap();
        let j = r.to_json();
        assert_eq!(j["n_w"], 2);
        assert_eq!(j["certified"], true);
        assert_eq!(j["zeros"].as_array().unwrap().len(), 2);
        let b = winding_number(&qubit_system(1.0), PI, WindingMethod::Roots).unwrap().to_json();
        assert!(b["n_w"].is_null());
        assert_eq!(b["boundary_case"], true);
    }

    #[test]
    fn return_probability_is_one() {
        let params = TwoLevelParams::from_cos(0.5, 0.3).unwrap();
        let evo = build_evolution(&qubit_system(1.0), params.tau, 0.3).unwrap();
        assert!((return_probability_integral(&evo).unwrap().value - 1.0).abs() < 1e-8);
        let evo = build_evolution(&qubit_system(1.0), params.tau, 1.0).unwrap();
        assert!((return_probability_integral(&evo).unwrap().value - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let sys = random_bright_system(&mut rng, 4, 1.0);
        let evo = build_evolution(&sys, 1.0, 0.6).unwrap();
        let q = return_probability_integral(&evo).unwrap();
        let s = monitored_series_adaptive(&evo, 1e-12).unwrap();
        assert!((q.value - s.captured_probability).abs() < 1e-7);
    }

    #[test]
    fn reflection_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let sys = random_system(&mut rng, 5);
        for _ in 0..50 {
            let z = C64::from_polar(rng.random_range(0.1..0.9), rng.random_range(0.0..2.0 * PI));
            let lhs = one() + eval_u_hat(&sys, 0.8, z).unwrap();
            let rhs = -eval_u_hat(&sys, 0.8, one() / z.conj()).unwrap().conj();
            assert!((lhs - rhs).norm() < 1e-10);
        }
    }

    #[test]
    fn positivity_inside_disk() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let sys = random_system(&mut rng, 6);
        for _ in 0..1000 {
            let z = C64::from_polar(rng.random::<f64>().sqrt() * 0.999_999, rng.random_range(0.0..2.0 * PI));
            let x = rng.random::<f64>();
            let u = eval_u_hat(&sys, 1.3, z).unwrap();
            assert!((one() + u * x).re > 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn routes_agree(seed in 0u64..10_000, dim in 1usize..=6, eta in 0.01f64..=1.0,
                        r in 0.0f64..0.95, arg in 0.0f64..(2.0 * PI)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sys = random_system(&mut rng, dim);
            let evo = build_evolution(&sys, 0.9, eta).unwrap();
            let z = C64::from_polar(r, arg);
            let a = eval_phi_eta_hat(&evo, z, Route::ViaU).unwrap();
            let b = eval_phi_eta_hat(&evo, z, Route::ViaPhi).unwrap();
            let d = eval_phi_eta_hat(&evo, z, Route::Resolvent).unwrap();
            prop_assert!((a - b).norm() < 1e-10);
            prop_assert!((a - d).norm() < 1e-10);
        }

        #[test]
        fn winding_methods_agree(seed in 0u64..10_000, dim in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sys = random_bright_system(&mut rng, dim, 1.0);
            let roots = winding_number(&sys, 1.0, WindingMethod::Roots).unwrap();
            let contour = winding_number(&sys, 1.0, WindingMethod::Contour).unwrap();
            prop_assert!(!roots.boundary_case);
            prop_assert_eq!(roots.n_w, dim);
            prop_assert_eq!(contour.n_w, roots.n_w);
            prop_assert!(contour.contour_residual().unwrap() < 1e-6);
        }
    }
}
