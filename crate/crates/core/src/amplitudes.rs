//! Return and transition amplitude series computed by operator iteration.
//!
//! The monitored amplitudes are `phi_{eta,n} = sqrt(eta) <psi|U (Q_eta U)^(n-1)|psi>`.
//! Every no-detection operator used in this crate is of the form
//! `alpha 1 - beta P` with `P` the detector projector, so one step costs a
//! single matrix-vector product with `U` plus a rank-one update.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::linalg;
use crate::spectral::MonitoredEvolution;

pub const DEFAULT_TAIL_EPS: f64 = 1e-10;
pub const HARD_STEP_CAP: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Protocol {
    Unitary,
    Weak { eta: f64 },
    Projective,
    Random { p: f64 },
}

impl Protocol {
    pub fn from_eta(eta: f64) -> Self {
        if eta == 1.0 {
            Protocol::Projective
        } else {
            Protocol::Weak { eta }
        }
    }

    pub fn tag(&self) -> String {
        match self {
            Protocol::Unitary => "unitary".into(),
            Protocol::Weak { eta } => format!("weak({eta})"),
            Protocol::Projective => "projective".into(),
            Protocol::Random { p } => format!("random({p})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesKind {
    Return,
    Transition,
}

/// Truncated amplitude sequence; `values[0]` is the `n = 1` amplitude.
#[derive(Debug, Clone)]
pub struct AmplitudeSeries {
    pub values: Vec<C64>,
    pub captured_probability: f64,
    pub protocol: Protocol,
    pub kind: SeriesKind,
    pub tau: f64,
    /// Set when the accumulated probability has stopped growing well below
    /// one, which happens when part of the state never reaches the target.
    pub saturated: bool,
}

impl AmplitudeSeries {
    pub(crate) fn from_values(values: Vec<C64>, protocol: Protocol, kind: SeriesKind, tau: f64) -> Self {
        let captured_probability = values.iter().map(|v| v.norm_sqr()).sum();
        let saturated = match (kind, values.last()) {
            (SeriesKind::Transition, Some(last)) => {
                captured_probability < 1.0 - 1e-9 && last.norm_sqr() < 1e-30
            }
            _ => false,
        };
        Self {
            values,
            captured_probability,
            protocol,
            kind,
            tau,
            saturated,
        }
    }

    pub fn n_max(&self) -> usize {
        self.values.len()
    }

    pub fn probabilities(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(|v| v.norm_sqr())
    }

    /// CSV with columns `n, re, im, abs2, cumulative`. `header` lines are
    /// written first, each prefixed with `# `.
    pub fn write_csv<W: Write>(&self, mut out: W, header: &[String]) -> Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "n,re,im,abs2,cumulative")?;
        let mut cumulative = 0.0;
        for (i, v) in self.values.iter().enumerate() {
            let p = v.norm_sqr();
            cumulative += p;
            writeln!(
                out,
                "{},{},{},{},{}",
                i + 1,
                fmt_f64(v.re),
                fmt_f64(v.im),
                fmt_f64(p),
                fmt_f64(cumulative)
            )?;
        }
        Ok(())
    }
}

/// Streams `prefactor <bra|U M^(n-1)|psi>` for `M = (alpha 1 - beta P) U`.
pub struct RankOneIter<'a> {
    step_unitary: &'a DMatrix<C64>,
    detector: &'a DVector<C64>,
    bra: &'a DVector<C64>,
    alpha: f64,
    beta: f64,
    prefactor: f64,
    state: DVector<C64>,
}

impl<'a> RankOneIter<'a> {
    pub fn new(
        step_unitary: &'a DMatrix<C64>,
        detector: &'a DVector<C64>,
        bra: &'a DVector<C64>,
        alpha: f64,
        beta: f64,
        prefactor: f64,
    ) -> Self {
        Self {
            step_unitary,
            detector,
            bra,
            alpha,
            beta,
            prefactor,
            state: detector.clone(),
        }
    }
}

impl Iterator for RankOneIter<'_> {
    type Item = C64;

    fn next(&mut self) -> Option<C64> {
        let evolved = self.step_unitary * &self.state;
        let amp = self.bra.dotc(&evolved) * self.prefactor;
        let on_detector = self.detector.dotc(&evolved);
        self.state = evolved.scale(self.alpha) - self.detector * (on_detector * self.beta);
        Some(amp)
    }
}

fn monitored_iter<'a>(evo: &'a MonitoredEvolution, bra: &'a DVector<C64>) -> RankOneIter<'a> {
    RankOneIter::new(
        evo.step_unitary(),
        evo.system().detector(),
        bra,
        1.0,
        evo.x(),
        evo.eta().sqrt(),
    )
}

/// `u_n = <psi|U^n|psi> = sum_j p_j exp(-i n E_j tau)`.
pub fn unitary_series(evo: &MonitoredEvolution, n_max: usize) -> Result<AmplitudeSeries> {
    check_n_max(n_max)?;
    let sys = evo.system();
    let tau = evo.tau();
    let values = (1..=n_max)
        .map(|n| {
            sys.energies()
                .iter()
                .zip(sys.overlaps())
                .map(|(&e, &p)| C64::from_polar(p, -(n as f64) * e * tau))
                .sum()
        })
        .collect();
    Ok(AmplitudeSeries::from_values(values, Protocol::Unitary, SeriesKind::Return, tau))
}

/// `phi_{eta,n} = sqrt(eta) <psi|U (Q_eta U)^(n-1)|psi>` for `n = 1..=n_max`.
pub fn monitored_series(evo: &MonitoredEvolution, n_max: usize) -> Result<AmplitudeSeries> {
    check_n_max(n_max)?;
    let psi = evo.system().detector();
    let values = monitored_iter(evo, psi).take(n_max).collect();
    Ok(AmplitudeSeries::from_values(
        values,
        Protocol::from_eta(evo.eta()),
        SeriesKind::Return,
        evo.tau(),
    ))
}

/// `phi'_{eta,n} = sqrt(eta) <target|U (Q_eta U)^(n-1)|psi>`.
pub fn transition_series(
    evo: &MonitoredEvolution,
    target: &DVector<C64>,
    n_max: usize,
) -> Result<AmplitudeSeries> {
    check_n_max(n_max)?;
    if target.len() != evo.system().dim() {
        return Err(Error::DimensionMismatch("target length differs from system dimension".into()));
    }
    let norm = target.norm();
    if (norm - 1.0).abs() >= crate::spectral::UNIT_TOL {
        return Err(Error::NonUnitVector { what: "target state", norm });
    }
    let values = monitored_iter(evo, target).take(n_max).collect();
    Ok(AmplitudeSeries::from_values(
        values,
        Protocol::from_eta(evo.eta()),
        SeriesKind::Transition,
        evo.tau(),
    ))
}

/// Smallest `N` with `1 - sum_{n <= N} |phi_{eta,n}|^2 < tail_eps`.
///
/// The spectral radius of `Q_eta U` on the detector-visible subspace gives
/// the geometric decay rate; when it predicts more than [`HARD_STEP_CAP`]
/// steps the call fails early, otherwise the tail is monitored directly.
pub fn adaptive_truncation(evo: &MonitoredEvolution, tail_eps: f64) -> Result<usize> {
    if !(tail_eps > 0.0 && tail_eps < 1.0) {
        return Err(Error::InvalidParameter(format!("tail_eps must lie in (0, 1), got {tail_eps}")));
    }
    if evo.eta() < 1e-5 {
        log::warn!(
            "eta = {} is very small; the mean return time scales like 1/eta and truncation may need up to {} steps",
            evo.eta(),
            HARD_STEP_CAP
        );
    }
    let radius = spectral_radius(&evo.effective_monitored_step())?;
    if radius >= 1.0 - 1e-15 {
        return Err(Error::NotConverged(format!(
            "captured probability cannot reach 1 - {tail_eps}: Q_eta U has an eigenvalue of modulus {radius}"
        )));
    }
    let predicted = tail_eps.ln() / (2.0 * radius.ln());
    if predicted.is_finite() && predicted > HARD_STEP_CAP as f64 {
        return Err(Error::NotConverged(format!(
            "decay rate {radius} needs about {predicted:.3e} steps, above the cap of {HARD_STEP_CAP}"
        )));
    }

    let psi = evo.system().detector();
    let mut captured = Neumaier::default();
    for (i, amp) in monitored_iter(evo, psi).take(HARD_STEP_CAP).enumerate() {
        captured.add(amp.norm_sqr());
        if 1.0 - captured.sum() < tail_eps {
            return Ok(i + 1);
        }
    }
    Err(Error::NotConverged(format!(
        "captured probability {} stalled below 1 - {tail_eps} after {HARD_STEP_CAP} steps",
        captured.sum()
    )))
}

/// Monitored series truncated adaptively at `tail_eps`.
pub fn monitored_series_adaptive(evo: &MonitoredEvolution, tail_eps: f64) -> Result<AmplitudeSeries> {
    let n = adaptive_truncation(evo, tail_eps)?;
    monitored_series(evo, n)
}

pub(crate) fn spectral_radius(m: &DMatrix<C64>) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    Ok(linalg::eigenvalues(m)?
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max))
}

fn check_n_max(n_max: usize) -> Result<()> {
    if n_max == 0 {
        return Err(Error::InvalidParameter("n_max must be at least 1".into()));
    }
    Ok(())
}

/// Compensated summation.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn sum(&self) -> f64 {
        self.sum + self.comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{random_bright_system, random_system};
    use crate::spectral::{build_evolution, SpectralSystem};
    use crate::twolevel::{closed_phi_k, closed_phi_prime_k, qubit_system, TwoLevelParams};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn qubit_evo(c: f64, eta: f64) -> MonitoredEvolution {
        let tau = if c == 1.0 { 2.0 * PI } else { c.acos() };
        build_evolution(&qubit_system(1.0), tau, eta).unwrap()
    }

    #[test]
    fn unitary_series_first_term_is_cos() {
        let evo = qubit_evo(0.5, 1.0);
        let s = unitary_series(&evo, 4).unwrap();
        assert!((s.values[0] - C64::new(0.5, 0.0)).norm() < 1e-14);
        assert_eq!(s.protocol, Protocol::Unitary);
    }

    #[test]
    fn unitary_series_single_bright_level_has_unit_modulus() {
        let e = vec![0.7, -0.2, 1.1];
        let v = DMatrix::<C64>::identity(3, 3);
        let psi = DVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)]);
        let sys = SpectralSystem::new(e, v, psi, None).unwrap();
        let evo = build_evolution(&sys, 0.9, 0.5).unwrap();
        let s = unitary_series(&evo, 20).unwrap();
        for (n, u) in s.values.iter().enumerate() {
            let expected = C64::from_polar(1.0, -((n + 1) as f64) * 0.7 * 0.9);
            assert!((u - expected).norm() < 1e-13);
        }
    }

    #[test]
    fn unitary_series_matches_matrix_multiplications() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sys = random_system(&mut rng, 4);
        let evo = build_evolution(&sys, 0.8, 0.5).unwrap();
        let u = evo.step_unitary();
        let psi = sys.detector();
        let u3 = u * u * u;
        let direct = psi.dotc(&(u3 * psi));
        let s = unitary_series(&evo, 3).unwrap();
        assert!((s.values[2] - direct).norm() < 1e-13);
    }

    #[test]
    fn first_monitored_amplitude() {
        let evo = qubit_evo(0.5, 0.36);
        let s = monitored_series(&evo, 3).unwrap();
        assert!((s.values[0] - C64::new(0.6 * 0.5, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn projective_qubit_matches_closed_forms() {
        for &c in &[0.5, -0.3, 0.9] {
            let evo = qubit_evo(c, 1.0);
            let params = TwoLevelParams::from_cos(c, 1.0).unwrap();
            let ret = monitored_series(&evo, 30).unwrap();
            let target = evo.system().target().unwrap().clone();
            let tr = transition_series(&evo, &target, 30).unwrap();
            for k in 1..=30 {
                assert!((ret.values[k - 1] - closed_phi_k(&params, k).unwrap()).norm() < 1e-13);
                assert!((tr.values[k - 1] - closed_phi_prime_k(&params, k).unwrap()).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn dark_target_at_j_tau_pi() {
        let evo = qubit_evo(-1.0, 1.0);
        let ret = monitored_series(&evo, 10).unwrap();
        assert!((ret.values[0].norm_sqr() - 1.0).abs() < 1e-13);
        assert!(ret.values[1..].iter().all(|v| v.norm_sqr() < 1e-26));
        let target = evo.system().target().unwrap().clone();
        let tr = transition_series(&evo, &target, 10).unwrap();
        assert!(tr.values.iter().all(|v| v.norm_sqr() < 1e-26));
        assert!(tr.saturated);
    }

    #[test]
    fn transition_to_detector_equals_return() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sys = random_system(&mut rng, 5);
        let evo = build_evolution(&sys, 0.6, 0.4).unwrap();
        let a = monitored_series(&evo, 40).unwrap();
        let b = transition_series(&evo, sys.detector(), 40).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).norm() < 1e-15);
        }
    }

    #[test]
    fn transition_rejects_non_unit_target() {
        let evo = qubit_evo(0.5, 1.0);
        let t = evo.system().target().unwrap().scale(2.0);
        assert!(matches!(transition_series(&evo, &t, 3), Err(Error::NonUnitVector { .. })));
        assert!(monitored_series(&evo, 0).is_err());
    }

    #[test]
    fn adaptive_truncation_matches_geometric_tail() {
        let evo = qubit_evo(0.5, 1.0);
        let eps = 1e-8;
        // Closed-form tail: sum_{k > N} s^4 c^(2(k-2)) = s^2 c^(2(N-1)).
        let (c2, s2) = (0.25f64, 0.75f64);
        let minimal = (1..).find(|&n: &i32| s2 * c2.powi(n - 1) < eps).unwrap() as usize;
        assert_eq!(adaptive_truncation(&evo, eps).unwrap(), minimal);
    }

    #[test]
    fn adaptive_truncation_cos_zero_needs_two_steps() {
        let evo = qubit_evo(0.0, 1.0);
        assert_eq!(adaptive_truncation(&evo, 1e-8).unwrap(), 2);
    }

    #[test]
    fn adaptive_truncation_random_bright_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sys = random_bright_system(&mut rng, 4, 1.0);
        let evo = build_evolution(&sys, 1.0, 0.5).unwrap();
        let n = adaptive_truncation(&evo, 1e-8).unwrap();
        let s = monitored_series(&evo, n).unwrap();
        assert!(s.captured_probability > 1.0 - 1e-8);
        let shorter = monitored_series(&evo, n - 1).unwrap();
        assert!(shorter.captured_probability <= 1.0 - 1e-8);
    }

    #[test]
    fn adaptive_truncation_rejects_bad_eps() {
        let evo = qubit_evo(0.5, 1.0);
        assert!(adaptive_truncation(&evo, 0.0).is_err());
        assert!(adaptive_truncation(&evo, 1.0).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let evo = qubit_evo(0.5, 1.0);
        let s = monitored_series(&evo, 3).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf, &["seed: none".into()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "# seed: none");
        assert_eq!(lines[1], "n,re,im,abs2,cumulative");
        assert_eq!(lines.len(), 5);
        assert!(lines[2].starts_with("1,5.0000000000000"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn captured_probability_grows_monotonically_to_one(seed in 0u64..1000, dim in 1usize..=6, eta in 0.2f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sys = random_bright_system(&mut rng, dim, 1.0);
            let evo = build_evolution(&sys, 1.0, eta).unwrap();
            let n = adaptive_truncation(&evo, 1e-10).unwrap();
            let s = monitored_series(&evo, n).unwrap();
            let mut acc = 0.0;
            for p in s.probabilities() {
                let next = acc + p;
                prop_assert!(next >= acc);
                acc = next;
            }
            prop_assert!(acc <= 1.0 + 1e-9);
            prop_assert!(acc > 1.0 - 1e-10 - 1e-13);
        }

        #[test]
        fn projective_series_uses_complementary_projector(seed in 0u64..1000, dim in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sys = random_system(&mut rng, dim);
            let evo = build_evolution(&sys, 0.7, 1.0).unwrap();
            let s = monitored_series(&evo, 25).unwrap();
            let n = sys.dim();
            let q = DMatrix::<C64>::identity(n, n) - evo.projector();
            let qu = &q * evo.step_unitary();
            let psi = sys.detector();
            let mut v = psi.clone();
            for k in 0..25 {
                let direct = psi.dotc(&(evo.step_unitary() * &v));
                prop_assert!((direct - s.values[k]).norm() < 1e-12);
                v = &qu * v;
            }
        }
    }
}
