//! Projective measurements performed at random steps with probability `p`.
//!
//! One step is `U` followed by a measurement with probability `p`:
//!
//! ```text
//! K0  = sqrt(p) P U       detected
//! K01 = sqrt(p) Q U       measured, not detected
//! K02 = sqrt(1 - p) U     not measured
//! R_p = (sqrt(p) + sqrt(1 - p)) 1 - sqrt(p) P,   R_p U = K01 + K02
//! ```
//!
//! The amplitude series `sqrt(p) <psi|U (R_p U)^(n-1)|psi>` is provided as
//! stated, but `R_p U` is not a contraction for `p < 1` and the series does
//! not decay. First-detection statistics of the physical protocol come from
//! the Kraus channel (density-matrix route) or from Monte Carlo trajectories.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::amplitudes::{spectral_radius, AmplitudeSeries, Neumaier, Protocol, RankOneIter, SeriesKind, HARD_STEP_CAP};
use crate::error::{Error, Result};
use crate::genfunc::{winding_number, WindingMethod, WindingReport};
use crate::io::fmt_f64;
use crate::linalg::{identity_deviation, max_abs, solve};
use crate::spectral::{MonitoredEvolution, SpectralSystem};

/// Tolerance on the Kraus completeness and `R_p U` identities.
pub const KRAUS_TOL: f64 = 1e-12;
/// Per-trajectory step cap is `ceil(MC_CAP_FACTOR n_w / p)`.
pub const MC_CAP_FACTOR: f64 = 200.0;

#[derive(Debug, Clone)]
pub struct RandomProtocol {
    pub p: f64,
    pub tau: f64,
    pub kraus_detect: DMatrix<C64>,
    pub kraus_miss: DMatrix<C64>,
    pub kraus_skip: DMatrix<C64>,
    pub r_op: DMatrix<C64>,
    system: SpectralSystem,
    step_unitary: DMatrix<C64>,
}

impl RandomProtocol {
    pub fn system(&self) -> &SpectralSystem {
        &self.system
    }

    pub fn step_unitary(&self) -> &DMatrix<C64> {
        &self.step_unitary
    }

    /// `max |K0'K0 + K01'K01 + K02'K02 - 1|`.
    pub fn completeness_deviation(&self) -> f64 {
        let sum = self.kraus_detect.adjoint() * &self.kraus_detect
            + self.kraus_miss.adjoint() * &self.kraus_miss
            + self.kraus_skip.adjoint() * &self.kraus_skip;
        identity_deviation(&sum)
    }

    /// `max |R_p U - K01 - K02|`.
    pub fn split_deviation(&self) -> f64 {
        max_abs(&(&self.r_op * &self.step_unitary - &self.kraus_miss - &self.kraus_skip))
    }

    /// Mean time between measurements, `tau / p`.
    pub fn mean_interval(&self) -> f64 {
        self.tau / self.p
    }

    /// Probability that the next measurement happens `n` steps later.
    pub fn interval_probability(&self, n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        (1.0 - self.p).powi(n as i32 - 1) * self.p
    }

    fn alpha(&self) -> f64 {
        self.p.sqrt() + (1.0 - self.p).sqrt()
    }
}

/// Assembles the Kraus set from a projective (`eta = 1`) evolution.
pub fn build_random_protocol(evo_base: &MonitoredEvolution, p: f64) -> Result<RandomProtocol> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidParameter(format!("p must lie in (0, 1], got {p}")));
    }
    if evo_base.eta() != 1.0 {
        return Err(Error::InvalidParameter(format!(
            "random-time protocol needs a projective evolution, got eta = {}",
            evo_base.eta()
        )));
    }
    let u = evo_base.step_unitary().clone();
    let proj = evo_base.projector();
    let n = u.nrows();
    let q = DMatrix::<C64>::identity(n, n) - proj;
    let (sp, sq) = (p.sqrt(), (1.0 - p).sqrt());
    let proto = RandomProtocol {
        p,
        tau: evo_base.tau(),
        kraus_detect: (proj * &u).scale(sp),
        kraus_miss: (&q * &u).scale(sp),
        kraus_skip: u.scale(sq),
        r_op: DMatrix::<C64>::identity(n, n).scale(sp + sq) - proj.scale(sp),
        system: evo_base.system().clone(),
        step_unitary: u,
    };
    let dev = proto.completeness_deviation().max(proto.split_deviation());
    if dev > KRAUS_TOL {
        return Err(Error::Linalg(format!("Kraus identities violated by {dev:.3e}")));
    }
    Ok(proto)
}

/// `phi_{p,n} = sqrt(p) <psi|U (R_p U)^(n-1)|psi>`.
pub fn phi_p_series(proto: &RandomProtocol, n_max: usize) -> Result<AmplitudeSeries> {
    if n_max == 0 {
        return Err(Error::InvalidParameter("n_max must be at least 1".into()));
    }
    let psi = proto.system.detector();
    let values = RankOneIter::new(&proto.step_unitary, psi, psi, proto.alpha(), proto.p.sqrt(), proto.p.sqrt())
        .take(n_max)
        .collect();
    Ok(AmplitudeSeries::from_values(values, Protocol::Random { p: proto.p }, SeriesKind::Return, proto.tau))
}

/// `z sqrt(p) <psi|U (1 - z R_p U)^-1|psi>` by a linear solve.
pub fn phi_p_hat(proto: &RandomProtocol, z: C64) -> Result<C64> {
    let n = proto.step_unitary.nrows();
    let a = DMatrix::<C64>::identity(n, n) - (&proto.r_op * &proto.step_unitary) * z;
    let psi = proto.system.detector();
    let v = solve(&a, psi).map_err(|_| Error::Singularity { z })?;
    Ok(psi.dotc(&(&proto.step_unitary * v)) * z * proto.p.sqrt())
}

/// Spectral radius of `R_p U` on the detector-visible subspace.
pub fn r_p_spectral_radius(proto: &RandomProtocol) -> Result<f64> {
    let spectrum = proto.system.effective_levels(proto.tau);
    spectral_radius(&spectrum.rank_one_step(proto.alpha(), proto.p.sqrt()))
}

/// First-detection distribution of the Kraus channel.
#[derive(Debug, Clone)]
pub struct KrausDistribution {
    /// `probabilities[n - 1]` is the probability of first detection at step `n`.
    pub probabilities: Vec<f64>,
    pub captured: f64,
    pub mean_n: f64,
    pub second_moment_n: f64,
}

/// Evolves `rho -> p Q U rho U' Q + (1 - p) U rho U'` and records
/// `p <psi|U rho U'|psi>` until the undetected weight drops below `tail_eps`.
pub fn kraus_detection_distribution(proto: &RandomProtocol, tail_eps: f64) -> Result<KrausDistribution> {
    if !(tail_eps > 0.0 && tail_eps < 1.0) {
        return Err(Error::InvalidParameter(format!("tail_eps must lie in (0, 1), got {tail_eps}")));
    }
    let psi = proto.system.detector();
    let u = &proto.step_unitary;
    let p = proto.p;
    let mut rho = psi * psi.adjoint();
    let (mut total, mut first, mut second) = (Neumaier::default(), Neumaier::default(), Neumaier::default());
    let mut probabilities = Vec::new();
    for step in 1..=HARD_STEP_CAP {
        let evolved = u * &rho * u.adjoint();
        let on_psi = evolved.clone() * psi;
        let overlap = psi.dotc(&on_psi);
        let f = p * overlap.re;
        // Q rho' Q = rho' - P rho' - rho' P + <psi|rho'|psi> P
        let p_rho = psi * (psi.adjoint() * &evolved);
        let rho_p = &on_psi * psi.adjoint();
        let projected = &evolved - &p_rho - &rho_p + (psi * psi.adjoint()) * overlap;
        rho = projected.scale(p) + evolved.scale(1.0 - p);
        let n = step as f64;
        total.add(f);
        first.add(n * f);
        second.add(n * n * f);
        probabilities.push(f);
        let remaining = rho.trace().re;
        if remaining < tail_eps {
            return Ok(KrausDistribution {
                probabilities,
                captured: total.sum(),
                mean_n: first.sum(),
                second_moment_n: second.sum(),
            });
        }
    }
    Err(Error::NotConverged(format!(
        "undetected weight still above {tail_eps} after {HARD_STEP_CAP} steps"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomRoute {
    /// `tau sum n |phi_{p,n}|^2` from the `R_p` amplitude series.
    AmplitudeSeries,
    /// `tau sum n F_n` from the Kraus channel.
    Kraus,
    /// `(tau / p) n_w`.
    Topological,
}

/// Mean first-detection time `<t>`.
pub fn mean_time_random(
    proto: &RandomProtocol,
    winding: &WindingReport,
    route: RandomRoute,
    tail_eps: f64,
) -> Result<f64> {
    match route {
        RandomRoute::Topological => Ok(proto.mean_interval() * winding.certified_n_w()? as f64),
        RandomRoute::Kraus => Ok(proto.tau * kraus_detection_distribution(proto, tail_eps)?.mean_n),
        RandomRoute::AmplitudeSeries => {
            let radius = r_p_spectral_radius(proto)?;
            if radius >= 1.0 - 1e-15 {
                return Err(Error::NonDecaying { radius });
            }
            let predicted = (tail_eps.ln() / (2.0 * radius.ln())).ceil();
            let cap = if predicted.is_finite() { (predicted as usize).clamp(1, HARD_STEP_CAP) } else { 1 };
            let series = phi_p_series(proto, cap)?;
            let mut first = Neumaier::default();
            let mut total = Neumaier::default();
            for (i, v) in series.values.iter().enumerate() {
                total.add(v.norm_sqr());
                first.add((i + 1) as f64 * v.norm_sqr());
                if 1.0 - total.sum() < tail_eps {
                    break;
                }
            }
            Ok(proto.tau * first.sum())
        }
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloResult {
    pub p: f64,
    pub tau: f64,
    pub trials: usize,
    pub seed: u64,
    pub step_cap: usize,
    /// Mean of `n tau` over detected trials.
    pub mean_t: f64,
    pub stderr: f64,
    pub censored: usize,
    /// Detection step `n` to count.
    pub histogram: BTreeMap<usize, usize>,
}

impl MonteCarloResult {
    /// CSV with columns `t, count`.
    pub fn write_histogram_csv<W: Write>(&self, mut out: W, header: &[String]) -> Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "t,count")?;
        for (&n, &count) in &self.histogram {
            writeln!(out, "{},{count}", fmt_f64(n as f64 * self.tau))?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        json!({
            "p": self.p,
            "tau": self.tau,
            "trials": self.trials,
            "seed": self.seed,
            "step_cap": self.step_cap,
            "mean_t": self.mean_t,
            "stderr": self.stderr,
            "censored": self.censored,
        })
    }
}

fn trajectory(u: &DMatrix<C64>, psi: &DVector<C64>, p: f64, cap: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
    let mut state = psi.clone();
    for n in 1..=cap {
        state = u * &state;
        if rng.random::<f64>() < p {
            let amp = psi.dotc(&state);
            let prob = amp.norm_sqr();
            if rng.random::<f64>() < prob {
                return Some(n);
            }
            state -= psi * amp;
            let norm = state.norm();
            state.unscale_mut(norm);
        }
    }
    None
}

/// Trajectory sampling of the first detection step. Trial `k` draws from
/// the ChaCha8 stream `k` of `seed`, so results do not depend on scheduling.
pub fn monte_carlo_first_detection(proto: &RandomProtocol, trials: usize, seed: u64) -> Result<MonteCarloResult> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    let winding = winding_number(&proto.system, proto.tau, WindingMethod::Roots)?;
    let n_w = winding.certified_n_w().unwrap_or(winding.bright_count).max(1);
    let step_cap = (MC_CAP_FACTOR * n_w as f64 / proto.p).ceil() as usize;
    let psi = proto.system.detector();
    let outcomes: Vec<Option<usize>> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            trajectory(&proto.step_unitary, psi, proto.p, step_cap, &mut rng)
        })
        .collect();

    let mut histogram = BTreeMap::new();
    let (mut sum, mut sum_sq) = (Neumaier::default(), Neumaier::default());
    let mut censored = 0;
    for outcome in &outcomes {
        match outcome {
            Some(n) => {
                *histogram.entry(*n).or_insert(0) += 1;
                let t = *n as f64 * proto.tau;
                sum.add(t);
                sum_sq.add(t * t);
            }
            None => censored += 1,
        }
    }
    if censored > 0 {
        log::warn!("{censored} of {trials} trajectories reached the cap of {step_cap} steps undetected");
    }
    let detected = (trials - censored) as f64;
    let mean_t = sum.sum() / detected;
    let var = if detected > 1.0 {
        (sum_sq.sum() - detected * mean_t * mean_t) / (detected - 1.0)
    } else {
        0.0
    };
    Ok(MonteCarloResult {
        p: proto.p,
        tau: proto.tau,
        trials,
        seed,
        step_cap,
        mean_t,
        stderr: (var.max(0.0) / detected).sqrt(),
        censored,
        histogram,
    })
}
