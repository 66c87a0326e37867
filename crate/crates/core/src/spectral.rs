//! Spectral description of the walk and the operators of one monitored step.
//!
//! A [`SpectralSystem`] holds the energies, the eigenbasis and the detector
//! state; a [`MonitoredEvolution`] adds the step time `tau` and the
//! measurement strength `eta` and assembles the step unitary `U`, the
//! detector projector `P` and the sheared no-detection operator
//! `Q_eta = 1 - x P` with `x = 1 - sqrt(1 - eta)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::linalg;

/// Overlaps `p_j` at or below this are treated as dark levels.
pub const BRIGHT_TOL: f64 = 1e-10;
/// Two levels are degenerate when `|E_j - E_k| tau` is this close to a
/// multiple of `2 pi`.
pub const DEGENERACY_TOL: f64 = 1e-10;
/// Tolerance for unitarity and unit-norm checks.
pub const UNIT_TOL: f64 = 1e-12;

/// Shearing parameter `x = 1 - sqrt(1 - eta)`, written in a cancellation-free
/// form so that small `eta` keeps full relative precision.
pub fn shear_parameter(eta: f64) -> f64 {
    eta / (1.0 + (1.0 - eta).sqrt())
}

/// Inverse of [`shear_parameter`]: `eta = 1 - (1 - x)^2`.
pub fn eta_from_shear(x: f64) -> f64 {
    x * (2.0 - x)
}

/// Phase difference reduced to `(-pi, pi]`.
pub fn wrap_phase(phi: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut w = phi - two_pi * (phi / two_pi).round();
    if w <= -PI {
        w += two_pi;
    }
    w
}

#[derive(Debug, Clone)]
pub struct SpectralSystem {
    energies: Vec<f64>,
    eigenvectors: DMatrix<C64>,
    detector: DVector<C64>,
    target: Option<DVector<C64>>,
    overlaps: Vec<f64>,
}

/// One detector-visible level after merging degeneracies.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveLevel {
    pub energy: f64,
    /// Summed overlap of the merged members.
    pub weight: f64,
    /// Indices into the original level list.
    pub members: Vec<usize>,
}

/// Bright levels at a given step time, with degenerate levels merged.
#[derive(Debug, Clone)]
pub struct EffectiveSpectrum {
    pub tau: f64,
    pub levels: Vec<EffectiveLevel>,
    pub dark: Vec<usize>,
}

impl EffectiveSpectrum {
    /// Groups of original levels that were merged (only groups of size > 1).
    pub fn merged_groups(&self) -> Vec<Vec<usize>> {
        self.levels
            .iter()
            .filter(|l| l.members.len() > 1)
            .map(|l| l.members.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Detector state in the effective eigenbasis, `(sqrt(w_j))_j`.
    pub fn detector(&self) -> DVector<C64> {
        DVector::from_iterator(
            self.levels.len(),
            self.levels.iter().map(|l| C64::new(l.weight.sqrt(), 0.0)),
        )
    }

    /// The step unitary in the effective eigenbasis.
    pub fn step_unitary(&self) -> DMatrix<C64> {
        let phases: Vec<C64> = self
            .levels
            .iter()
            .map(|l| C64::from_polar(1.0, -l.energy * self.tau))
            .collect();
        DMatrix::from_diagonal(&DVector::from_vec(phases))
    }

    /// `(alpha 1 - beta P) U` restricted to the detector-visible subspace.
    pub fn rank_one_step(&self, alpha: f64, beta: f64) -> DMatrix<C64> {
        let psi = self.detector();
        let n = psi.len();
        let m = DMatrix::<C64>::identity(n, n).scale(alpha) - (&psi * psi.adjoint()).scale(beta);
        m * self.step_unitary()
    }
}

impl SpectralSystem {
    /// Builds a system from spectral data. The columns of `eigenvectors`
    /// are the energy eigenstates in the computational basis.
    pub fn new(
        energies: Vec<f64>,
        eigenvectors: DMatrix<C64>,
        detector: DVector<C64>,
        target: Option<DVector<C64>>,
    ) -> Result<Self> {
        let dim = energies.len();
        if dim == 0 {
            return Err(Error::DimensionMismatch("system has no levels".into()));
        }
        if eigenvectors.nrows() != dim || eigenvectors.ncols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "{} energies but a {}x{} basis",
                dim,
                eigenvectors.nrows(),
                eigenvectors.ncols()
            )));
        }
        if detector.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "detector has length {}, expected {dim}",
                detector.len()
            )));
        }
        if energies.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidParameter("energies must be finite".into()));
        }
        let deviation = linalg::unitarity_deviation(&eigenvectors);
        if deviation >= UNIT_TOL {
            return Err(Error::NonUnitaryBasis { deviation });
        }
        check_unit(&detector, "detector state")?;
        if let Some(t) = &target {
            if t.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "target has length {}, expected {dim}",
                    t.len()
                )));
            }
            check_unit(t, "target state")?;
        }
        let amps = eigenvectors.adjoint() * &detector;
        let overlaps = amps.iter().map(|a| a.norm_sqr()).collect();
        Ok(Self {
            energies,
            eigenvectors,
            detector,
            target,
            overlaps,
        })
    }

    /// Builds a system from a dense Hermitian Hamiltonian.
    pub fn from_hamiltonian(
        hamiltonian: &DMatrix<C64>,
        detector: DVector<C64>,
        target: Option<DVector<C64>>,
    ) -> Result<Self> {
        let (energies, vectors) = linalg::hermitian_eigen(hamiltonian)?;
        Self::new(energies, vectors, detector, target)
    }

    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn eigenvectors(&self) -> &DMatrix<C64> {
        &self.eigenvectors
    }

    pub fn detector(&self) -> &DVector<C64> {
        &self.detector
    }

    pub fn target(&self) -> Option<&DVector<C64>> {
        self.target.as_ref()
    }

    /// `p_j = |<psi|E_j>|^2`.
    pub fn overlaps(&self) -> &[f64] {
        &self.overlaps
    }

    pub fn is_bright(&self, j: usize) -> bool {
        self.overlaps[j] > BRIGHT_TOL
    }

    pub fn bright_levels(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&j| self.is_bright(j)).collect()
    }

    pub fn dark_levels(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&j| !self.is_bright(j)).collect()
    }

    /// `<E_j|v>` for every level.
    pub fn components(&self, v: &DVector<C64>) -> DVector<C64> {
        self.eigenvectors.adjoint() * v
    }

    /// `<target|E_j><E_j|psi>` for every level.
    pub fn transition_weights(&self, target: &DVector<C64>) -> Vec<C64> {
        let a = self.components(&self.detector);
        let b = self.components(target);
        a.iter().zip(b.iter()).map(|(a, b)| b.conj() * a).collect()
    }

    /// `U = V diag(exp(-i E_j tau)) V^dagger`.
    pub fn step_unitary(&self, tau: f64) -> DMatrix<C64> {
        let phases = DVector::from_iterator(
            self.dim(),
            self.energies.iter().map(|&e| C64::from_polar(1.0, -e * tau)),
        );
        &self.eigenvectors * DMatrix::from_diagonal(&phases) * self.eigenvectors.adjoint()
    }

    /// Bright levels at step time `tau`, degenerate ones merged.
    pub fn effective_levels(&self, tau: f64) -> EffectiveSpectrum {
        let mut levels: Vec<EffectiveLevel> = Vec::new();
        for j in self.bright_levels() {
            let e = self.energies[j];
            let slot = levels.iter_mut().find(|l| {
                let members_close = l
                    .members
                    .iter()
                    .any(|&k| wrap_phase((self.energies[k] - e) * tau).abs() < DEGENERACY_TOL);
                members_close
            });
            match slot {
                Some(level) => {
                    level.weight += self.overlaps[j];
                    level.members.push(j);
                }
                None => levels.push(EffectiveLevel {
                    energy: e,
                    weight: self.overlaps[j],
                    members: vec![j],
                }),
            }
        }
        let merges: Vec<_> = levels.iter().filter(|l| l.members.len() > 1).collect();
        if !merges.is_empty() {
            log::info!("merged {} group(s) of degenerate levels at tau = {tau}", merges.len());
        }
        EffectiveSpectrum {
            tau,
            levels,
            dark: self.dark_levels(),
        }
    }
}

fn check_unit(v: &DVector<C64>, what: &'static str) -> Result<()> {
    let norm = v.norm();
    if (norm - 1.0).abs() >= UNIT_TOL || !norm.is_finite() {
        return Err(Error::NonUnitVector { what, norm });
    }
    Ok(())
}

/// One monitored step: the unitary, the projector on the detector state and
/// the sheared no-detection operator.
#[derive(Debug, Clone)]
pub struct MonitoredEvolution {
    system: SpectralSystem,
    tau: f64,
    eta: f64,
    x: f64,
    step_unitary: DMatrix<C64>,
    projector: DMatrix<C64>,
    sheared: DMatrix<C64>,
}

impl MonitoredEvolution {
    pub fn new(system: &SpectralSystem, tau: f64, eta: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
        }
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::InvalidParameter(format!("eta must lie in (0, 1], got {eta}")));
        }
        let x = shear_parameter(eta);
        let n = system.dim();
        let psi = system.detector();
        let projector = psi * psi.adjoint();
        let sheared = DMatrix::<C64>::identity(n, n) - projector.scale(x);
        Ok(Self {
            system: system.clone(),
            tau,
            eta,
            x,
            step_unitary: system.step_unitary(tau),
            projector,
            sheared,
        })
    }

    pub fn system(&self) -> &SpectralSystem {
        &self.system
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Shearing parameter `x`.
    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn step_unitary(&self) -> &DMatrix<C64> {
        &self.step_unitary
    }

    pub fn projector(&self) -> &DMatrix<C64> {
        &self.projector
    }

    /// `Q_eta = 1 - x P`.
    pub fn sheared(&self) -> &DMatrix<C64> {
        &self.sheared
    }

    /// `P_eta = sqrt(eta) P`.
    pub fn sheared_projector(&self) -> DMatrix<C64> {
        self.projector.scale(self.eta.sqrt())
    }

    /// `Q_eta U`.
    pub fn monitored_step(&self) -> DMatrix<C64> {
        &self.sheared * &self.step_unitary
    }

    pub fn effective_levels(&self) -> EffectiveSpectrum {
        self.system.effective_levels(self.tau)
    }

    /// `Q_eta U` on the detector-visible subspace, in the effective eigenbasis.
    pub fn effective_monitored_step(&self) -> DMatrix<C64> {
        self.effective_levels().rank_one_step(1.0, self.x)
    }
}

/// Convenience alias for [`SpectralSystem::new`].
pub fn build_system(
    energies: Vec<f64>,
    eigenvectors: DMatrix<C64>,
    detector: DVector<C64>,
    target: Option<DVector<C64>>,
) -> Result<SpectralSystem> {
    SpectralSystem::new(energies, eigenvectors, detector, target)
}

/// Convenience alias for [`MonitoredEvolution::new`].
pub fn build_evolution(system: &SpectralSystem, tau: f64, eta: f64) -> Result<MonitoredEvolution> {
    MonitoredEvolution::new(system, tau, eta)
}
