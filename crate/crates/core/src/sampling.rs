//! Random system generators for tests, sweeps and benchmarks.
//!
//! All generators are driven by a caller-supplied RNG so draws are
//! reproducible from a seed.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rand::Rng;

use crate::linalg;
use crate::spectral::SpectralSystem;

/// Hermitian matrix with entries uniform in `[-1, 1] + i[-1, 1]`.
pub fn random_hermitian<R: Rng>(rng: &mut R, dim: usize) -> DMatrix<C64> {
    let mut h = DMatrix::<C64>::zeros(dim, dim);
    for i in 0..dim {
        h[(i, i)] = C64::new(rng.random_range(-1.0..1.0), 0.0);
        for j in (i + 1)..dim {
            let z = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            h[(i, j)] = z;
            h[(j, i)] = z.conj();
        }
    }
    h
}

pub fn random_unit_vector<R: Rng>(rng: &mut R, dim: usize) -> DVector<C64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let n = v.norm();
        if n > 1e-3 {
            return v.unscale(n);
        }
    }
}

/// Haar-ish random unitary: eigenvectors of a random Hermitian matrix.
pub fn random_unitary<R: Rng>(rng: &mut R, dim: usize) -> DMatrix<C64> {
    let h = random_hermitian(rng, dim);
    linalg::hermitian_eigen(&h).expect("random Hermitian diagonalises").1
}

/// Random Hamiltonian with a random detector state and target state.
pub fn random_system<R: Rng>(rng: &mut R, dim: usize) -> SpectralSystem {
    let h = random_hermitian(rng, dim);
    let psi = random_unit_vector(rng, dim);
    let target = random_unit_vector(rng, dim);
    SpectralSystem::from_hamiltonian(&h, psi, Some(target)).expect("valid random system")
}

/// Generic all-bright system for step time `tau`: the phases `E_j tau` are
/// spread over the circle with a minimum gap of `pi / dim`, and every
/// overlap `p_j` is at least `1 / (6 dim)`.
pub fn random_bright_system<R: Rng>(rng: &mut R, dim: usize, tau: f64) -> SpectralSystem {
    let offset = rng.random_range(0.0..2.0 * PI);
    let energies: Vec<f64> = (0..dim)
        .map(|j| {
            let phase = offset + 2.0 * PI * (j as f64 + 0.5 * rng.random::<f64>()) / dim as f64;
            (phase - PI) / tau
        })
        .collect();
    let raw: Vec<f64> = (0..dim).map(|_| 0.2 + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    let basis = random_unitary(rng, dim);
    let coeffs = DVector::from_iterator(
        dim,
        raw.iter()
            .map(|&w| C64::from_polar((w / total).sqrt(), rng.random_range(0.0..2.0 * PI))),
    );
    let psi = &basis * coeffs;
    let psi = psi.unscale(psi.norm());
    let target = random_unit_vector(rng, dim);
    SpectralSystem::new(energies, basis, psi, Some(target)).expect("valid bright system")
}
