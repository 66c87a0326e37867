//! Weak-measurement amplitudes rebuilt from projective ones.
//!
//! `q_{n,m}` is the coefficient of `z^n` in `phi(z)^m`, i.e. the sum of
//! `phi_{k_1} ... phi_{k_m}` over compositions `k_1 + ... + k_m = n` with
//! every `k_i >= 1`. Then
//!
//! ```text
//! phi_{eta,n} = sqrt(eta) sum_{m=1}^{n} q_{n,m} (1 - x)^(m-1)
//! ```

use std::io::Write;

use num_complex::Complex64 as C64;

use crate::amplitudes::{AmplitudeSeries, Protocol, SeriesKind};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::spectral::shear_parameter;

#[derive(Debug, Clone)]
pub struct ConvolutionTable {
    /// `rows[m - 1][n - 1] = q_{n,m}`; entries with `m > n` are zero.
    rows: Vec<Vec<C64>>,
    pub base: AmplitudeSeries,
}

impl ConvolutionTable {
    pub fn n_max(&self) -> usize {
        self.rows.len()
    }

    /// `q_{n,m}`, zero for `m > n`.
    pub fn q(&self, n: usize, m: usize) -> C64 {
        assert!(n >= 1 && m >= 1 && n <= self.n_max() && m <= self.n_max());
        self.rows[m - 1][n - 1]
    }

    /// CSV with columns `n, m, re_q, im_q` for `1 <= m <= n`.
    pub fn write_csv<W: Write>(&self, mut out: W, header: &[String]) -> Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "n,m,re_q,im_q")?;
        for n in 1..=self.n_max() {
            for m in 1..=n {
                let q = self.q(n, m);
                writeln!(out, "{n},{m},{},{}", fmt_f64(q.re), fmt_f64(q.im))?;
            }
        }
        Ok(())
    }
}

/// Builds `q_{n,m}` for `1 <= m <= n <= n_max` by repeated convolution with
/// the projective return series.
pub fn build_convolution_table(base: &AmplitudeSeries, n_max: usize) -> Result<ConvolutionTable> {
    if base.protocol != Protocol::Projective || base.kind != SeriesKind::Return {
        return Err(Error::InvalidParameter(
            "the convolution table needs the projective return series".into(),
        ));
    }
    if n_max == 0 || n_max > base.n_max() {
        return Err(Error::InvalidParameter(format!(
            "n_max = {n_max} must lie in 1..={}",
            base.n_max()
        )));
    }
    let phi = &base.values[..n_max];
    let mut rows = vec![phi.to_vec()];
    for m in 2..=n_max {
        let prev = &rows[m - 2];
        let mut row = vec![C64::new(0.0, 0.0); n_max];
        // q_{n,m} = sum_k q_{k,m-1} phi_{n-k}, with k >= m - 1 and n - k >= 1.
        for n in m..=n_max {
            let mut acc = C64::new(0.0, 0.0);
            for k in (m - 1)..n {
                acc += prev[k - 1] * phi[n - k - 1];
            }
            row[n - 1] = acc;
        }
        rows.push(row);
    }
    Ok(ConvolutionTable {
        rows,
        base: base.clone(),
    })
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidParameter(format!("eta must lie in (0, 1], got {eta}")));
    }
    Ok(())
}

/// `sqrt(eta) sum_{m <= min(n, m_cut)} q_{n,m} (1 - x)^(m-1)` for every `n`.
fn partial_sums(table: &ConvolutionTable, eta: f64, m_cut: usize) -> Vec<C64> {
    let y = 1.0 - shear_parameter(eta);
    let root = eta.sqrt();
    (1..=table.n_max())
        .map(|n| {
            let top = n.min(m_cut);
            let mut acc = C64::new(0.0, 0.0);
            for m in (1..=top).rev() {
                acc = acc * y + table.q(n, m);
            }
            acc * root
        })
        .collect()
}

pub fn reconstruct_weak_series(table: &ConvolutionTable, eta: f64) -> Result<AmplitudeSeries> {
    check_eta(eta)?;
    let values = partial_sums(table, eta, table.n_max());
    Ok(AmplitudeSeries::from_values(
        values,
        Protocol::from_eta(eta),
        SeriesKind::Return,
        table.base.tau,
    ))
}

/// Per-`n` absolute error from cutting the `m` sum at `m_cut`.
pub fn truncation_error_profile(table: &ConvolutionTable, eta: f64, m_cut: usize) -> Result<Vec<f64>> {
    check_eta(eta)?;
    if m_cut == 0 {
        return Err(Error::InvalidParameter("m_cut must be at least 1".into()));
    }
    let full = partial_sums(table, eta, table.n_max());
    let cut = partial_sums(table, eta, m_cut);
    Ok(full.iter().zip(&cut).map(|(a, b)| (a - b).norm()).collect())
}

/// Per-`n` bound `sqrt(eta) sum_{m > m_cut} |q_{n,m}| (1 - x)^(m-1)` on the
/// truncation error.
pub fn truncation_bound(table: &ConvolutionTable, eta: f64, m_cut: usize) -> Result<Vec<f64>> {
    check_eta(eta)?;
    let y = 1.0 - shear_parameter(eta);
    Ok((1..=table.n_max())
        .map(|n| {
            let tail: f64 = ((m_cut + 1)..=n)
                .map(|m| table.q(n, m).norm() * y.powi(m as i32 - 1))
                .sum();
            tail * eta.sqrt()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amplitudes::monitored_series;
    use crate::genfunc::{eval_phi_eta_hat, Route};
    use crate::sampling::random_system;
    use crate::spectral::{build_evolution, SpectralSystem};
    use crate::twolevel::{qubit_system, TwoLevelParams};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn projective(sys: &SpectralSystem, tau: f64, n: usize) -> AmplitudeSeries {
        monitored_series(&build_evolution(sys, tau, 1.0).unwrap(), n).unwrap()
    }

    /// Sum over compositions of `n` into `m` positive parts.
    fn brute_q(phi: &[C64], n: usize, m: usize) -> C64 {
        if m == 1 {
            return phi[n - 1];
        }
        (1..n).map(|k| phi[k - 1] * brute_q(phi, n - k, m - 1)).sum()
    }

    #[test]
    fn table_matches_enumerated_compositions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sys = random_system(&mut rng, 3);
        let base = projective(&sys, 0.9, 10);
        let t = build_convolution_table(&base, 10).unwrap();
        let phi = &base.values;
        for n in 1..=10 {
            assert_eq!(t.q(n, 1), phi[n - 1]);
            for m in 1..=n {
                assert!((t.q(n, m) - brute_q(phi, n, m)).norm() < 1e-14);
            }
            for m in (n + 1)..=10 {
                assert_eq!(t.q(n, m), C64::new(0.0, 0.0));
            }
        }
        assert!((t.q(2, 2) - phi[0] * phi[0]).norm() < 1e-15);
        let q42 = phi[0] * phi[2] * 2.0 + phi[1] * phi[1];
        assert!((t.q(4, 2) - q42).norm() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let sys = qubit_system(1.0);
        let base = projective(&sys, 1.0, 5);
        assert!(build_convolution_table(&base, 6).is_err());
        assert!(build_convolution_table(&base, 0).is_err());
        let weak = monitored_series(&build_evolution(&sys, 1.0, 0.5).unwrap(), 5).unwrap();
        assert!(build_convolution_table(&weak, 5).is_err());
        let t = build_convolution_table(&base, 5).unwrap();
        assert!(reconstruct_weak_series(&t, 0.0).is_err());
        assert!(truncation_error_profile(&t, 0.5, 0).is_err());
    }

    #[test]
    fn eta_one_reproduces_base() {
        let base = projective(&qubit_system(1.0), 0.8, 20);
        let t = build_convolution_table(&base, 20).unwrap();
        let r = reconstruct_weak_series(&t, 1.0).unwrap();
        assert_eq!(r.values, base.values);
    }

    #[test]
    fn first_amplitude_scales_with_root_eta() {
        let base = projective(&qubit_system(1.0), 0.8, 4);
        let t = build_convolution_table(&base, 4).unwrap();
        let r = reconstruct_weak_series(&t, 0.3).unwrap();
        assert!((r.values[0] - base.values[0] * 0.3f64.sqrt()).norm() < 1e-16);
    }

    #[test]
    fn qubit_weak_series_matches_iteration() {
        let params = TwoLevelParams::from_cos(0.5, 0.5).unwrap();
        let sys = qubit_system(1.0);
        let t = build_convolution_table(&projective(&sys, params.tau, 20), 20).unwrap();
        let r = reconstruct_weak_series(&t, 0.5).unwrap();
        let direct = monitored_series(&build_evolution(&sys, params.tau, 0.5).unwrap(), 20).unwrap();
        for (a, b) in r.values.iter().zip(&direct.values) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn coefficients_match_renormalised_gf() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sys = random_system(&mut rng, 4);
        let t = build_convolution_table(&projective(&sys, 0.7, 25), 25).unwrap();
        let r = reconstruct_weak_series(&t, 0.4).unwrap();
        let evo = build_evolution(&sys, 0.7, 0.4).unwrap();
        let (radius, m) = (0.9, 2048);
        for n in 1..=25 {
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..m {
                let z = C64::from_polar(radius, 2.0 * PI * k as f64 / m as f64);
                acc += eval_phi_eta_hat(&evo, z, Route::ViaPhi).unwrap() / z.powi(n as i32);
            }
            assert!((acc / m as f64 - r.values[n - 1]).norm() < 1e-10);
        }
    }

    #[test]
    fn truncation_profile_and_bound() {
        let params = TwoLevelParams::from_cos(0.5, 0.9).unwrap();
        let t = build_convolution_table(&projective(&qubit_system(1.0), params.tau, 30), 30).unwrap();
        let err = truncation_error_profile(&t, 0.9, 2).unwrap();
        let bound = truncation_bound(&t, 0.9, 2).unwrap();
        assert_eq!(err[0], 0.0);
        assert_eq!(err[1], 0.0);
        for (e, b) in err.iter().zip(&bound) {
            assert!(*e <= b + 1e-15);
        }
        let full = truncation_error_profile(&t, 0.9, 30).unwrap();
        assert!(full.iter().all(|&e| e == 0.0));
        for n in 1..=30 {
            let bounds: Vec<f64> = (1..=n).map(|m| truncation_bound(&t, 0.9, m).unwrap()[n - 1]).collect();
            assert!(bounds.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn csv_lists_lower_triangle() {
        let t = build_convolution_table(&projective(&qubit_system(1.0), 1.0, 4), 4).unwrap();
        let mut out = Vec::new();
        t.write_csv(&mut out, &["seed = 0".into()]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 2 + 10);
        assert!(text.starts_with("# seed = 0\nn,m,re_q,im_q\n1,1,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn reconstruction_matches_direct_iteration(seed in 0u64..10_000, dim in 1usize..=6,
                                                    eta in prop::sample::select(vec![0.1, 0.5, 0.9])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sys = random_system(&mut rng, dim);
            let t = build_convolution_table(&projective(&sys, 1.0, 50), 50).unwrap();
            let r = reconstruct_weak_series(&t, eta).unwrap();
            let direct = monitored_series(&build_evolution(&sys, 1.0, eta).unwrap(), 50).unwrap();
            for (a, b) in r.values.iter().zip(&direct.values) {
                prop_assert!((a - b).norm() < 1e-10);
            }
        }
    }
}
