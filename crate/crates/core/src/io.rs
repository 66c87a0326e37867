//! System definition files and shared output formatting.
//!
//! A system file is TOML with either spectral data
//!
//! ```toml
//! energies = [1.0, -1.0]
//! basis    = [1, 0,  0, 0,
//!             0, 0,  1, 0]          # row-major, (re, im) pairs
//! detector = [0.7071067811865476, 0, 0.7071067811865476, 0]
//! target   = [0.7071067811865476, 0, -0.7071067811865476, 0]   # optional
//! ```
//!
//! or a dense Hermitian `hamiltonian` (row-major `(re, im)` pairs) in place
//! of `energies` and `basis`. Unknown keys are rejected.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::spectral::SpectralSystem;

/// Full double precision, 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    pub energies: Option<Vec<f64>>,
    pub basis: Option<Vec<f64>>,
    pub hamiltonian: Option<Vec<f64>>,
    pub detector: Vec<f64>,
    pub target: Option<Vec<f64>>,
}

fn complex_pairs(values: &[f64], what: &str) -> Result<Vec<C64>> {
    if !values.len().is_multiple_of(2) {
        return Err(Error::Parse(format!("{what}: expected (re, im) pairs, got {} numbers", values.len())));
    }
    Ok(values.chunks(2).map(|p| C64::new(p[0], p[1])).collect())
}

fn square_matrix(values: &[f64], what: &str) -> Result<DMatrix<C64>> {
    let entries = complex_pairs(values, what)?;
    let n = (entries.len() as f64).sqrt().round() as usize;
    if n * n != entries.len() || n == 0 {
        return Err(Error::Parse(format!("{what}: {} entries do not form a square matrix", entries.len())));
    }
    Ok(DMatrix::from_row_slice(n, n, &entries))
}

impl SystemFile {
    pub fn into_system(self) -> Result<SpectralSystem> {
        let detector = DVector::from_vec(complex_pairs(&self.detector, "detector")?);
        let target = self
            .target
            .as_deref()
            .map(|t| complex_pairs(t, "target").map(DVector::from_vec))
            .transpose()?;
        match (self.energies, self.basis, self.hamiltonian) {
            (Some(energies), Some(basis), None) => {
                let basis = square_matrix(&basis, "basis")?;
                SpectralSystem::new(energies, basis, detector, target)
            }
            (None, None, Some(h)) => {
                let h = square_matrix(&h, "hamiltonian")?;
                SpectralSystem::from_hamiltonian(&h, detector, target)
            }
            _ => Err(Error::Parse(
                "system file needs either `energies` + `basis` or `hamiltonian`".into(),
            )),
        }
    }
}

pub fn parse_system(text: &str) -> Result<SpectralSystem> {
    let file: SystemFile = toml::from_str(text)?;
    file.into_system()
}

pub fn load_system(path: &Path) -> Result<SpectralSystem> {
    let text = std::fs::read_to_string(path)?;
    parse_system(&text)
}

/// Pretty JSON with every float written by [`fmt_f64`]; integers stay
/// integers.
pub fn json_string(value: &serde_json::Value) -> String {
    let mut out = String::new();
    write_json(value, 0, &mut out);
    out.push('\n');
    out
}

fn write_json(value: &serde_json::Value, indent: usize, out: &mut String) {
    use serde_json::Value;
    let pad = |n: usize| "  ".repeat(n);
    match value {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(f64::NAN);
            out.push_str(&fmt_f64(x));
        }
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_json(item, indent + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            out.push_str("{\n");
            for (i, (k, v)) in map.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                write_json(v, indent + 1, out);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}

pub(crate) fn complex_json(z: C64) -> serde_json::Value {
    serde_json::json!([z.re, z.im])
}
