//! Run configuration: a flat TOML file merged with command-line flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use monitored_walk::io::load_system;
use monitored_walk::twolevel::qubit_system;
use monitored_walk::SpectralSystem;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolArg {
    Weak,
    Projective,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Fig1,
    Fig2,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Flat TOML file with any of the keys below; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// System TOML file, or `qubit` / `qubit:<J>` for the built-in two-level system
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    /// Measurement strength for the weak protocol
    #[arg(long)]
    pub eta: Option<f64>,
    /// Measurement probability per step for the random protocol
    #[arg(long)]
    pub p: Option<f64>,
    /// Time between measurement attempts
    #[arg(long)]
    pub tau: Option<f64>,
    /// Fixed series length (instead of adaptive truncation)
    #[arg(long)]
    pub n_max: Option<usize>,
    /// Target for the undetected probability of adaptive truncation
    #[arg(long)]
    pub tail_eps: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo trajectories for the random protocol
    #[arg(long)]
    pub trials: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// param:start:stop:points:spacing with param in eta|tau|p|cos_jtau and spacing linear|log
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long, value_enum)]
    pub which: Option<Which>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    system: Option<String>,
    protocol: Option<ProtocolArg>,
    eta: Option<f64>,
    p: Option<f64>,
    tau: Option<f64>,
    n_max: Option<usize>,
    tail_eps: Option<f64>,
    seed: Option<u64>,
    trials: Option<usize>,
    out: Option<PathBuf>,
    sweep: Option<String>,
    which: Option<Which>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Eta,
    Tau,
    P,
    CosJtau,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    Linear,
    Log,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub start: f64,
    pub stop: f64,
    pub points: usize,
    pub spacing: Spacing,
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 5 {
            return Err(CliError::config(format!(
                "sweep `{text}` must have the form param:start:stop:points:spacing"
            )));
        }
        let param = match parts[0] {
            "eta" => SweepParam::Eta,
            "tau" => SweepParam::Tau,
            "p" => SweepParam::P,
            "cos_jtau" => SweepParam::CosJtau,
            other => return Err(CliError::config(format!("unknown sweep parameter `{other}`"))),
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::config(format!("sweep bound `{s}` is not a finite number")))
        };
        let (start, stop) = (num(parts[1])?, num(parts[2])?);
        let points: usize = parts[3]
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::config(format!("sweep points `{}` must be a positive integer", parts[3])))?;
        let spacing = match parts[4] {
            "linear" => Spacing::Linear,
            "log" => Spacing::Log,
            other => return Err(CliError::config(format!("unknown sweep spacing `{other}`"))),
        };
        let spec = Self {
            param,
            start,
            stop,
            points,
            spacing,
        };
        spec.check_domain()?;
        Ok(spec)
    }

    fn check_domain(&self) -> Result<(), CliError> {
        let ok = |v: f64| match self.param {
            SweepParam::Eta | SweepParam::P => v > 0.0 && v <= 1.0,
            SweepParam::Tau => v > 0.0,
            SweepParam::CosJtau => (-1.0..=1.0).contains(&v),
        };
        if !ok(self.start) || !ok(self.stop) {
            return Err(CliError::config(format!(
                "sweep bounds {}..{} lie outside the domain of {:?}",
                self.start, self.stop, self.param
            )));
        }
        if self.spacing == Spacing::Log && (self.start <= 0.0 || self.stop <= 0.0) {
            return Err(CliError::config("log spacing needs positive bounds"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.start];
        }
        let last = (self.points - 1) as f64;
        (0..self.points)
            .map(|i| {
                let t = i as f64 / last;
                match self.spacing {
                    Spacing::Linear => self.start + t * (self.stop - self.start),
                    Spacing::Log => (self.start.ln() + t * (self.stop.ln() - self.start.ln())).exp(),
                }
            })
            .collect()
    }
}

/// Fully resolved configuration; serialised into every output file.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub system: Option<String>,
    pub protocol: Option<ProtocolArg>,
    pub eta: Option<f64>,
    pub p: Option<f64>,
    pub tau: Option<f64>,
    pub n_max: Option<usize>,
    pub tail_eps: f64,
    pub seed: u64,
    pub trials: usize,
    pub out: PathBuf,
    pub sweep: Option<SweepSpec>,
    pub which: Option<Which>,
}

pub const DEFAULT_TAIL_EPS: f64 = monitored_walk::amplitudes::DEFAULT_TAIL_EPS;
pub const DEFAULT_TRIALS: usize = 100_000;

impl RunConfig {
    pub fn resolve(command: &str, args: &RunArgs) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(path) => read_config(path)?,
            None => FileConfig::default(),
        };
        let sweep = args
            .sweep
            .clone()
            .or(file.sweep)
            .map(|s| SweepSpec::parse(&s))
            .transpose()?;
        let cfg = Self {
            command: command.to_string(),
            system: args.system.clone().or(file.system),
            protocol: args.protocol.or(file.protocol),
            eta: args.eta.or(file.eta),
            p: args.p.or(file.p),
            tau: args.tau.or(file.tau),
            n_max: args.n_max.or(file.n_max),
            tail_eps: args.tail_eps.or(file.tail_eps).unwrap_or(DEFAULT_TAIL_EPS),
            seed: args.seed.or(file.seed).unwrap_or(0),
            trials: args.trials.or(file.trials).unwrap_or(DEFAULT_TRIALS),
            out: args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from(".")),
            sweep,
            which: args.which.or(file.which),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if let Some(eta) = self.eta {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(CliError::config(format!("eta must lie in (0, 1], got {eta}")));
            }
        }
        if let Some(p) = self.p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(CliError::config(format!("p must lie in (0, 1], got {p}")));
            }
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(CliError::config(format!("tau must be positive, got {tau}")));
            }
        }
        if !(self.tail_eps > 0.0 && self.tail_eps < 1.0) {
            return Err(CliError::config(format!("tail_eps must lie in (0, 1), got {}", self.tail_eps)));
        }
        if self.n_max == Some(0) {
            return Err(CliError::config("n_max must be at least 1"));
        }
        if self.trials == 0 {
            return Err(CliError::config("trials must be at least 1"));
        }
        Ok(())
    }

    pub fn require_tau(&self) -> Result<f64, CliError> {
        self.tau.ok_or_else(|| CliError::config("--tau is required"))
    }

    /// Protocol with its strength, checking that exactly the matching one
    /// of `eta` / `p` is set. A swept parameter counts as set.
    pub fn protocol_strength(&self, swept: Option<SweepParam>) -> Result<(ProtocolArg, f64), CliError> {
        let protocol = self
            .protocol
            .ok_or_else(|| CliError::config("--protocol is required (weak, projective or random)"))?;
        let eta_set = self.eta.is_some() || swept == Some(SweepParam::Eta);
        let p_set = self.p.is_some() || swept == Some(SweepParam::P);
        match protocol {
            ProtocolArg::Weak if eta_set && !p_set => Ok((protocol, self.eta.unwrap_or(f64::NAN))),
            ProtocolArg::Weak => Err(CliError::config("the weak protocol needs --eta and no --p")),
            ProtocolArg::Projective if !eta_set && !p_set => Ok((protocol, 1.0)),
            ProtocolArg::Projective => Err(CliError::config("the projective protocol takes neither --eta nor --p")),
            ProtocolArg::Random if p_set && !eta_set => Ok((protocol, self.p.unwrap_or(f64::NAN))),
            ProtocolArg::Random => Err(CliError::config("the random protocol needs --p and no --eta")),
        }
    }

    pub fn load_system(&self) -> Result<SpectralSystem, CliError> {
        let name = self
            .system
            .as_deref()
            .ok_or_else(|| CliError::config("--system is required"))?;
        if let Some(j) = builtin_qubit(name)? {
            return Ok(qubit_system(j));
        }
        load_system(Path::new(name)).map_err(|e| CliError::config(format!("system file `{name}`: {e}")))
    }

    /// Coupling `J` when the built-in qubit is selected.
    pub fn qubit_coupling(&self) -> Result<Option<f64>, CliError> {
        match self.system.as_deref() {
            Some(name) => builtin_qubit(name),
            None => Ok(None),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}

fn builtin_qubit(name: &str) -> Result<Option<f64>, CliError> {
    if name == "qubit" {
        return Ok(Some(1.0));
    }
    if let Some(j) = name.strip_prefix("qubit:") {
        let j: f64 = j
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite() && *v != 0.0)
            .ok_or_else(|| CliError::config(format!("`{name}`: coupling must be a non-zero number")))?;
        return Ok(Some(j));
    }
    Ok(None)
}

fn read_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config `{}`: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("config `{}`: {e}", path.display())))
}
