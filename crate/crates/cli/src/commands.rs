use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use monitored_walk::amplitudes::{monitored_series, monitored_series_adaptive};
use monitored_walk::genfunc::{winding_number, WindingMethod, WindingReport};
use monitored_walk::io::{fmt_f64, json_string};
use monitored_walk::randomtime::{
    build_random_protocol, kraus_detection_distribution, mean_time_random, monte_carlo_first_detection,
    phi_p_series, r_p_spectral_radius, RandomRoute,
};
use monitored_walk::spectral::build_evolution;
use monitored_walk::statistics::{
    figure1_data, mean_return_series, mean_return_topological, moments_auto, moments_spectral, spectral_decompose,
};
use monitored_walk::twolevel::figure2_data;
use monitored_walk::{Error, SpectralSystem};

use crate::config::{ProtocolArg, RunConfig, Spacing, SweepParam, SweepSpec, Which};
use crate::CliError;

pub const FIG1_SHEAR: f64 = 1.0 / 7.0;
pub const FIG2_COS: f64 = 0.5;
pub const FIG2_N: usize = 10;

pub type Outcome = Result<u8, CliError>;

fn version() -> String {
    format!("mwalk {}", env!("CARGO_PKG_VERSION"))
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::Number(n) if n.is_f64() => fmt_f64(n.as_f64().unwrap_or(f64::NAN)),
        other => other.to_string(),
    }
}

/// `# key = value` lines carrying the resolved config and the seed.
fn header(cfg: &RunConfig) -> Vec<String> {
    let mut lines = vec![version()];
    if let Value::Object(map) = cfg.to_json() {
        for (k, v) in map {
            lines.push(format!("config.{k} = {}", scalar_text(&v)));
        }
    }
    lines.push(format!("seed = {}", cfg.seed));
    lines
}

fn system_json(sys: &SpectralSystem) -> Value {
    json!({
        "dim": sys.dim(),
        "energies": sys.energies(),
        "overlaps": sys.overlaps(),
        "bright_levels": sys.bright_levels(),
        "dark_levels": sys.dark_levels(),
    })
}

fn envelope(cfg: &RunConfig, sys: Option<&SpectralSystem>, result: Value) -> Value {
    json!({
        "version": version(),
        "config": cfg.to_json(),
        "seed": cfg.seed,
        "system": sys.map(system_json),
        "result": result,
    })
}

fn out_path(cfg: &RunConfig, name: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::config(format!("cannot create output directory `{}`: {e}", cfg.out.display())))?;
    Ok(cfg.out.join(name))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::config(format!("cannot write `{}`: {e}", path.display())))
}

fn write_json(cfg: &RunConfig, name: &str, value: &Value) -> Result<PathBuf, CliError> {
    let path = out_path(cfg, name)?;
    let mut f = create(&path)?;
    f.write_all(json_string(value).as_bytes())?;
    f.flush()?;
    Ok(path)
}

fn write_with<F>(cfg: &RunConfig, name: &str, body: F) -> Result<PathBuf, CliError>
where
    F: FnOnce(&mut BufWriter<File>, &[String]) -> Result<(), CliError>,
{
    let path = out_path(cfg, name)?;
    let mut f = create(&path)?;
    body(&mut f, &header(cfg))?;
    f.flush()?;
    Ok(path)
}

fn err_json(e: &Error) -> Value {
    json!({ "error": e.to_string() })
}

fn boundary_exit(w: &WindingReport) -> u8 {
    if w.boundary_case {
        eprintln!(
            "boundary case: {} zero(s) of the generating function lie on the unit circle; n_w is not certified",
            w.zeros_on_circle.len()
        );
        3
    } else {
        0
    }
}

pub fn simulate(cfg: &RunConfig) -> Outcome {
    let sys = cfg.load_system()?;
    let tau = cfg.require_tau()?;
    let (protocol, strength) = cfg.protocol_strength(None)?;
    let winding = winding_number(&sys, tau, WindingMethod::Roots)?;
    match protocol {
        ProtocolArg::Random => simulate_random(cfg, &sys, tau, strength, &winding),
        _ => simulate_monitored(cfg, &sys, tau, strength, &winding),
    }
}

fn simulate_monitored(cfg: &RunConfig, sys: &SpectralSystem, tau: f64, eta: f64, winding: &WindingReport) -> Outcome {
    let evo = build_evolution(sys, tau, eta)?;
    let series = match cfg.n_max {
        Some(n) => monitored_series(&evo, n),
        None => monitored_series_adaptive(&evo, cfg.tail_eps),
    };
    let series = match series {
        Ok(s) => s,
        Err(e) if winding.boundary_case => {
            return Err(Error::BoundaryCase(format!("{e}; a fixed --n-max still produces the truncated series")).into())
        }
        Err(e) => return Err(e.into()),
    };
    let stats = mean_return_series(&series);
    let n_w = winding.certified_n_w().ok();
    let spectral = match spectral_decompose(&evo).and_then(|d| moments_spectral(&d)) {
        Ok(s) => s.to_json(eta, n_w),
        Err(e) => err_json(&e),
    };
    let topological = mean_return_topological(winding, eta).ok();
    let series_path = write_with(cfg, "series.csv", |f, h| Ok(series.write_csv(f, h)?))?;
    let result = json!({
        "protocol": series.protocol.tag(),
        "n_max": series.n_max(),
        "captured_probability": series.captured_probability,
        "series": stats.to_json(eta, n_w),
        "spectral": spectral,
        "topological_mean_n": topological,
        "winding": winding.to_json(),
    });
    let stats_path = write_json(cfg, "stats.json", &envelope(cfg, Some(sys), result))?;
    println!(
        "mean_n = {}  var_n = {}  n_w = {}",
        fmt_f64(stats.mean_n),
        fmt_f64(stats.variance_n),
        n_w.map_or("uncertified".to_string(), |n| n.to_string())
    );
    println!("wrote {} and {}", series_path.display(), stats_path.display());
    Ok(boundary_exit(winding))
}

fn simulate_random(cfg: &RunConfig, sys: &SpectralSystem, tau: f64, p: f64, winding: &WindingReport) -> Outcome {
    let proto = build_random_protocol(&build_evolution(sys, tau, 1.0)?, p)?;
    let kraus = kraus_detection_distribution(&proto, cfg.tail_eps)?;
    let detection_path = write_with(cfg, "detection.csv", |f, h| {
        for line in h {
            writeln!(f, "# {line}")?;
        }
        writeln!(f, "n,probability,cumulative")?;
        let mut cumulative = 0.0;
        for (i, &q) in kraus.probabilities.iter().enumerate() {
            cumulative += q;
            writeln!(f, "{},{},{}", i + 1, fmt_f64(q), fmt_f64(cumulative))?;
        }
        Ok(())
    })?;
    let rp = phi_p_series(&proto, cfg.n_max.unwrap_or(100))?;
    let rp_path = write_with(cfg, "rp_series.csv", |f, h| Ok(rp.write_csv(f, h)?))?;
    let radius = r_p_spectral_radius(&proto)?;
    let series_route = match mean_time_random(&proto, winding, RandomRoute::AmplitudeSeries, cfg.tail_eps) {
        Ok(t) => json!({ "mean_t": t }),
        Err(e) => err_json(&e),
    };
    let mc = monte_carlo_first_detection(&proto, cfg.trials, cfg.seed)?;
    let hist_path = write_with(cfg, "histogram.csv", |f, h| Ok(mc.write_histogram_csv(f, h)?))?;
    let variance = kraus.second_moment_n - kraus.mean_n * kraus.mean_n;
    let result = json!({
        "protocol": format!("random({p})"),
        "mean_interval": proto.mean_interval(),
        "kraus": {
            "captured_probability": kraus.captured,
            "steps": kraus.probabilities.len(),
            "mean_n": kraus.mean_n,
            "second_moment_n": kraus.second_moment_n,
            "var_n": variance,
            "mean_t": tau * kraus.mean_n,
            "var_t": tau * tau * variance,
        },
        "topological_mean_t": winding.certified_n_w().ok().map(|n| proto.mean_interval() * n as f64),
        "amplitude_series": {
            "spectral_radius": radius,
            "n_max": rp.n_max(),
            "route": series_route,
        },
        "kraus_completeness_deviation": proto.completeness_deviation(),
        "monte_carlo": mc.summary_json(),
        "winding": winding.to_json(),
    });
    let stats_path = write_json(cfg, "stats.json", &envelope(cfg, Some(sys), result))?;
    println!(
        "kraus mean_t = {}  monte carlo mean_t = {} +- {}  censored = {}",
        fmt_f64(tau * kraus.mean_n),
        fmt_f64(mc.mean_t),
        fmt_f64(mc.stderr),
        mc.censored
    );
    println!(
        "wrote {}, {}, {} and {}",
        detection_path.display(),
        rp_path.display(),
        hist_path.display(),
        stats_path.display()
    );
    Ok(boundary_exit(winding))
}

pub fn winding(cfg: &RunConfig) -> Outcome {
    let sys = cfg.load_system()?;
    let tau = cfg.require_tau()?;
    let report = winding_number(&sys, tau, WindingMethod::Contour)?;
    let path = write_json(cfg, "winding.json", &envelope(cfg, Some(&sys), report.to_json()))?;
    match report.certified_n_w() {
        Ok(n) => println!(
            "n_w = {n}  contour residual = {}",
            report.contour_residual().map_or("n/a".into(), fmt_f64)
        ),
        Err(_) => println!("n_w not certified (boundary case)"),
    }
    println!("wrote {}", path.display());
    Ok(boundary_exit(&report))
}

fn tau_for_cos(c: f64, j: f64) -> f64 {
    let angle = if c == 1.0 { 2.0 * PI } else { c.acos() };
    angle / j.abs()
}

#[derive(Debug, Clone)]
struct SweepRow {
    value: f64,
    eta: Option<f64>,
    p: Option<f64>,
    tau: f64,
    status: String,
    n_w: Option<usize>,
    method: String,
    numbers: Option<[f64; 6]>,
    topological_mean_n: Option<f64>,
}

fn sweep_point(sys: &SpectralSystem, protocol: ProtocolArg, strength: f64, tau: f64, tail_eps: f64) -> SweepRow {
    let (eta, p) = match protocol {
        ProtocolArg::Random => (None, Some(strength)),
        _ => (Some(strength), None),
    };
    let mut row = SweepRow {
        value: f64::NAN,
        eta,
        p,
        tau,
        status: "ok".into(),
        n_w: None,
        method: String::new(),
        numbers: None,
        topological_mean_n: None,
    };
    let winding = match winding_number(sys, tau, WindingMethod::Roots) {
        Ok(w) => w,
        Err(e) => {
            row.status = format!("error: {e}");
            return row;
        }
    };
    row.n_w = winding.certified_n_w().ok();
    row.topological_mean_n = row.n_w.map(|n| n as f64 / strength);
    let computed = match protocol {
        ProtocolArg::Random => build_evolution(sys, tau, 1.0)
            .and_then(|evo| build_random_protocol(&evo, strength))
            .and_then(|proto| kraus_detection_distribution(&proto, tail_eps))
            .map(|k| ("kraus".to_string(), k.captured, k.mean_n, k.second_moment_n)),
        _ => build_evolution(sys, tau, strength)
            .and_then(|evo| moments_auto(&evo))
            .map(|s| (s.method.tag().to_string(), s.total_probability, s.mean_n, s.second_moment_n)),
    };
    match computed {
        Ok((method, total, mean, second)) => {
            let var = second - mean * mean;
            row.method = method;
            row.numbers = Some([total, mean, second, var, tau * mean, tau * tau * var]);
        }
        Err(e) => row.status = format!("error: {e}"),
    }
    if winding.boundary_case {
        row.status = if row.status == "ok" { "boundary".into() } else { format!("boundary; {}", row.status) };
    }
    row
}

pub fn sweep(cfg: &RunConfig) -> Outcome {
    let spec = cfg
        .sweep
        .clone()
        .ok_or_else(|| CliError::config("--sweep param:start:stop:points:spacing is required"))?;
    let sys = cfg.load_system()?;
    let (protocol, strength) = cfg.protocol_strength(Some(spec.param))?;
    match (spec.param, protocol) {
        (SweepParam::Eta, ProtocolArg::Weak) | (SweepParam::P, ProtocolArg::Random) => {}
        (SweepParam::Eta | SweepParam::P, _) => {
            return Err(CliError::config("eta sweeps need the weak protocol and p sweeps the random one"))
        }
        _ => {}
    }
    let j = cfg.qubit_coupling()?;
    if spec.param == SweepParam::CosJtau && j.is_none() {
        return Err(CliError::config("cos_jtau sweeps need the built-in qubit system"));
    }
    if spec.param != SweepParam::Tau && spec.param != SweepParam::CosJtau {
        cfg.require_tau()?;
    }
    let grid = spec.grid();
    let rows: Vec<SweepRow> = grid
        .par_iter()
        .map(|&v| {
            let (s, tau) = match spec.param {
                SweepParam::Eta | SweepParam::P => (v, cfg.tau.unwrap_or(1.0)),
                SweepParam::Tau => (strength, v),
                SweepParam::CosJtau => (strength, tau_for_cos(v, j.unwrap_or(1.0))),
            };
            let mut row = sweep_point(&sys, protocol, s, tau, cfg.tail_eps);
            row.value = v;
            row
        })
        .collect();
    let path = write_with(cfg, "sweep.csv", |f, h| {
        for line in h {
            writeln!(f, "# {line}")?;
        }
        writeln!(
            f,
            "param,value,eta,p,tau,status,n_w,method,total_probability,mean_n,second_moment_n,var_n,mean_t,var_t,topological_mean_n,scaled_mean_n"
        )?;
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        let param = serde_json::to_value(spec.param).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        for r in &rows {
            let nums = r.numbers.map(|n| n.map(fmt_f64).join(",")).unwrap_or_else(|| ",,,,,".into());
            let scale = r.eta.or(r.p);
            let scaled = r.numbers.zip(scale).map(|(n, s)| n[1] * s);
            writeln!(
                f,
                "{param},{},{},{},{},{},{},{},{nums},{},{}",
                fmt_f64(r.value),
                opt(r.eta),
                opt(r.p),
                fmt_f64(r.tau),
                r.status.replace(',', ";"),
                r.n_w.map(|n| n.to_string()).unwrap_or_default(),
                r.method,
                opt(r.topological_mean_n),
                opt(scaled),
            )?;
        }
        Ok(())
    })?;
    let bad = rows.iter().filter(|r| r.status != "ok").count();
    if bad > 0 {
        eprintln!("{bad} of {} sweep points are boundary cases or failed; see the status column", rows.len());
    }
    println!("wrote {} ({} rows)", path.display(), rows.len());
    Ok(0)
}

fn figure_grid(cfg: &RunConfig, param: SweepParam, default: SweepSpec) -> Result<Vec<f64>, CliError> {
    match &cfg.sweep {
        Some(s) if s.param == param => Ok(s.grid()),
        Some(_) => Err(CliError::config(format!("this figure can only sweep {param:?}"))),
        None => Ok(default.grid()),
    }
}

pub fn figure(cfg: &RunConfig) -> Outcome {
    let which = cfg.which.ok_or_else(|| CliError::config("--which fig1|fig2 is required"))?;
    match which {
        Which::Fig1 => {
            let grid = figure_grid(
                cfg,
                SweepParam::CosJtau,
                SweepSpec {
                    param: SweepParam::CosJtau,
                    start: -0.999,
                    stop: 0.999,
                    points: 1999,
                    spacing: Spacing::Linear,
                },
            )?;
            if let Some(c) = grid.iter().find(|c| c.abs() >= 1.0) {
                return Err(Error::BoundaryCase(format!("nu diverges at cos J tau = {c}")).into());
            }
            let table = figure1_data(FIG1_SHEAR, &grid)?;
            let path = write_with(cfg, "fig1.csv", |f, h| Ok(table.write_csv(f, h)?))?;
            println!("wrote {} ({} rows, x = 1/7)", path.display(), table.rows.len());
        }
        Which::Fig2 => {
            let grid = figure_grid(
                cfg,
                SweepParam::Eta,
                SweepSpec {
                    param: SweepParam::Eta,
                    start: 0.01,
                    stop: 1.0,
                    points: 100,
                    spacing: Spacing::Linear,
                },
            )?;
            let table = figure2_data(FIG2_COS, &grid, cfg.n_max.unwrap_or(FIG2_N))?;
            let path = write_with(cfg, "fig2.csv", |f, h| Ok(table.write_csv(f, h)?))?;
            println!("wrote {} ({} eta values, cos J tau = 1/2)", path.display(), table.etas.len());
        }
    }
    Ok(0)
}
