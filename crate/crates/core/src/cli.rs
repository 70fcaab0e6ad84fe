//! Command-line driver.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;

use crate::case::load_case;
use crate::cosim::{trace_csv, CoSimulator, CosimOptions};
use crate::cvr::{self, CvrScenario, DgChoice};
use crate::error::{Error, Result};
use crate::margin::{self, compute_vsm, NoseSearchConfig, PvCurve, StepConfig};
use crate::netmodel::{CoupledSystem, DgMode, TAP_RANGE};
use crate::tpf::{solve_newton, Injections};
use crate::zipload::ZipLoad;

pub const EXIT_OK: i32 = 0;
pub const EXIT_NON_CONVERGENCE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;

pub const THREADS_ENV: &str = "TDMARGIN_THREADS";

#[derive(Debug, Clone, Parser)]
#[command(name = "tdmargin", version, about = "Coupled T&D power flow and voltage stability margins")]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: RunOptions,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunOptions {
    /// Case file (JSON).
    #[arg(long, global = true)]
    pub case: Option<PathBuf>,
    /// Substation secondary tap; for `compare` and `twobus` the CVR tap.
    #[arg(long, global = true)]
    pub tap: Option<f64>,
    /// Replace feeder DG with units of this mode.
    #[arg(long, global = true, value_enum)]
    pub dg: Option<DgArg>,
    /// Volt-var setpoint for VVC units.
    #[arg(long = "dg-vset", global = true)]
    pub dg_vset: Option<f64>,
    /// DG active rating as a fraction of feeder load.
    #[arg(long, global = true)]
    pub penetration: Option<f64>,
    /// Copies of every feeder at its boundary bus.
    #[arg(long, global = true)]
    pub replication: Option<u32>,
    /// Initial λ step of margin tracing.
    #[arg(long = "lambda-step", global = true)]
    pub lambda_step: Option<f64>,
    /// Boundary convergence tolerance of the exchange loop (pu).
    #[arg(long = "tol-cosim", global = true)]
    pub tol_cosim: Option<f64>,
    /// Output file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DgArg {
    None,
    Upf,
    Vvc,
}

impl From<DgArg> for DgChoice {
    fn from(d: DgArg) -> Self {
        match d {
            DgArg::None => DgChoice::None,
            DgArg::Upf => DgChoice::Upf,
            DgArg::Vvc => DgChoice::Vvc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Engine {
    #[default]
    Cosim,
    Cpf,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Solve the flattened single network.
    Solve {
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
    },
    /// Solve transmission and feeders by boundary exchange.
    Cosim {
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Write the boundary exchange trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Trace a P-V curve and write it as CSV.
    PvCurve {
        #[arg(long, value_enum, default_value_t = Engine::Cosim)]
        engine: Engine,
    },
    /// Print the voltage stability margin.
    Vsm {
        #[arg(long, value_enum, default_value_t = Engine::Cosim)]
        engine: Engine,
    },
    /// Margins of the two-bus system with an equivalent feeder, with and
    /// without CVR.
    Twobus {
        #[arg(long = "zt-r", default_value_t = 0.01)]
        zt_r: f64,
        #[arg(long = "zt-x", default_value_t = 0.06)]
        zt_x: f64,
        #[arg(long = "zd-r", default_value_t = 0.03)]
        zd_r: f64,
        #[arg(long = "zd-x", default_value_t = 0.06)]
        zd_x: f64,
    },
    /// No-CVR / CVR margins for each DG mode.
    Compare,
}

impl RunOptions {
    fn step_config(&self, s_base: f64) -> StepConfig {
        let mut cfg = StepConfig {
            s_base_mva: s_base,
            ..StepConfig::default()
        };
        if let Some(h) = self.lambda_step {
            cfg.initial = h.clamp(cfg.min, cfg.max);
        }
        cfg
    }

    fn cosim_options(&self) -> CosimOptions {
        let mut o = CosimOptions::default();
        if let Some(t) = self.tol_cosim {
            o.tol = t;
        }
        o
    }

    fn nose_config(&self) -> NoseSearchConfig {
        let mut cfg = NoseSearchConfig {
            cosim: self.cosim_options(),
            ..NoseSearchConfig::default()
        };
        if let Some(h) = self.lambda_step {
            cfg.initial_step = h;
        }
        cfg
    }

    fn check(&self) -> Result<()> {
        if let Some(t) = self.tap {
            if !(TAP_RANGE.0..=TAP_RANGE.1).contains(&t) {
                return Err(Error::InvalidInput(format!(
                    "--tap {t} outside [{}, {}]",
                    TAP_RANGE.0, TAP_RANGE.1
                )));
            }
        }
        if let Some(p) = self.penetration {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!("--penetration {p} outside [0, 1]")));
            }
        }
        if self.replication == Some(0) {
            return Err(Error::InvalidInput("--replication must be at least 1".into()));
        }
        for (name, v) in [("--lambda-step", self.lambda_step), ("--tol-cosim", self.tol_cosim)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }

    fn load(&self) -> Result<CoupledSystem> {
        let path = self
            .case
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("--case is required for this command".into()))?;
        let sys = load_case(path)?;
        self.apply(sys)
    }

    /// Case overrides: replication, DG placement, tap and VVC setpoint.
    pub fn apply(&self, mut sys: CoupledSystem) -> Result<CoupledSystem> {
        if let Some(n) = self.replication {
            for f in &mut sys.feeders {
                f.replication = n;
            }
        }
        if let Some(dg) = self.dg {
            let pen = self.penetration.unwrap_or(cvr::DEFAULT_PENETRATION);
            sys = cvr::with_dg(&sys, dg.into(), pen);
        }
        for f in &mut sys.feeders {
            if let Some(t) = self.tap {
                f.head_transformer.tap_secondary = t;
            }
            if let Some(v) = self.dg_vset {
                for d in f.dg_units.values_mut().filter(|d| d.mode == DgMode::Vvc) {
                    d.v_set = v;
                }
            }
        }
        crate::netmodel::validate_network(&sys).into_result()?;
        Ok(sys)
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonConvergence(_) => EXIT_NON_CONVERGENCE,
        _ => EXIT_INPUT,
    }
}

/// P-V curve CSV: one row per (point, bus), buses in id order.
pub fn pv_curve_csv(curve: &PvCurve) -> String {
    let mut order: Vec<usize> = (0..curve.bus_ids.len()).collect();
    order.sort_by_key(|&i| curve.bus_ids[i]);
    let mut out = String::from("lambda,bus_id,v_pu,delivered_mw_total\n");
    for p in &curve.points {
        let mw = p.delivered_pu * curve.s_base_mva;
        for &i in &order {
            let _ = writeln!(out, "{},{},{},{}", p.lambda, curve.bus_ids[i], p.v_mag[i], mw);
        }
    }
    out
}

pub fn export_pv_curve(curve: &PvCurve, path: impl AsRef<Path>) -> Result<()> {
    if curve.points.is_empty() {
        return Err(Error::InvalidInput("cannot export an empty curve".into()));
    }
    write_file(path.as_ref(), &pv_curve_csv(curve))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Print to stdout, or write to `--out` when given.
fn emit(opts: &RunOptions, text: &str) -> Result<String> {
    match &opts.out {
        Some(p) => {
            write_file(p, text)?;
            Ok(format!("wrote {}\n", p.display()))
        }
        None => Ok(text.to_owned()),
    }
}

fn trace_margin(sys: &CoupledSystem, opts: &RunOptions, engine: Engine) -> Result<(PvCurve, f64)> {
    match engine {
        Engine::Cpf => {
            let flat = sys.flatten()?;
            let curve = margin::trace_cpf(&flat.net, 5000, &opts.step_config(sys.s_base_mva))?;
            let lmax = curve.lambda_max();
            Ok((curve, lmax))
        }
        Engine::Cosim => {
            let r = margin::nose_search_cosim(sys, &opts.nose_config())?;
            Ok((r.curve, r.lambda_max))
        }
    }
}

fn solution_table(ids: &[u32], v: &[f64], a: &[f64]) -> String {
    let mut s = String::from("bus    v_pu      angle_deg\n");
    for ((id, v), a) in ids.iter().zip(v).zip(a) {
        let _ = writeln!(s, "{id:<6} {v:.6}  {:>10.4}", a.to_degrees());
    }
    s
}

/// Run one command; returns the text for stdout.
pub fn run(cfg: &RunConfig) -> Result<String> {
    let opts = &cfg.opts;
    opts.check()?;
    match &cfg.command {
        Command::Solve { lambda } => {
            let sys = opts.load()?;
            let flat = sys.flatten()?;
            let sol = solve_newton(&flat.net, &Injections::new(), *lambda, None)?;
            if !sol.converged {
                return Err(Error::NonConvergence(format!(
                    "power flow at lambda {lambda}: {:?} after {} iterations",
                    sol.cause, sol.iterations
                )));
            }
            let model = crate::tpf::PowerFlowModel::new(&flat.net)?;
            let delivered = model.delivered_p(&sol.v_mag, *lambda) * sys.s_base_mva;
            let mut text = format!(
                "lambda {lambda}: converged in {} iterations, delivered {delivered:.4} MW\n",
                sol.iterations
            );
            text.push_str(&solution_table(&sol.bus_ids, &sol.v_mag, &sol.v_ang));
            emit(opts, &text)
        }
        Command::Cosim { lambda, trace } => {
            let sys = opts.load()?;
            let sim = CoSimulator::new(&sys, opts.cosim_options())?;
            let sol = sim.solve(*lambda, None)?;
            if let Some(path) = trace {
                write_traces(&sys, &sol.boundary_trace, path)?;
            }
            if !sol.converged {
                return Err(Error::NonConvergence(format!(
                    "co-simulation at lambda {lambda}: {}",
                    sol.failure.map_or_else(|| "unknown".into(), |f| f.to_string())
                )));
            }
            let mut text = format!(
                "lambda {lambda}: converged after {} exchanges, delivered {:.4} MW\n",
                sol.exchanges,
                sol.delivered_p(&sys) * sys.s_base_mva
            );
            text.push_str(&solution_table(
                &sol.transmission.bus_ids,
                &sol.transmission.v_mag,
                &sol.transmission.v_ang,
            ));
            for (f, fs) in sys.feeders.iter().zip(&sol.feeders) {
                let vmin = fs.v.iter().map(|v| v.norm()).fold(f64::INFINITY, f64::min);
                let _ = writeln!(
                    text,
                    "feeder {} at bus {}: head {:.6} pu, lowest {:.6} pu",
                    f.name,
                    f.boundary_bus,
                    fs.v[0].norm(),
                    vmin
                );
            }
            emit(opts, &text)
        }
        Command::PvCurve { engine } => {
            let sys = opts.load()?;
            let (curve, lmax) = trace_margin(&sys, opts, *engine)?;
            let csv = pv_curve_csv(&curve);
            let summary = format!(
                "{} points, lambda_max {lmax:.6}, VSM {:.4} MW\n",
                curve.points.len(),
                compute_vsm(&curve, 0)
            );
            match &opts.out {
                Some(p) => {
                    export_pv_curve(&curve, p)?;
                    Ok(format!("{summary}wrote {}\n", p.display()))
                }
                None => Ok(csv),
            }
        }
        Command::Vsm { engine } => {
            let sys = opts.load()?;
            let (curve, lmax) = trace_margin(&sys, opts, *engine)?;
            let text = format!(
                "VSM {:.4} MW (lambda_max {lmax:.6})\n",
                compute_vsm(&curve, 0)
            );
            emit(opts, &text)
        }
        Command::Twobus {
            zt_r,
            zt_x,
            zd_r,
            zd_x,
        } => {
            let load = ZipLoad::new(0.6, 0.2, [0.4, 0.3, 0.3])?;
            let tap = opts.tap.unwrap_or(cvr::CVR_TAP);
            let study = cvr::two_bus_study(
                Complex64::new(*zt_r, *zt_x),
                Complex64::new(*zd_r, *zd_x),
                load,
                tap,
                &opts.step_config(100.0),
                &opts.nose_config(),
            )?;
            emit(opts, &format_two_bus(&study))
        }
        Command::Compare => {
            let pen = opts.penetration.unwrap_or(cvr::DEFAULT_PENETRATION);
            let tap = opts.tap.unwrap_or(cvr::CVR_TAP);
            let mut scenarios = cvr::scenario_matrix(pen, tap);
            if let Some(dg) = opts.dg {
                let dg: DgChoice = dg.into();
                scenarios.retain(|s| s.dg_mode == dg);
            }
            if let Some(v) = opts.dg_vset {
                for s in scenarios.iter_mut().filter(|s| s.tap_secondary != cvr::NO_CVR_TAP) {
                    s.dg_vset = v;
                }
            }
            let base = sys_without_overrides(opts)?;
            let report = run_compare(&base, &scenarios, &opts.nose_config())?;
            let text = report.to_table();
            if let Some(p) = &opts.out {
                write_file(p, &report.to_csv())?;
                return Ok(format!("{text}wrote {}\n", p.display()));
            }
            Ok(text)
        }
    }
}

/// `compare` places DG and taps per scenario, so only replication is
/// taken from the flags.
fn sys_without_overrides(opts: &RunOptions) -> Result<CoupledSystem> {
    let trimmed = RunOptions {
        case: opts.case.clone(),
        replication: opts.replication,
        ..RunOptions::default()
    };
    trimmed.load()
}

fn run_compare(
    sys: &CoupledSystem,
    scenarios: &[CvrScenario],
    cfg: &NoseSearchConfig,
) -> Result<cvr::ScenarioReport> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::InvalidInput(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))
        })?),
        Err(_) => None,
    };
    let report = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidInput(e.to_string()))?
            .install(|| cvr::compare_scenarios(sys, scenarios, cfg)),
        None => cvr::compare_scenarios(sys, scenarios, cfg),
    };
    if report.rows.iter().all(|r| r.error.is_some()) {
        return Err(Error::NonConvergence("every scenario failed".into()));
    }
    Ok(report)
}

fn write_traces(
    sys: &CoupledSystem,
    trace: &[crate::cosim::BoundaryRecord],
    path: &Path,
) -> Result<()> {
    let mut buses: Vec<u32> = sys.feeders.iter().map(|f| f.boundary_bus).collect();
    buses.sort_unstable();
    buses.dedup();
    if let [bus] = buses.as_slice() {
        return write_file(path, &trace_csv(trace, *bus));
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    for bus in buses {
        let p = path.with_file_name(format!("{stem}_bus{bus}.{ext}"));
        write_file(&p, &trace_csv(trace, bus))?;
    }
    Ok(())
}

fn format_two_bus(study: &cvr::TwoBusStudy) -> String {
    let mut s = String::from("case     tap    z_eq                 lambda_max (cpf/cosim)   VSM MW (cpf/cosim)\n");
    for c in [&study.no_cvr, &study.cvr] {
        let label = if c.tap == cvr::NO_CVR_TAP { "No CVR" } else { "CVR" };
        let _ = writeln!(
            s,
            "{label:<8} {:.3}  {:.7}+j{:.7}  {:.6} / {:.6}      {:.4} / {:.4}",
            c.tap,
            c.impedance.z_eq.re,
            c.impedance.z_eq.im,
            c.cpf_lambda_max,
            c.cosim_lambda_max,
            c.cpf_vsm_mw,
            c.cosim_vsm_mw
        );
    }
    let cmp = if study.cvr_reduces_margin() { "<" } else { ">" };
    let _ = writeln!(s, "CVR margin {cmp} No-CVR margin");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margin::PvPoint;

    fn curve() -> PvCurve {
        let mut c = PvCurve {
            bus_ids: vec![7, 2],
            points: vec![],
            nose_index: 0,
            s_base_mva: 100.0,
            truncated: false,
        };
        c.points.push(PvPoint {
            lambda: 1.0,
            v_mag: vec![0.97, 1.0],
            v_ang: vec![-0.1, 0.0],
            delivered_pu: 0.6,
        });
        c
    }

    #[test]
    fn one_point_two_buses_gives_two_rows() {
        let csv = pv_curve_csv(&curve());
        assert_eq!(
            csv,
            "lambda,bus_id,v_pu,delivered_mw_total\n1,2,1,60\n1,7,0.97,60\n"
        );
    }

    #[test]
    fn empty_curve_is_not_exported() {
        let mut c = curve();
        c.points.clear();
        assert!(export_pv_curve(&c, "/nonexistent/x.csv").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::NonConvergence("x".into())), 2);
        assert_eq!(exit_code(&Error::InvalidInput("x".into())), 3);
        assert_eq!(exit_code(&Error::Validation(vec![])), 3);
    }

    #[test]
    fn flags_parse_after_subcommand() {
        let cfg = RunConfig::try_parse_from([
            "tdmargin", "compare", "--case", "c.json", "--tap", "0.97", "--dg", "vvc",
        ])
        .unwrap();
        assert!(matches!(cfg.command, Command::Compare));
        assert_eq!(cfg.opts.tap, Some(0.97));
        assert_eq!(cfg.opts.dg, Some(DgArg::Vvc));
    }

    #[test]
    fn bad_tap_is_input_error() {
        let cfg = RunConfig::try_parse_from(["tdmargin", "twobus", "--tap", "0.5"]).unwrap();
        let err = run(&cfg).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_INPUT);
    }
}
