//! Conservation voltage reduction scenarios.
//!
//! CVR is applied by lowering the secondary tap of every substation
//! transformer. The effective ratio `k = k_nominal / tap` then rises, and
//! the feeder impedance seen from the transmission side grows with `k²`:
//!
//! ```text
//! Z_eq = Z_T + k²·Z_D
//! ```
//!
//! so the source-to-load impedance under CVR is larger whenever the feeder
//! has any impedance at all.

use std::fmt;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::dpf::{self, BfsOptions};
use crate::error::{Error, Result};
use crate::margin::{self, compute_vsm, NoseSearchConfig, StepConfig};
use crate::netmodel::{
    BusKind, CoupledSystem, DgMode, DgUnit, FeederGraph, FeederModel, FeederSegment,
    TransmissionBranch, TransmissionBus, TransmissionNetwork, TAP_RANGE,
};
use crate::zipload::ZipLoad;

pub const NO_CVR_TAP: f64 = 1.0;
pub const CVR_TAP: f64 = 0.95;
pub const NO_CVR_VSET: f64 = 1.05;
pub const CVR_VSET: f64 = 1.00;
pub const DEFAULT_PENETRATION: f64 = 0.6;
/// Inverter apparent rating relative to its active rating.
pub const DG_OVERSIZE: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DgChoice {
    None,
    Upf,
    Vvc,
}

impl DgChoice {
    pub fn mode(self) -> Option<DgMode> {
        match self {
            DgChoice::None => None,
            DgChoice::Upf => Some(DgMode::Upf),
            DgChoice::Vvc => Some(DgMode::Vvc),
        }
    }
}

impl fmt::Display for DgChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DgChoice::None => "none",
            DgChoice::Upf => "upf",
            DgChoice::Vvc => "vvc",
        })
    }
}

impl std::str::FromStr for DgChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(DgChoice::None),
            "upf" => Ok(DgChoice::Upf),
            "vvc" => Ok(DgChoice::Vvc),
            other => Err(Error::InvalidInput(format!("unknown DG mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvrScenario {
    pub label: String,
    pub tap_secondary: f64,
    pub dg_mode: DgChoice,
    pub dg_vset: f64,
    pub dg_penetration: f64,
}

impl CvrScenario {
    pub fn no_cvr(dg_mode: DgChoice, penetration: f64) -> Self {
        Self {
            label: format!("No CVR / DG {dg_mode}"),
            tap_secondary: NO_CVR_TAP,
            dg_mode,
            dg_vset: NO_CVR_VSET,
            dg_penetration: penetration,
        }
    }

    pub fn cvr(dg_mode: DgChoice, penetration: f64, tap: f64) -> Self {
        Self {
            label: format!("CVR / DG {dg_mode}"),
            tap_secondary: tap,
            dg_mode,
            dg_vset: CVR_VSET,
            dg_penetration: penetration,
        }
    }

    fn check(&self) -> Result<()> {
        if !(TAP_RANGE.0..=TAP_RANGE.1).contains(&self.tap_secondary) {
            return Err(Error::InvalidInput(format!(
                "scenario `{}`: tap {} outside [{}, {}]",
                self.label, self.tap_secondary, TAP_RANGE.0, TAP_RANGE.1
            )));
        }
        if !(0.9..=1.1).contains(&self.dg_vset) {
            return Err(Error::InvalidInput(format!(
                "scenario `{}`: DG setpoint {} outside [0.9, 1.1]",
                self.label, self.dg_vset
            )));
        }
        Ok(())
    }
}

/// The six-row comparison: No CVR then CVR, for no DG, UPF DG and VVC DG.
pub fn scenario_matrix(penetration: f64, cvr_tap: f64) -> Vec<CvrScenario> {
    [DgChoice::None, DgChoice::Upf, DgChoice::Vvc]
        .into_iter()
        .flat_map(|dg| {
            [
                CvrScenario::no_cvr(dg, penetration),
                CvrScenario::cvr(dg, penetration, cvr_tap),
            ]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpedancePath {
    pub z_transmission: Complex64,
    pub z_distribution: Complex64,
    pub k_eff: f64,
    pub z_eq: Complex64,
}

pub fn effective_impedance(z_t: Complex64, z_d: Complex64, k_eff: f64) -> ImpedancePath {
    ImpedancePath {
        z_transmission: z_t,
        z_distribution: z_d,
        k_eff,
        z_eq: z_t + z_d * (k_eff * k_eff),
    }
}

/// Infinite bus, `z_t`, boundary bus, transformer(tap), `z_d`, ZIP load.
///
/// Transmission buses are 1 (slack at 1.0 pu) and 2; the feeder nodes are
/// `3` (transformer secondary) and `4` (load). With `z_d = 0` this is a
/// plain two-bus system with a tap-changing transformer at the load.
pub fn build_extended_two_bus(z_t: Complex64, z_d: Complex64, load: ZipLoad, tap: f64) -> CoupledSystem {
    let mut feeder = FeederModel::new("eq-feeder", "3", 2);
    feeder.head_transformer.tap_secondary = tap;
    feeder.segments.push(FeederSegment::new("3", "4", z_d.re, z_d.im));
    feeder.loads.insert("4".into(), load);
    CoupledSystem {
        transmission: TransmissionNetwork {
            buses: vec![
                TransmissionBus::new(1, BusKind::Slack).with_v_set(1.0),
                TransmissionBus::new(2, BusKind::Pq),
            ],
            branches: vec![TransmissionBranch::new(1, 2, z_t.re, z_t.im)],
        },
        feeders: vec![feeder],
        s_base_mva: 100.0,
    }
}

/// Set every feeder tap, and every volt-var setpoint, to the scenario's.
pub fn apply_cvr(sys: &CoupledSystem, scenario: &CvrScenario) -> Result<CoupledSystem> {
    scenario.check()?;
    let mut out = sys.clone();
    for feeder in &mut out.feeders {
        feeder.head_transformer.tap_secondary = scenario.tap_secondary;
        for dg in feeder.dg_units.values_mut() {
            if dg.mode == DgMode::Vvc {
                dg.v_set = scenario.dg_vset;
            }
        }
    }
    Ok(out)
}

/// Replace all feeder DG with units of one mode sized to `penetration` of
/// each node's base load.
pub fn with_dg(sys: &CoupledSystem, choice: DgChoice, penetration: f64) -> CoupledSystem {
    let mut out = sys.clone();
    for feeder in &mut out.feeders {
        feeder.dg_units.clear();
        let Some(mode) = choice.mode() else { continue };
        for (node, load) in &feeder.loads {
            let p = penetration * load.p0;
            if p > 0.0 {
                feeder
                    .dg_units
                    .insert(node.clone(), DgUnit::new(p, p * DG_OVERSIZE, mode));
            }
        }
    }
    out
}

/// System for one scenario: DG placed per the scenario, then CVR settings.
pub fn prepare_scenario(sys: &CoupledSystem, scenario: &CvrScenario) -> Result<CoupledSystem> {
    let placed = match scenario.dg_mode {
        DgChoice::None => with_dg(sys, DgChoice::None, 0.0),
        dg if scenario.dg_penetration > 0.0 => with_dg(sys, dg, scenario.dg_penetration),
        // Zero penetration keeps whatever DG the case defines.
        _ => sys.clone(),
    };
    apply_cvr(&placed, scenario)
}

/// Loss-equivalent series impedance of a feeder at nominal tap and 1 pu
/// head voltage: segment losses divided by the squared head current, on
/// the feeder side.
pub fn feeder_equivalent_impedance(feeder: &FeederModel) -> Result<Complex64> {
    let mut nominal = feeder.clone();
    nominal.head_transformer.tap_secondary = 1.0;
    nominal.head_transformer.series_z = Complex64::new(0.0, 0.0);
    let graph = FeederGraph::build(&nominal)?;
    let sol = dpf::solve_bfs_with(
        &nominal,
        &graph,
        Complex64::new(nominal.head_transformer.k_nominal, 0.0),
        1.0,
        &BfsOptions::default(),
    )?;
    if !sol.converged {
        return Err(Error::NonConvergence(format!(
            "feeder `{}` does not solve at nominal voltage",
            feeder.name
        )));
    }
    let mut losses = Complex64::new(0.0, 0.0);
    for node in 1..graph.len() {
        let z = graph.z[node];
        if z.norm() == 0.0 {
            continue;
        }
        let p = graph.parent[node].expect("non-head node has a parent");
        let i = (sol.v[p] - sol.v[node]) / z;
        losses += z * i.norm_sqr();
    }
    let i_head = (sol.head_power / sol.boundary_voltage).conj() * nominal.head_transformer.k_eff();
    if i_head.norm() == 0.0 {
        return Err(Error::InvalidInput(format!(
            "feeder `{}` draws no current",
            feeder.name
        )));
    }
    Ok(losses / i_head.norm_sqr())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRow {
    pub label: String,
    pub dg_mode: DgChoice,
    pub tap_secondary: f64,
    pub vsm_mw: Option<f64>,
    /// Margin as (λ_max − λ_base)·ΣP0.
    pub vsm_lambda_mw: Option<f64>,
    pub lambda_max: Option<f64>,
    /// Reduction relative to the paired No-CVR row, on CVR rows.
    pub pct_reduction: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub rows: Vec<ScenarioRow>,
}

pub fn pct_reduction(vsm_no_cvr: f64, vsm_cvr: f64) -> f64 {
    100.0 * (vsm_no_cvr - vsm_cvr) / vsm_no_cvr
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(String::new, |x| format!("{x:.digits$}"))
}

impl ScenarioReport {
    /// `scenario,vsm_mw,lambda_max,pct_reduction`; failed rows leave
    /// numeric fields empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,vsm_mw,lambda_max,pct_reduction\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.label,
                fmt_opt(r.vsm_mw, 4),
                fmt_opt(r.lambda_max, 4),
                fmt_opt(r.pct_reduction, 2)
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let header = [
            "scenario",
            "tap",
            "VSM (MW)",
            "VSM from lambda (MW)",
            "lambda_max",
            "% reduction",
        ];
        let mut cells: Vec<[String; 6]> = vec![header.map(String::from)];
        for r in &self.rows {
            cells.push([
                r.label.clone(),
                format!("{:.3}", r.tap_secondary),
                r.error
                    .as_ref()
                    .map_or_else(|| fmt_opt(r.vsm_mw, 4), |e| format!("failed: {e}")),
                fmt_opt(r.vsm_lambda_mw, 4),
                fmt_opt(r.lambda_max, 4),
                fmt_opt(r.pct_reduction, 2),
            ]);
        }
        let widths: Vec<usize> = (0..6)
            .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| {
                    if c == 0 {
                        format!("{s:<w$}")
                    } else {
                        format!("{s:>w$}")
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }
}

fn run_scenario(sys: &CoupledSystem, scenario: &CvrScenario, cfg: &NoseSearchConfig) -> ScenarioRow {
    let mut row = ScenarioRow {
        label: scenario.label.clone(),
        dg_mode: scenario.dg_mode,
        tap_secondary: scenario.tap_secondary,
        vsm_mw: None,
        vsm_lambda_mw: None,
        lambda_max: None,
        pct_reduction: None,
        error: None,
    };
    let result = prepare_scenario(sys, scenario).and_then(|s| {
        let total_p0 = total_base_load(&s);
        margin::nose_search_cosim(&s, cfg).map(|r| (r, total_p0))
    });
    match result {
        Ok((search, total_p0)) => {
            row.vsm_mw = Some(compute_vsm(&search.curve, 0));
            row.vsm_lambda_mw = Some(margin::lambda_vsm_mw(
                total_p0,
                cfg.lambda_base,
                search.lambda_max,
                sys.s_base_mva,
            ));
            row.lambda_max = Some(search.lambda_max);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Sum of all ZIP base active powers, feeders counted per copy.
pub fn total_base_load(sys: &CoupledSystem) -> f64 {
    let t: f64 = sys
        .transmission
        .buses
        .iter()
        .filter_map(|b| b.native_load.map(|l| l.p0))
        .sum();
    let d: f64 = sys
        .feeders
        .iter()
        .map(|f| f.total_load_p0() * f64::from(f.replication))
        .sum();
    t + d
}

/// Run every scenario's nose search and pair rows `(2i, 2i+1)` as
/// (No CVR, CVR) for the percentage column. Scenarios run in parallel on
/// the current rayon pool; row order follows `scenarios`.
pub fn compare_scenarios(
    sys: &CoupledSystem,
    scenarios: &[CvrScenario],
    cfg: &NoseSearchConfig,
) -> ScenarioReport {
    let mut rows: Vec<ScenarioRow> = scenarios
        .par_iter()
        .map(|s| run_scenario(sys, s, cfg))
        .collect();
    for pair in rows.chunks_mut(2) {
        if let [base, cvr] = pair {
            if let (Some(a), Some(b)) = (base.vsm_mw, cvr.vsm_mw) {
                cvr.pct_reduction = Some(pct_reduction(a, b));
            }
        }
    }
    ScenarioReport { rows }
}

/// Margins of one tap setting of the extended two-bus system, from both
/// engines.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoBusCase {
    pub tap: f64,
    pub impedance: ImpedancePath,
    pub cpf_lambda_max: f64,
    pub cpf_vsm_mw: f64,
    pub cosim_lambda_max: f64,
    pub cosim_vsm_mw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoBusStudy {
    pub no_cvr: TwoBusCase,
    pub cvr: TwoBusCase,
}

impl TwoBusStudy {
    pub fn cvr_reduces_margin(&self) -> bool {
        self.cvr.cpf_vsm_mw < self.no_cvr.cpf_vsm_mw
    }
}

pub fn two_bus_case(
    z_t: Complex64,
    z_d: Complex64,
    load: ZipLoad,
    tap: f64,
    step: &StepConfig,
    search: &NoseSearchConfig,
) -> Result<TwoBusCase> {
    let sys = build_extended_two_bus(z_t, z_d, load, tap);
    let flat = sys.flatten()?;
    let curve = margin::trace_cpf(&flat.net, 5000, step)?;
    let nose = margin::nose_search_cosim(&sys, search)?;
    Ok(TwoBusCase {
        tap,
        impedance: effective_impedance(z_t, z_d, sys.feeders[0].head_transformer.k_eff()),
        cpf_lambda_max: curve.lambda_max(),
        cpf_vsm_mw: compute_vsm(&curve, 0),
        cosim_lambda_max: nose.lambda_max,
        cosim_vsm_mw: compute_vsm(&nose.curve, 0),
    })
}

pub fn two_bus_study(
    z_t: Complex64,
    z_d: Complex64,
    load: ZipLoad,
    cvr_tap: f64,
    step: &StepConfig,
    search: &NoseSearchConfig,
) -> Result<TwoBusStudy> {
    let (no_cvr, cvr) = rayon::join(
        || two_bus_case(z_t, z_d, load, NO_CVR_TAP, step, search),
        || two_bus_case(z_t, z_d, load, cvr_tap, step, search),
    );
    Ok(TwoBusStudy {
        no_cvr: no_cvr?,
        cvr: cvr?,
    })
}
