//! Transmission/distribution co-simulation.
//!
//! Each exchange solves every feeder at the current boundary voltage, turns
//! the aggregated head powers into boundary demands, and re-solves the
//! transmission network with them. The loop stops once boundary voltage and
//! power stop moving.
//!
//! In [`ExchangeMode::Sensitivity`] the boundary demand handed to the
//! transmission solve carries the feeder's head-power slope with respect to
//! the boundary voltage magnitude, so the transmission Newton solve sees a
//! linearized feeder instead of a frozen one. Near the nose of the P-V curve
//! the plain exchange contracts arbitrarily slowly; the slope keeps each
//! exchange a Newton step of the coupled problem.

use std::collections::BTreeSet;
use std::fmt;

use num_complex::Complex64;

use crate::dpf::{self, BfsOptions, FeederSolution};
use crate::error::Result;
use crate::netmodel::{validate_network, BusId, CoupledSystem, FeederGraph};
use crate::tpf::{BoundaryLoad, FailureCause, Injections, NewtonOptions, PowerFlowModel, PowerFlowSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExchangeMode {
    /// Feeders enter the transmission solve as fixed PQ demands.
    Plain,
    /// Feeders enter as PQ demands linear in the boundary voltage magnitude.
    Sensitivity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosimOptions {
    /// Boundary voltage and power change (pu) that ends the exchange loop.
    pub tol: f64,
    pub max_exchanges: usize,
    pub mode: ExchangeMode,
    pub newton: NewtonOptions,
    pub bfs: BfsOptions,
    /// Voltage perturbation for the head-power slope.
    pub slope_step: f64,
}

impl Default for CosimOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_exchanges: 20,
            mode: ExchangeMode::Sensitivity,
            newton: NewtonOptions {
                tol: 1e-10,
                ..NewtonOptions::default()
            },
            bfs: BfsOptions {
                tol: 1e-12,
                max_sweeps: 5000,
                dg_scales_with_lambda: false,
            },
            slope_step: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryRecord {
    pub iteration: usize,
    pub bus: BusId,
    pub v_boundary: f64,
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CosimFailure {
    Transmission(FailureCause),
    Feeder(String),
    ExchangeLimit,
}

impl fmt::Display for CosimFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CosimFailure::Transmission(c) => write!(f, "transmission solve failed ({c:?})"),
            CosimFailure::Feeder(name) => write!(f, "feeder `{name}` sweep did not converge"),
            CosimFailure::ExchangeLimit => write!(f, "exchange limit reached"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSolution {
    pub lambda: f64,
    pub transmission: PowerFlowSolution,
    pub feeders: Vec<FeederSolution>,
    /// Boundary demands used by the latest transmission solve.
    pub injections: Injections,
    pub boundary_trace: Vec<BoundaryRecord>,
    pub exchanges: usize,
    pub converged: bool,
    pub failure: Option<CosimFailure>,
    /// Largest boundary (|ΔV|, |ΔP|, |ΔQ|) of the latest exchange.
    pub last_change: (f64, f64, f64),
}

impl CoupledSolution {
    /// Total active power consumed by ZIP loads, transmission and feeders
    /// (all copies), in pu.
    pub fn delivered_p(&self, sys: &CoupledSystem) -> f64 {
        let mut total: f64 = sys
            .transmission
            .buses
            .iter()
            .zip(&self.transmission.v_mag)
            .filter_map(|(b, &v)| b.native_load.map(|l| l.eval(v, self.lambda).0))
            .sum();
        for (feeder, sol) in sys.feeders.iter().zip(&self.feeders) {
            let per_copy: f64 = sol
                .nodes
                .iter()
                .zip(&sol.v)
                .filter_map(|(n, v)| feeder.loads.get(n).map(|l| l.eval(v.norm(), self.lambda).0))
                .sum();
            total += per_copy * f64::from(feeder.replication);
        }
        total
    }

    /// Aggregate (P, Q) drawn at each boundary bus by the latest feeder solves.
    pub fn boundary_power(&self, sys: &CoupledSystem) -> Vec<(BusId, f64, f64)> {
        boundary_buses(sys)
            .into_iter()
            .map(|bus| {
                let (p, q) = sys
                    .feeders
                    .iter()
                    .zip(&self.feeders)
                    .filter(|(f, _)| f.boundary_bus == bus)
                    .map(|(f, s)| dpf::aggregate_head_power(s, f))
                    .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
                (bus, p, q)
            })
            .collect()
    }
}

fn boundary_buses(sys: &CoupledSystem) -> Vec<BusId> {
    sys.feeders
        .iter()
        .map(|f| f.boundary_bus)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Reusable co-simulation engine over one coupled system.
#[derive(Debug, Clone)]
pub struct CoSimulator<'a> {
    sys: &'a CoupledSystem,
    model: PowerFlowModel,
    graphs: Vec<FeederGraph>,
    buses: Vec<BusId>,
    pub opts: CosimOptions,
}

impl<'a> CoSimulator<'a> {
    pub fn new(sys: &'a CoupledSystem, opts: CosimOptions) -> Result<Self> {
        validate_network(sys).into_result()?;
        let graphs = sys
            .feeders
            .iter()
            .map(FeederGraph::build)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sys,
            model: PowerFlowModel::new(&sys.transmission)?,
            graphs,
            buses: boundary_buses(sys),
            opts,
        })
    }

    pub fn system(&self) -> &CoupledSystem {
        self.sys
    }

    /// Boundary demands for a lossless feeder at nominal secondary voltage.
    fn flat_injections(&self, lambda: f64) -> Injections {
        let mut inj = Injections::new();
        for feeder in &self.sys.feeders {
            let v = 1.0 / feeder.head_transformer.k_eff();
            let mut s = Complex64::new(0.0, 0.0);
            for load in feeder.loads.values() {
                let (p, q) = load.eval(v, lambda);
                s += Complex64::new(p, q);
            }
            for dg in feeder.dg_units.values() {
                let p = if self.opts.bfs.dg_scales_with_lambda {
                    dg.p_rated * lambda
                } else {
                    dg.p_rated
                };
                s -= Complex64::new(p, dpf::dg_q_vvc(dg, v));
            }
            s *= f64::from(feeder.replication);
            let e = inj
                .entry(feeder.boundary_bus)
                .or_insert(BoundaryLoad::constant(0.0, 0.0));
            e.p += s.re;
            e.q += s.im;
        }
        inj
    }

    fn solve_transmission(
        &self,
        inj: &Injections,
        lambda: f64,
        start: Option<&PowerFlowSolution>,
    ) -> Result<PowerFlowSolution> {
        let model = self.model.clone().with_injections(inj)?;
        Ok(model.solve(lambda, start, &self.opts.newton))
    }

    /// Starting point for an exchange loop at `lambda`: the warm solution's
    /// transmission state, or a transmission solve with lossless feeder
    /// demands.
    pub fn initial(&self, lambda: f64, warm: Option<&CoupledSolution>) -> Result<CoupledSolution> {
        let (transmission, injections) = match warm {
            Some(w) => (w.transmission.clone(), w.injections.clone()),
            None => {
                let inj = self.flat_injections(lambda);
                (self.solve_transmission(&inj, lambda, None)?, inj)
            }
        };
        let failure = (!transmission.converged)
            .then(|| CosimFailure::Transmission(transmission.cause.unwrap_or(FailureCause::Diverged)));
        let feeders = warm.map(|w| w.feeders.clone()).unwrap_or_default();
        Ok(CoupledSolution {
            lambda,
            transmission,
            feeders,
            injections,
            boundary_trace: Vec::new(),
            exchanges: 0,
            converged: false,
            failure,
            last_change: (f64::INFINITY, f64::INFINITY, f64::INFINITY),
        })
    }

    /// One exchange: feeder sweeps at the current boundary voltages, new
    /// boundary demands, then a transmission solve.
    pub fn exchange_step(&self, lambda: f64, prev: &CoupledSolution) -> Result<CoupledSolution> {
        let mut next = prev.clone();
        next.lambda = lambda;
        next.exchanges = prev.exchanges + 1;
        next.converged = false;

        let mut feeders = Vec::with_capacity(self.sys.feeders.len());
        let mut inj = Injections::new();
        for (feeder, graph) in self.sys.feeders.iter().zip(&self.graphs) {
            let v_b = prev
                .transmission
                .phasor_of(feeder.boundary_bus)
                .expect("boundary bus validated");
            let sol = dpf::solve_bfs_with(feeder, graph, v_b, lambda, &self.opts.bfs)?;
            if !sol.converged {
                next.failure = Some(CosimFailure::Feeder(feeder.name.clone()));
                return Ok(next);
            }
            let n = f64::from(feeder.replication);
            let slope = match self.opts.mode {
                ExchangeMode::Plain => Complex64::new(0.0, 0.0),
                ExchangeMode::Sensitivity => dpf::head_power_slope(
                    feeder,
                    graph,
                    v_b.norm(),
                    lambda,
                    &self.opts.bfs,
                    self.opts.slope_step,
                )?
                .unwrap_or_default(),
            };
            let e = inj.entry(feeder.boundary_bus).or_insert(BoundaryLoad {
                v_ref: v_b.norm(),
                ..Default::default()
            });
            e.p += sol.head_power.re * n;
            e.q += sol.head_power.im * n;
            e.dp_dv += slope.re * n;
            e.dq_dv += slope.im * n;
            feeders.push(sol);
        }

        let transmission = self.solve_transmission(&inj, lambda, Some(&prev.transmission))?;
        if !transmission.converged {
            next.failure = Some(CosimFailure::Transmission(
                transmission.cause.unwrap_or(FailureCause::Diverged),
            ));
            next.feeders = feeders;
            return Ok(next);
        }

        let mut change: (f64, f64, f64) = (0.0, 0.0, 0.0);
        for &bus in &self.buses {
            let v_new = transmission.v_of(bus).expect("boundary bus");
            let v_old = prev.transmission.v_of(bus).expect("boundary bus");
            let new = inj[&bus];
            let (p_old, q_old) = prev
                .injections
                .get(&bus)
                .map_or((f64::INFINITY, f64::INFINITY), |b| (b.p, b.q));
            change.0 = change.0.max((v_new - v_old).abs());
            change.1 = change.1.max((new.p - p_old).abs());
            change.2 = change.2.max((new.q - q_old).abs());
            next.boundary_trace.push(BoundaryRecord {
                iteration: next.exchanges,
                bus,
                v_boundary: v_new,
                p: new.p,
                q: new.q,
            });
        }

        next.transmission = transmission;
        next.feeders = feeders;
        next.injections = inj;
        next.last_change = change;
        next.failure = None;
        Ok(next)
    }

    /// Exchange until boundary quantities settle, or give up.
    pub fn solve(&self, lambda: f64, warm: Option<&CoupledSolution>) -> Result<CoupledSolution> {
        let mut sol = self.initial(lambda, warm)?;
        sol.boundary_trace.clear();
        sol.exchanges = 0;
        if sol.failure.is_some() {
            return Ok(sol);
        }
        if self.sys.feeders.is_empty() {
            sol.converged = true;
            return Ok(sol);
        }
        while sol.exchanges < self.opts.max_exchanges {
            sol = self.exchange_step(lambda, &sol)?;
            if sol.failure.is_some() {
                return Ok(sol);
            }
            let (dv, dp, dq) = sol.last_change;
            if dv <= self.opts.tol && dp <= self.opts.tol && dq <= self.opts.tol {
                sol.converged = true;
                return Ok(sol);
            }
        }
        sol.failure = Some(CosimFailure::ExchangeLimit);
        Ok(sol)
    }
}

/// Solve the coupled system at `lambda`, optionally warm-started.
pub fn solve_coupled(
    sys: &CoupledSystem,
    lambda: f64,
    warm: Option<&CoupledSolution>,
) -> Result<CoupledSolution> {
    CoSimulator::new(sys, CosimOptions::default())?.solve(lambda, warm)
}

/// Single exchange from `prev`.
pub fn exchange_step(sys: &CoupledSystem, lambda: f64, prev: &CoupledSolution) -> Result<CoupledSolution> {
    CoSimulator::new(sys, CosimOptions::default())?.exchange_step(lambda, prev)
}

/// Boundary trace as CSV with columns `iter, v_boundary_pu, p_pu, q_pu`,
/// restricted to one boundary bus.
pub fn trace_csv(trace: &[BoundaryRecord], bus: BusId) -> String {
    let mut out = String::from("iter,v_boundary_pu,p_pu,q_pu\n");
    for r in trace.iter().filter(|r| r.bus == bus) {
        out.push_str(&format!("{},{},{},{}\n", r.iteration, r.v_boundary, r.p, r.q));
    }
    out
}
