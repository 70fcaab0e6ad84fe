//! Backward/forward sweep power flow for radial feeders.
//!
//! The feeder hangs off a boundary bus through its substation transformer.
//! Voltages and currents inside the feeder are on the secondary side; the
//! head power reported is at the transformer primary, for one copy.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::netmodel::{DgMode, DgUnit, FeederGraph, FeederModel, FeederSegment, SubstationTransformer};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfsOptions {
    /// Largest allowed node-voltage change between sweeps at convergence.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Scale DG active output with λ along with the loads.
    pub dg_scales_with_lambda: bool,
}

impl Default for BfsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_sweeps: 100,
            dg_scales_with_lambda: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeederSolution {
    /// Node ids in topology order.
    pub nodes: Vec<String>,
    /// Secondary-side node voltages.
    pub v: Vec<Complex64>,
    /// Voltage applied at the transformer primary.
    pub boundary_voltage: Complex64,
    /// Complex power drawn at the transformer primary by one copy.
    pub head_power: Complex64,
    /// Reactive output of the DG unit at each node (zero where none).
    pub dg_q: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_change: f64,
}

impl FeederSolution {
    pub fn v_of(&self, node: &str) -> Option<Complex64> {
        self.nodes.iter().position(|n| n == node).map(|i| self.v[i])
    }
}

/// Reactive output of an inverter at terminal voltage `v`.
///
/// Volt-var units follow a linear droop through `v_set`, saturating at
/// `±q_max` once the voltage is `droop_band` away; unity power factor units
/// produce none.
pub fn dg_q_vvc(dg: &DgUnit, v: f64) -> f64 {
    match dg.mode {
        DgMode::Upf => 0.0,
        DgMode::Vvc => dg.q_max * ((dg.v_set - v) / dg.droop_band).clamp(-1.0, 1.0),
    }
}

/// Segment impedance as seen from the transformer primary.
pub fn refer_feeder_impedance(seg: &FeederSegment, xfmr: &SubstationTransformer) -> Complex64 {
    let k = xfmr.k_eff();
    seg.z() * (k * k)
}

/// Head power of all copies, load positive.
pub fn aggregate_head_power(sol: &FeederSolution, feeder: &FeederModel) -> (f64, f64) {
    let s = sol.head_power * f64::from(feeder.replication);
    (s.re, s.im)
}

pub fn solve_bfs(feeder: &FeederModel, head_voltage: Complex64, lambda: f64) -> Result<FeederSolution> {
    let graph = FeederGraph::build(feeder)?;
    solve_bfs_with(feeder, &graph, head_voltage, lambda, &BfsOptions::default())
}

/// Net complex power drawn at each node (loads minus DG).
fn node_power(
    feeder: &FeederModel,
    graph: &FeederGraph,
    v: &[Complex64],
    lambda: f64,
    opts: &BfsOptions,
    dg_q: &mut [f64],
) -> Vec<Complex64> {
    graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, node)| {
            let vm = v[i].norm();
            let mut s = feeder.loads.get(node).map_or(Complex64::new(0.0, 0.0), |l| {
                let (p, q) = l.eval(vm, lambda);
                Complex64::new(p, q)
            });
            if let Some(dg) = feeder.dg_units.get(node) {
                let p = if opts.dg_scales_with_lambda {
                    dg.p_rated * lambda
                } else {
                    dg.p_rated
                };
                dg_q[i] = dg_q_vvc(dg, vm);
                s -= Complex64::new(p, dg_q[i]);
            }
            s
        })
        .collect()
}

/// Branch current into each node, accumulated leaf to root.
fn backward(graph: &FeederGraph, v: &[Complex64], s: &[Complex64]) -> Vec<Complex64> {
    let mut i_branch: Vec<Complex64> = s.iter().zip(v).map(|(s, v)| (s / v).conj()).collect();
    for node in (1..graph.len()).rev() {
        let p = graph.parent[node].expect("non-head node has a parent");
        let i = i_branch[node];
        i_branch[p] += i;
    }
    i_branch
}

pub fn solve_bfs_with(
    feeder: &FeederModel,
    graph: &FeederGraph,
    head_voltage: Complex64,
    lambda: f64,
    opts: &BfsOptions,
) -> Result<FeederSolution> {
    if !(head_voltage.norm() > 0.0) {
        return Err(Error::InvalidInput(format!(
            "head voltage magnitude must be positive, got {}",
            head_voltage.norm()
        )));
    }
    let t = &feeder.head_transformer;
    let k = t.k_eff();
    let n = graph.len();
    let mut v = vec![head_voltage / k; n];
    let mut dg_q = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    let mut max_change = f64::INFINITY;

    while iterations < opts.max_sweeps {
        iterations += 1;
        let s = node_power(feeder, graph, &v, lambda, opts, &mut dg_q);
        let i_branch = backward(graph, &v, &s);
        let i_primary = i_branch[0] / k;

        let mut next = vec![Complex64::new(0.0, 0.0); n];
        next[0] = (head_voltage - t.series_z * i_primary) / k;
        for node in 1..n {
            let p = graph.parent[node].expect("non-head node has a parent");
            next[node] = next[p] - graph.z[node] * i_branch[node];
        }
        max_change = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        v = next;
        if !max_change.is_finite() || v.iter().any(|x| !(x.norm() > 1e-6)) {
            max_change = f64::NAN;
            break;
        }
        if max_change <= opts.tol {
            converged = true;
            break;
        }
    }

    let head_power = if max_change.is_finite() {
        let s = node_power(feeder, graph, &v, lambda, opts, &mut dg_q);
        let i_primary = backward(graph, &v, &s)[0] / k;
        head_voltage * i_primary.conj()
    } else {
        Complex64::new(f64::NAN, f64::NAN)
    };

    Ok(FeederSolution {
        nodes: graph.nodes.clone(),
        v,
        boundary_voltage: head_voltage,
        head_power,
        dg_q,
        converged,
        iterations,
        max_change,
    })
}

/// Derivative of per-copy head power with respect to the primary voltage
/// magnitude at `v`, by central differences of width `h`. `None` if either
/// perturbed sweep fails.
pub fn head_power_slope(
    feeder: &FeederModel,
    graph: &FeederGraph,
    v: f64,
    lambda: f64,
    opts: &BfsOptions,
    h: f64,
) -> Result<Option<Complex64>> {
    let up = solve_bfs_with(feeder, graph, Complex64::new(v + h, 0.0), lambda, opts)?;
    let down = solve_bfs_with(feeder, graph, Complex64::new(v - h, 0.0), lambda, opts)?;
    if !(up.converged && down.converged) {
        return Ok(None);
    }
    Ok(Some((up.head_power - down.head_power) / (2.0 * h)))
}
