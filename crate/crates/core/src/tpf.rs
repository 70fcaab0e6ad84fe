//! Polar Newton-Raphson power flow for the transmission network.
//!
//! Loads are ZIP loads scaled by a common parameter λ and evaluated at the
//! iterate voltage, so their voltage derivatives appear in the Jacobian.
//! Buses may also carry a [`BoundaryLoad`], a linearized voltage-dependent
//! demand used by the co-simulation to stand in for a feeder.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::netmodel::{BusId, BusKind, TransmissionNetwork};
use crate::zipload::ZipLoad;

/// Demand at a boundary bus, linear in the local voltage magnitude around
/// `v_ref`. Not scaled by λ.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BoundaryLoad {
    pub p: f64,
    pub q: f64,
    pub dp_dv: f64,
    pub dq_dv: f64,
    pub v_ref: f64,
}

impl BoundaryLoad {
    pub fn constant(p: f64, q: f64) -> Self {
        Self {
            p,
            q,
            ..Default::default()
        }
    }

    pub fn eval(&self, v: f64) -> (f64, f64) {
        let dv = v - self.v_ref;
        (self.p + self.dp_dv * dv, self.q + self.dq_dv * dv)
    }
}

pub type Injections = BTreeMap<BusId, BoundaryLoad>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub enforce_q_limits: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
            enforce_q_limits: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureCause {
    SingularJacobian,
    IterationLimit,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub bus_ids: Vec<BusId>,
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
    pub cause: Option<FailureCause>,
}

impl PowerFlowSolution {
    pub fn v_of(&self, id: BusId) -> Option<f64> {
        self.bus_ids.iter().position(|&b| b == id).map(|i| self.v_mag[i])
    }

    pub fn phasor_of(&self, id: BusId) -> Option<Complex64> {
        self.bus_ids
            .iter()
            .position(|&b| b == id)
            .map(|i| Complex64::from_polar(self.v_mag[i], self.v_ang[i]))
    }
}

/// Build the bus admittance matrix, buses in network order.
pub fn build_ybus(net: &TransmissionNetwork) -> Result<DMatrix<Complex64>> {
    let index = net.index();
    let n = net.buses.len();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for br in &net.branches {
        let z = br.z();
        if z.norm() == 0.0 {
            return Err(Error::ZeroImpedance { from: br.from, to: br.to });
        }
        let (Some(&f), Some(&t)) = (index.get(&br.from), index.get(&br.to)) else {
            return Err(Error::InvalidInput(format!(
                "branch {}-{} references a missing bus",
                br.from, br.to
            )));
        };
        let ys = z.inv();
        let ysh = Complex64::new(0.0, br.b_shunt / 2.0);
        let tap = br.tap;
        y[(f, f)] += (ys + ysh) / (tap * tap);
        y[(t, t)] += ys + ysh;
        y[(f, t)] -= ys / tap;
        y[(t, f)] -= ys / tap;
    }
    Ok(y)
}

/// Compiled power-flow problem for one network and injection set.
#[derive(Debug, Clone)]
pub struct PowerFlowModel {
    pub ids: Vec<BusId>,
    kinds: Vec<BusKind>,
    v_set: Vec<f64>,
    p_inj: Vec<f64>,
    q_inj: Vec<f64>,
    q_min: Vec<f64>,
    q_max: Vec<f64>,
    loads: Vec<Option<ZipLoad>>,
    extra: Vec<Option<BoundaryLoad>>,
    g: DMatrix<f64>,
    b: DMatrix<f64>,
    /// Buses whose angle is a variable (all but slack).
    ang_idx: Vec<usize>,
    /// Buses whose magnitude is a variable (pq).
    mag_idx: Vec<usize>,
    slack: usize,
}

impl PowerFlowModel {
    pub fn new(net: &TransmissionNetwork) -> Result<Self> {
        let slacks: Vec<usize> = net
            .buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusKind::Slack)
            .map(|(i, _)| i)
            .collect();
        if slacks.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "power flow needs exactly one slack bus, found {}",
                slacks.len()
            )));
        }
        let y = build_ybus(net)?;
        let mut model = Self {
            ids: net.ids(),
            kinds: net.buses.iter().map(|b| b.kind).collect(),
            v_set: net.buses.iter().map(|b| b.v_set).collect(),
            p_inj: net.buses.iter().map(|b| b.p_inj).collect(),
            q_inj: net.buses.iter().map(|b| b.q_inj).collect(),
            q_min: net.buses.iter().map(|b| b.q_min).collect(),
            q_max: net.buses.iter().map(|b| b.q_max).collect(),
            loads: net.buses.iter().map(|b| b.native_load).collect(),
            extra: vec![None; net.buses.len()],
            g: y.map(|c| c.re),
            b: y.map(|c| c.im),
            ang_idx: Vec::new(),
            mag_idx: Vec::new(),
            slack: slacks[0],
        };
        model.reindex();
        Ok(model)
    }

    pub fn with_injections(mut self, inj: &Injections) -> Result<Self> {
        self.set_injections(inj)?;
        Ok(self)
    }

    pub fn set_injections(&mut self, inj: &Injections) -> Result<()> {
        self.extra.iter_mut().for_each(|e| *e = None);
        for (id, load) in inj {
            let i = self.position(*id).ok_or_else(|| {
                Error::InvalidInput(format!("injection at unknown bus {id}"))
            })?;
            self.extra[i] = Some(*load);
        }
        Ok(())
    }

    fn reindex(&mut self) {
        self.ang_idx = (0..self.ids.len()).filter(|&i| i != self.slack).collect();
        self.mag_idx = (0..self.ids.len())
            .filter(|&i| self.kinds[i] == BusKind::Pq)
            .collect();
    }

    pub fn position(&self, id: BusId) -> Option<usize> {
        self.ids.iter().position(|&b| b == id)
    }

    pub fn n_buses(&self) -> usize {
        self.ids.len()
    }

    pub fn n_vars(&self) -> usize {
        self.ang_idx.len() + self.mag_idx.len()
    }

    pub fn kinds(&self) -> &[BusKind] {
        &self.kinds
    }

    /// Flat profile with setpoints applied.
    pub fn flat_start(&self) -> (Vec<f64>, Vec<f64>) {
        let v = (0..self.n_buses())
            .map(|i| match self.kinds[i] {
                BusKind::Pq => 1.0,
                _ => self.v_set[i],
            })
            .collect();
        (v, vec![0.0; self.n_buses()])
    }

    pub fn to_vector(&self, v_mag: &[f64], v_ang: &[f64]) -> DVector<f64> {
        let mut x = DVector::zeros(self.n_vars());
        for (k, &i) in self.ang_idx.iter().enumerate() {
            x[k] = v_ang[i];
        }
        let off = self.ang_idx.len();
        for (k, &i) in self.mag_idx.iter().enumerate() {
            x[off + k] = v_mag[i];
        }
        x
    }

    pub fn from_vector(&self, x: &DVector<f64>, v_mag: &mut [f64], v_ang: &mut [f64]) {
        for (k, &i) in self.ang_idx.iter().enumerate() {
            v_ang[i] = x[k];
        }
        let off = self.ang_idx.len();
        for (k, &i) in self.mag_idx.iter().enumerate() {
            v_mag[i] = x[off + k];
        }
    }

    /// Injected power computed from the network equations.
    pub fn calc_power(&self, v_mag: &[f64], v_ang: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_buses();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                let (g, b) = (self.g[(i, j)], self.b[(i, j)]);
                if g == 0.0 && b == 0.0 {
                    continue;
                }
                let (s, c) = (v_ang[i] - v_ang[j]).sin_cos();
                p[i] += v_mag[i] * v_mag[j] * (g * c + b * s);
                q[i] += v_mag[i] * v_mag[j] * (g * s - b * c);
            }
        }
        (p, q)
    }

    /// Demand at bus `i` excluding scheduled injections.
    pub fn demand(&self, i: usize, v: f64, lambda: f64) -> (f64, f64) {
        let (mut p, mut q) = self.loads[i].map_or((0.0, 0.0), |l| l.eval(v, lambda));
        if let Some(e) = &self.extra[i] {
            let (pe, qe) = e.eval(v);
            p += pe;
            q += qe;
        }
        (p, q)
    }

    fn demand_dv(&self, i: usize, v: f64, lambda: f64) -> (f64, f64) {
        let (mut dp, mut dq) = self.loads[i].map_or((0.0, 0.0), |l| l.dv(v, lambda));
        if let Some(e) = &self.extra[i] {
            dp += e.dp_dv;
            dq += e.dq_dv;
        }
        (dp, dq)
    }

    /// Scheduled minus calculated power: ΔP for non-slack buses, then ΔQ for
    /// pq buses.
    pub fn mismatch(&self, v_mag: &[f64], v_ang: &[f64], lambda: f64) -> DVector<f64> {
        let (pc, qc) = self.calc_power(v_mag, v_ang);
        let mut f = DVector::zeros(self.n_vars());
        for (k, &i) in self.ang_idx.iter().enumerate() {
            let (pd, _) = self.demand(i, v_mag[i], lambda);
            f[k] = self.p_inj[i] - pd - pc[i];
        }
        let off = self.ang_idx.len();
        for (k, &i) in self.mag_idx.iter().enumerate() {
            let (_, qd) = self.demand(i, v_mag[i], lambda);
            f[off + k] = self.q_inj[i] - qd - qc[i];
        }
        f
    }

    /// Derivative of [`mismatch`](Self::mismatch) with respect to λ.
    pub fn mismatch_dlambda(&self, v_mag: &[f64]) -> DVector<f64> {
        let mut f = DVector::zeros(self.n_vars());
        for (k, &i) in self.ang_idx.iter().enumerate() {
            f[k] = -self.loads[i].map_or(0.0, |l| l.eval(v_mag[i], 1.0).0);
        }
        let off = self.ang_idx.len();
        for (k, &i) in self.mag_idx.iter().enumerate() {
            f[off + k] = -self.loads[i].map_or(0.0, |l| l.eval(v_mag[i], 1.0).1);
        }
        f
    }

    /// Jacobian of the mismatch vector with respect to (θ, |V|).
    pub fn jacobian(&self, v_mag: &[f64], v_ang: &[f64], lambda: f64) -> DMatrix<f64> {
        let n = self.n_buses();
        let (pc, qc) = self.calc_power(v_mag, v_ang);
        // Column position of each bus's angle / magnitude variable.
        let mut ang_col = vec![None; n];
        let mut mag_col = vec![None; n];
        for (k, &i) in self.ang_idx.iter().enumerate() {
            ang_col[i] = Some(k);
        }
        let off = self.ang_idx.len();
        for (k, &i) in self.mag_idx.iter().enumerate() {
            mag_col[i] = Some(off + k);
        }

        // Rows of calculated-power derivatives, negated at the end.
        let mut jac = DMatrix::zeros(self.n_vars(), self.n_vars());
        let mut fill_row = |row: usize, i: usize, active: bool| {
            for j in 0..n {
                let (g, b) = (self.g[(i, j)], self.b[(i, j)]);
                if j != i && g == 0.0 && b == 0.0 {
                    continue;
                }
                let (s, c) = (v_ang[i] - v_ang[j]).sin_cos();
                let (d_ang, d_mag) = if j == i {
                    if active {
                        (
                            -qc[i] - b * v_mag[i] * v_mag[i],
                            pc[i] / v_mag[i] + g * v_mag[i],
                        )
                    } else {
                        (
                            pc[i] - g * v_mag[i] * v_mag[i],
                            qc[i] / v_mag[i] - b * v_mag[i],
                        )
                    }
                } else if active {
                    (
                        v_mag[i] * v_mag[j] * (g * s - b * c),
                        v_mag[i] * (g * c + b * s),
                    )
                } else {
                    (
                        -v_mag[i] * v_mag[j] * (g * c + b * s),
                        v_mag[i] * (g * s - b * c),
                    )
                };
                if let Some(col) = ang_col[j] {
                    jac[(row, col)] = -d_ang;
                }
                if let Some(col) = mag_col[j] {
                    jac[(row, col)] = -d_mag;
                }
            }
        };
        for (k, &i) in self.ang_idx.iter().enumerate() {
            fill_row(k, i, true);
        }
        for (k, &i) in self.mag_idx.iter().enumerate() {
            fill_row(off + k, i, false);
        }

        // Voltage-dependent demand.
        for (k, &i) in self.ang_idx.iter().enumerate() {
            if let Some(col) = mag_col[i] {
                jac[(k, col)] -= self.demand_dv(i, v_mag[i], lambda).0;
            }
        }
        for (k, &i) in self.mag_idx.iter().enumerate() {
            let col = mag_col[i].expect("pq bus has magnitude column");
            jac[(off + k, col)] -= self.demand_dv(i, v_mag[i], lambda).1;
        }
        jac
    }

    /// Total active ZIP power drawn by native loads.
    pub fn delivered_p(&self, v_mag: &[f64], lambda: f64) -> f64 {
        self.loads
            .iter()
            .zip(v_mag)
            .filter_map(|(l, &v)| l.map(|l| l.eval(v, lambda).0))
            .sum()
    }

    /// Initial state: warm start if given (setpoints re-applied), else flat.
    pub fn initial_state(&self, start: Option<&PowerFlowSolution>) -> (Vec<f64>, Vec<f64>) {
        match start {
            Some(s) if s.v_mag.len() == self.n_buses() => {
                let mut v = s.v_mag.clone();
                for i in 0..self.n_buses() {
                    if self.kinds[i] != BusKind::Pq {
                        v[i] = self.v_set[i];
                    }
                }
                (v, s.v_ang.clone())
            }
            _ => self.flat_start(),
        }
    }

    /// Plain Newton iterations from the given state without limit handling.
    pub fn newton(
        &self,
        mut v_mag: Vec<f64>,
        mut v_ang: Vec<f64>,
        lambda: f64,
        opts: &NewtonOptions,
    ) -> PowerFlowSolution {
        let mut iterations = 0;
        let mut cause = None;
        let mut x = self.to_vector(&v_mag, &v_ang);
        let mut f = self.mismatch(&v_mag, &v_ang, lambda);
        let mut err = f.amax();
        while err > opts.tol || !err.is_finite() {
            if iterations >= opts.max_iter || !err.is_finite() {
                cause = Some(if err.is_finite() {
                    FailureCause::IterationLimit
                } else {
                    FailureCause::Diverged
                });
                break;
            }
            let jac = self.jacobian(&v_mag, &v_ang, lambda);
            let Some(dx) = jac.lu().solve(&f) else {
                cause = Some(FailureCause::SingularJacobian);
                break;
            };
            x -= dx;
            iterations += 1;
            self.from_vector(&x, &mut v_mag, &mut v_ang);
            if self.mag_idx.iter().any(|&i| !(v_mag[i] > 0.0)) {
                cause = Some(FailureCause::Diverged);
                err = f64::NAN;
                break;
            }
            f = self.mismatch(&v_mag, &v_ang, lambda);
            err = f.amax();
        }
        PowerFlowSolution {
            bus_ids: self.ids.clone(),
            v_mag,
            v_ang,
            converged: cause.is_none(),
            iterations,
            max_mismatch: err,
            cause,
        }
    }

    /// Newton solve with pv→pq switching when generator reactive limits
    /// are finite and violated.
    pub fn solve(
        &self,
        lambda: f64,
        start: Option<&PowerFlowSolution>,
        opts: &NewtonOptions,
    ) -> PowerFlowSolution {
        let (v, a) = self.initial_state(start);
        let mut sol = self.newton(v, a, lambda, opts);
        let has_limits = self
            .q_min
            .iter()
            .chain(&self.q_max)
            .any(|q| q.is_finite());
        if !opts.enforce_q_limits || !has_limits || !sol.converged {
            return sol;
        }

        let mut work = self.clone();
        let mut total_iter = sol.iterations;
        for _ in 0..self.n_buses() {
            let (_, qc) = work.calc_power(&sol.v_mag, &sol.v_ang);
            let mut switched = false;
            for i in 0..work.n_buses() {
                if work.kinds[i] != BusKind::Pv {
                    continue;
                }
                let q_gen = qc[i] + work.demand(i, sol.v_mag[i], lambda).1;
                let limit = if q_gen > work.q_max[i] {
                    Some(work.q_max[i])
                } else if q_gen < work.q_min[i] {
                    Some(work.q_min[i])
                } else {
                    None
                };
                if let Some(limit) = limit {
                    log::debug!("bus {} hits reactive limit {limit}", work.ids[i]);
                    work.kinds[i] = BusKind::Pq;
                    work.q_inj[i] = limit;
                    switched = true;
                }
            }
            if !switched {
                break;
            }
            work.reindex();
            sol = work.newton(sol.v_mag.clone(), sol.v_ang.clone(), lambda, opts);
            total_iter += sol.iterations;
            if !sol.converged {
                break;
            }
        }
        sol.iterations = total_iter;
        sol
    }
}

/// Newton power flow on `net` with boundary injections and load scale λ.
pub fn solve_newton(
    net: &TransmissionNetwork,
    injections: &Injections,
    lambda: f64,
    start: Option<&PowerFlowSolution>,
) -> Result<PowerFlowSolution> {
    let model = PowerFlowModel::new(net)?.with_injections(injections)?;
    Ok(model.solve(lambda, start, &NewtonOptions::default()))
}

/// Mismatch vector of `net` at the given bus voltages.
pub fn power_mismatch(
    net: &TransmissionNetwork,
    v_mag: &[f64],
    v_ang: &[f64],
    lambda: f64,
) -> Result<DVector<f64>> {
    check_dims(net, v_mag, v_ang)?;
    Ok(PowerFlowModel::new(net)?.mismatch(v_mag, v_ang, lambda))
}

/// Jacobian of [`power_mismatch`] with respect to (θ non-slack, |V| pq).
pub fn jacobian(
    net: &TransmissionNetwork,
    v_mag: &[f64],
    v_ang: &[f64],
    lambda: f64,
) -> Result<DMatrix<f64>> {
    check_dims(net, v_mag, v_ang)?;
    Ok(PowerFlowModel::new(net)?.jacobian(v_mag, v_ang, lambda))
}

fn check_dims(net: &TransmissionNetwork, v_mag: &[f64], v_ang: &[f64]) -> Result<()> {
    if v_mag.len() != net.buses.len() || v_ang.len() != net.buses.len() {
        return Err(Error::InvalidInput(format!(
            "state has {} magnitudes and {} angles for {} buses",
            v_mag.len(),
            v_ang.len(),
            net.buses.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{TransmissionBranch, TransmissionBus};
    use approx::assert_relative_eq;

    fn two_bus(r: f64, x: f64, load: Option<ZipLoad>) -> TransmissionNetwork {
        let mut pq = TransmissionBus::new(2, BusKind::Pq);
        pq.native_load = load;
        TransmissionNetwork {
            buses: vec![TransmissionBus::new(1, BusKind::Slack), pq],
            branches: vec![TransmissionBranch::new(1, 2, r, x)],
        }
    }

    /// High root of |V|⁴ + (2(PR+QX) − E²)|V|² + (P²+Q²)|Z|² = 0.
    fn quartic_high_root(p: f64, q: f64, r: f64, x: f64, e: f64) -> Option<f64> {
        let b = 2.0 * (p * r + q * x) - e * e;
        let c = (p * p + q * q) * (r * r + x * x);
        let disc = b * b - 4.0 * c;
        (disc >= 0.0).then(|| ((-b + disc.sqrt()) / 2.0).sqrt())
    }

    #[test]
    fn ybus_single_branch() {
        let y = build_ybus(&two_bus(0.01, 0.06, None)).unwrap();
        assert_relative_eq!(y[(0, 1)].re, -2.7027027027, epsilon = 1e-9);
        assert_relative_eq!(y[(0, 1)].im, 16.2162162162, epsilon = 1e-9);
        assert_eq!(y[(0, 1)], y[(1, 0)]);
        assert_eq!(y[(0, 0)], -y[(0, 1)]);
    }

    #[test]
    fn ybus_without_branches_is_zero() {
        let mut net = two_bus(0.01, 0.06, None);
        net.branches.clear();
        let y = build_ybus(&net).unwrap();
        assert!(y.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn ybus_unit_tap_matches_tap_free_formula() {
        let mut net = two_bus(0.02, 0.1, None);
        net.branches[0].b_shunt = 0.2;
        let y = build_ybus(&net).unwrap();
        let ys = Complex64::new(0.02, 0.1).inv();
        assert_relative_eq!(y[(0, 0)].re, ys.re, epsilon = 1e-12);
        assert_relative_eq!(y[(0, 0)].im, ys.im + 0.1, epsilon = 1e-12);
        // Rows sum to the shunt admittance.
        let row: Complex64 = (0..2).map(|j| y[(0, j)]).sum();
        assert_relative_eq!(row.im, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn ybus_off_nominal_tap() {
        let mut net = two_bus(0.0, 0.1, None);
        net.branches[0].tap = 1.05;
        let y = build_ybus(&net).unwrap();
        let ys = Complex64::new(0.0, 0.1).inv();
        assert_relative_eq!(y[(0, 1)].im, (-ys / 1.05).im, epsilon = 1e-12);
        assert_relative_eq!(y[(0, 0)].im, (ys / (1.05 * 1.05)).im, epsilon = 1e-12);
        assert_relative_eq!(y[(1, 1)].im, ys.im, epsilon = 1e-12);
    }

    #[test]
    fn zero_impedance_is_an_error() {
        assert!(matches!(
            build_ybus(&two_bus(0.0, 0.0, None)),
            Err(Error::ZeroImpedance { from: 1, to: 2 })
        ));
    }

    #[test]
    fn two_bus_constant_power_matches_quartic() {
        let net = two_bus(0.01, 0.06, Some(ZipLoad::constant_power(0.6, 0.2)));
        let sol = solve_newton(&net, &Injections::new(), 1.0, None).unwrap();
        assert!(sol.converged);
        let expected = quartic_high_root(0.6, 0.2, 0.01, 0.06, 1.0).unwrap();
        assert_relative_eq!(sol.v_mag[1], expected, epsilon = 1e-9);
        assert_relative_eq!(sol.v_mag[1], 0.98105, epsilon = 1e-5);
        assert!(sol.max_mismatch <= 1e-8);
        assert_eq!(sol.v_mag[0], 1.0);
        assert_eq!(sol.v_ang[0], 0.0);
    }

    #[test]
    fn zero_load_is_flat() {
        let net = two_bus(0.01, 0.06, None);
        let sol = solve_newton(&net, &Injections::new(), 1.0, None).unwrap();
        assert!(sol.converged);
        assert!(sol.iterations <= 1);
        assert_relative_eq!(sol.v_mag[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn beyond_nose_does_not_converge() {
        let net = two_bus(0.01, 0.06, Some(ZipLoad::constant_power(0.6, 0.2)));
        assert!(quartic_high_root(6.0, 2.0, 0.01, 0.06, 1.0).is_none());
        let sol = solve_newton(&net, &Injections::new(), 10.0, None).unwrap();
        assert!(!sol.converged);
        assert!(sol.cause.is_some());
    }

    #[test]
    fn flat_start_mismatch_is_scheduled_minus_injection() {
        let net = two_bus(0.01, 0.06, Some(ZipLoad::constant_power(0.6, 0.2)));
        // At a flat profile no current flows, so ΔP = −0.6 and ΔQ = −0.2.
        let f = power_mismatch(&net, &[1.0, 1.0], &[0.0, 0.0], 1.0).unwrap();
        assert_relative_eq!(f[0], -0.6, epsilon = 1e-12);
        assert_relative_eq!(f[1], -0.2, epsilon = 1e-12);
        let f0 = power_mismatch(&net, &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert!(f0.amax() == 0.0);
    }

    #[test]
    fn constant_power_load_has_no_voltage_term() {
        let loaded = two_bus(0.01, 0.06, Some(ZipLoad::constant_power(0.6, 0.2)));
        let empty = two_bus(0.01, 0.06, None);
        let state = ([1.0, 0.98], [0.0, -0.05]);
        let a = jacobian(&loaded, &state.0, &state.1, 1.0).unwrap();
        let b = jacobian(&empty, &state.0, &state.1, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn impedance_load_voltage_term() {
        let load = ZipLoad::new(0.6, 0.2, [1.0, 0.0, 0.0]).unwrap();
        let loaded = two_bus(0.01, 0.06, Some(load));
        let empty = two_bus(0.01, 0.06, None);
        let state = ([1.0, 1.0], [0.0, 0.0]);
        let a = jacobian(&loaded, &state.0, &state.1, 1.0).unwrap();
        let b = jacobian(&empty, &state.0, &state.1, 1.0).unwrap();
        // dΔP/dV = −∂P_load/∂V = −2·p0·pz
        assert_relative_eq!(a[(0, 1)] - b[(0, 1)], -2.0 * 0.6, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_matches_central_differences_on_two_bus() {
        let net = two_bus(
            0.01,
            0.06,
            Some(ZipLoad::new(0.6, 0.2, [0.4, 0.3, 0.3]).unwrap()),
        );
        let v = [1.0, 0.98];
        let a = [0.0, -0.07];
        let jac = jacobian(&net, &v, &a, 1.3).unwrap();
        let model = PowerFlowModel::new(&net).unwrap();
        let x0 = model.to_vector(&v, &a);
        let h = 1e-6;
        for col in 0..x0.len() {
            let mut vp = v.to_vec();
            let mut ap = a.to_vec();
            let mut vm = v.to_vec();
            let mut am = a.to_vec();
            let mut xp = x0.clone();
            xp[col] += h;
            let mut xm = x0.clone();
            xm[col] -= h;
            model.from_vector(&xp, &mut vp, &mut ap);
            model.from_vector(&xm, &mut vm, &mut am);
            let fd = (model.mismatch(&vp, &ap, 1.3) - model.mismatch(&vm, &am, 1.3)) / (2.0 * h);
            for row in 0..x0.len() {
                let rel = (jac[(row, col)] - fd[row]).abs() / fd[row].abs().max(1.0);
                assert!(rel < 1e-6, "({row},{col}): {} vs {}", jac[(row, col)], fd[row]);
            }
        }
    }

    #[test]
    fn reactive_limit_switches_pv_to_pq() {
        let mut net = two_bus(0.0, 0.1, Some(ZipLoad::constant_power(0.5, 0.5)));
        net.buses[1].kind = BusKind::Pv;
        net.buses[1].v_set = 1.0;
        net.buses[1].q_max = 0.1;
        let sol = solve_newton(&net, &Injections::new(), 1.0, None).unwrap();
        assert!(sol.converged);
        // Limited generator lets the voltage sag below its setpoint.
        assert!(sol.v_mag[1] < 1.0);
        let model = PowerFlowModel::new(&net).unwrap();
        let (_, qc) = model.calc_power(&sol.v_mag, &sol.v_ang);
        assert_relative_eq!(qc[1] + 0.5, 0.1, epsilon = 1e-7);
    }

    #[test]
    fn boundary_load_is_linear() {
        let b = BoundaryLoad {
            p: 1.0,
            q: 0.5,
            dp_dv: 2.0,
            dq_dv: -1.0,
            v_ref: 0.9,
        };
        assert_eq!(b.eval(0.9), (1.0, 0.5));
        let (p, q) = b.eval(1.0);
        assert_relative_eq!(p, 1.2, epsilon = 1e-12);
        assert_relative_eq!(q, 0.4, epsilon = 1e-12);
    }
}
