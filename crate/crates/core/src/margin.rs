//! Voltage stability margin: P-V curves and their nose points.
//!
//! Two engines are provided. [`trace_cpf`] is a tangent-predictor,
//! locally-parameterized-corrector continuation on a single network and
//! passes through the nose onto the lower branch. [`nose_search_cosim`]
//! steps λ through repeated coupled solves and brackets the largest λ at
//! which the co-simulation still converges.

use nalgebra::{DMatrix, DVector};

use crate::cosim::{CoSimulator, CosimOptions, CoupledSolution};
use crate::error::{Error, Result};
use crate::netmodel::{BusId, CoupledSystem, TransmissionNetwork};
use crate::tpf::{NewtonOptions, PowerFlowModel, PowerFlowSolution};

#[derive(Debug, Clone, PartialEq)]
pub struct PvPoint {
    pub lambda: f64,
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    /// Active power consumed by all ZIP loads (pu).
    pub delivered_pu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PvCurve {
    pub bus_ids: Vec<BusId>,
    pub points: Vec<PvPoint>,
    /// Index of the point with the largest λ.
    pub nose_index: usize,
    pub s_base_mva: f64,
    /// Tracing stopped early because the corrector kept failing.
    pub truncated: bool,
}

impl PvCurve {
    fn new(bus_ids: Vec<BusId>, s_base_mva: f64) -> Self {
        Self {
            bus_ids,
            points: Vec::new(),
            nose_index: 0,
            s_base_mva,
            truncated: false,
        }
    }

    fn push(&mut self, p: PvPoint) {
        if self.points.is_empty() || p.lambda > self.points[self.nose_index].lambda {
            self.nose_index = self.points.len();
        }
        self.points.push(p);
    }

    pub fn nose(&self) -> &PvPoint {
        &self.points[self.nose_index]
    }

    pub fn lambda_max(&self) -> f64 {
        self.nose().lambda
    }

    pub fn bus_position(&self, id: BusId) -> Option<usize> {
        self.bus_ids.iter().position(|&b| b == id)
    }

    /// Upper-branch points, base through nose.
    pub fn upper_branch(&self) -> &[PvPoint] {
        &self.points[..=self.nose_index]
    }
}

/// Additional delivered MW between `base_index` and the nose.
pub fn compute_vsm(curve: &PvCurve, base_index: usize) -> f64 {
    (curve.nose().delivered_pu - curve.points[base_index].delivered_pu) * curve.s_base_mva
}

/// Margin as λ growth times the total base load (MW).
pub fn lambda_vsm_mw(total_p0_pu: f64, lambda_base: f64, lambda_max: f64, s_base_mva: f64) -> f64 {
    (lambda_max - lambda_base) * total_p0_pu * s_base_mva
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub initial: f64,
    pub min: f64,
    pub max: f64,
    /// Load scale of the first point.
    pub lambda_start: f64,
    pub corrector_tol: f64,
    pub corrector_max_iter: usize,
    /// Points traced past the nose before stopping.
    pub post_nose_points: usize,
    pub s_base_mva: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            initial: 0.05,
            min: 1e-4,
            max: 0.1,
            lambda_start: 1.0,
            corrector_tol: 1e-10,
            corrector_max_iter: 15,
            post_nose_points: 25,
            s_base_mva: 100.0,
        }
    }
}

/// A point on the solution curve together with its local geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationState {
    pub lambda: f64,
    pub state: PowerFlowSolution,
    /// Unit tangent over (θ, |V|, λ).
    pub tangent: DVector<f64>,
    /// Component held fixed by the corrector; `n_vars` means λ.
    pub continuation_index: usize,
    pub step: f64,
}

impl ContinuationState {
    fn augmented(&self, model: &PowerFlowModel) -> DVector<f64> {
        let n = model.n_vars();
        let x = model.to_vector(&self.state.v_mag, &self.state.v_ang);
        let mut z = DVector::zeros(n + 1);
        z.rows_mut(0, n).copy_from(&x);
        z[n] = self.lambda;
        z
    }

    fn with_augmented(&self, model: &PowerFlowModel, z: &DVector<f64>) -> Self {
        let n = model.n_vars();
        let mut out = self.clone();
        model.from_vector(
            &z.rows(0, n).into_owned(),
            &mut out.state.v_mag,
            &mut out.state.v_ang,
        );
        out.lambda = z[n];
        out
    }
}

fn augmented_jacobian(model: &PowerFlowModel, s: &ContinuationState, index: usize) -> DMatrix<f64> {
    let n = model.n_vars();
    let mut k = DMatrix::zeros(n + 1, n + 1);
    k.view_mut((0, 0), (n, n))
        .copy_from(&model.jacobian(&s.state.v_mag, &s.state.v_ang, s.lambda));
    k.view_mut((0, n), (n, 1))
        .copy_from(&model.mismatch_dlambda(&s.state.v_mag));
    k[(n, index)] = 1.0;
    k
}

/// Tangent to the solution curve at `state`, with its continuation-index
/// component fixed to ±1 (sign taken from the previous tangent, `+` when
/// there is none) and then scaled to unit norm.
pub fn predictor_tangent(model: &PowerFlowModel, state: &ContinuationState) -> Result<DVector<f64>> {
    let n = model.n_vars();
    let k = state.continuation_index;
    let sign = match state.tangent.get(k) {
        Some(&t) if t < 0.0 => -1.0,
        _ => 1.0,
    };
    let mut rhs = DVector::zeros(n + 1);
    rhs[n] = sign;
    let t = augmented_jacobian(model, state, k)
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NonConvergence("singular augmented Jacobian".into()))?;
    let norm = t.norm();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::NonConvergence("degenerate tangent".into()));
    }
    Ok(t / norm)
}

/// Newton solve of the power-flow equations with the continuation-index
/// variable held at its predicted value. Returns the corrected state and
/// the iteration count.
pub fn corrector_step(
    model: &PowerFlowModel,
    predicted: &ContinuationState,
    tol: f64,
    max_iter: usize,
) -> Result<(ContinuationState, usize)> {
    let n = model.n_vars();
    let k = predicted.continuation_index;
    let pinned = predicted.augmented(model)[k];
    let mut cur = predicted.clone();
    for it in 0..=max_iter {
        let f = model.mismatch(&cur.state.v_mag, &cur.state.v_ang, cur.lambda);
        let err = f.amax();
        if !err.is_finite() {
            break;
        }
        if err <= tol {
            cur.state.converged = true;
            cur.state.iterations = it;
            cur.state.max_mismatch = err;
            cur.state.cause = None;
            return Ok((cur, it));
        }
        if it == max_iter {
            break;
        }
        let mut g = DVector::zeros(n + 1);
        g.rows_mut(0, n).copy_from(&f);
        let z = cur.augmented(model);
        g[n] = z[k] - pinned;
        let Some(dz) = augmented_jacobian(model, &cur, k).lu().solve(&g) else {
            break;
        };
        cur = cur.with_augmented(model, &(z - dz));
        if cur.state.v_mag.iter().any(|v| !(*v > 0.0)) {
            break;
        }
    }
    Err(Error::NonConvergence("corrector did not converge".into()))
}

fn point_of(model: &PowerFlowModel, s: &PowerFlowSolution, lambda: f64) -> PvPoint {
    PvPoint {
        lambda,
        v_mag: s.v_mag.clone(),
        v_ang: s.v_ang.clone(),
        delivered_pu: model.delivered_p(&s.v_mag, lambda),
    }
}

/// Trace the P-V curve of `net` from `cfg.lambda_start` through the nose.
///
/// The nose is located where the λ component of the tangent turns
/// negative; the step is shrunk around the crossing until it reaches
/// `cfg.min`, so the largest traced λ sits on the nose to within that
/// resolution.
pub fn trace_cpf(net: &TransmissionNetwork, max_points: usize, cfg: &StepConfig) -> Result<PvCurve> {
    let model = PowerFlowModel::new(net)?;
    let n = model.n_vars();
    let (v0, a0) = model.flat_start();
    if model.mismatch_dlambda(&v0).amax() == 0.0 {
        return Err(Error::ZeroLoadDirection);
    }
    let _ = a0;

    let newton = NewtonOptions {
        tol: cfg.corrector_tol,
        max_iter: 50,
        enforce_q_limits: false,
    };
    let base = model.solve(cfg.lambda_start, None, &newton);
    if !base.converged {
        return Err(Error::NonConvergence(format!(
            "base case at lambda {} did not converge",
            cfg.lambda_start
        )));
    }

    let mut curve = PvCurve::new(model.ids.clone(), cfg.s_base_mva);
    curve.push(point_of(&model, &base, cfg.lambda_start));

    let mut cur = ContinuationState {
        lambda: cfg.lambda_start,
        state: base,
        tangent: DVector::zeros(0),
        continuation_index: n,
        step: cfg.initial,
    };
    cur.tangent = predictor_tangent(&model, &cur)?;

    let mut easy = 0;
    let mut zooming = false;
    let mut past_nose = false;
    let mut after_nose = 0;

    while curve.points.len() < max_points.max(1) {
        let t = cur.tangent.clone();
        let index = t.iamax();
        let z = cur.augmented(&model) + &t * cur.step;
        let mut predicted = cur.with_augmented(&model, &z);
        predicted.continuation_index = index;

        let corrected = corrector_step(&model, &predicted, cfg.corrector_tol, cfg.corrector_max_iter)
            .and_then(|(mut s, iters)| {
                s.tangent = t.clone();
                let tangent = predictor_tangent(&model, &s)?;
                s.tangent = tangent;
                Ok((s, iters))
            });

        let (mut next, iters) = match corrected {
            Ok(ok) => ok,
            Err(_) => {
                cur.step /= 2.0;
                easy = 0;
                if cur.step < cfg.min {
                    log::warn!(
                        "continuation stopped at lambda {:.6}: corrector failed at minimum step",
                        cur.lambda
                    );
                    curve.truncated = true;
                    break;
                }
                continue;
            }
        };

        let crossing = !past_nose && t[n] > 0.0 && next.tangent[n] <= 0.0;
        if crossing && cur.step > cfg.min {
            cur.step = (cur.step / 4.0).max(cfg.min);
            zooming = true;
            easy = 0;
            continue;
        }

        next.step = cur.step;
        curve.push(point_of(&model, &next.state, next.lambda));
        if crossing {
            past_nose = true;
            zooming = false;
            next.step = cfg.initial;
            easy = 0;
        } else if !zooming {
            easy = if iters < 3 { easy + 1 } else { 0 };
            if easy >= 2 {
                next.step = (next.step * 2.0).min(cfg.max);
                easy = 0;
            }
        }
        cur = next;

        if past_nose {
            after_nose += 1;
            if after_nose >= cfg.post_nose_points || cur.lambda <= cfg.lambda_start.min(0.0) {
                break;
            }
        }
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoseSearchConfig {
    pub lambda_base: f64,
    pub initial_step: f64,
    pub max_step: f64,
    /// Bracket width at which bisection stops.
    pub resolution: f64,
    /// Give up if λ grows past this.
    pub lambda_limit: f64,
    pub cosim: CosimOptions,
}

impl Default for NoseSearchConfig {
    fn default() -> Self {
        Self {
            lambda_base: 1.0,
            initial_step: 0.05,
            max_step: 0.4,
            resolution: 1e-4,
            lambda_limit: 1e3,
            cosim: CosimOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoseSearch {
    pub lambda_max: f64,
    pub curve: PvCurve,
    pub base: CoupledSolution,
    pub nose: CoupledSolution,
}

fn cosim_point(sys: &CoupledSystem, s: &CoupledSolution) -> PvPoint {
    PvPoint {
        lambda: s.lambda,
        v_mag: s.transmission.v_mag.clone(),
        v_ang: s.transmission.v_ang.clone(),
        delivered_pu: s.delivered_p(sys),
    }
}

/// Largest λ at which the coupled system still solves, by stepping λ
/// with warm starts and bisecting the first failure.
pub fn nose_search_cosim(sys: &CoupledSystem, cfg: &NoseSearchConfig) -> Result<NoseSearch> {
    let sim = CoSimulator::new(sys, cfg.cosim)?;
    let base = sim.solve(cfg.lambda_base, None)?;
    if !base.converged {
        return Err(Error::NonConvergence(format!(
            "base case at lambda {} did not converge: {}",
            cfg.lambda_base,
            base.failure.map_or_else(|| "unknown".into(), |f| f.to_string())
        )));
    }

    let mut curve = PvCurve::new(sys.transmission.ids(), sys.s_base_mva);
    curve.push(cosim_point(sys, &base));
    let mut lo = base.clone();
    let mut step = cfg.initial_step;

    loop {
        // Advance until the first failure.
        let hi = loop {
            let trial = lo.lambda + step;
            if trial > cfg.lambda_limit {
                return Err(Error::NonConvergence(format!(
                    "no voltage collapse found below lambda {}",
                    cfg.lambda_limit
                )));
            }
            let sol = sim.solve(trial, Some(&lo))?;
            if !sol.converged {
                break trial;
            }
            if sol.exchanges <= 3 {
                step = (step * 2.0).min(cfg.max_step);
            }
            curve.push(cosim_point(sys, &sol));
            lo = sol;
        };

        let mut hi = hi;
        while hi - lo.lambda > cfg.resolution {
            let mid = 0.5 * (lo.lambda + hi);
            let sol = sim.solve(mid, Some(&lo))?;
            if sol.converged {
                curve.push(cosim_point(sys, &sol));
                lo = sol;
            } else {
                hi = mid;
            }
        }

        // A failure seen from a distant warm start may have been spurious;
        // retry the bracket end from the adjacent solution.
        let retry = sim.solve(hi, Some(&lo))?;
        if !retry.converged {
            break;
        }
        log::debug!("lambda {hi} solves from a closer start; resuming search");
        curve.push(cosim_point(sys, &retry));
        lo = retry;
        step = cfg.initial_step;
    }

    Ok(NoseSearch {
        lambda_max: lo.lambda,
        curve,
        base,
        nose: lo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{BusKind, TransmissionBranch, TransmissionBus};
    use crate::tpf::{solve_newton, Injections};
    use crate::zipload::ZipLoad;
    use approx::assert_relative_eq;

    fn two_bus(r: f64, x: f64, load: ZipLoad) -> TransmissionNetwork {
        TransmissionNetwork {
            buses: vec![
                TransmissionBus::new(1, BusKind::Slack),
                TransmissionBus::new(2, BusKind::Pq).with_load(load),
            ],
            branches: vec![TransmissionBranch::new(1, 2, r, x)],
        }
    }

    #[test]
    fn lossless_nose_is_max_power_transfer() {
        let net = two_bus(0.0, 0.12, ZipLoad::constant_power(0.6, 0.0));
        let curve = trace_cpf(&net, 2000, &StepConfig::default()).unwrap();
        let expected = 1.0 / (2.0 * 0.12);
        assert_relative_eq!(curve.nose().delivered_pu, expected, max_relative = 1e-3);
        assert!(!curve.truncated);
        // Past the nose on the lower branch.
        let last = curve.points.last().unwrap();
        assert!(last.lambda < curve.lambda_max());
        assert!(last.v_mag[1] < curve.nose().v_mag[1]);
        let vsm = compute_vsm(&curve, 0);
        assert_relative_eq!(vsm, (expected - 0.6) * 100.0, max_relative = 1e-3);
    }

    #[test]
    fn zero_load_direction_is_rejected() {
        let net = two_bus(0.0, 0.12, ZipLoad::constant_power(0.0, 0.0));
        assert!(matches!(
            trace_cpf(&net, 100, &StepConfig::default()),
            Err(Error::ZeroLoadDirection)
        ));
    }

    #[test]
    fn vsm_is_zero_at_nose() {
        let mut curve = PvCurve::new(vec![1], 100.0);
        curve.push(PvPoint {
            lambda: 2.0,
            v_mag: vec![1.0],
            v_ang: vec![0.0],
            delivered_pu: 1.3,
        });
        assert_eq!(compute_vsm(&curve, 0), 0.0);
    }

    fn state_at(model: &PowerFlowModel, lambda: f64) -> ContinuationState {
        let s = model.solve(lambda, None, &NewtonOptions::default());
        ContinuationState {
            lambda,
            state: s,
            tangent: DVector::zeros(0),
            continuation_index: model.n_vars(),
            step: 0.1,
        }
    }

    #[test]
    fn unloaded_tangent_is_mostly_lambda() {
        let net = two_bus(0.01, 0.06, ZipLoad::constant_power(0.01, 0.0));
        let model = PowerFlowModel::new(&net).unwrap();
        let t = predictor_tangent(&model, &state_at(&model, 0.0)).unwrap();
        assert_eq!(t.iamax(), model.n_vars());
        assert!(t[model.n_vars()] > 0.99);
        assert_relative_eq!(t.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn tangent_matches_finite_difference_slope() {
        let load = ZipLoad::new(0.6, 0.2, [0.4, 0.3, 0.3]).unwrap();
        let net = two_bus(0.01, 0.06, load);
        let model = PowerFlowModel::new(&net).unwrap();
        let nose = trace_cpf(&net, 2000, &StepConfig::default()).unwrap().lambda_max();
        let lambda = nose - 1e-4;
        let t = predictor_tangent(&model, &state_at(&model, lambda)).unwrap();
        let h = 1e-7;
        let up = solve_newton(&net, &Injections::new(), lambda + h, None).unwrap();
        let dn = solve_newton(&net, &Injections::new(), lambda - h, None).unwrap();
        let dv_dl = (up.v_mag[1] - dn.v_mag[1]) / (2.0 * h);
        let n = model.n_vars();
        assert_relative_eq!(t[n - 1] / t[n], dv_dl, max_relative = 1e-4);
        // Close to the nose the voltage component dominates λ.
        assert!(t[n - 1].abs() > t[n].abs(), "{t}");
        assert!(t[n] > 0.0);
    }

    #[test]
    fn corrector_on_curve_takes_no_iterations() {
        let net = two_bus(0.01, 0.06, ZipLoad::constant_power(0.6, 0.2));
        let model = PowerFlowModel::new(&net).unwrap();
        let mut s = state_at(&model, 1.0);
        s.state = model.solve(1.0, None, &NewtonOptions { tol: 1e-12, ..Default::default() });
        let (_, iters) = corrector_step(&model, &s, 1e-10, 10).unwrap();
        assert_eq!(iters, 0);
    }

    #[test]
    fn corrector_with_pinned_lambda_is_power_flow() {
        let load = ZipLoad::new(0.6, 0.2, [0.4, 0.3, 0.3]).unwrap();
        let net = two_bus(0.01, 0.06, load);
        let model = PowerFlowModel::new(&net).unwrap();
        let mut s = state_at(&model, 1.0);
        s.lambda = 1.4;
        let (c, _) = corrector_step(&model, &s, 1e-12, 20).unwrap();
        let reference = solve_newton(&net, &Injections::new(), 1.4, None).unwrap();
        assert_relative_eq!(c.state.v_mag[1], reference.v_mag[1], epsilon = 1e-9);
        assert_eq!(c.lambda, 1.4);
    }

    #[test]
    fn corrector_with_pinned_voltage_finds_lower_branch() {
        // Constant power: λ on the curve at a given |V| is the quadratic
        // λ²(p²+q²)|Z|² + 2λ(pR+qX)V² + V⁴ − V² = 0.
        let (p, q, r, x) = (0.6, 0.2, 0.01, 0.06);
        let net = two_bus(r, x, ZipLoad::constant_power(p, q));
        let model = PowerFlowModel::new(&net).unwrap();
        let v = 0.45;
        let a = (p * p + q * q) * (r * r + x * x);
        let b = 2.0 * (p * r + q * x) * v * v;
        let c = v.powi(4) - v * v;
        let lambda_exact = (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a);

        let curve = trace_cpf(&net, 2000, &StepConfig::default()).unwrap();
        let n = model.n_vars();
        let mut s = state_at(&model, 1.0);
        // Start from the nose and pin |V| below it.
        let nose = curve.nose();
        s.state.v_mag = nose.v_mag.clone();
        s.state.v_ang = nose.v_ang.clone();
        s.lambda = nose.lambda;
        s.state.v_mag[1] = v;
        s.continuation_index = n - 1;
        let (c, _) = corrector_step(&model, &s, 1e-12, 30).unwrap();
        assert_relative_eq!(c.lambda, lambda_exact, max_relative = 1e-9);
        assert!(c.lambda < curve.lambda_max());
    }

    #[test]
    fn points_resolve_and_upper_branch_is_monotone() {
        let load = ZipLoad::new(0.6, 0.2, [0.4, 0.3, 0.3]).unwrap();
        let net = two_bus(0.04, 0.12, load);
        let curve = trace_cpf(&net, 2000, &StepConfig::default()).unwrap();
        let model = PowerFlowModel::new(&net).unwrap();
        for p in &curve.points {
            assert!(model.mismatch(&p.v_mag, &p.v_ang, p.lambda).amax() <= 1e-8);
        }
        for w in curve.upper_branch().windows(2) {
            assert!(w[1].lambda >= w[0].lambda);
            assert!(w[1].v_mag[1] <= w[0].v_mag[1] + 1e-12);
        }
    }
}
