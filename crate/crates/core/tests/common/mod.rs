//! Property checks shared by the property tests and the acceptance run.
#![allow(dead_code)]

use num_complex::Complex64;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use tdmargin::cvr::{
    apply_cvr, build_extended_two_bus, effective_impedance, prepare_scenario, CvrScenario, DgChoice,
};
use tdmargin::margin::{nose_search_cosim, trace_cpf, NoseSearchConfig, StepConfig};
use tdmargin::tpf::{NewtonOptions, PowerFlowModel};
use tdmargin::zipload::ZipLoad;

pub fn z_t() -> Complex64 {
    Complex64::new(0.01, 0.06)
}

pub fn z_d() -> Complex64 {
    Complex64::new(0.03, 0.06)
}

pub fn base_load() -> ZipLoad {
    ZipLoad::new(0.6, 0.2, [0.4, 0.3, 0.3]).unwrap()
}

/// `[pz, pi, pp]` with every share non-negative and at least `min_pp`
/// constant power.
pub fn zip_profile(min_pp: f64) -> impl Strategy<Value = [f64; 3]> {
    (0.0..1.0f64, 0.0..1.0f64).prop_map(move |(a, b)| {
        let free = 1.0 - min_pp;
        let z = free * a;
        let i = (free - z) * b;
        [z, i, 1.0 - z - i]
    })
}

pub fn dg_choice() -> impl Strategy<Value = DgChoice> {
    prop_oneof![Just(DgChoice::None), Just(DgChoice::Upf), Just(DgChoice::Vvc)]
}

pub fn zip_monotone_in_v(
    p0: f64,
    q0: f64,
    profile: [f64; 3],
    v1: f64,
    v2: f64,
    lambda: f64,
) -> Result<(), TestCaseError> {
    let load = ZipLoad::new(p0, q0, profile).unwrap();
    let (lo, hi) = if v1 <= v2 { (v1, v2) } else { (v2, v1) };
    let a = load.eval(lo, lambda);
    let b = load.eval(hi, lambda);
    prop_assert!(a.0 <= b.0, "P({lo}) = {} > P({hi}) = {}", a.0, b.0);
    prop_assert!(a.1 <= b.1, "Q({lo}) = {} > Q({hi}) = {}", a.1, b.1);
    let (dp, dq) = load.dv(lo, lambda);
    prop_assert!(dp >= 0.0 && dq >= 0.0);
    Ok(())
}

pub fn zip_linear_in_lambda(
    p0: f64,
    profile: [f64; 3],
    v: f64,
    l1: f64,
    l2: f64,
) -> Result<(), TestCaseError> {
    let load = ZipLoad::new(p0, 0.4 * p0, profile).unwrap();
    let (p1, q1) = load.eval(v, l1);
    let (p2, q2) = load.eval(v, l2);
    let (p12, q12) = load.eval(v, l1 + l2);
    let tol = 1e-12 * (p12.abs() + q12.abs()).max(1.0);
    prop_assert!((p12 - p1 - p2).abs() <= tol);
    prop_assert!((q12 - q1 - q2).abs() <= tol);
    prop_assert_eq!(load.eval(v, 0.0), (0.0, 0.0));
    let scaled = load.scaled(l1).eval(v, 1.0);
    prop_assert!((scaled.0 - p1).abs() <= tol && (scaled.1 - q1).abs() <= tol);
    Ok(())
}

pub fn z_eq_increasing_in_k(r: f64, x: f64, k1: f64, k2: f64) -> Result<(), TestCaseError> {
    prop_assume!((k1 - k2).abs() > 1e-6);
    let (lo, hi) = if k1 < k2 { (k1, k2) } else { (k2, k1) };
    let zd = Complex64::new(r, x);
    let a = effective_impedance(z_t(), zd, lo).z_eq;
    let b = effective_impedance(z_t(), zd, hi).z_eq;
    prop_assert!(b.re > a.re && b.im > a.im && b.norm() > a.norm());
    Ok(())
}

/// Applying CVR then restoring the No-CVR settings gives back the No-CVR
/// system exactly.
pub fn apply_cvr_round_trip(
    tap: f64,
    dg: DgChoice,
    penetration: f64,
) -> Result<(), TestCaseError> {
    let sys = build_extended_two_bus(z_t(), z_d(), base_load(), 1.0);
    let original = prepare_scenario(&sys, &CvrScenario::no_cvr(dg, penetration)).unwrap();
    let lowered = apply_cvr(&original, &CvrScenario::cvr(dg, penetration, tap)).unwrap();
    for f in &lowered.feeders {
        prop_assert_eq!(f.head_transformer.tap_secondary, tap);
    }
    let restored = apply_cvr(&lowered, &CvrScenario::no_cvr(dg, penetration)).unwrap();
    prop_assert_eq!(restored, original);
    Ok(())
}

fn cpf_config() -> StepConfig {
    StepConfig {
        post_nose_points: 5,
        ..StepConfig::default()
    }
}

/// Every traced point satisfies the power-flow equations at its λ, and
/// upper-branch points away from the nose are what a fresh Newton solve
/// finds.
pub fn pv_points_resolve(
    zt: (f64, f64),
    p0: f64,
    profile: [f64; 3],
    tap: f64,
) -> Result<(), TestCaseError> {
    let load = ZipLoad::new(p0, 0.3 * p0, profile).unwrap();
    let sys = build_extended_two_bus(Complex64::new(zt.0, zt.1), z_d(), load, tap);
    let net = sys.flatten().unwrap().net;
    let curve = trace_cpf(&net, 2000, &cpf_config()).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(curve.points.len() > 2);
    let model = PowerFlowModel::new(&net).unwrap();
    let opts = NewtonOptions {
        tol: 1e-11,
        max_iter: 50,
        enforce_q_limits: false,
    };
    let lambda_max = curve.lambda_max();
    for (i, pt) in curve.points.iter().enumerate() {
        let f = model.mismatch(&pt.v_mag, &pt.v_ang, pt.lambda);
        prop_assert!(f.amax() < 1e-8, "point {i} mismatch {}", f.amax());
        if i <= curve.nose_index && pt.lambda < lambda_max - 0.1 * (lambda_max - 1.0) {
            let fresh = model.solve(pt.lambda, None, &opts);
            prop_assert!(fresh.converged);
            for (a, b) in fresh.v_mag.iter().zip(&pt.v_mag) {
                prop_assert!((a - b).abs() < 1e-6, "point {i}: {a} vs {b}");
            }
        }
    }
    Ok(())
}

/// Two runs on identical input give identical curves, both engines.
pub fn reruns_identical(tap: f64, p0: f64) -> Result<(), TestCaseError> {
    let load = ZipLoad::new(p0, p0 / 3.0, [0.4, 0.3, 0.3]).unwrap();
    let sys = build_extended_two_bus(z_t(), z_d(), load, tap);
    let net = sys.flatten().unwrap().net;
    let a = trace_cpf(&net, 2000, &cpf_config()).unwrap();
    let b = trace_cpf(&net, 2000, &cpf_config()).unwrap();
    prop_assert_eq!(a, b);
    let cfg = NoseSearchConfig::default();
    let a = nose_search_cosim(&sys, &cfg).unwrap();
    let b = nose_search_cosim(&sys, &cfg).unwrap();
    prop_assert_eq!(a.lambda_max.to_bits(), b.lambda_max.to_bits());
    prop_assert_eq!(a.curve, b.curve);
    Ok(())
}
