//! Voltage-dependent ZIP loads.
//!
//! A ZIP load splits its base power into constant-impedance, constant-current
//! and constant-power shares:
//!
//! ```text
//! P(V) = λ·P0·(pz·(V/V0)² + pi·(V/V0) + pp)
//! Q(V) = λ·Q0·(qz·(V/V0)² + qi·(V/V0) + qp)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::CoupledSystem;

/// Tolerance on the fraction sums.
pub const FRACTION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZipLoad {
    pub p0: f64,
    pub q0: f64,
    pub v0: f64,
    pub pz: f64,
    pub pi: f64,
    pub pp: f64,
    pub qz: f64,
    pub qi: f64,
    pub qp: f64,
}

impl ZipLoad {
    /// Load whose active and reactive parts share one `[Z, I, P]` profile.
    pub fn new(p0: f64, q0: f64, profile: [f64; 3]) -> Result<Self> {
        let load = Self {
            p0,
            q0,
            v0: 1.0,
            pz: profile[0],
            pi: profile[1],
            pp: profile[2],
            qz: profile[0],
            qi: profile[1],
            qp: profile[2],
        };
        load.check()?;
        Ok(load)
    }

    pub fn constant_power(p0: f64, q0: f64) -> Self {
        Self::new(p0, q0, [0.0, 0.0, 1.0]).expect("valid profile")
    }

    pub fn with_v0(mut self, v0: f64) -> Self {
        self.v0 = v0;
        self
    }

    pub fn check(&self) -> Result<()> {
        let p_sum = self.pz + self.pi + self.pp;
        let q_sum = self.qz + self.qi + self.qp;
        if (p_sum - 1.0).abs() > FRACTION_TOL {
            return Err(Error::InvalidInput(format!(
                "active ZIP fractions sum to {p_sum}, expected 1"
            )));
        }
        if (q_sum - 1.0).abs() > FRACTION_TOL {
            return Err(Error::InvalidInput(format!(
                "reactive ZIP fractions sum to {q_sum}, expected 1"
            )));
        }
        if !(self.v0 > 0.0) {
            return Err(Error::InvalidInput(format!(
                "nominal voltage must be positive, got {}",
                self.v0
            )));
        }
        Ok(())
    }

    /// Active and reactive power drawn at voltage `v` with scale `lambda`.
    pub fn eval(&self, v: f64, lambda: f64) -> (f64, f64) {
        let u = v / self.v0;
        let p = lambda * self.p0 * (self.pz * u * u + self.pi * u + self.pp);
        let q = lambda * self.q0 * (self.qz * u * u + self.qi * u + self.qp);
        (p, q)
    }

    /// Derivatives `(dP/dV, dQ/dV)` at voltage `v` with scale `lambda`.
    pub fn dv(&self, v: f64, lambda: f64) -> (f64, f64) {
        let u = v / self.v0;
        let dp = lambda * self.p0 * (2.0 * self.pz * u + self.pi) / self.v0;
        let dq = lambda * self.q0 * (2.0 * self.qz * u + self.qi) / self.v0;
        (dp, dq)
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        Self {
            p0: self.p0 * lambda,
            q0: self.q0 * lambda,
            ..*self
        }
    }
}

/// Evaluate a ZIP load at voltage magnitude `v` (pu) and load scale `lambda`.
pub fn eval_zip(load: &ZipLoad, v: f64, lambda: f64) -> (f64, f64) {
    load.eval(v, lambda)
}

/// Copy of `sys` with every ZIP load base multiplied by `lambda`.
pub fn scale_loads(sys: &CoupledSystem, lambda: f64) -> CoupledSystem {
    let mut out = sys.clone();
    for bus in &mut out.transmission.buses {
        if let Some(load) = bus.native_load.as_mut() {
            *load = load.scaled(lambda);
        }
    }
    for feeder in &mut out.feeders {
        for load in feeder.loads.values_mut() {
            *load = load.scaled(lambda);
        }
    }
    out
}
