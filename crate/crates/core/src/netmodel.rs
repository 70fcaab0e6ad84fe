//! Network data: transmission buses and branches, radial feeders hanging off
//! boundary buses through tap-changing substation transformers, and the
//! coupled system that ties them together.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::zipload::ZipLoad;

pub type BusId = u32;

/// Secondary tap range of the substation transformer.
pub const TAP_RANGE: (f64, f64) = (0.9, 1.1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

impl fmt::Display for BusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BusKind::Slack => "slack",
            BusKind::Pv => "pv",
            BusKind::Pq => "pq",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionBus {
    pub id: BusId,
    pub kind: BusKind,
    /// Voltage setpoint (pu), used by slack and pv buses.
    pub v_set: f64,
    /// Scheduled generation injection (pu).
    pub p_inj: f64,
    pub q_inj: f64,
    pub native_load: Option<ZipLoad>,
    /// Generator reactive limits (pu); infinite by default.
    pub q_min: f64,
    pub q_max: f64,
}

impl TransmissionBus {
    pub fn new(id: BusId, kind: BusKind) -> Self {
        Self {
            id,
            kind,
            v_set: 1.0,
            p_inj: 0.0,
            q_inj: 0.0,
            native_load: None,
            q_min: f64::NEG_INFINITY,
            q_max: f64::INFINITY,
        }
    }

    pub fn with_v_set(mut self, v: f64) -> Self {
        self.v_set = v;
        self
    }

    pub fn with_injection(mut self, p: f64, q: f64) -> Self {
        self.p_inj = p;
        self.q_inj = q;
        self
    }

    pub fn with_load(mut self, load: ZipLoad) -> Self {
        self.native_load = Some(load);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionBranch {
    pub from: BusId,
    pub to: BusId,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance (pu).
    pub b_shunt: f64,
    /// Off-nominal turns ratio at the `from` end.
    pub tap: f64,
}

impl TransmissionBranch {
    pub fn new(from: BusId, to: BusId, r: f64, x: f64) -> Self {
        Self {
            from,
            to,
            r,
            x,
            b_shunt: 0.0,
            tap: 1.0,
        }
    }

    pub fn with_charging(mut self, b: f64) -> Self {
        self.b_shunt = b;
        self
    }

    pub fn z(&self) -> Complex64 {
        Complex64::new(self.r, self.x)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransmissionNetwork {
    pub buses: Vec<TransmissionBus>,
    pub branches: Vec<TransmissionBranch>,
}

impl TransmissionNetwork {
    pub fn bus(&self, id: BusId) -> Option<&TransmissionBus> {
        self.buses.iter().find(|b| b.id == id)
    }

    pub fn bus_mut(&mut self, id: BusId) -> Option<&mut TransmissionBus> {
        self.buses.iter_mut().find(|b| b.id == id)
    }

    /// Map from bus id to position in `buses`.
    pub fn index(&self) -> HashMap<BusId, usize> {
        self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect()
    }

    pub fn ids(&self) -> Vec<BusId> {
        self.buses.iter().map(|b| b.id).collect()
    }

    fn next_free_id(&self) -> BusId {
        self.buses.iter().map(|b| b.id).max().map_or(1, |m| m + 1)
    }
}

/// Substation transformer between a boundary bus and a feeder head.
///
/// The effective ratio is `k_nominal / tap_secondary`: lowering the secondary
/// tap lowers feeder voltage and raises the ratio, so feeder impedance seen
/// from the transmission side grows with `k_eff²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubstationTransformer {
    pub k_nominal: f64,
    pub tap_secondary: f64,
    /// Leakage impedance on the primary side (pu, system base).
    pub series_z: Complex64,
}

impl Default for SubstationTransformer {
    fn default() -> Self {
        Self {
            k_nominal: 1.0,
            tap_secondary: 1.0,
            series_z: Complex64::new(0.0, 0.0),
        }
    }
}

impl SubstationTransformer {
    pub fn with_tap(mut self, tap: f64) -> Self {
        self.tap_secondary = tap;
        self
    }

    pub fn k_eff(&self) -> f64 {
        self.k_nominal / self.tap_secondary
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeederSegment {
    pub from: String,
    pub to: String,
    pub r: f64,
    pub x: f64,
}

impl FeederSegment {
    pub fn new(from: impl Into<String>, to: impl Into<String>, r: f64, x: f64) -> Self {
        Self {
            from: from.into(),
            to: to.into(),
            r,
            x,
        }
    }

    pub fn z(&self) -> Complex64 {
        Complex64::new(self.r, self.x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DgMode {
    Upf,
    Vvc,
}

impl fmt::Display for DgMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DgMode::Upf => "upf",
            DgMode::Vvc => "vvc",
        })
    }
}

/// Default reactive capability as a share of the apparent rating.
pub const DEFAULT_Q_SHARE: f64 = 0.44;
pub const DEFAULT_DROOP_BAND: f64 = 0.04;
pub const DEFAULT_DG_VSET: f64 = 1.05;

/// Inverter-interfaced generator at a feeder node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgUnit {
    pub p_rated: f64,
    pub s_rated: f64,
    pub mode: DgMode,
    pub v_set: f64,
    pub q_max: f64,
    pub droop_band: f64,
}

impl DgUnit {
    pub fn new(p_rated: f64, s_rated: f64, mode: DgMode) -> Self {
        Self {
            p_rated,
            s_rated,
            mode,
            v_set: DEFAULT_DG_VSET,
            q_max: DEFAULT_Q_SHARE * s_rated,
            droop_band: DEFAULT_DROOP_BAND,
        }
    }

    pub fn check(&self) -> std::result::Result<(), String> {
        if !(0.0 <= self.p_rated && self.p_rated <= self.s_rated) {
            return Err(format!(
                "p_rated {} outside [0, s_rated {}]",
                self.p_rated, self.s_rated
            ));
        }
        let headroom = (self.s_rated * self.s_rated - self.p_rated * self.p_rated).sqrt();
        if self.q_max < 0.0 || self.q_max > headroom * (1.0 + 1e-12) {
            return Err(format!(
                "q_max {} exceeds reactive headroom {}",
                self.q_max, headroom
            ));
        }
        if !(self.droop_band > 0.0) {
            return Err(format!("droop_band must be positive, got {}", self.droop_band));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    pub name: String,
    /// Secondary-side node of the head transformer.
    pub head: String,
    pub head_transformer: SubstationTransformer,
    pub segments: Vec<FeederSegment>,
    pub loads: BTreeMap<String, ZipLoad>,
    pub dg_units: BTreeMap<String, DgUnit>,
    pub boundary_bus: BusId,
    /// Number of identical copies attached at the boundary bus.
    pub replication: u32,
}

impl FeederModel {
    pub fn new(name: impl Into<String>, head: impl Into<String>, boundary_bus: BusId) -> Self {
        Self {
            name: name.into(),
            head: head.into(),
            head_transformer: SubstationTransformer::default(),
            segments: Vec::new(),
            loads: BTreeMap::new(),
            dg_units: BTreeMap::new(),
            boundary_bus,
            replication: 1,
        }
    }

    /// Every node id mentioned by the feeder.
    pub fn node_ids(&self) -> BTreeSet<&str> {
        let mut ids = BTreeSet::new();
        ids.insert(self.head.as_str());
        for s in &self.segments {
            ids.insert(s.from.as_str());
            ids.insert(s.to.as_str());
        }
        ids.extend(self.loads.keys().map(String::as_str));
        ids.extend(self.dg_units.keys().map(String::as_str));
        ids
    }

    pub fn total_load_p0(&self) -> f64 {
        self.loads.values().map(|l| l.p0).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSystem {
    pub transmission: TransmissionNetwork,
    pub feeders: Vec<FeederModel>,
    pub s_base_mva: f64,
}

/// One structural problem found by [`validate_network`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoSlack,
    MultipleSlack(Vec<BusId>),
    DuplicateBus(BusId),
    BadSetpoint(BusId),
    DanglingBranch { from: BusId, to: BusId },
    ZeroImpedanceBranch { from: BusId, to: BusId },
    BadBranchTap { from: BusId, to: BusId },
    InvalidLoad { location: String, reason: String },
    NonRadialFeeder { feeder: String, reason: String },
    DanglingBoundary { feeder: String, bus: BusId },
    BoundaryNotPq { feeder: String, bus: BusId },
    BadTransformer { feeder: String, reason: String },
    BadDg { feeder: String, node: String, reason: String },
    ZeroReplication { feeder: String },
    BadBase(f64),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoSlack => write!(f, "no slack bus"),
            Violation::MultipleSlack(ids) => write!(f, "multiple slack buses {ids:?}"),
            Violation::DuplicateBus(id) => write!(f, "duplicate bus id {id}"),
            Violation::BadSetpoint(id) => write!(f, "bus {id} has non-positive v_set"),
            Violation::DanglingBranch { from, to } => {
                write!(f, "branch {from}-{to} references a missing bus")
            }
            Violation::ZeroImpedanceBranch { from, to } => {
                write!(f, "branch {from}-{to} has zero impedance")
            }
            Violation::BadBranchTap { from, to } => {
                write!(f, "branch {from}-{to} has non-positive tap")
            }
            Violation::InvalidLoad { location, reason } => {
                write!(f, "invalid load at {location}: {reason}")
            }
            Violation::NonRadialFeeder { feeder, reason } => {
                write!(f, "non-radial feeder `{feeder}`: {reason}")
            }
            Violation::DanglingBoundary { feeder, bus } => {
                write!(f, "feeder `{feeder}` boundary bus {bus} does not exist")
            }
            Violation::BoundaryNotPq { feeder, bus } => {
                write!(f, "feeder `{feeder}` boundary bus {bus} is not a pq bus")
            }
            Violation::BadTransformer { feeder, reason } => {
                write!(f, "feeder `{feeder}` transformer: {reason}")
            }
            Violation::BadDg { feeder, node, reason } => {
                write!(f, "feeder `{feeder}` DG at `{node}`: {reason}")
            }
            Violation::ZeroReplication { feeder } => {
                write!(f, "feeder `{feeder}` has zero replication")
            }
            Violation::BadBase(s) => write!(f, "s_base_mva must be positive, got {s}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(self.violations))
        }
    }
}

/// Collect every structural problem in `sys`. An empty report means valid.
pub fn validate_network(sys: &CoupledSystem) -> ValidationReport {
    let mut out = Vec::new();
    let net = &sys.transmission;

    if !(sys.s_base_mva > 0.0) {
        out.push(Violation::BadBase(sys.s_base_mva));
    }

    let mut seen = BTreeSet::new();
    for bus in &net.buses {
        if !seen.insert(bus.id) {
            out.push(Violation::DuplicateBus(bus.id));
        }
        if bus.kind != BusKind::Pq && !(bus.v_set > 0.0) {
            out.push(Violation::BadSetpoint(bus.id));
        }
        if let Some(load) = &bus.native_load {
            if let Err(e) = load.check() {
                out.push(Violation::InvalidLoad {
                    location: format!("bus {}", bus.id),
                    reason: e.to_string(),
                });
            }
        }
    }
    let slacks: Vec<BusId> = net
        .buses
        .iter()
        .filter(|b| b.kind == BusKind::Slack)
        .map(|b| b.id)
        .collect();
    match slacks.len() {
        0 => out.push(Violation::NoSlack),
        1 => {}
        _ => out.push(Violation::MultipleSlack(slacks)),
    }

    for br in &net.branches {
        if !seen.contains(&br.from) || !seen.contains(&br.to) {
            out.push(Violation::DanglingBranch { from: br.from, to: br.to });
        }
        if br.r == 0.0 && br.x == 0.0 {
            out.push(Violation::ZeroImpedanceBranch { from: br.from, to: br.to });
        }
        if !(br.tap > 0.0) {
            out.push(Violation::BadBranchTap { from: br.from, to: br.to });
        }
    }

    for feeder in &sys.feeders {
        let name = feeder.name.clone();
        match net.bus(feeder.boundary_bus) {
            None => out.push(Violation::DanglingBoundary {
                feeder: name.clone(),
                bus: feeder.boundary_bus,
            }),
            Some(b) if b.kind != BusKind::Pq => out.push(Violation::BoundaryNotPq {
                feeder: name.clone(),
                bus: feeder.boundary_bus,
            }),
            Some(_) => {}
        }
        if feeder.replication == 0 {
            out.push(Violation::ZeroReplication { feeder: name.clone() });
        }
        let t = &feeder.head_transformer;
        if !(t.k_nominal > 0.0) {
            out.push(Violation::BadTransformer {
                feeder: name.clone(),
                reason: format!("k_nominal must be positive, got {}", t.k_nominal),
            });
        }
        if !(TAP_RANGE.0..=TAP_RANGE.1).contains(&t.tap_secondary) {
            out.push(Violation::BadTransformer {
                feeder: name.clone(),
                reason: format!(
                    "tap_secondary {} outside [{}, {}]",
                    t.tap_secondary, TAP_RANGE.0, TAP_RANGE.1
                ),
            });
        }
        if let Err(e) = feeder_topology_order(feeder) {
            out.push(Violation::NonRadialFeeder {
                feeder: name.clone(),
                reason: match e {
                    Error::Topology(msg) => msg,
                    other => other.to_string(),
                },
            });
        }
        for (node, load) in &feeder.loads {
            if let Err(e) = load.check() {
                out.push(Violation::InvalidLoad {
                    location: format!("feeder `{name}` node `{node}`"),
                    reason: e.to_string(),
                });
            }
        }
        for (node, dg) in &feeder.dg_units {
            if let Err(reason) = dg.check() {
                out.push(Violation::BadDg {
                    feeder: name.clone(),
                    node: node.clone(),
                    reason,
                });
            }
        }
    }

    ValidationReport { violations: out }
}

/// Nodes in breadth-first order from the head; siblings sorted by id.
pub fn feeder_topology_order(feeder: &FeederModel) -> Result<Vec<String>> {
    Ok(FeederGraph::build(feeder)?.nodes)
}

/// Radial feeder in topological order, ready for sweeping.
#[derive(Debug, Clone)]
pub struct FeederGraph {
    /// Node ids, parents before children; index 0 is the head.
    pub nodes: Vec<String>,
    pub parent: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    /// Impedance of the segment feeding each node (zero for the head).
    pub z: Vec<Complex64>,
}

impl FeederGraph {
    pub fn build(feeder: &FeederModel) -> Result<Self> {
        let mut parent_of: BTreeMap<&str, (&str, Complex64)> = BTreeMap::new();
        let mut kids: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for seg in &feeder.segments {
            if seg.from == seg.to {
                return Err(Error::Topology(format!("self-loop at `{}`", seg.from)));
            }
            if seg.to == feeder.head {
                return Err(Error::Topology(format!(
                    "head `{}` has a parent (cycle)",
                    feeder.head
                )));
            }
            if parent_of
                .insert(seg.to.as_str(), (seg.from.as_str(), seg.z()))
                .is_some()
            {
                return Err(Error::Topology(format!(
                    "node `{}` has more than one parent (cycle)",
                    seg.to
                )));
            }
            kids.entry(seg.from.as_str()).or_default().push(seg.to.as_str());
        }
        for list in kids.values_mut() {
            list.sort_unstable();
        }

        let mut nodes: Vec<String> = Vec::new();
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut parent = Vec::new();
        let mut z = Vec::new();
        let mut queue = VecDeque::from([feeder.head.as_str()]);
        while let Some(node) = queue.pop_front() {
            if index.contains_key(node) {
                return Err(Error::Topology(format!("node `{node}` reached twice")));
            }
            index.insert(node, nodes.len());
            nodes.push(node.to_string());
            match parent_of.get(node) {
                Some((p, zz)) => {
                    parent.push(Some(index[p]));
                    z.push(*zz);
                }
                None => {
                    parent.push(None);
                    z.push(Complex64::new(0.0, 0.0));
                }
            }
            if let Some(list) = kids.get(node) {
                queue.extend(list.iter().copied());
            }
        }

        let all = feeder.node_ids();
        if let Some(orphan) = all.iter().find(|id| !index.contains_key(*id)) {
            return Err(Error::Topology(format!(
                "node `{orphan}` is not reachable from head `{}`",
                feeder.head
            )));
        }

        let mut children = vec![Vec::new(); nodes.len()];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }
        Ok(Self {
            nodes,
            parent,
            children,
            z,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// A coupled system rewritten as one transmission network, with each
/// feeder referred to the transmission side through its transformer ratio.
#[derive(Debug, Clone)]
pub struct FlatNetwork {
    pub net: TransmissionNetwork,
    /// For each feeder, the flattened bus holding each node (topology order).
    pub feeder_buses: Vec<Vec<BusId>>,
    pub k_eff: Vec<f64>,
}

impl CoupledSystem {
    /// Refer every feeder to the transmission side: impedances scale by
    /// `k_eff²`, node voltages by `k_eff`, and `replication` identical copies
    /// become one copy with impedances divided and loads multiplied by the
    /// count. Zero-impedance segments merge their end nodes.
    ///
    /// Volt-var DG has no monolithic bus model and is rejected.
    pub fn flatten(&self) -> Result<FlatNetwork> {
        let mut net = self.transmission.clone();
        let mut feeder_buses = Vec::with_capacity(self.feeders.len());
        let mut k_effs = Vec::with_capacity(self.feeders.len());
        for feeder in &self.feeders {
            let graph = FeederGraph::build(feeder)?;
            let t = &feeder.head_transformer;
            let k = t.k_eff();
            let n = f64::from(feeder.replication);

            let head_bus = if t.series_z.norm() == 0.0 {
                feeder.boundary_bus
            } else {
                let id = net.next_free_id();
                net.buses.push(TransmissionBus::new(id, BusKind::Pq));
                let z = t.series_z / n;
                net.branches
                    .push(TransmissionBranch::new(feeder.boundary_bus, id, z.re, z.im));
                id
            };

            let mut buses: Vec<BusId> = Vec::with_capacity(graph.len());
            for i in 0..graph.len() {
                let bus = match graph.parent[i] {
                    None => head_bus,
                    Some(p) if graph.z[i].norm() == 0.0 => buses[p],
                    Some(p) => {
                        let id = net.next_free_id();
                        net.buses.push(TransmissionBus::new(id, BusKind::Pq));
                        let z = graph.z[i] * (k * k / n);
                        net.branches.push(TransmissionBranch::new(buses[p], id, z.re, z.im));
                        id
                    }
                };
                buses.push(bus);

                let node = &graph.nodes[i];
                let target = net.bus_mut(bus).expect("bus just placed");
                if let Some(load) = feeder.loads.get(node) {
                    let referred = ZipLoad {
                        v0: load.v0 * k,
                        ..load.scaled(n)
                    };
                    target.native_load = Some(match target.native_load {
                        None => referred,
                        Some(existing) => combine_zip(&existing, &referred),
                    });
                }
                if let Some(dg) = feeder.dg_units.get(node) {
                    if dg.mode == DgMode::Vvc {
                        return Err(Error::InvalidInput(format!(
                            "feeder `{}`: volt-var DG cannot be flattened",
                            feeder.name
                        )));
                    }
                    target.p_inj += dg.p_rated * n;
                }
            }
            feeder_buses.push(buses);
            k_effs.push(k);
        }
        Ok(FlatNetwork {
            net,
            feeder_buses,
            k_eff: k_effs,
        })
    }
}

/// Sum of two ZIP loads as one ZIP load with `v0 = 1`.
fn combine_zip(a: &ZipLoad, b: &ZipLoad) -> ZipLoad {
    // P(V) = c2·V² + c1·V + c0 for each load; coefficients add.
    let coeffs = |base: f64, z: f64, i: f64, p: f64, v0: f64| {
        [base * z / (v0 * v0), base * i / v0, base * p]
    };
    let add = |x: [f64; 3], y: [f64; 3]| [x[0] + y[0], x[1] + y[1], x[2] + y[2]];
    let cp = add(
        coeffs(a.p0, a.pz, a.pi, a.pp, a.v0),
        coeffs(b.p0, b.pz, b.pi, b.pp, b.v0),
    );
    let cq = add(
        coeffs(a.q0, a.qz, a.qi, a.qp, a.v0),
        coeffs(b.q0, b.qz, b.qi, b.qp, b.v0),
    );
    let fractions = |c: [f64; 3]| {
        let total = c[0] + c[1] + c[2];
        if total == 0.0 {
            (0.0, [0.0, 0.0, 1.0])
        } else {
            (total, [c[0] / total, c[1] / total, 1.0 - c[0] / total - c[1] / total])
        }
    };
    let (p0, fp) = fractions(cp);
    let (q0, fq) = fractions(cq);
    ZipLoad {
        p0,
        q0,
        v0: 1.0,
        pz: fp[0],
        pi: fp[1],
        pp: fp[2],
        qz: fq[0],
        qi: fq[1],
        qp: fq[2],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_bus() -> TransmissionNetwork {
        TransmissionNetwork {
            buses: vec![
                TransmissionBus::new(1, BusKind::Slack),
                TransmissionBus::new(2, BusKind::Pq),
            ],
            branches: vec![TransmissionBranch::new(1, 2, 0.01, 0.06)],
        }
    }

    fn chain_feeder(names: &[&str]) -> FeederModel {
        let mut f = FeederModel::new("f", names[0], 2);
        for w in names.windows(2) {
            f.segments.push(FeederSegment::new(w[0], w[1], 0.01, 0.02));
        }
        f
    }

    fn system(feeder: FeederModel) -> CoupledSystem {
        CoupledSystem {
            transmission: two_bus(),
            feeders: vec![feeder],
            s_base_mva: 100.0,
        }
    }

    #[test]
    fn valid_system_has_empty_report() {
        let report = validate_network(&system(chain_feeder(&["head", "n1"])));
        assert!(report.is_valid(), "{:?}", report);
    }

    #[test]
    fn cycle_is_non_radial() {
        let mut f = chain_feeder(&["head", "a", "b"]);
        f.segments.push(FeederSegment::new("b", "a", 0.01, 0.01));
        let report = validate_network(&system(f));
        assert!(report
            .violations
            .iter()
            .any(|v| v.to_string().contains("non-radial feeder")));
    }

    #[test]
    fn two_slacks_reported() {
        let mut sys = system(chain_feeder(&["head", "n1"]));
        sys.transmission.buses.push(TransmissionBus::new(3, BusKind::Slack));
        let report = validate_network(&sys);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::MultipleSlack(ids) if ids == &vec![1, 3])));
        assert!(report.violations[0].to_string().contains("multiple slack"));
    }

    #[test]
    fn missing_slack_and_dangling_boundary() {
        let mut sys = system(chain_feeder(&["head", "n1"]));
        sys.transmission.buses[0].kind = BusKind::Pq;
        sys.feeders[0].boundary_bus = 9;
        let report = validate_network(&sys);
        assert!(report.violations.contains(&Violation::NoSlack));
        assert!(report
            .violations
            .contains(&Violation::DanglingBoundary { feeder: "f".into(), bus: 9 }));
    }

    #[test]
    fn validation_is_pure() {
        let sys = system(chain_feeder(&["head", "n1"]));
        let before = sys.clone();
        assert_eq!(validate_network(&sys), validate_network(&sys));
        assert_eq!(sys, before);
    }

    #[test]
    fn topology_orders() {
        assert_eq!(
            feeder_topology_order(&chain_feeder(&["head", "n1"])).unwrap(),
            ["head", "n1"]
        );
        assert_eq!(
            feeder_topology_order(&chain_feeder(&["head", "n1", "n2"])).unwrap(),
            ["head", "n1", "n2"]
        );
        let mut y = FeederModel::new("y", "head", 2);
        y.segments = vec![
            FeederSegment::new("a", "c", 0.01, 0.01),
            FeederSegment::new("head", "a", 0.01, 0.01),
            FeederSegment::new("a", "b", 0.01, 0.01),
        ];
        assert_eq!(feeder_topology_order(&y).unwrap(), ["head", "a", "b", "c"]);
    }

    #[test]
    fn topology_rejects_cycles_and_orphans() {
        let mut f = chain_feeder(&["head", "a", "b"]);
        f.segments.push(FeederSegment::new("b", "head", 0.01, 0.01));
        assert!(matches!(feeder_topology_order(&f), Err(Error::Topology(_))));

        let mut g = chain_feeder(&["head", "a"]);
        g.segments.push(FeederSegment::new("x", "y", 0.01, 0.01));
        assert!(matches!(feeder_topology_order(&g), Err(Error::Topology(_))));
    }

    #[test]
    fn flatten_refers_impedance_and_voltage() {
        let mut f = chain_feeder(&["head", "load"]);
        f.segments[0].r = 0.03;
        f.segments[0].x = 0.06;
        f.head_transformer.tap_secondary = 0.95;
        f.loads.insert(
            "load".into(),
            ZipLoad::new(0.6, 0.2, [0.4, 0.3, 0.3]).unwrap(),
        );
        let flat = system(f).flatten().unwrap();
        assert_eq!(flat.net.buses.len(), 3);
        let br = flat.net.branches.last().unwrap();
        let k2 = 1.0 / (0.95 * 0.95);
        assert_relative_eq!(br.r, 0.03 * k2, max_relative = 1e-15);
        assert_relative_eq!(br.x, 0.06 * k2, max_relative = 1e-15);
        let load = flat.net.buses[2].native_load.unwrap();
        assert_relative_eq!(load.v0, 1.0 / 0.95, max_relative = 1e-15);
        assert_eq!(flat.feeder_buses[0], vec![2, 3]);
    }

    #[test]
    fn combined_zip_matches_sum() {
        let a = ZipLoad::new(0.5, 0.1, [0.4, 0.3, 0.3]).unwrap();
        let b = ZipLoad::new(0.2, 0.3, [0.0, 0.5, 0.5]).unwrap().with_v0(1.05);
        let c = combine_zip(&a, &b);
        for &v in &[0.4, 0.9, 1.07] {
            let (pa, qa) = a.eval(v, 1.0);
            let (pb, qb) = b.eval(v, 1.0);
            let (pc, qc) = c.eval(v, 1.0);
            assert_relative_eq!(pc, pa + pb, max_relative = 1e-12);
            assert_relative_eq!(qc, qa + qb, max_relative = 1e-12);
        }
    }
}
