//! JSON case files.
//!
//! Impedances are per unit on the system base; powers are MW / MVAr (MVA
//! for ratings) and are divided by `s_base_mva` on load. Feeder loads and
//! DG ratings are per feeder copy. See `CASES.md` for the schema.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{
    validate_network, BusId, BusKind, CoupledSystem, DgMode, DgUnit, FeederModel, FeederSegment,
    SubstationTransformer, TransmissionBranch, TransmissionBus, TransmissionNetwork,
    DEFAULT_DG_VSET, DEFAULT_DROOP_BAND, DEFAULT_Q_SHARE,
};
use crate::zipload::ZipLoad;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub s_base_mva: f64,
    pub transmission: TransmissionRecord,
    #[serde(default)]
    pub feeders: Vec<FeederRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmissionRecord {
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindRecord {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: BusId,
    pub kind: KindRecord,
    #[serde(default = "one")]
    pub v_set: f64,
    #[serde(default)]
    pub p_inj: f64,
    #[serde(default)]
    pub q_inj: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub native_load: Option<LoadRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchRecord {
    pub from: BusId,
    pub to: BusId,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b_shunt: f64,
    #[serde(default = "one")]
    pub tap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadRecord {
    pub p0: f64,
    #[serde(default)]
    pub q0: f64,
    #[serde(default = "one")]
    pub v0: f64,
    pub pz: f64,
    pub pi: f64,
    pub pp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qp: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerRecord {
    #[serde(default = "one")]
    pub k_nominal: f64,
    #[serde(default = "one")]
    pub tap_secondary: f64,
    #[serde(default)]
    pub series_z: [f64; 2],
}

impl Default for TransformerRecord {
    fn default() -> Self {
        Self {
            k_nominal: 1.0,
            tap_secondary: 1.0,
            series_z: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRecord {
    pub from: String,
    pub to: String,
    pub r: f64,
    pub x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DgModeRecord {
    Upf,
    Vvc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgRecord {
    pub p_rated: f64,
    pub s_rated: f64,
    pub mode: DgModeRecord,
    #[serde(default = "default_dg_vset")]
    pub v_set: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_max: Option<f64>,
    #[serde(default = "default_droop")]
    pub droop_band: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederRecord {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub head: String,
    #[serde(default)]
    pub head_transformer: TransformerRecord,
    pub segments: Vec<SegmentRecord>,
    #[serde(default)]
    pub loads: BTreeMap<String, LoadRecord>,
    #[serde(default)]
    pub dg_units: BTreeMap<String, DgRecord>,
    pub boundary_bus: BusId,
    #[serde(default = "one_u32")]
    pub replication: u32,
}

fn one() -> f64 {
    1.0
}
fn one_u32() -> u32 {
    1
}
fn default_dg_vset() -> f64 {
    DEFAULT_DG_VSET
}
fn default_droop() -> f64 {
    DEFAULT_DROOP_BAND
}

impl LoadRecord {
    fn to_model(&self, s: f64) -> ZipLoad {
        ZipLoad {
            p0: self.p0 / s,
            q0: self.q0 / s,
            v0: self.v0,
            pz: self.pz,
            pi: self.pi,
            pp: self.pp,
            qz: self.qz.unwrap_or(self.pz),
            qi: self.qi.unwrap_or(self.pi),
            qp: self.qp.unwrap_or(self.pp),
        }
    }

    fn from_model(l: &ZipLoad, s: f64) -> Self {
        Self {
            p0: l.p0 * s,
            q0: l.q0 * s,
            v0: l.v0,
            pz: l.pz,
            pi: l.pi,
            pp: l.pp,
            qz: Some(l.qz),
            qi: Some(l.qi),
            qp: Some(l.qp),
        }
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl CaseFile {
    /// Convert to per-unit model data without validating.
    pub fn to_system(&self) -> CoupledSystem {
        let s = self.s_base_mva;
        let buses = self
            .transmission
            .buses
            .iter()
            .map(|b| TransmissionBus {
                id: b.id,
                kind: match b.kind {
                    KindRecord::Slack => BusKind::Slack,
                    KindRecord::Pv => BusKind::Pv,
                    KindRecord::Pq => BusKind::Pq,
                },
                v_set: b.v_set,
                p_inj: b.p_inj / s,
                q_inj: b.q_inj / s,
                native_load: b.native_load.as_ref().map(|l| l.to_model(s)),
                q_min: b.q_min.map_or(f64::NEG_INFINITY, |q| q / s),
                q_max: b.q_max.map_or(f64::INFINITY, |q| q / s),
            })
            .collect();
        let branches = self
            .transmission
            .branches
            .iter()
            .map(|b| TransmissionBranch {
                from: b.from,
                to: b.to,
                r: b.r,
                x: b.x,
                b_shunt: b.b_shunt,
                tap: b.tap,
            })
            .collect();
        let feeders = self
            .feeders
            .iter()
            .map(|f| FeederModel {
                name: f.name.clone(),
                head: f.head.clone(),
                head_transformer: SubstationTransformer {
                    k_nominal: f.head_transformer.k_nominal,
                    tap_secondary: f.head_transformer.tap_secondary,
                    series_z: Complex64::new(
                        f.head_transformer.series_z[0],
                        f.head_transformer.series_z[1],
                    ),
                },
                segments: f
                    .segments
                    .iter()
                    .map(|g| FeederSegment::new(g.from.clone(), g.to.clone(), g.r, g.x))
                    .collect(),
                loads: f
                    .loads
                    .iter()
                    .map(|(n, l)| (n.clone(), l.to_model(s)))
                    .collect(),
                dg_units: f
                    .dg_units
                    .iter()
                    .map(|(n, d)| {
                        let s_rated = d.s_rated / s;
                        let unit = DgUnit {
                            p_rated: d.p_rated / s,
                            s_rated,
                            mode: match d.mode {
                                DgModeRecord::Upf => DgMode::Upf,
                                DgModeRecord::Vvc => DgMode::Vvc,
                            },
                            v_set: d.v_set,
                            q_max: d.q_max.map_or(DEFAULT_Q_SHARE * s_rated, |q| q / s),
                            droop_band: d.droop_band,
                        };
                        (n.clone(), unit)
                    })
                    .collect(),
                boundary_bus: f.boundary_bus,
                replication: f.replication,
            })
            .collect();
        CoupledSystem {
            transmission: TransmissionNetwork { buses, branches },
            feeders,
            s_base_mva: s,
        }
    }

    /// Normalized file form of a system: every optional field written out.
    pub fn from_system(sys: &CoupledSystem) -> Self {
        let s = sys.s_base_mva;
        Self {
            description: None,
            s_base_mva: s,
            transmission: TransmissionRecord {
                buses: sys
                    .transmission
                    .buses
                    .iter()
                    .map(|b| BusRecord {
                        id: b.id,
                        kind: match b.kind {
                            BusKind::Slack => KindRecord::Slack,
                            BusKind::Pv => KindRecord::Pv,
                            BusKind::Pq => KindRecord::Pq,
                        },
                        v_set: b.v_set,
                        p_inj: b.p_inj * s,
                        q_inj: b.q_inj * s,
                        q_min: finite(b.q_min).map(|q| q * s),
                        q_max: finite(b.q_max).map(|q| q * s),
                        native_load: b.native_load.as_ref().map(|l| LoadRecord::from_model(l, s)),
                    })
                    .collect(),
                branches: sys
                    .transmission
                    .branches
                    .iter()
                    .map(|b| BranchRecord {
                        from: b.from,
                        to: b.to,
                        r: b.r,
                        x: b.x,
                        b_shunt: b.b_shunt,
                        tap: b.tap,
                    })
                    .collect(),
            },
            feeders: sys
                .feeders
                .iter()
                .map(|f| FeederRecord {
                    name: f.name.clone(),
                    description: None,
                    head: f.head.clone(),
                    head_transformer: TransformerRecord {
                        k_nominal: f.head_transformer.k_nominal,
                        tap_secondary: f.head_transformer.tap_secondary,
                        series_z: [f.head_transformer.series_z.re, f.head_transformer.series_z.im],
                    },
                    segments: f
                        .segments
                        .iter()
                        .map(|g| SegmentRecord {
                            from: g.from.clone(),
                            to: g.to.clone(),
                            r: g.r,
                            x: g.x,
                        })
                        .collect(),
                    loads: f
                        .loads
                        .iter()
                        .map(|(n, l)| (n.clone(), LoadRecord::from_model(l, s)))
                        .collect(),
                    dg_units: f
                        .dg_units
                        .iter()
                        .map(|(n, d)| {
                            let rec = DgRecord {
                                p_rated: d.p_rated * s,
                                s_rated: d.s_rated * s,
                                mode: match d.mode {
                                    DgMode::Upf => DgModeRecord::Upf,
                                    DgMode::Vvc => DgModeRecord::Vvc,
                                },
                                v_set: d.v_set,
                                q_max: Some(d.q_max * s),
                                droop_band: d.droop_band,
                            };
                            (n.clone(), rec)
                        })
                        .collect(),
                    boundary_bus: f.boundary_bus,
                    replication: f.replication,
                })
                .collect(),
        }
    }
}

/// Parse case text; `origin` only labels error messages.
pub fn parse_case(text: &str, origin: &Path) -> Result<CaseFile> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        Error::Parse {
            path: origin.to_path_buf(),
            line: inner.line(),
            column: inner.column(),
            field,
            message: inner.to_string(),
        }
    })
}

/// Parse, convert and validate case text.
pub fn case_from_str(text: &str, origin: &Path) -> Result<CoupledSystem> {
    let file = parse_case(text, origin)?;
    if !(file.s_base_mva > 0.0) {
        return Err(Error::InvalidInput(format!(
            "{}: s_base_mva must be positive, got {}",
            origin.display(),
            file.s_base_mva
        )));
    }
    let sys = file.to_system();
    validate_network(&sys).into_result()?;
    Ok(sys)
}

pub fn load_case(path: impl AsRef<Path>) -> Result<CoupledSystem> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    case_from_str(&text, path)
}

pub fn case_to_string(sys: &CoupledSystem) -> String {
    let mut s = serde_json::to_string_pretty(&CaseFile::from_system(sys))
        .expect("case records always serialize");
    s.push('\n');
    s
}

pub fn save_case(sys: &CoupledSystem, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, case_to_string(sys)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
