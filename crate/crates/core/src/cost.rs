//! Analytical latency and communication model for the secure operators, and
//! the per-layer latency lookup table built from it.
//!
//! Communication terms count bits; bandwidth is bits per second. Every
//! formula is evaluated as written, including its constants.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphSpec;
use crate::transport::{MsgType, TranscriptReport};

pub const LUT_VERSION: u32 = 1;

/// Compute and link parameters of a deployment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// Values processed per cycle.
    #[serde(rename = "PP")]
    pub pp: f64,
    /// Clock frequency in Hz.
    pub freq: f64,
    /// Per-message base latency in seconds.
    #[serde(rename = "T_bc")]
    pub t_bc: f64,
    /// Link bandwidth in bits per second.
    #[serde(rename = "Rt_bw")]
    pub rt_bw: f64,
}

impl Default for HardwareProfile {
    fn default() -> Self {
        HardwareProfile {
            pp: 4.0,
            freq: 2e8,
            t_bc: 50e-6,
            rt_bw: 8e9,
        }
    }
}

impl HardwareProfile {
    /// `T_bc` may be zero; everything else must be strictly positive.
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.pp) || !ok(self.freq) || !ok(self.rt_bw) || !(self.t_bc.is_finite() && self.t_bc >= 0.0) {
            return Err(Error::Config(format!("invalid hardware profile {self:?}")));
        }
        Ok(())
    }

    fn cycles(&self, ops: f64) -> f64 {
        ops / (self.pp * self.freq)
    }

    fn comm(&self, bits: f64) -> f64 {
        self.t_bc + bits / self.rt_bw
    }
}

/// Square feature-map geometry of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    #[serde(rename = "FI")]
    pub fi: u64,
    #[serde(rename = "FO")]
    pub fo: u64,
    #[serde(rename = "IC")]
    pub ic: u64,
    #[serde(rename = "OC")]
    pub oc: u64,
    #[serde(rename = "K")]
    pub k: u64,
}

impl Geometry {
    /// Elementwise layer: same size and channels in and out.
    pub fn elementwise(fi: u64, ic: u64) -> Geometry {
        Geometry {
            fi,
            fo: fi,
            ic,
            oc: ic,
            k: 1,
        }
    }

    /// `FI^2 * IC`.
    pub fn elements(&self) -> f64 {
        (self.fi * self.fi * self.ic) as f64
    }
}

/// Compute and communication terms of one comparison batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtFlowCost {
    pub cmp: [f64; 3],
    pub comm: [f64; 4],
    /// Numerators of the four communication terms.
    pub comm_bits: [u64; 4],
}

impl OtFlowCost {
    pub fn cmp2(&self) -> f64 {
        self.cmp[0]
    }
    pub fn cmp3(&self) -> f64 {
        self.cmp[1]
    }
    pub fn cmp4(&self) -> f64 {
        self.cmp[2]
    }
    pub fn comm1(&self) -> f64 {
        self.comm[0]
    }
    pub fn comm2(&self) -> f64 {
        self.comm[1]
    }
    pub fn comm3(&self) -> f64 {
        self.comm[2]
    }
    pub fn comm4(&self) -> f64 {
        self.comm[3]
    }

    pub fn total(&self) -> f64 {
        self.cmp.iter().sum::<f64>() + self.comm.iter().sum::<f64>()
    }

    pub fn total_bits(&self) -> u64 {
        self.comm_bits.iter().sum()
    }
}

fn check_geom(geom: &Geometry, conv: bool) -> Result<()> {
    let bad = geom.fi == 0 || geom.ic == 0 || (conv && (geom.fo == 0 || geom.oc == 0 || geom.k == 0));
    if bad {
        return Err(Error::Contract(format!("degenerate geometry {geom:?}")));
    }
    Ok(())
}

pub fn model_ot_flow(geom: &Geometry, hw: &HardwareProfile) -> Result<OtFlowCost> {
    check_geom(geom, false)?;
    let n = geom.elements();
    let n_int = geom.fi * geom.fi * geom.ic;
    let bits = [32, 32 * 16 * n_int, 32 * 4 * 16 * n_int, n_int];
    Ok(OtFlowCost {
        cmp: [
            hw.cycles(32.0 * 17.0 * n),
            hw.cycles(32.0 * (17.0 + 4.0 * 16.0) * n),
            hw.cycles((32.0 * 4.0 * 16.0 + 1.0) * n),
        ],
        comm: bits.map(|b| hw.comm(b as f64)),
        comm_bits: bits,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Relu,
    Maxpool,
    Avgpool,
    X2act,
    Conv,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [OpKind::Relu, OpKind::Maxpool, OpKind::Avgpool, OpKind::X2act, OpKind::Conv];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Relu => "relu",
            OpKind::Maxpool => "maxpool",
            OpKind::Avgpool => "avgpool",
            OpKind::X2act => "x2act",
            OpKind::Conv => "conv",
        }
    }

    /// Message types whose traffic the model accounts for.
    pub fn modeled_types(self) -> &'static [MsgType] {
        match self {
            OpKind::Relu | OpKind::Maxpool => &MsgType::OT_FLOW,
            OpKind::X2act => &[MsgType::SquareOpen],
            OpKind::Conv => &[MsgType::MulOpen],
            OpKind::Avgpool => &[],
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<OpKind> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Contract(format!("no cost model for operator `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatorCost {
    pub cmp: f64,
    /// One communication term; operators with two exchanges count it twice.
    pub comm: f64,
    pub latency_s: f64,
    pub comm_bits: u64,
    /// Communication events, i.e. `T_bc` terms.
    pub rounds: u32,
}

pub fn model_operator(kind: OpKind, geom: &Geometry, hw: &HardwareProfile) -> Result<OperatorCost> {
    check_geom(geom, kind == OpKind::Conv)?;
    let n = geom.elements();
    let n_int = geom.fi * geom.fi * geom.ic;
    Ok(match kind {
        OpKind::Relu | OpKind::Maxpool => {
            let ot = model_ot_flow(geom, hw)?;
            let cmp = ot.cmp.iter().sum::<f64>();
            let comm = ot.comm.iter().sum::<f64>();
            let (extra, rounds) = match kind {
                OpKind::Maxpool => (3.0 * hw.t_bc, 7),
                _ => (0.0, 4),
            };
            OperatorCost {
                cmp,
                comm,
                latency_s: cmp + comm + extra,
                comm_bits: ot.total_bits(),
                rounds,
            }
        }
        OpKind::X2act => {
            let cmp = hw.cycles(2.0 * n);
            let comm = hw.comm(32.0 * n);
            OperatorCost {
                cmp,
                comm,
                latency_s: cmp + 2.0 * comm,
                comm_bits: 2 * 32 * n_int,
                rounds: 2,
            }
        }
        OpKind::Avgpool => {
            let cmp = hw.cycles(2.0 * n);
            OperatorCost {
                cmp,
                comm: 0.0,
                latency_s: cmp,
                comm_bits: 0,
                rounds: 0,
            }
        }
        OpKind::Conv => {
            let ops = 3.0 * (geom.k * geom.k * geom.fo * geom.fo * geom.ic * geom.oc) as f64;
            let cmp = hw.cycles(ops);
            let comm = hw.comm(32.0 * n);
            OperatorCost {
                cmp,
                comm,
                latency_s: cmp + 2.0 * comm,
                comm_bits: 2 * 32 * n_int,
                rounds: 2,
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LutEntry {
    pub layer_id: String,
    pub op_kind: OpKind,
    pub geom: Geometry,
    pub latency_s: f64,
    pub comm_bits: u64,
    pub rounds: u32,
}

impl LutEntry {
    pub fn new(layer_id: &str, kind: OpKind, geom: Geometry, hw: &HardwareProfile) -> Result<LutEntry> {
        let c = model_operator(kind, &geom, hw)?;
        Ok(LutEntry {
            layer_id: layer_id.to_string(),
            op_kind: kind,
            geom,
            latency_s: c.latency_s,
            comm_bits: c.comm_bits,
            rounds: c.rounds,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub version: u32,
    pub hardware: HardwareProfile,
    pub entries: Vec<LutEntry>,
}

impl LatencyTable {
    pub fn get(&self, layer_id: &str, kind: OpKind) -> Option<&LutEntry> {
        self.entries.iter().find(|e| e.layer_id == layer_id && e.op_kind == kind)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<LatencyTable> {
        let t: LatencyTable = serde_json::from_str(text)?;
        if t.version != LUT_VERSION {
            return Err(Error::Format(format!("unsupported table version {}", t.version)));
        }
        t.hardware.validate()?;
        Ok(t)
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn import(path: &Path) -> Result<LatencyTable> {
        LatencyTable::from_json(&std::fs::read_to_string(path)?)
    }
}

/// One entry per (layer, candidate operator), in layer order.
pub fn build_lut(graph: &GraphSpec, hw: &HardwareProfile) -> Result<LatencyTable> {
    hw.validate()?;
    let mut entries = Vec::new();
    for site in graph.cost_sites()? {
        for &kind in &site.kinds {
            entries.push(LutEntry::new(&site.layer_id, kind, site.geom, hw)?);
        }
    }
    Ok(LatencyTable {
        version: LUT_VERSION,
        hardware: *hw,
        entries,
    })
}

pub fn export_lut(table: &LatencyTable, path: &Path) -> Result<()> {
    table.export(path)
}

/// Modeled against measured traffic of one operator call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub op_kind: OpKind,
    pub model_bits: u64,
    /// Header plus payload bits of the modeled message types.
    pub measured_bits: u64,
    /// `|model - measured| / model`; zero when both are zero.
    pub rel_error: f64,
    pub model_events: u32,
    pub measured_events: u64,
    /// Traffic of message types outside the model.
    pub unmodeled_messages: u64,
    pub unmodeled_bits: u64,
    pub measured_rounds: u64,
}

/// Compares an entry with the transcript delta of one call of that operator.
pub fn validate_against_transcript(entry: &LutEntry, report: &TranscriptReport) -> Validation {
    let types = entry.op_kind.modeled_types();
    let measured_bits = 8 * report.bytes_of(types);
    let model_bits = entry.comm_bits;
    let rel_error = if model_bits == 0 {
        if measured_bits == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (model_bits as f64 - measured_bits as f64).abs() / model_bits as f64
    };
    let modeled_msgs = report.messages_of(types);
    Validation {
        op_kind: entry.op_kind,
        model_bits,
        measured_bits,
        rel_error,
        model_events: entry.rounds,
        measured_events: modeled_msgs,
        unmodeled_messages: report.messages() - modeled_msgs,
        unmodeled_bits: 8 * report.bytes() - measured_bits,
        measured_rounds: report.rounds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zero_base_latency_hw() -> HardwareProfile {
        HardwareProfile {
            t_bc: 0.0,
            ..HardwareProfile::default()
        }
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs()
    }

    #[test]
    fn ot_flow_golden_values() {
        let hw = zero_base_latency_hw();
        let c = model_ot_flow(&Geometry::elementwise(8, 4), &hw).unwrap();
        assert!(close(c.cmp2(), 1.7408e-4), "{}", c.cmp2());
        assert!(close(c.comm2(), 1.6384e-5), "{}", c.comm2());
        let c = model_ot_flow(&Geometry::elementwise(1, 1), &hw).unwrap();
        assert!(close(c.cmp4(), 2.56125e-6), "{}", c.cmp4());
    }

    #[test]
    fn operator_golden_values() {
        let hw = zero_base_latency_hw();
        let g = Geometry::elementwise(8, 4);
        let x2 = model_operator(OpKind::X2act, &g, &hw).unwrap();
        assert!(close(x2.cmp, 6.4e-7));
        assert!(close(x2.comm, 1.024e-6));
        assert!(close(x2.latency_s, 2.688e-6));
        let avg = model_operator(OpKind::Avgpool, &g, &hw).unwrap();
        assert!(close(avg.latency_s, 6.4e-7));
        assert_eq!(avg.comm_bits, 0);
    }

    #[test]
    fn relu_terms_sum_and_maxpool_adds_three_base_latencies() {
        let hw = HardwareProfile::default();
        let g = Geometry::elementwise(8, 4);
        let ot = model_ot_flow(&g, &hw).unwrap();
        let relu = model_operator(OpKind::Relu, &g, &hw).unwrap();
        let mp = model_operator(OpKind::Maxpool, &g, &hw).unwrap();
        assert!(close(relu.latency_s, ot.total()));
        assert!(close(mp.latency_s, ot.total() + 3.0 * hw.t_bc));
        assert_eq!(relu.comm_bits, 32 + 2561 * 256);
        assert_eq!((relu.rounds, mp.rounds), (4, 7));
    }

    #[test]
    fn relu_dwarfs_x2act_at_large_feature_maps() {
        let hw = HardwareProfile::default();
        let g = Geometry::elementwise(56, 64);
        let relu = model_operator(OpKind::Relu, &g, &hw).unwrap().latency_s;
        let x2 = model_operator(OpKind::X2act, &g, &hw).unwrap().latency_s;
        assert!(relu / x2 >= 10.0, "ratio {}", relu / x2);
    }

    #[test]
    fn conv_uses_output_geometry_for_compute() {
        let hw = zero_base_latency_hw();
        let g = Geometry {
            fi: 8,
            fo: 6,
            ic: 3,
            oc: 5,
            k: 3,
        };
        let c = model_operator(OpKind::Conv, &g, &hw).unwrap();
        assert!(close(c.cmp, 3.0 * 9.0 * 36.0 * 15.0 / 8e8));
        assert!(close(c.comm, 32.0 * 192.0 / 8e9));
        assert!(close(c.latency_s, c.cmp + 2.0 * c.comm));
    }

    #[test]
    fn unknown_kind_and_bad_geometry_are_contract_errors() {
        assert!(matches!("softmax".parse::<OpKind>(), Err(Error::Contract(_))));
        assert_eq!("ReLU".parse::<OpKind>().unwrap(), OpKind::Relu);
        let hw = HardwareProfile::default();
        assert!(matches!(
            model_operator(OpKind::Relu, &Geometry::elementwise(0, 4), &hw),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn hardware_profile_rejects_nonpositive_fields() {
        assert!(HardwareProfile::default().validate().is_ok());
        assert!(zero_base_latency_hw().validate().is_ok());
        for bad in [
            HardwareProfile { pp: 0.0, ..Default::default() },
            HardwareProfile { freq: -1.0, ..Default::default() },
            HardwareProfile { rt_bw: f64::NAN, ..Default::default() },
            HardwareProfile { t_bc: -1e-6, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn lut_json_roundtrip_and_schema() {
        let hw = HardwareProfile::default();
        let table = LatencyTable {
            version: LUT_VERSION,
            hardware: hw,
            entries: vec![
                LutEntry::new("act1", OpKind::Relu, Geometry::elementwise(8, 4), &hw).unwrap(),
                LutEntry::new("act1", OpKind::X2act, Geometry::elementwise(8, 4), &hw).unwrap(),
            ],
        };
        let text = table.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["version"], 1);
        for key in ["PP", "freq", "T_bc", "Rt_bw"] {
            assert!(v["hardware"][key].is_number(), "{key}");
        }
        let e = &v["entries"][0];
        assert_eq!(e["op_kind"], "relu");
        for key in ["FI", "FO", "IC", "OC", "K"] {
            assert!(e["geom"][key].is_u64(), "{key}");
        }
        for key in ["layer_id", "latency_s", "comm_bits", "rounds"] {
            assert!(!e[key].is_null(), "{key}");
        }
        assert_eq!(LatencyTable::from_json(&text).unwrap(), table);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lut.json");
        export_lut(&table, &path).unwrap();
        assert_eq!(LatencyTable::import(&path).unwrap(), table);

        let bumped = text.replacen("\"version\": 1", "\"version\": 9", 1);
        assert!(LatencyTable::from_json(&bumped).is_err());
    }

    #[test]
    fn avgpool_validation_with_no_traffic_is_exact() {
        let hw = HardwareProfile::default();
        let e = LutEntry::new("p", OpKind::Avgpool, Geometry::elementwise(4, 2), &hw).unwrap();
        let v = validate_against_transcript(&e, &TranscriptReport::default());
        assert_eq!(v.rel_error, 0.0);
        assert_eq!(v.measured_bits, 0);
    }

    fn kinds() -> impl Strategy<Value = OpKind> {
        prop::sample::select(OpKind::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn latency_is_affine_in_feature_map_volume(
            kind in kinds(),
            fi in 1u64..64,
            ic in 1u64..64,
            t_bc in 0.0f64..1e-3,
        ) {
            let hw = HardwareProfile { t_bc, ..Default::default() };
            let lat = |fi: u64, ic: u64| {
                let g = Geometry { fi, fo: fi, ic, oc: 4, k: 3 };
                model_operator(kind, &g, &hw).unwrap().latency_s
            };
            // N, 4N and 12N must share one slope
            let (n1, n2, n3) = ((fi * fi * ic) as f64, (4 * fi * fi * ic) as f64, (4 * fi * fi * 3 * ic) as f64);
            let (l1, l2, l3) = (lat(fi, ic), lat(2 * fi, ic), lat(2 * fi, 3 * ic));
            let s12 = (l2 - l1) / (n2 - n1);
            let s13 = (l3 - l1) / (n3 - n1);
            prop_assert!((s12 - s13).abs() <= 1e-9 * s13.abs());
        }

        #[test]
        fn entries_are_positive_and_deterministic(kind in kinds(), fi in 1u64..40, ic in 1u64..40) {
            let hw = HardwareProfile::default();
            let g = Geometry { fi, fo: fi, ic, oc: ic, k: 3 };
            let a = model_operator(kind, &g, &hw).unwrap();
            let b = model_operator(kind, &g, &hw).unwrap();
            prop_assert!(a.latency_s > 0.0);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn x2act_never_slower_than_relu(fi in 1u64..64, ic in 1u64..64, t_bc in 0.0f64..1e-3) {
            let hw = HardwareProfile { t_bc, ..Default::default() };
            let g = Geometry::elementwise(fi, ic);
            let relu = model_operator(OpKind::Relu, &g, &hw).unwrap().latency_s;
            let x2 = model_operator(OpKind::X2act, &g, &hw).unwrap().latency_s;
            prop_assert!(x2 < relu);
        }
    }
}
