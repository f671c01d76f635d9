//! Network description shared by the two servers, the dealer and the
//! architecture search.
//!
//! Shapes are per sample and explicit on every layer: `[C, H, W]` for
//! feature maps, `[D]` for vectors. Parameters of `conv` and `dense` layers
//! are named `<id>.weight` and `<id>.bias` in the weights file.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{Geometry, OpKind};
use crate::error::{Error, Result};
use crate::nn::X2actParams;
use crate::ring::{Conv2dParams, FixedPointConfig};

pub const GRAPH_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Dense,
    Relu,
    X2act,
    Maxpool,
    Avgpool,
    Flatten,
}

impl LayerKind {
    pub fn is_activation(self) -> bool {
        matches!(self, LayerKind::Relu | LayerKind::X2act)
    }

    pub fn is_pool(self) -> bool {
        matches!(self, LayerKind::Maxpool | LayerKind::Avgpool)
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Dense => "dense",
            LayerKind::Relu => "relu",
            LayerKind::X2act => "x2act",
            LayerKind::Maxpool => "maxpool",
            LayerKind::Avgpool => "avgpool",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Cost-model operator; dense layers are costed as 1x1 convolutions.
    pub fn op_kind(self) -> Option<OpKind> {
        match self {
            LayerKind::Conv | LayerKind::Dense => Some(OpKind::Conv),
            LayerKind::Relu => Some(OpKind::Relu),
            LayerKind::X2act => Some(OpKind::X2act),
            LayerKind::Maxpool => Some(OpKind::Maxpool),
            LayerKind::Avgpool => Some(OpKind::Avgpool),
            LayerKind::Flatten => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

fn one() -> usize {
    1
}

impl ConvSpec {
    pub fn params(&self) -> Conv2dParams {
        Conv2dParams {
            stride: self.stride,
            padding: self.padding,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseSpec {
    pub out_features: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense: Option<DenseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x2act: Option<X2actParams>,
    /// Alternatives considered at this site; empty for fixed layers.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<LayerKind>,
}

impl LayerSpec {
    fn bare(id: &str, kind: LayerKind, input_shape: Vec<usize>, output_shape: Vec<usize>) -> LayerSpec {
        LayerSpec {
            id: id.to_string(),
            kind,
            input_shape,
            output_shape,
            conv: None,
            dense: None,
            pool: None,
            x2act: None,
            candidates: Vec::new(),
        }
    }

    pub fn conv(id: &str, input: [usize; 3], spec: ConvSpec) -> Result<LayerSpec> {
        let p = spec.params();
        let oh = p.output_size(input[1], spec.kernel)?;
        let ow = p.output_size(input[2], spec.kernel)?;
        let mut l = LayerSpec::bare(id, LayerKind::Conv, input.to_vec(), vec![spec.out_channels, oh, ow]);
        l.conv = Some(spec);
        Ok(l)
    }

    pub fn dense(id: &str, input: usize, out_features: usize) -> LayerSpec {
        let mut l = LayerSpec::bare(id, LayerKind::Dense, vec![input], vec![out_features]);
        l.dense = Some(DenseSpec { out_features });
        l
    }

    pub fn activation(id: &str, kind: LayerKind, shape: Vec<usize>) -> LayerSpec {
        let mut l = LayerSpec::bare(id, kind, shape.clone(), shape.clone());
        if kind == LayerKind::X2act {
            l.x2act = Some(X2actParams::identity(shape.iter().product::<usize>() as u64));
        }
        l
    }

    pub fn pool(id: &str, kind: LayerKind, input: [usize; 3], spec: PoolSpec) -> Result<LayerSpec> {
        let p = Conv2dParams {
            stride: spec.stride,
            padding: 0,
        };
        let oh = p.output_size(input[1], spec.kernel)?;
        let ow = p.output_size(input[2], spec.kernel)?;
        let mut l = LayerSpec::bare(id, kind, input.to_vec(), vec![input[0], oh, ow]);
        l.pool = Some(spec);
        Ok(l)
    }

    pub fn flatten(id: &str, input: Vec<usize>) -> LayerSpec {
        let n = input.iter().product();
        LayerSpec::bare(id, LayerKind::Flatten, input, vec![n])
    }

    pub fn with_candidates(mut self, candidates: &[LayerKind]) -> LayerSpec {
        self.candidates = candidates.to_vec();
        self
    }

    pub fn is_gated(&self) -> bool {
        !self.candidates.is_empty()
    }

    /// `(name, shape)` of the layer's trainable tensors.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match (self.kind, self.conv, self.dense) {
            (LayerKind::Conv, Some(c), _) => vec![
                (format!("{}.weight", self.id), vec![c.out_channels, self.input_shape[0], c.kernel, c.kernel]),
                (format!("{}.bias", self.id), vec![c.out_channels]),
            ],
            (LayerKind::Dense, _, Some(d)) => vec![
                (format!("{}.weight", self.id), vec![d.out_features, self.input_shape[0]]),
                (format!("{}.bias", self.id), vec![d.out_features]),
            ],
            _ => Vec::new(),
        }
    }

    fn fail(&self, msg: impl std::fmt::Display) -> Error {
        Error::Config(format!("layer `{}`: {msg}", self.id))
    }

    fn need<T>(&self, v: Option<T>, what: &str) -> Result<T> {
        v.ok_or_else(|| self.fail(format!("missing `{what}` block")))
    }

    fn map_dims(&self) -> Result<[usize; 3]> {
        match self.input_shape[..] {
            [c, h, w] if c > 0 && h > 0 && h == w => Ok([c, h, w]),
            _ => Err(self.fail(format!("needs a square [C, H, W] input, got {:?}", self.input_shape))),
        }
    }

    fn expected_output(&self) -> Result<Vec<usize>> {
        Ok(match self.kind {
            LayerKind::Conv => {
                let spec = self.need(self.conv, "conv")?;
                LayerSpec::conv(&self.id, self.map_dims()?, spec)?.output_shape
            }
            LayerKind::Dense => {
                let spec = self.need(self.dense, "dense")?;
                if self.input_shape.len() != 1 || self.input_shape[0] == 0 {
                    return Err(self.fail("dense input must be [D]"));
                }
                vec![spec.out_features]
            }
            LayerKind::Relu | LayerKind::X2act => {
                if self.input_shape.is_empty() || self.input_shape.contains(&0) {
                    return Err(self.fail("empty activation input"));
                }
                if self.input_shape.len() == 3 {
                    self.map_dims()?;
                } else if self.input_shape.len() != 1 {
                    return Err(self.fail("activation input must be [C, H, W] or [D]"));
                }
                self.input_shape.clone()
            }
            LayerKind::Maxpool | LayerKind::Avgpool => {
                let spec = self.need(self.pool, "pool")?;
                LayerSpec::pool(&self.id, self.kind, self.map_dims()?, spec)?.output_shape
            }
            LayerKind::Flatten => vec![self.input_shape.iter().product()],
        })
    }

    fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() {
            return Err(self.fail("empty input shape"));
        }
        let want = self.expected_output()?;
        if want != self.output_shape {
            return Err(self.fail(format!("output shape {:?}, expected {want:?}", self.output_shape)));
        }
        if self.kind == LayerKind::X2act {
            let p = self.x2act.ok_or_else(|| self.fail("missing `x2act` block"))?;
            let n: usize = self.input_shape.iter().product();
            if p.n_x != n as u64 {
                return Err(self.fail(format!("x2act n_x {} for a map of {n} elements", p.n_x)));
            }
        }
        if self.is_gated() {
            let family = |k: LayerKind| (k.is_activation(), k.is_pool());
            let unique: HashSet<_> = self.candidates.iter().collect();
            if self.candidates.len() < 2 || unique.len() != self.candidates.len() {
                return Err(self.fail("a gated layer needs at least two distinct candidates"));
            }
            if !(self.kind.is_activation() || self.kind.is_pool())
                || self.candidates.iter().any(|&k| family(k) != family(self.kind))
            {
                return Err(self.fail("candidates must all be activations or all be pools"));
            }
            if !self.candidates.contains(&self.kind) {
                return Err(self.fail("the selected kind is not among the candidates"));
            }
        }
        Ok(())
    }

    /// Cost-model geometry at this site.
    pub fn geometry(&self) -> Result<Option<Geometry>> {
        let u = |v: usize| v as u64;
        Ok(match self.kind {
            LayerKind::Flatten => None,
            LayerKind::Dense => Some(Geometry {
                fi: 1,
                fo: 1,
                ic: u(self.input_shape[0]),
                oc: u(self.output_shape[0]),
                k: 1,
            }),
            LayerKind::Relu | LayerKind::X2act if self.input_shape.len() == 1 => {
                Some(Geometry::elementwise(1, u(self.input_shape[0])))
            }
            _ => {
                let [c, h, _] = self.map_dims()?;
                let k = match self.kind {
                    LayerKind::Conv => self.conv.map(|c| c.kernel).unwrap_or(1),
                    LayerKind::Maxpool | LayerKind::Avgpool => self.pool.map(|p| p.kernel).unwrap_or(1),
                    _ => 1,
                };
                Some(Geometry {
                    fi: u(h),
                    fo: u(self.output_shape[1]),
                    ic: u(c),
                    oc: u(self.output_shape[0]),
                    k: u(k),
                })
            }
        })
    }
}

/// A layer site for the latency table: its operator alternatives at one
/// geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct CostSite {
    pub layer_id: String,
    pub kinds: Vec<OpKind>,
    pub geom: Geometry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub version: u32,
    pub fp: FixedPointConfig,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl GraphSpec {
    pub fn new(fp: FixedPointConfig, input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> GraphSpec {
        GraphSpec {
            version: GRAPH_VERSION,
            fp,
            input_shape,
            layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != GRAPH_VERSION {
            return Err(Error::Config(format!("unsupported graph version {}", self.version)));
        }
        self.fp.validate()?;
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config("empty graph input shape".into()));
        }
        let mut seen = HashSet::new();
        let mut shape = &self.input_shape;
        for l in &self.layers {
            if l.id.is_empty() || !seen.insert(l.id.as_str()) {
                return Err(Error::Config(format!("layer id `{}` is empty or repeated", l.id)));
            }
            if &l.input_shape != shape {
                return Err(l.fail(format!("input shape {:?} does not follow {shape:?}", l.input_shape)));
            }
            l.validate()?;
            shape = &l.output_shape;
        }
        Ok(())
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers.last().map_or(&self.input_shape, |l| &l.output_shape)
    }

    pub fn from_json(text: &str) -> Result<GraphSpec> {
        let g: GraphSpec = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<GraphSpec> {
        GraphSpec::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    /// Every parameter tensor the weights file must provide, in layer order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers.iter().flat_map(|l| l.param_shapes()).collect()
    }

    pub fn cost_sites(&self) -> Result<Vec<CostSite>> {
        self.validate().map_err(|e| Error::Contract(format!("unresolvable geometry: {e}")))?;
        let mut out = Vec::new();
        for l in &self.layers {
            let Some(geom) = l.geometry()? else { continue };
            let kinds = if l.is_gated() {
                l.candidates.iter().filter_map(|k| k.op_kind()).collect()
            } else {
                l.kind.op_kind().into_iter().collect()
            };
            out.push(CostSite {
                layer_id: l.id.clone(),
                kinds,
                geom,
            });
        }
        Ok(out)
    }

    /// Canonical digest both servers compare before running.
    pub fn digest(&self) -> Result<[u8; 32]> {
        use sha2::{Digest, Sha256};
        Ok(Sha256::digest(serde_json::to_vec(self)?).into())
    }
}

/// The small network used by the examples and the end-to-end tests:
/// `1x8x8 -> conv 3x3 (2) -> x2act -> avgpool 2 -> conv 3x3 (4) -> relu ->
/// maxpool 2 -> flatten -> dense 10`.
pub fn reference_cnn(fp: FixedPointConfig) -> GraphSpec {
    let same = |oc| ConvSpec {
        out_channels: oc,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let pool = PoolSpec { kernel: 2, stride: 2 };
    let acts = [LayerKind::Relu, LayerKind::X2act];
    let pools = [LayerKind::Maxpool, LayerKind::Avgpool];
    let layers = vec![
        LayerSpec::conv("conv1", [1, 8, 8], same(2)).expect("fits"),
        LayerSpec::activation("act1", LayerKind::X2act, vec![2, 8, 8]).with_candidates(&acts),
        LayerSpec::pool("pool1", LayerKind::Avgpool, [2, 8, 8], pool).expect("fits").with_candidates(&pools),
        LayerSpec::conv("conv2", [2, 4, 4], same(4)).expect("fits"),
        LayerSpec::activation("act2", LayerKind::Relu, vec![4, 4, 4]).with_candidates(&acts),
        LayerSpec::pool("pool2", LayerKind::Maxpool, [4, 4, 4], pool).expect("fits").with_candidates(&pools),
        LayerSpec::flatten("flat", vec![4, 2, 2]),
        LayerSpec::dense("fc", 16, 10),
    ];
    GraphSpec::new(fp, vec![1, 8, 8], layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{build_lut, HardwareProfile};

    #[test]
    fn reference_network_validates_and_roundtrips() {
        let g = reference_cnn(FixedPointConfig::default());
        g.validate().unwrap();
        assert_eq!(g.output_shape(), &[10]);
        let text = g.to_json().unwrap();
        assert_eq!(GraphSpec::from_json(&text).unwrap(), g);
        let names: Vec<String> = g.param_shapes().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "fc.weight", "fc.bias"]);
    }

    #[test]
    fn json_layout_uses_lowercase_kinds() {
        let g = reference_cnn(FixedPointConfig::default());
        let v: serde_json::Value = serde_json::from_str(&g.to_json().unwrap()).unwrap();
        assert_eq!(v["layers"][1]["kind"], "x2act");
        assert_eq!(v["layers"][1]["candidates"][0], "relu");
        assert_eq!(v["layers"][0]["conv"]["out_channels"], 2);
        assert!(v["layers"][6].get("candidates").is_none());
        assert_eq!(v["fp"]["frac_bits"], 12);
    }

    #[test]
    fn broken_chains_and_gates_are_rejected() {
        let fp = FixedPointConfig::default();
        let base = reference_cnn(fp);

        let mut g = base.clone();
        g.layers[3].input_shape = vec![2, 8, 8];
        assert!(matches!(g.validate(), Err(Error::Config(_))));

        let mut g = base.clone();
        g.layers[0].output_shape = vec![2, 7, 7];
        assert!(g.validate().is_err());

        let mut g = base.clone();
        g.layers[1].candidates = vec![LayerKind::X2act];
        assert!(g.validate().is_err());

        let mut g = base.clone();
        g.layers[1].candidates = vec![LayerKind::X2act, LayerKind::Maxpool];
        assert!(g.validate().is_err());

        let mut g = base.clone();
        g.layers[2].candidates = vec![LayerKind::Maxpool, LayerKind::Maxpool];
        assert!(g.validate().is_err());

        let mut g = base.clone();
        g.layers[4].id = "conv1".into();
        assert!(g.validate().is_err());

        let mut g = base.clone();
        g.layers[1].x2act.as_mut().unwrap().n_x = 7;
        assert!(g.validate().is_err());

        let mut g = base;
        g.layers[0].conv = None;
        assert!(g.validate().is_err());
    }

    #[test]
    fn one_gated_layer_gives_two_lut_entries() {
        let fp = FixedPointConfig::default();
        let g = GraphSpec::new(
            fp,
            vec![4, 8, 8],
            vec![LayerSpec::activation("a", LayerKind::Relu, vec![4, 8, 8])
                .with_candidates(&[LayerKind::Relu, LayerKind::X2act])],
        );
        let t = build_lut(&g, &HardwareProfile::default()).unwrap();
        assert_eq!(t.entries.len(), 2);
        assert!(t.get("a", OpKind::Relu).is_some() && t.get("a", OpKind::X2act).is_some());
    }

    #[test]
    fn reference_lut_covers_every_candidate() {
        let g = reference_cnn(FixedPointConfig::default());
        let t = build_lut(&g, &HardwareProfile::default()).unwrap();
        // 3 fixed linear layers plus 4 gates of 2
        assert_eq!(t.entries.len(), 3 + 8);
        for l in g.layers.iter().filter(|l| l.is_gated()) {
            for k in &l.candidates {
                assert!(t.get(&l.id, k.op_kind().unwrap()).is_some());
            }
        }
        let fc = t.get("fc", OpKind::Conv).unwrap();
        assert_eq!((fc.geom.fi, fc.geom.ic, fc.geom.oc, fc.geom.k), (1, 16, 10, 1));
        let p2 = t.get("pool2", OpKind::Maxpool).unwrap();
        assert_eq!((p2.geom.fi, p2.geom.fo, p2.geom.ic, p2.geom.k), (4, 2, 4, 2));
    }

    #[test]
    fn all_x2act_graph_is_cheaper_than_all_relu() {
        let fp = FixedPointConfig::default();
        let hw = HardwareProfile::default();
        for (c, h) in [(1, 2), (3, 8), (16, 32), (64, 56)] {
            let net = |k| {
                let layers = vec![
                    LayerSpec::activation("a1", k, vec![c, h, h]),
                    LayerSpec::activation("a2", k, vec![c, h, h]),
                ];
                let t = build_lut(&GraphSpec::new(fp, vec![c, h, h], layers), &hw).unwrap();
                t.entries.iter().map(|e| e.latency_s).sum::<f64>()
            };
            assert!(net(LayerKind::X2act) < net(LayerKind::Relu));
        }
    }

    #[test]
    fn unresolvable_geometry_is_a_contract_error() {
        let fp = FixedPointConfig::default();
        let g = GraphSpec::new(fp, vec![2, 4, 6], vec![LayerSpec::activation("a", LayerKind::Relu, vec![2, 4, 6])]);
        let hw = HardwareProfile::default();
        assert!(matches!(build_lut(&g, &hw), Err(Error::Contract(_))));
    }

    proptest::proptest! {
        #[test]
        fn generated_graphs_roundtrip_through_json(
            c in 1usize..4,
            half in 1usize..6,
            oc in 1usize..6,
            relu in proptest::prelude::any::<bool>(),
            max in proptest::prelude::any::<bool>(),
            out in 1usize..12,
        ) {
            let hw = 2 * half;
            let spec = ConvSpec { out_channels: oc, kernel: 3, stride: 1, padding: 1 };
            let act = if relu { LayerKind::Relu } else { LayerKind::X2act };
            let pool = if max { LayerKind::Maxpool } else { LayerKind::Avgpool };
            let g = GraphSpec::new(
                FixedPointConfig::default(),
                vec![c, hw, hw],
                vec![
                    LayerSpec::conv("c", [c, hw, hw], spec).unwrap(),
                    LayerSpec::activation("a", act, vec![oc, hw, hw])
                        .with_candidates(&[LayerKind::Relu, LayerKind::X2act]),
                    LayerSpec::pool("p", pool, [oc, hw, hw], PoolSpec { kernel: 2, stride: 2 })
                        .unwrap()
                        .with_candidates(&[LayerKind::Maxpool, LayerKind::Avgpool]),
                    LayerSpec::flatten("f", vec![oc, half, half]),
                    LayerSpec::dense("d", oc * half * half, out),
                ],
            );
            proptest::prop_assert!(g.validate().is_ok());
            let back = GraphSpec::from_json(&g.to_json().unwrap()).unwrap();
            proptest::prop_assert_eq!(back.digest().unwrap(), g.digest().unwrap());
            proptest::prop_assert_eq!(&back, &g);
            proptest::prop_assert_eq!(g.output_shape(), &[out]);
            proptest::prop_assert_eq!(g.cost_sites().unwrap().len(), 4);
        }
    }
}
