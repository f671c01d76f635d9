//! Whole-network execution for one server, the dealer's plan, the plaintext
//! reference and the run report.
//!
//! Server 0 owns the weights and shares them once per session. Server 1 owns
//! the inputs, shares one per inference and receives the logits.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::beaver::{CorrelatedSource, Dealer, Request};
use crate::cost::{model_operator, HardwareProfile};
use crate::error::{Error, Result};
use crate::graph::{reference_cnn, GraphSpec, LayerKind, LayerSpec};
use crate::nn::{self, plain, Ctx, X2actParams};
use crate::ot::OtParams;
use crate::ring::{read_tensor, write_tensor, FixedPointConfig, RingTensor};
use crate::sharing::{random_tensor, PartyId, ShareTensor};
use crate::transport::{bytes_to_words, words_to_bytes, Channel, MsgType, SimParams, TranscriptReport};

pub const REPORT_VERSION: u32 = 1;
const WEIGHTS_MAGIC: &[u8; 4] = b"PRWS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Server0,
    Server1,
    Dealer,
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Role> {
        match s {
            "server0" => Ok(Role::Server0),
            "server1" => Ok(Role::Server1),
            "dealer" => Ok(Role::Dealer),
            _ => Err(Error::Config(format!("unknown role `{s}`"))),
        }
    }
}

impl Role {
    pub fn party(self) -> Result<PartyId> {
        match self {
            Role::Server0 => Ok(PartyId::S0),
            Role::Server1 => Ok(PartyId::S1),
            Role::Dealer => Err(Error::Config("the dealer takes no part in the online phase".into())),
        }
    }
}

/// Named parameter tensors in the `PRWS` layout: magic, u32 count, then per
/// entry a u16 name length, the UTF-8 name and a `PRT1` tensor.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Weights {
    entries: Vec<(String, RingTensor)>,
}

impl Weights {
    pub fn new(entries: Vec<(String, RingTensor)>) -> Result<Weights> {
        let mut seen = std::collections::HashSet::new();
        for (name, _) in &entries {
            if name.is_empty() || name.len() > u16::MAX as usize || !seen.insert(name.as_str()) {
                return Err(Error::Format(format!("bad or repeated tensor name `{name}`")));
            }
        }
        Ok(Weights { entries })
    }

    pub fn entries(&self) -> &[(String, RingTensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&RingTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(&mut w, t)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Weights> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Format("bad weights magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4);
        let mut entries = Vec::new();
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            entries.push((name, read_tensor(&mut r)?));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format("trailing bytes after weights".into()));
        }
        Weights::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Weights> {
        Weights::read(std::fs::read(path)?.as_slice())
    }

    /// Every tensor the graph needs is present with the right shape and
    /// fixed-point format.
    pub fn check(&self, graph: &GraphSpec) -> Result<()> {
        for (name, shape) in graph.param_shapes() {
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Config(format!("weights file lacks `{name}`")))?;
            if t.shape() != shape.as_slice() || t.fp() != graph.fp {
                return Err(Error::Config(format!(
                    "`{name}` is {:?} {:?}, graph wants {shape:?} {:?}",
                    t.shape(),
                    t.fp(),
                    graph.fp
                )));
            }
        }
        Ok(())
    }

    /// Uniform in `+-1/sqrt(fan_in)`, seeded.
    pub fn random(graph: &GraphSpec, seed: u64) -> Result<Weights> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for l in &graph.layers {
            let shapes = l.param_shapes();
            let Some((_, wshape)) = shapes.first() else { continue };
            let bound = 1.0 / ((wshape[1..].iter().product::<usize>()) as f64).sqrt();
            for (name, shape) in shapes {
                let n: usize = shape.iter().product();
                let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                entries.push((name, RingTensor::from_f64(shape, &v, graph.fp)?));
            }
        }
        Weights::new(entries)
    }
}

/// Input batch file: one `PRT1` tensor shaped `[B, ...input_shape]` or just
/// `input_shape` for a single sample.
pub fn split_inputs(graph: &GraphSpec, t: &RingTensor) -> Result<Vec<RingTensor>> {
    let per: usize = graph.input_shape.iter().product();
    let batch = if t.shape() == graph.input_shape.as_slice() {
        1
    } else if t.shape().len() == graph.input_shape.len() + 1 && t.shape()[1..] == graph.input_shape[..] {
        t.shape()[0]
    } else {
        return Err(Error::Config(format!(
            "input tensor {:?} does not fit graph input {:?}",
            t.shape(),
            graph.input_shape
        )));
    };
    if t.fp() != graph.fp {
        return Err(Error::Config("input fixed-point format differs from the graph".into()));
    }
    (0..batch)
        .map(|b| RingTensor::new(graph.input_shape.clone(), t.data()[b * per..(b + 1) * per].to_vec(), t.fp()))
        .collect()
}

pub fn join_inputs(samples: &[RingTensor]) -> Result<RingTensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("empty input batch".into()))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.shape());
    let data = samples.iter().flat_map(|s| s.data().iter().copied()).collect();
    RingTensor::new(shape, data, first.fp())
}

fn batched(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

fn layer_block<T: Copy>(l: &LayerSpec, v: Option<T>) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("layer `{}` lacks its parameters", l.id)))
}

/// Correlated randomness one inference consumes, in order.
pub fn plan_requests(graph: &GraphSpec) -> Result<Vec<Request>> {
    graph.validate()?;
    let fp = graph.fp;
    let mut out = Vec::new();
    for l in &graph.layers {
        let x = batched(&l.input_shape);
        match l.kind {
            LayerKind::Conv => {
                let c = layer_block(l, l.conv)?;
                let w = [c.out_channels, l.input_shape[0], c.kernel, c.kernel];
                out.extend(nn::conv_requests(&x, &w, c.params())?);
            }
            LayerKind::Dense => out.extend(nn::dense_requests(&x, &[l.output_shape[0], l.input_shape[0]])?),
            LayerKind::Relu => out.extend(nn::relu_requests(&x, &fp)),
            LayerKind::X2act => out.extend(nn::x2act_requests(&x)),
            LayerKind::Maxpool => {
                let p = layer_block(l, l.pool)?;
                out.extend(nn::maxpool_requests(&x, p.kernel, p.stride, &fp)?);
            }
            LayerKind::Avgpool => {
                let p = layer_block(l, l.pool)?;
                out.extend(nn::avgpool_requests(&x, p.kernel, p.stride)?);
            }
            LayerKind::Flatten => {}
        }
    }
    Ok(out)
}

pub fn dealer_plan(graph: &GraphSpec, batch: usize) -> Result<Vec<Request>> {
    let one = plan_requests(graph)?;
    Ok((0..batch).flat_map(|_| one.iter().cloned()).collect())
}

fn derive(seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update(seed.to_le_bytes());
    h.finalize().into()
}

/// Seed of the dealer stream for a session seed.
pub fn dealer_seed(seed: u64) -> u64 {
    u64::from_le_bytes(derive(seed, "dealer")[..8].try_into().expect("8 bytes"))
}

pub fn party_rng(seed: u64, party: PartyId) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive(seed, if party.is_s0() { "server0" } else { "server1" }))
}

/// Writes both servers' correlated-randomness files for `batch` inferences.
pub fn run_dealer(graph: &GraphSpec, seed: u64, batch: usize, s0: &Path, s1: &Path) -> Result<()> {
    Dealer::new(dealer_seed(seed), graph.fp).write_files(&dealer_plan(graph, batch)?, s0, s1)
}

fn run_layer_plain(l: &LayerSpec, x: RingTensor, w: &HashMap<String, RingTensor>) -> Result<RingTensor> {
    let param = |suffix: &str| {
        w.get(&format!("{}.{suffix}", l.id))
            .ok_or_else(|| Error::Config(format!("missing {}.{suffix}", l.id)))
    };
    match l.kind {
        LayerKind::Conv => plain::conv(&x, param("weight")?, Some(param("bias")?), layer_block(l, l.conv)?.params()),
        LayerKind::Dense => plain::dense(&x, param("weight")?, Some(param("bias")?)),
        LayerKind::Relu => Ok(plain::relu(&x)),
        LayerKind::X2act => plain::x2act(&x, &layer_block(l, l.x2act)?),
        LayerKind::Maxpool => {
            let p = layer_block(l, l.pool)?;
            plain::maxpool(&x, p.kernel, p.stride)
        }
        LayerKind::Avgpool => {
            let p = layer_block(l, l.pool)?;
            plain::avgpool(&x, p.kernel, p.stride)
        }
        LayerKind::Flatten => x.reshape(batched(&l.output_shape)),
    }
}

/// Plaintext fixed-point evaluation with the secure schedule's truncation
/// points. Returns every layer's output; the last one is the logits.
pub fn run_plain_trace(graph: &GraphSpec, weights: &Weights, input: &RingTensor) -> Result<Vec<RingTensor>> {
    graph.validate()?;
    weights.check(graph)?;
    let w: HashMap<String, RingTensor> = weights.entries().iter().cloned().collect();
    let mut x = input.clone().reshape(batched(&graph.input_shape))?;
    let mut trace = Vec::with_capacity(graph.layers.len());
    for l in &graph.layers {
        x = run_layer_plain(l, x, &w).map_err(|e| e.in_layer(&l.id))?;
        trace.push(x.clone());
    }
    Ok(trace)
}

pub fn run_plain_reference(graph: &GraphSpec, input: &RingTensor, weights: &Weights) -> Result<RingTensor> {
    let trace = run_plain_trace(graph, weights, input)?;
    let out = trace.last().cloned().unwrap_or(input.clone());
    out.reshape(graph.output_shape().to_vec())
}

/// Session-wide settings both servers must agree on.
#[derive(Clone, Debug)]
pub struct SessionConfig {
    pub graph: GraphSpec,
    pub hw: HardwareProfile,
    pub ot: OtParams,
    pub seed: u64,
}

impl SessionConfig {
    pub fn sim(&self) -> SimParams {
        SimParams {
            t_bc: self.hw.t_bc,
            rt_bw: self.hw.rt_bw,
        }
    }

    fn digest(&self) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        h.update(self.graph.digest()?);
        h.update(self.ot.name().as_bytes());
        Ok(h.finalize().into())
    }
}

/// What a server brings to the session.
#[derive(Clone, Debug)]
pub enum PartyData {
    Weights(Weights),
    Inputs {
        samples: Vec<RingTensor>,
        labels: Option<Vec<usize>>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub id: String,
    pub kind: String,
    pub bytes: u64,
    pub messages: u64,
    pub rounds: u64,
    pub virtual_latency_s: f64,
    pub modeled_latency_s: f64,
}

impl LayerReport {
    fn add(&mut self, d: &TranscriptReport) {
        self.bytes += d.bytes();
        self.messages += d.messages();
        self.rounds += d.rounds;
        self.virtual_latency_s += d.virtual_time;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub bytes: u64,
    pub messages: u64,
    pub rounds: u64,
    pub virtual_latency_s: f64,
    pub modeled_latency_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TranscriptDigests {
    pub sent_sha256: String,
    pub received_sha256: String,
}

/// One server's account of a session. Counters cover both directions of
/// that server's channel.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub party: String,
    pub batch: usize,
    pub layers: Vec<LayerReport>,
    pub totals: Totals,
    /// Decoded logits, one row per inference; result owner only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<Vec<f64>>>,
    /// Signed ring values of the logits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_logits: Option<Vec<Vec<i64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub transcript: TranscriptDigests,
}

impl RunReport {
    pub fn sum_layers(layers: &[LayerReport]) -> Totals {
        let mut t = Totals::default();
        for l in layers {
            t.bytes += l.bytes;
            t.messages += l.messages;
            t.rounds += l.rounds;
            t.virtual_latency_s += l.virtual_latency_s;
            t.modeled_latency_s += l.modeled_latency_s;
        }
        t
    }

    pub fn totals_consistent(&self) -> bool {
        RunReport::sum_layers(&self.layers) == self.totals
    }

    pub fn from_json(text: &str) -> Result<RunReport> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Table,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<ReportFormat> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "table" => Ok(ReportFormat::Table),
            _ => Err(Error::Config(format!("unknown report format `{s}`"))),
        }
    }
}

/// JSON, or a table of measured and modeled cost grouped by operator kind.
pub fn report_render(report: &RunReport, format: ReportFormat) -> Result<String> {
    if format == ReportFormat::Json {
        return Ok(serde_json::to_string_pretty(report)? + "\n");
    }
    let mut groups: Vec<(String, Vec<&LayerReport>)> = Vec::new();
    for l in &report.layers {
        match groups.iter_mut().find(|(k, _)| *k == l.kind) {
            Some((_, v)) => v.push(l),
            None => groups.push((l.kind.clone(), vec![l])),
        }
    }
    let total = &report.totals;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>6} {:>14} {:>8} {:>14} {:>14} {:>8}",
        "kind", "layers", "bytes", "rounds", "virtual_s", "modeled_s", "share"
    );
    for (kind, ls) in &groups {
        let owned: Vec<LayerReport> = ls.iter().map(|l| (*l).clone()).collect();
        let t = RunReport::sum_layers(&owned);
        let share = if total.modeled_latency_s > 0.0 {
            100.0 * t.modeled_latency_s / total.modeled_latency_s
        } else {
            0.0
        };
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>14} {:>8} {:>14.6e} {:>14.6e} {:>7.2}%",
            kind,
            ls.len(),
            t.bytes,
            t.rounds,
            t.virtual_latency_s,
            t.modeled_latency_s,
            share
        );
    }
    let _ = writeln!(
        out,
        "{:<10} {:>6} {:>14} {:>8} {:>14.6e} {:>14.6e}",
        "total",
        report.layers.len(),
        total.bytes,
        total.rounds,
        total.virtual_latency_s,
        total.modeled_latency_s
    );
    if let Some(acc) = report.accuracy {
        let _ = writeln!(out, "accuracy {:.4}", acc);
    }
    Ok(out)
}

fn send_share(ch: &mut Channel, t: MsgType, tensors: &[RingTensor]) -> Result<()> {
    let words: Vec<u32> = tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
    ch.send(t, &words_to_bytes(&words))
}

fn recv_share(ch: &mut Channel, t: MsgType, shapes: &[Vec<usize>], fp: FixedPointConfig) -> Result<Vec<RingTensor>> {
    let total = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let words = bytes_to_words(&ch.recv(t)?, total)?;
    let mask = fp.ring().mask();
    if words.iter().any(|&w| w & !mask != 0) {
        return Err(Error::Protocol("share word outside the ring".into()));
    }
    let mut at = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            at += n;
            RingTensor::new(s.clone(), words[at - n..at].to_vec(), fp)
        })
        .collect()
}

fn run_layer(
    l: &LayerSpec,
    x: ShareTensor,
    w: &HashMap<String, ShareTensor>,
    ctx: &mut Ctx,
) -> Result<ShareTensor> {
    let param = |suffix: &str| {
        w.get(&format!("{}.{suffix}", l.id))
            .ok_or_else(|| Error::Config(format!("missing {}.{suffix}", l.id)))
    };
    match l.kind {
        LayerKind::Conv => {
            let c = layer_block(l, l.conv)?;
            nn::conv2pc(&x, param("weight")?, Some(param("bias")?), c.params(), ctx)
        }
        LayerKind::Dense => nn::dense2pc(&x, param("weight")?, Some(param("bias")?), ctx),
        LayerKind::Relu => nn::relu2pc(&x, ctx),
        LayerKind::X2act => nn::x2act2pc(&x, &layer_block(l, l.x2act)?, ctx),
        LayerKind::Maxpool => {
            let p = layer_block(l, l.pool)?;
            nn::maxpool2pc(&x, p.kernel, p.stride, ctx)
        }
        LayerKind::Avgpool => {
            let p = layer_block(l, l.pool)?;
            nn::avgpool2pc(&x, p.kernel, p.stride, ctx)
        }
        LayerKind::Flatten => x.reshape(batched(&l.output_shape)),
    }
}

fn modeled_latency(l: &LayerSpec, hw: &HardwareProfile) -> Result<f64> {
    match (l.kind.op_kind(), l.geometry()?) {
        (Some(k), Some(g)) => Ok(model_operator(k, &g, hw)?.latency_s),
        _ => Ok(0.0),
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs one server's side of a session over `ch`, whose simulated clock
/// should be configured from `cfg.sim()`.
pub fn run_party(
    cfg: &SessionConfig,
    data: &PartyData,
    ch: &mut Channel,
    src: &mut CorrelatedSource,
) -> Result<RunReport> {
    let graph = &cfg.graph;
    graph.validate()?;
    cfg.hw.validate()?;
    let me = ch.party();
    let fp = graph.fp;
    match (me, data) {
        (PartyId::S0, PartyData::Weights(w)) => w.check(graph)?,
        (PartyId::S1, PartyData::Inputs { samples, labels }) => {
            for s in samples {
                if s.shape() != graph.input_shape.as_slice() || s.fp() != fp {
                    return Err(Error::Config(format!("input sample {:?} does not fit the graph", s.shape())));
                }
            }
            if labels.as_ref().is_some_and(|l| l.len() != samples.len()) {
                return Err(Error::Config("label count differs from the batch".into()));
            }
        }
        _ => return Err(Error::Config("server 0 brings weights and server 1 brings inputs".into())),
    }
    if src.party() != me {
        return Err(Error::Config("correlated randomness belongs to the other server".into()));
    }

    let mut rng = party_rng(cfg.seed, me);
    let mut rows: Vec<LayerReport> = Vec::with_capacity(graph.layers.len() + 3);
    let row = |id: &str, kind: &str| LayerReport {
        id: id.into(),
        kind: kind.into(),
        ..Default::default()
    };
    rows.push(row("setup", "io"));
    rows.push(row("input", "io"));
    for l in &graph.layers {
        rows.push(row(&l.id, l.kind.name()));
    }
    rows.push(row("reveal", "io"));
    let reveal_row = rows.len() - 1;

    // Handshake: both sides must be running the same network and group.
    let mut mark = ch.transcript_report();
    let mut hello = cfg.digest()?.to_vec();
    let own_batch = match data {
        PartyData::Inputs { samples, .. } => samples.len() as u32,
        PartyData::Weights(_) => 0,
    };
    hello.extend_from_slice(&own_batch.to_le_bytes());
    let peer = ch.exchange(MsgType::Control, &hello)?;
    if peer.len() != 36 || peer[..32] != hello[..32] {
        return Err(Error::Protocol("the servers disagree on the network or group".into()));
    }
    let batch = match me {
        PartyId::S0 => u32::from_le_bytes(peer[32..36].try_into().expect("4 bytes")) as usize,
        PartyId::S1 => own_batch as usize,
    };

    // Weight sharing: server 0 keeps a uniform mask and sends the difference.
    let shapes = graph.param_shapes();
    let mut wshares = HashMap::new();
    match data {
        PartyData::Weights(w) => {
            let mut sent = Vec::with_capacity(shapes.len());
            for (name, shape) in &shapes {
                let r = random_tensor(&mut rng, shape.clone(), fp);
                sent.push(w.get(name).expect("checked").sub(&r)?);
                wshares.insert(name.clone(), ShareTensor::new(me, r));
            }
            send_share(ch, MsgType::ShareInput, &sent)?;
        }
        PartyData::Inputs { .. } => {
            let just_shapes: Vec<Vec<usize>> = shapes.iter().map(|(_, s)| s.clone()).collect();
            let got = recv_share(ch, MsgType::ShareInput, &just_shapes, fp)?;
            for ((name, _), t) in shapes.iter().zip(got) {
                wshares.insert(name.clone(), ShareTensor::new(me, t));
            }
        }
    }
    let now = ch.transcript_report();
    rows[0].add(&now.since(&mark));
    mark = now;

    let mut logits = Vec::with_capacity(batch);
    let mut raw = Vec::with_capacity(batch);
    let in_shape = batched(&graph.input_shape);
    for b in 0..batch {
        // Input sharing: server 1 sends a uniform mask as server 0's share.
        let mut x = match data {
            PartyData::Inputs { samples, .. } => {
                let r = random_tensor(&mut rng, in_shape.clone(), fp);
                send_share(ch, MsgType::ShareInput, std::slice::from_ref(&r))?;
                ShareTensor::new(me, samples[b].clone().reshape(in_shape.clone())?.sub(&r)?)
            }
            PartyData::Weights(_) => {
                let got = recv_share(ch, MsgType::ShareInput, std::slice::from_ref(&in_shape), fp)?;
                ShareTensor::new(me, got.into_iter().next().expect("one tensor"))
            }
        };
        let now = ch.transcript_report();
        rows[1].add(&now.since(&mark));
        mark = now;

        let mut ctx = Ctx {
            ch: &mut *ch,
            src: &mut *src,
            rng: &mut rng,
            ot: &cfg.ot,
        };
        for (i, l) in graph.layers.iter().enumerate() {
            x = run_layer(l, x, &wshares, &mut ctx).map_err(|e| e.in_layer(&l.id))?;
            let now = ctx.ch.transcript_report();
            rows[2 + i].add(&now.since(&mark));
            mark = now;
        }

        match me {
            PartyId::S0 => send_share(ch, MsgType::Reveal, std::slice::from_ref(&x.share))?,
            PartyId::S1 => {
                let theirs = recv_share(ch, MsgType::Reveal, &[x.shape().to_vec()], fp)?;
                let y = x.share.add(&theirs[0])?;
                logits.push(y.to_f64());
                raw.push(y.to_signed());
            }
        }
        let now = ch.transcript_report();
        rows[reveal_row].add(&now.since(&mark));
        mark = now;
    }

    for (i, l) in graph.layers.iter().enumerate() {
        rows[2 + i].modeled_latency_s = modeled_latency(l, &cfg.hw)? * batch as f64;
    }
    let (sent, received) = ch.transcript_digests();
    let mut report = RunReport {
        version: REPORT_VERSION,
        party: match me {
            PartyId::S0 => "server0".into(),
            PartyId::S1 => "server1".into(),
        },
        batch,
        totals: RunReport::sum_layers(&rows),
        layers: rows,
        transcript: TranscriptDigests {
            sent_sha256: sent,
            received_sha256: received,
        },
        ..Default::default()
    };
    if me == PartyId::S1 {
        let preds: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
        if let PartyData::Inputs { labels: Some(labels), .. } = data {
            let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
            report.accuracy = Some(if batch == 0 { 0.0 } else { hits as f64 / batch as f64 });
        }
        report.predictions = Some(preds);
        report.logits = Some(logits);
        report.raw_logits = Some(raw);
    }
    Ok(report)
}

/// Where the servers' correlated randomness comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DealerMode {
    /// One dealer in this process serving both servers.
    Inline,
    /// Each server regenerates its own half from the shared dealer seed.
    Local,
}

/// Both servers on a loopback channel in this process.
pub fn run_loopback(
    cfg: &SessionConfig,
    weights: &Weights,
    samples: Vec<RingTensor>,
    labels: Option<Vec<usize>>,
    dealer: DealerMode,
) -> Result<(RunReport, RunReport)> {
    let (mut s0, mut s1) = match dealer {
        DealerMode::Inline => CorrelatedSource::inline_pair(dealer_seed(cfg.seed), cfg.graph.fp),
        DealerMode::Local => (
            CorrelatedSource::local(dealer_seed(cfg.seed), cfg.graph.fp, PartyId::S0),
            CorrelatedSource::local(dealer_seed(cfg.seed), cfg.graph.fp, PartyId::S1),
        ),
    };
    let d0 = PartyData::Weights(weights.clone());
    let d1 = PartyData::Inputs { samples, labels };
    let (r0, r1) = crate::transport::run_pair(
        Some(cfg.sim()),
        |ch| run_party(cfg, &d0, ch, &mut s0),
        |ch| run_party(cfg, &d1, ch, &mut s1),
    );
    // a server that aborts first leaves the other with a disconnect; report
    // the root cause
    match (r0, r1) {
        (Ok(a), Ok(b)) => Ok((a, b)),
        (Err(e), Ok(_)) | (Ok(_), Err(e)) => Err(e),
        (Err(a), Err(b)) => Err(if matches!(a, Error::Io(_)) { b } else { a }),
    }
}

/// The reference network with non-trivial activation coefficients and
/// seeded weights.
pub fn example_network(fp: FixedPointConfig, seed: u64) -> Result<(GraphSpec, Weights)> {
    let mut graph = reference_cnn(fp);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
    for l in graph.layers.iter_mut().filter(|l| l.kind == LayerKind::X2act) {
        let n_x = l.input_shape.iter().product::<usize>() as u64;
        l.x2act = Some(X2actParams {
            w1: rng.gen_range(-1.0..1.0),
            w2: rng.gen_range(0.5..1.5),
            b: rng.gen_range(-0.5..0.5),
            c: 0.1,
            n_x,
        });
    }
    let weights = Weights::random(&graph, seed)?;
    Ok((graph, weights))
}

/// `count` samples uniform in `[-1, 1)` with labels from the plaintext
/// reference, seeded.
pub fn example_inputs(graph: &GraphSpec, count: usize, seed: u64) -> Result<Vec<RingTensor>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x1a9u64);
    let n: usize = graph.input_shape.iter().product();
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            RingTensor::from_f64(graph.input_shape.clone(), &v, graph.fp)
        })
        .collect()
}

/// Group tally of a report's modeled latency by layer kind.
pub fn modeled_by_kind(report: &RunReport) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for l in &report.layers {
        *out.entry(l.kind.clone()).or_insert(0.0) += l.modeled_latency_s;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ConvSpec;

    fn fp() -> FixedPointConfig {
        FixedPointConfig::default()
    }

    fn cfg(graph: GraphSpec, seed: u64) -> SessionConfig {
        SessionConfig {
            graph,
            hw: HardwareProfile::default(),
            ot: OtParams::p32(),
            seed,
        }
    }

    #[test]
    fn weights_file_roundtrip_and_errors() {
        let (g, w) = example_network(fp(), 1).unwrap();
        w.check(&g).unwrap();
        let mut buf = Vec::new();
        w.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PRWS");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 6);
        assert_eq!(u16::from_le_bytes(buf[8..10].try_into().unwrap()), "conv1.weight".len() as u16);
        assert_eq!(&buf[10..22], b"conv1.weight");
        assert_eq!(&buf[22..26], b"PRT1");
        assert_eq!(Weights::read(buf.as_slice()).unwrap(), w);

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(Weights::read(trailing.as_slice()).is_err());
        assert!(Weights::read(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'Q';
        assert!(Weights::read(bad.as_slice()).is_err());

        let short = Weights::new(w.entries()[..5].to_vec()).unwrap();
        assert!(matches!(short.check(&g), Err(Error::Config(_))));
        let t = w.entries()[0].1.clone();
        assert!(Weights::new(vec![("a".into(), t.clone()), ("a".into(), t)]).is_err());
    }

    #[test]
    fn identity_conv_session_returns_input() {
        let g = GraphSpec::new(
            fp(),
            vec![1, 3, 3],
            vec![LayerSpec::conv(
                "id",
                [1, 3, 3],
                ConvSpec {
                    out_channels: 1,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                },
            )
            .unwrap()],
        );
        let w = Weights::new(vec![
            ("id.weight".into(), RingTensor::from_f64(vec![1, 1, 1, 1], &[1.0], fp()).unwrap()),
            ("id.bias".into(), RingTensor::from_f64(vec![1], &[0.0], fp()).unwrap()),
        ])
        .unwrap();
        let x = RingTensor::from_f64(vec![1, 3, 3], &[0.5, -1.0, 2.0, 0.0, 3.25, -0.75, 1.0, 1.5, -2.0], fp()).unwrap();
        let (r0, r1) = run_loopback(&cfg(g, 3), &w, vec![x.clone()], None, DealerMode::Inline).unwrap();
        assert_eq!(r1.logits.as_ref().unwrap()[0], x.to_f64());
        assert!(r0.logits.is_none());
        for r in [&r0, &r1] {
            assert!(r.totals.bytes > 0 && r.totals.rounds > 0 && r.totals.virtual_latency_s > 0.0);
            assert!(r.totals_consistent());
        }
    }

    #[test]
    fn example_network_matches_plain_reference() {
        let (g, w) = example_network(fp(), 5).unwrap();
        let xs = example_inputs(&g, 3, 5).unwrap();
        let labels = vec![0, 1, 2];
        let (_, r1) = run_loopback(&cfg(g.clone(), 5), &w, xs.clone(), Some(labels), DealerMode::Inline).unwrap();
        let raw = r1.raw_logits.clone().unwrap();
        for (x, got) in xs.iter().zip(&raw) {
            assert_eq!(&run_plain_reference(&g, x, &w).unwrap().to_signed(), got);
        }
        assert!(r1.accuracy.is_some());
        assert_eq!(r1.batch, 3);
    }

    #[test]
    fn dealer_modes_give_identical_transcripts() {
        let (g, w) = example_network(fp(), 6).unwrap();
        let xs = example_inputs(&g, 2, 6).unwrap();
        let c = cfg(g, 6);
        let a = run_loopback(&c, &w, xs.clone(), None, DealerMode::Inline).unwrap();
        let b = run_loopback(&c, &w, xs, None, DealerMode::Local).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_graphs_abort_the_handshake() {
        let (g, w) = example_network(fp(), 7).unwrap();
        let xs = example_inputs(&g, 1, 7).unwrap();
        let c0 = cfg(g.clone(), 7);
        let mut g1 = g;
        g1.layers[1].x2act.as_mut().unwrap().w2 += 0.5;
        let c1 = cfg(g1, 7);
        let (mut s0, mut s1) = CorrelatedSource::inline_pair(1, fp());
        let (r0, r1) = crate::transport::run_pair(
            Some(c0.sim()),
            |ch| run_party(&c0, &PartyData::Weights(w.clone()), ch, &mut s0),
            |ch| run_party(&c1, &PartyData::Inputs { samples: xs, labels: None }, ch, &mut s1),
        );
        assert!(r0.unwrap_err().is_protocol_abort());
        assert!(r1.unwrap_err().is_protocol_abort());
    }

    #[test]
    fn wrong_role_data_is_a_config_error() {
        let (g, w) = example_network(fp(), 8).unwrap();
        let c = cfg(g, 8);
        let (mut s0, _) = CorrelatedSource::inline_pair(1, fp());
        let (mut ch, _peer) = Channel::loopback_pair(0, None);
        let err = run_party(&c, &PartyData::Inputs { samples: vec![], labels: None }, &mut ch, &mut s0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let (_, mut s1) = CorrelatedSource::inline_pair(1, fp());
        let err = run_party(&c, &PartyData::Weights(w), &mut ch, &mut s1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn exhausted_randomness_names_the_layer() {
        let (g, w) = example_network(fp(), 9).unwrap();
        let xs = example_inputs(&g, 1, 9).unwrap();
        let c = cfg(g.clone(), 9);
        // enough for the first layer only
        let mut d = Dealer::new(1, fp());
        let (mut i0, mut i1) = (Vec::new(), Vec::new());
        for r in plan_requests(&g).unwrap().iter().take(2) {
            let (a, b) = d.issue(r).unwrap();
            i0.push(a);
            i1.push(b);
        }
        let mut s0 = CorrelatedSource::from_items(PartyId::S0, i0);
        let mut s1 = CorrelatedSource::from_items(PartyId::S1, i1);
        let (r0, _) = crate::transport::run_pair(
            Some(c.sim()),
            |ch| run_party(&c, &PartyData::Weights(w.clone()), ch, &mut s0),
            |ch| run_party(&c, &PartyData::Inputs { samples: xs, labels: None }, ch, &mut s1),
        );
        let err = r0.unwrap_err();
        assert!(err.is_protocol_abort());
        assert!(matches!(&err, Error::Layer { layer, .. } if layer == "act1"), "{err}");
    }

    #[test]
    fn report_json_roundtrips_and_table_groups_kinds() {
        let (g, w) = example_network(fp(), 10).unwrap();
        let xs = example_inputs(&g, 1, 10).unwrap();
        let (_, r1) = run_loopback(&cfg(g, 10), &w, xs, None, DealerMode::Inline).unwrap();
        let json = report_render(&r1, ReportFormat::Json).unwrap();
        assert_eq!(RunReport::from_json(&json).unwrap(), r1);
        let table = report_render(&r1, ReportFormat::Table).unwrap();
        for kind in ["io", "conv", "x2act", "avgpool", "relu", "maxpool", "flatten", "dense", "total"] {
            assert_eq!(table.lines().filter(|l| l.starts_with(&format!("{kind} "))).count(), 1, "{kind}\n{table}");
        }
        assert_eq!(table, report_render(&r1, ReportFormat::Table).unwrap());
    }

    #[test]
    fn relu_dominates_an_all_relu_network() {
        let g = GraphSpec::new(
            fp(),
            vec![4, 8, 8],
            vec![
                LayerSpec::activation("r1", LayerKind::Relu, vec![4, 8, 8]),
                LayerSpec::activation("r2", LayerKind::Relu, vec![4, 8, 8]),
                LayerSpec::flatten("f", vec![4, 8, 8]),
                LayerSpec::dense("fc", 256, 2),
            ],
        );
        let w = Weights::random(&g, 11).unwrap();
        let xs = example_inputs(&g, 1, 11).unwrap();
        let (_, r1) = run_loopback(&cfg(g, 11), &w, xs, None, DealerMode::Inline).unwrap();
        let by_kind = modeled_by_kind(&r1);
        assert!(by_kind["relu"] > 0.9 * r1.totals.modeled_latency_s);
    }

    #[test]
    fn empty_report_renders_zero_totals() {
        let r = RunReport::default();
        let table = report_render(&r, ReportFormat::Table).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("total") && lines[1].contains(" 0 "));
        assert!(r.totals_consistent());
    }

    #[test]
    fn input_batches_split_and_join() {
        let g = reference_cnn(fp());
        let xs = example_inputs(&g, 4, 12).unwrap();
        let joined = join_inputs(&xs).unwrap();
        assert_eq!(joined.shape(), &[4, 1, 8, 8]);
        assert_eq!(split_inputs(&g, &joined).unwrap(), xs);
        assert_eq!(split_inputs(&g, &xs[0]).unwrap(), vec![xs[0].clone()]);
        let wrong = RingTensor::zeros(vec![2, 8, 8], fp());
        assert!(split_inputs(&g, &wrong).is_err());
    }

    #[test]
    fn dealer_files_cover_the_whole_batch() {
        let (g, _) = example_network(fp(), 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p0, p1) = (dir.path().join("s0.pcr"), dir.path().join("s1.pcr"));
        run_dealer(&g, 13, 2, &p0, &p1).unwrap();
        let plan = dealer_plan(&g, 2).unwrap();
        let mut s1 = CorrelatedSource::open(&p1).unwrap();
        for r in &plan {
            s1.take(r).unwrap();
        }
        assert!(matches!(s1.bits(1), Err(Error::Exhausted(_))));
    }

    proptest::proptest! {
        #[test]
        fn totals_are_the_sum_of_the_rows(
            rows in proptest::collection::vec((0u64..1 << 30, 0u64..1000, 0u64..1000, 0.0f64..1.0, 0.0f64..1.0), 0..20),
        ) {
            let layers: Vec<LayerReport> = rows
                .iter()
                .enumerate()
                .map(|(i, &(bytes, messages, rounds, v, m))| LayerReport {
                    id: format!("l{i}"),
                    kind: ["relu", "conv", "io"][i % 3].into(),
                    bytes,
                    messages,
                    rounds,
                    virtual_latency_s: v,
                    modeled_latency_s: m,
                })
                .collect();
            let r = RunReport { totals: RunReport::sum_layers(&layers), layers, ..Default::default() };
            proptest::prop_assert!(r.totals_consistent());
            proptest::prop_assert_eq!(r.totals.bytes, rows.iter().map(|r| r.0).sum::<u64>());
            let json = report_render(&r, ReportFormat::Json).unwrap();
            proptest::prop_assert_eq!(RunReport::from_json(&json).unwrap(), r.clone());
            proptest::prop_assert_eq!(
                report_render(&r, ReportFormat::Table).unwrap(),
                report_render(&r, ReportFormat::Table).unwrap()
            );
        }
    }
}
