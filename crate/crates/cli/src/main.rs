use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use secnn::beaver::CorrelatedSource;
use secnn::cost::{build_lut, HardwareProfile};
use secnn::graph::GraphSpec;
use secnn::ot::OtParams;
use secnn::ring::{read_tensor, write_tensor, FixedPointConfig};
use secnn::runtime::{
    dealer_seed, example_inputs, example_network, join_inputs, report_render, run_dealer, run_loopback, run_party,
    run_plain_reference, split_inputs, DealerMode, PartyData, ReportFormat, Role, RunReport, SessionConfig, Weights,
};
use secnn::sharing::PartyId;
use secnn::transport::{Channel, SimParams};
use secnn::{Error, Result};

const EXIT_PROTOCOL: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "secnn", version, about = "Two-server secret-shared CNN inference")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one server, the dealer, or both servers over loopback.
    Run(RunArgs),
    /// Write the per-layer latency table of a graph.
    Lut {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        hw: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a graph in plaintext fixed point and print the logits.
    Plain {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Write the seeded reference network, weights, inputs and hardware file.
    Example {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Loopback,
    Tcp,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, default_value = "server0")]
    role: String,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    hw: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    /// JSON array of class labels for the input batch.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "loopback")]
    mode: Mode,
    #[arg(long, conflicts_with = "connect")]
    listen: Option<String>,
    #[arg(long)]
    connect: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report of this server; of server 1 in loopback mode.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Report of server 0 in loopback mode.
    #[arg(long)]
    peer_report: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Correlated-randomness file written by the dealer. Without it each
    /// server regenerates its half from the session seed.
    #[arg(long)]
    pcr: Option<PathBuf>,
    /// Dealer: inference count, when no input file is given.
    #[arg(long)]
    batch: Option<usize>,
    /// Dealer: output file for server 0.
    #[arg(long)]
    out0: Option<PathBuf>,
    /// Dealer: output file for server 1.
    #[arg(long)]
    out1: Option<PathBuf>,
    /// Seconds to keep retrying `--connect`.
    #[arg(long, default_value_t = 30)]
    connect_timeout: u64,
}

#[derive(Deserialize)]
struct HwFile {
    #[serde(flatten)]
    profile: HardwareProfile,
    #[serde(default)]
    ot_group: Option<String>,
}

fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Local file trouble is a configuration error, not a protocol abort.
fn local(e: Error) -> Error {
    match e {
        Error::Io(e) => config(e.to_string()),
        e => e,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))
}

fn load_hw(path: Option<&Path>) -> Result<(HardwareProfile, OtParams)> {
    let (mut hw, group) = match path {
        Some(p) => {
            let f: HwFile = serde_json::from_str(&read_text(p)?).map_err(|e| config(format!("{}: {e}", p.display())))?;
            (f.profile, f.ot_group)
        }
        None => (HardwareProfile::default(), None),
    };
    let sim = SimParams {
        t_bc: hw.t_bc,
        rt_bw: hw.rt_bw,
    }
    .with_env_overrides()?;
    hw.t_bc = sim.t_bc;
    hw.rt_bw = sim.rt_bw;
    hw.validate()?;
    let ot = match group {
        Some(name) => OtParams::by_name(&name)?,
        None => OtParams::p32(),
    };
    Ok((hw, ot))
}

fn load_graph(path: &Path) -> Result<GraphSpec> {
    GraphSpec::from_json(&read_text(path)?).map_err(|e| match e {
        Error::Json(e) => config(format!("{}: {e}", path.display())),
        e => e,
    })
}

fn load_inputs(graph: &GraphSpec, path: &Path) -> Result<Vec<secnn::ring::RingTensor>> {
    let bytes = fs::read(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
    split_inputs(graph, &read_tensor(bytes.as_slice()).map_err(local)?)
}

fn load_weights(path: &Path) -> Result<Weights> {
    fs::read(path)
        .map_err(|e| config(format!("{}: {e}", path.display())))
        .and_then(|b| Weights::read(b.as_slice()).map_err(local))
}

fn load_labels(path: Option<&Path>) -> Result<Option<Vec<usize>>> {
    path.map(|p| serde_json::from_str(&read_text(p)?).map_err(|e| config(format!("{}: {e}", p.display()))))
        .transpose()
}

fn write_report(report: &RunReport, path: Option<&Path>, format: Format) -> Result<()> {
    let text = report_render(
        report,
        match format {
            Format::Json => ReportFormat::Json,
            Format::Table => ReportFormat::Table,
        },
    )?;
    match path {
        Some(p) => fs::write(p, text).map_err(|e| config(format!("{}: {e}", p.display())))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| config(format!("--{flag} is required here")))
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let role: Role = a.role.parse()?;
    let graph = load_graph(&a.graph)?;
    graph.validate()?;

    if role == Role::Dealer {
        let batch = match (&a.input, a.batch) {
            (Some(p), _) => load_inputs(&graph, p)?.len(),
            (None, Some(b)) => b,
            (None, None) => return Err(config("the dealer needs --input or --batch")),
        };
        return run_dealer(&graph, a.seed, batch, required(&a.out0, "out0")?, required(&a.out1, "out1")?).map_err(local);
    }

    let (hw, ot) = load_hw(a.hw.as_deref())?;
    let cfg = SessionConfig {
        graph,
        hw,
        ot,
        seed: a.seed,
    };

    if a.mode == Mode::Loopback {
        let weights = load_weights(required(&a.weights, "weights")?)?;
        let samples = load_inputs(&cfg.graph, required(&a.input, "input")?)?;
        let labels = load_labels(a.labels.as_deref())?;
        let (r0, r1) = run_loopback(&cfg, &weights, samples, labels, DealerMode::Inline)?;
        if let Some(p) = &a.peer_report {
            write_report(&r0, Some(p), a.format)?;
        }
        return write_report(&r1, a.report.as_deref(), a.format);
    }

    let party = role.party()?;
    let data = match party {
        PartyId::S0 => PartyData::Weights(load_weights(required(&a.weights, "weights")?)?),
        PartyId::S1 => PartyData::Inputs {
            samples: load_inputs(&cfg.graph, required(&a.input, "input")?)?,
            labels: load_labels(a.labels.as_deref())?,
        },
    };
    let mut src = match &a.pcr {
        Some(p) => CorrelatedSource::open(p).map_err(local)?,
        None => CorrelatedSource::local(dealer_seed(a.seed), cfg.graph.fp, party),
    };
    let sim = Some(cfg.sim());
    let mut ch = match (&a.listen, &a.connect) {
        (Some(addr), None) => {
            let listener = TcpListener::bind(addr).map_err(|e| config(format!("listen {addr}: {e}")))?;
            Channel::tcp_accept(party, 0, &listener, sim)?
        }
        (None, Some(addr)) => {
            Channel::tcp_connect(party, 0, addr.as_str(), Duration::from_secs(a.connect_timeout), sim)?
        }
        _ => return Err(config("tcp mode needs exactly one of --listen and --connect")),
    };
    let report = run_party(&cfg, &data, &mut ch, &mut src)?;
    write_report(&report, a.report.as_deref(), a.format)
}

fn cmd_example(seed: u64, count: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (graph, weights) = example_network(FixedPointConfig::default(), seed)?;
    let inputs = example_inputs(&graph, count, seed)?;
    let labels = inputs
        .iter()
        .map(|x| {
            let y = run_plain_reference(&graph, x, &weights)?.to_f64();
            Ok((0..y.len()).fold(0, |best, i| if y[i] > y[best] { i } else { best }))
        })
        .collect::<Result<Vec<usize>>>()?;
    graph.save(&dir.join("graph.json"))?;
    weights.save(&dir.join("weights.bin"))?;
    let mut buf = Vec::new();
    write_tensor(&mut buf, &join_inputs(&inputs)?)?;
    fs::write(dir.join("input.bin"), buf)?;
    fs::write(dir.join("labels.json"), serde_json::to_string(&labels)? + "\n")?;
    fs::write(
        dir.join("hw.json"),
        serde_json::to_string_pretty(&HardwareProfile::default())? + "\n",
    )?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run(a) => cmd_run(&a),
        Cmd::Lut { graph, hw, out } => {
            let (hw, _) = load_hw(hw.as_deref())?;
            build_lut(&load_graph(&graph)?, &hw)?.export(&out).map_err(local)
        }
        Cmd::Plain { graph, weights, input } => {
            let graph = load_graph(&graph)?;
            let weights = load_weights(&weights)?;
            let logits = load_inputs(&graph, &input)?
                .iter()
                .map(|x| Ok(run_plain_reference(&graph, x, &weights)?.to_f64()))
                .collect::<Result<Vec<_>>>()?;
            println!("{}", serde_json::to_string(&logits)?);
            Ok(())
        }
        Cmd::Example { seed, count, out_dir } => cmd_example(seed, count, &out_dir).map_err(local),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("secnn: {e}");
            ExitCode::from(if e.is_protocol_abort() { EXIT_PROTOCOL } else { EXIT_CONFIG })
        }
    }
}
