// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use opp_core::{derive_steering, parse_pipeline, serialize_pipeline, PacketView, PipelineConfig};
use opp_harness::bench::{bench_stream, sweep, table, BenchMode, BenchOptions};
use opp_harness::pcap::{export_pcap, ingest_pcap, IngestOptions};
use opp_harness::replay::{
    flows_of, replay, replay_with_oracle, ReplayOptions, Scenario, DEFAULT_SYNC_EVERY,
};
use opp_harness::traffic::{gen_traffic, TrafficSpec};
use opp_harness::usecase::{self, UseCase};
use opp_iptables::{parse_rules, translate_with, Topology, TranslateOptions, Translation};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "opp",
    version,
    about = "Replay, check and benchmark OPP pipelines"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay traffic through a pipeline and report digests and rates.
    Run(RunArgs),
    /// Throughput sweeps over synthetic pipelines.
    Bench(BenchArgs),
    /// Translate an iptables rule file into a pipeline document.
    Translate(TranslateArgs),
    /// Describe a pipeline and its steering plan, or a capture.
    Inspect(InspectArgs),
    /// Generate synthetic traffic and write it as a pcap file.
    Gen(GenArgs),
}

#[derive(Args)]
struct PipelineSource {
    /// Pipeline document (JSON).
    #[arg(long, conflicts_with_all = ["rules", "use_case"])]
    config: Option<PathBuf>,
    /// iptables rule file; needs --topology.
    #[arg(long, requires = "topology", conflicts_with = "use_case")]
    rules: Option<PathBuf>,
    #[arg(long)]
    topology: Option<PathBuf>,
    /// One of the bundled use cases: firewall, balancer, nat.
    #[arg(long)]
    use_case: Option<UseCase>,
    /// External port range for MASQUERADE, e.g. 1024-65535.
    #[arg(long, value_parser = parse_range)]
    nat_ports: Option<(u16, u16)>,
}

#[derive(Args)]
struct TrafficSource {
    /// Classic pcap capture to replay.
    #[arg(long, conflicts_with = "spec")]
    pcap: Option<PathBuf>,
    /// Traffic spec (JSON) to generate from.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Ingress port of untagged pcap frames.
    #[arg(long, default_value_t = 0)]
    default_port: u16,
    /// Size of the bundled use-case traffic when neither --pcap nor --spec
    /// is given.
    #[arg(long, default_value_t = 5000)]
    packets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    pipeline: PipelineSource,
    #[command(flatten)]
    traffic: TrafficSource,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = opp_core::steering::DEFAULT_BATCH)]
    batch: usize,
    #[arg(long, default_value_t = opp_core::steering::DEFAULT_HASH_SEED)]
    hash_seed: u64,
    /// Packets between controller passes (eviction, port bucket sync).
    #[arg(long, default_value_t = DEFAULT_SYNC_EVERY)]
    sync_every: usize,
    /// Check the run against serial execution; exit 1 on divergence.
    #[arg(long)]
    oracle: bool,
    /// Include per-stage traces of the first --trace-limit packets.
    #[arg(long)]
    trace: bool,
    #[arg(long, default_value_t = 100)]
    trace_limit: usize,
    /// Include every flow's output digest.
    #[arg(long)]
    flow_digests: bool,
    /// Also write the input stream to this pcap file.
    #[arg(long)]
    export: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Stateless,
    Stateful,
    EveryPacketUpdates,
}

impl From<ModeArg> for BenchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Stateless => BenchMode::Stateless,
            ModeArg::Stateful => BenchMode::Stateful,
            ModeArg::EveryPacketUpdates => BenchMode::EveryPacketUpdates,
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ModeArg::Stateless, ModeArg::Stateful])]
    mode: Vec<ModeArg>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4])]
    stages: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4])]
    workers: Vec<usize>,
    #[arg(long, default_value_t = 1_000_000)]
    packets: usize,
    #[arg(long, default_value_t = 64)]
    flows: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = opp_core::steering::DEFAULT_BATCH)]
    batch: usize,
    #[arg(long, default_value_t = opp_core::steering::DEFAULT_HASH_SEED)]
    hash_seed: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the points as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    rules: PathBuf,
    topology: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, value_parser = parse_range)]
    nat_ports: Option<(u16, u16)>,
    #[arg(long)]
    idle_ms: Option<u64>,
    /// Also write the stage layout and NAT plan as JSON.
    #[arg(long)]
    layout: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    pipeline: PipelineSource,
    /// Summarize a capture instead of a pipeline.
    #[arg(long)]
    pcap: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    default_port: u16,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, conflicts_with = "use_case")]
    spec: Option<PathBuf>,
    #[arg(long)]
    use_case: Option<UseCase>,
    #[arg(long, default_value_t = 5000)]
    packets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

type Fallible<T> = Result<T, String>;

fn parse_range(s: &str) -> Result<(u16, u16), String> {
    let (a, b) = s
        .split_once('-')
        .ok_or_else(|| format!("expected A-B, got `{s}`"))?;
    let lo: u16 = a.trim().parse().map_err(|e| format!("{a}: {e}"))?;
    let hi: u16 = b.trim().parse().map_err(|e| format!("{b}: {e}"))?;
    if lo > hi {
        return Err(format!("empty range {lo}-{hi}"));
    }
    Ok((lo, hi))
}

fn read(path: &Path) -> Fallible<String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Fallible<()> {
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn translate_files(rules: &Path, topo: &Path, opts: &TranslateOptions) -> Fallible<Translation> {
    let parsed = parse_rules(&read(rules)?)
        .map_err(|(line, e)| format!("{}:{line}: {e}", rules.display()))?;
    let topo = Topology::from_json(&read(topo)?).map_err(|e| format!("{}: {e}", topo.display()))?;
    translate_with(&parsed, &topo, opts).map_err(|e| e.to_string())
}

fn translate_opts(nat_ports: Option<(u16, u16)>, idle_ms: Option<u64>) -> TranslateOptions {
    let d = TranslateOptions::default();
    TranslateOptions {
        nat_ports: nat_ports.unwrap_or(d.nat_ports),
        idle_timeout_ms: idle_ms.unwrap_or(d.idle_timeout_ms),
    }
}

enum Loaded {
    Config(PipelineConfig),
    Translated(Translation),
}

impl Loaded {
    fn config(&self) -> &PipelineConfig {
        match self {
            Loaded::Config(c) => c,
            Loaded::Translated(t) => &t.config,
        }
    }

    fn scenario(&self) -> Scenario {
        match self {
            Loaded::Config(c) => Scenario::from_config(c.clone()),
            Loaded::Translated(t) => Scenario::from_translation(t),
        }
    }
}

fn load(src: &PipelineSource) -> Fallible<Loaded> {
    if let Some(path) = &src.config {
        let cfg = parse_pipeline(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))?;
        return Ok(Loaded::Config(cfg));
    }
    if let (Some(rules), Some(topo)) = (&src.rules, &src.topology) {
        return translate_files(rules, topo, &translate_opts(src.nat_ports, None))
            .map(Loaded::Translated);
    }
    if let Some(uc) = src.use_case {
        let t = match src.nat_ports {
            Some(p) => usecase::translate_rules(uc.rules(), &translate_opts(Some(p), None)),
            None => usecase::translation(uc),
        };
        return Ok(Loaded::Translated(t));
    }
    Err("give a pipeline: --config, --rules with --topology, or --use-case".into())
}

fn load_traffic(src: &TrafficSource, uc: Option<UseCase>) -> Fallible<(Vec<PacketView>, Value)> {
    if let Some(path) = &src.pcap {
        let cap = ingest_pcap(
            path,
            &IngestOptions {
                default_port: src.default_port,
            },
        )
        .map_err(|e| e.to_string())?;
        let info = json!({
            "source": path.display().to_string(),
            "packets": cap.views.len(),
            "skipped": cap.skipped,
            "undecodable": cap.undecodable,
        });
        return Ok((cap.views, info));
    }
    let (spec, source) = match (&src.spec, uc) {
        (Some(path), _) => {
            let spec: TrafficSpec = serde_json::from_str(&read(path)?)
                .map_err(|e| format!("{}: {e}", path.display()))?;
            (spec, path.display().to_string())
        }
        (None, Some(uc)) => (
            usecase::traffic_spec(uc, src.packets),
            format!("use case {}", uc.name()),
        ),
        (None, None) => {
            return Err("give traffic: --pcap, --spec, or a --use-case to generate for".into())
        }
    };
    let t = gen_traffic(&spec, src.seed).map_err(|e| e.to_string())?;
    let info = json!({
        "source": source,
        "seed": src.seed,
        "packets": t.packets.len(),
        "flows": t.flows.len(),
    });
    Ok((t.packets, info))
}

fn emit(value: &Value, to: Option<&Path>) -> Fallible<()> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    match to {
        Some(p) => write(p, &text),
        None => stdout(&format!("{text}\n")),
    }
}

fn stdout(text: &str) -> Fallible<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(format!("stdout: {e}")),
        _ => Ok(()),
    }
}

fn cmd_run(a: &RunArgs) -> Fallible<ExitCode> {
    let loaded = load(&a.pipeline)?;
    let (packets, input) = load_traffic(&a.traffic, a.pipeline.use_case)?;
    if let Some(path) = &a.export {
        export_pcap(path, &packets).map_err(|e| e.to_string())?;
    }
    let opts = ReplayOptions {
        workers: a.workers.max(1),
        batch: a.batch.max(1),
        hash_seed: a.hash_seed,
        sync_every: a.sync_every,
        trace: a.trace,
        flow_digests: a.flow_digests,
    };
    let scn = loaded.scenario();
    let (run, oracle) = if a.oracle {
        let (run, o) = replay_with_oracle(&scn, &packets, &opts).map_err(|e| e.to_string())?;
        (run, Some(o))
    } else {
        (
            replay(&scn, &packets, &opts).map_err(|e| e.to_string())?,
            None,
        )
    };
    let mut out = json!({ "input": input, "run": run.report });
    if let Some(o) = &oracle {
        out["oracle"] = serde_json::to_value(o).expect("serializes");
    }
    if a.trace {
        let traces: Vec<Value> = run
            .decisions
            .iter()
            .take(a.trace_limit)
            .enumerate()
            .map(|(i, d)| json!({ "index": i, "in": packets[i], "decision": d }))
            .collect();
        out["trace"] = Value::Array(traces);
    }
    emit(&out, a.report.as_deref())?;
    match oracle {
        Some(o) if !o.passed() => {
            eprintln!("oracle: W={} diverges from serial execution", o.workers);
            if let Some(d) = &o.first_divergence {
                eprintln!("first divergent flow {} at position {}", d.flow, d.position);
                for s in &d.steps {
                    eprintln!(
                        "  packet {}: expected {:?} {}  got {:?} {}",
                        s.index,
                        s.expected.verdict,
                        s.expected.packet,
                        s.actual.verdict,
                        s.actual.packet
                    );
                }
            }
            Ok(ExitCode::from(1))
        }
        _ => Ok(ExitCode::SUCCESS),
    }
}

fn cmd_bench(a: &BenchArgs) -> Fallible<ExitCode> {
    let packets = bench_stream(a.packets, a.flows, a.seed);
    let opts = BenchOptions {
        repeats: a.repeats,
        batch: a.batch.max(1),
        hash_seed: a.hash_seed,
        ..Default::default()
    };
    let mut points = Vec::new();
    for &m in &a.mode {
        points.extend(sweep(m.into(), &a.stages, &a.workers, &packets, &opts));
    }
    stdout(&table(&points))?;
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&points).expect("points serialize");
        write(path, &text)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_translate(a: &TranslateArgs) -> Fallible<ExitCode> {
    let t = translate_files(
        &a.rules,
        &a.topology,
        &translate_opts(a.nat_ports, a.idle_ms),
    )?;
    write(&a.output, &serialize_pipeline(&t.config))?;
    if let Some(path) = &a.layout {
        let v = json!({ "layout": t.layout, "nat": t.nat });
        write(path, &serde_json::to_string_pretty(&v).expect("serializes"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_inspect(a: &InspectArgs) -> Fallible<ExitCode> {
    if let Some(path) = &a.pcap {
        let cap = ingest_pcap(
            path,
            &IngestOptions {
                default_port: a.default_port,
            },
        )
        .map_err(|e| e.to_string())?;
        let span = match (cap.views.first(), cap.views.last()) {
            (Some(f), Some(l)) => l.ts.millis() - f.ts.millis(),
            _ => 0,
        };
        emit(
            &json!({
                "packets": cap.views.len(),
                "skipped": cap.skipped,
                "undecodable": cap.undecodable,
                "flows": flows_of(&cap.views).len(),
                "span_ms": span,
            }),
            None,
        )?;
        return Ok(ExitCode::SUCCESS);
    }
    let loaded = load(&a.pipeline)?;
    let cfg = loaded.config();
    let plan = derive_steering(cfg);
    let stages: Vec<Value> = cfg
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            json!({
                "stage": i,
                "name": s.name,
                "kind": s.kind,
                "lookup": s.lookup.as_ref().map(|e| e.selectors.iter().map(|f| f.to_string()).collect::<Vec<_>>()),
                "update": s.update.as_ref().map(|e| e.selectors.iter().map(|f| f.to_string()).collect::<Vec<_>>()),
                "bidirectional": s.lookup.as_ref().is_some_and(|e| e.bidirectional),
                "conditions": s.conditions.len(),
                "entries": s.entries.len(),
                "table_default": s.table_default,
                "capacity": s.capacity(),
                "mode": plan.stage_modes.get(i),
            })
        })
        .collect();
    let mut out = json!({
        "ports": cfg.ports,
        "stages": stages,
        "steering": {
            "key": plan.key.render(),
            "shardability": plan.shardability,
            "shared_stages": plan.shared_stages,
            "metadata_keyed": plan.metadata_keyed,
            "hash_seed": plan.hash_seed,
            "batch": plan.batch,
        },
    });
    if let Loaded::Translated(t) = &loaded {
        out["layout"] = serde_json::to_value(&t.layout).expect("serializes");
        out["nat"] = serde_json::to_value(&t.nat).expect("serializes");
    }
    emit(&out, None)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen(a: &GenArgs) -> Fallible<ExitCode> {
    let spec = match (&a.spec, a.use_case) {
        (Some(path), _) => {
            serde_json::from_str(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))?
        }
        (None, Some(uc)) => usecase::traffic_spec(uc, a.packets),
        (None, None) => return Err("give --spec or --use-case".into()),
    };
    let t = gen_traffic(&spec, a.seed).map_err(|e| e.to_string())?;
    export_pcap(&a.output, &t.packets).map_err(|e| e.to_string())?;
    emit(
        &json!({ "output": a.output.display().to_string(), "packets": t.packets.len(), "flows": t.flows.len() }),
        None,
    )?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Translate(a) => cmd_translate(a),
        Cmd::Inspect(a) => cmd_inspect(a),
        Cmd::Gen(a) => cmd_gen(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("opp: {e}");
        ExitCode::from(2)
    })
}
