use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use duplex_curate::audio::wav::read_wav;
use duplex_curate::ensemble::normalize_word;
use duplex_curate::fixtures::synth::{default_corpus, overlap_grid, overlap_pair_fixture, write_corpus};
use duplex_curate::fixtures::{Fixture, FixtureStore};
use duplex_curate::metrics::diarization::{der_short, der_turn, score};
use duplex_curate::metrics::signal::si_sdr_buffers;
use duplex_curate::metrics::{parse_rttm, rtf_report, wer, RttmSegment};
use duplex_curate::pipeline::{
    check_manifest, connect_backends, manifest_schema, read_manifest, run_with, PipelineConfig, PipelineError, Summary,
};
use duplex_curate::protocol::conformance::{run_conformance, Probe};
use duplex_curate::protocol::mock::{MockBackend, MockConfig};
use duplex_curate::protocol::serve::{serve_stream, serve_tcp};
use duplex_curate::protocol::{Backend, StreamConnection};
use serde_json::json;

/// Exit code when some input files failed.
const EXIT_PARTIAL: u8 = 1;
/// Exit code for unusable configuration or arguments.
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "duplex-curate", version, about = "Curate conversational audio into duplex training manifests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process every source file in the input directory.
    Run(RunArgs),
    /// Score transcripts, diarization, separation or timings.
    #[command(subcommand)]
    Evaluate(Evaluate),
    /// Write the synthetic fixture corpus (mixtures, clean tracks, RTTM, transcripts).
    SynthFixtures {
        #[arg(long)]
        out: PathBuf,
        /// Also write the 27 two-speaker overlap cases.
        #[arg(long)]
        overlap_grid: bool,
    },
    /// Check manifests against the schema and their artifacts on disk.
    ValidateManifest {
        /// Manifest files, or output directories holding `<stem>/manifest.json`.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Run the protocol conformance suite against a backend.
    BackendConformance(ConformanceArgs),
    /// Serve the deterministic mock backends over stdio or TCP.
    MockWorker {
        #[arg(long)]
        fixtures: PathBuf,
        /// Listen on this address instead of stdio.
        #[arg(long)]
        tcp: Option<String>,
    },
    /// Print the manifest JSON schema.
    Schema,
    /// Print the effective configuration as TOML.
    PrintConfig {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set stages.asr=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Reprocess files even when their manifest is complete.
    #[arg(long)]
    no_resume: bool,
}

#[derive(Subcommand)]
enum Evaluate {
    /// Word error rate between two whitespace-tokenized text files.
    Wer {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
    },
    /// DER/JER and the restricted variants between two RTTM files.
    Der {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        collar: f64,
        /// Thresholds for short-segment DER.
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0])]
        short: Vec<f64>,
        #[arg(long, default_value_t = 0.5)]
        turn_window: f64,
        #[arg(long, default_value_t = 0.5)]
        turn_gap: f64,
    },
    /// SI-SDR of an estimate against a reference WAV.
    SiSdr {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Per-stage RTF table from a run summary, or from explicit timings.
    Rtf {
        #[arg(long, conflicts_with_all = ["stage", "duration"])]
        summary: Option<PathBuf>,
        /// `name=seconds`, repeatable.
        #[arg(long)]
        stage: Vec<String>,
        #[arg(long)]
        duration: Option<f64>,
    },
}

#[derive(Args)]
struct ConformanceArgs {
    /// Worker program and arguments, spoken to over stdio.
    #[arg(long, num_args = 1.., allow_hyphen_values = true, conflicts_with_all = ["tcp", "mock"])]
    command: Option<Vec<String>>,
    #[arg(long, conflicts_with = "mock")]
    tcp: Option<String>,
    /// Check the in-process mock backends.
    #[arg(long)]
    mock: bool,
    /// Fixture directory providing the probe audio (and the mock's answers).
    #[arg(long)]
    fixtures: PathBuf,
    /// Fixture stem for the probe; defaults to the first one.
    #[arg(long)]
    stem: Option<String>,
    #[arg(long, default_value_t = 10.0)]
    probe_s: f64,
    #[arg(long, default_value_t = 60.0)]
    deadline_s: f64,
}

/// A failure that maps to the configuration exit code.
#[derive(Debug)]
struct ConfigFailure(String);

impl std::fmt::Display for ConfigFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigFailure {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<ConfigFailure>() { EXIT_CONFIG } else { EXIT_PARTIAL })
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> anyhow::Error {
    ConfigFailure(e.to_string()).into()
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Run(args) => run(args),
        Command::Evaluate(e) => evaluate(e).map(|()| 0),
        Command::SynthFixtures { out, overlap_grid: grid } => synth(&out, grid).map(|()| 0),
        Command::ValidateManifest { paths } => validate(&paths),
        Command::BackendConformance(args) => conformance(args),
        Command::MockWorker { fixtures, tcp } => mock_worker(&fixtures, tcp.as_deref()).map(|()| 0),
        Command::Schema => {
            print!("{}", manifest_schema());
            Ok(0)
        }
        Command::PrintConfig { config, overrides } => {
            let cfg = PipelineConfig::load(config.as_deref(), &overrides).map_err(config_err)?;
            print!("{}", cfg.to_toml());
            Ok(0)
        }
    }
}

fn run(args: RunArgs) -> Result<u8> {
    let mut overrides = args.overrides;
    let quote = |p: &Path| format!("{:?}", p.to_string_lossy());
    if let Some(p) = &args.input {
        overrides.push(format!("input_dir={}", quote(p)));
    }
    if let Some(p) = &args.output {
        overrides.push(format!("output_dir={}", quote(p)));
    }
    if let Some(n) = args.workers {
        overrides.push(format!("worker_count={n}"));
    }
    if args.no_resume {
        overrides.push("resume=false".into());
    }
    let cfg = PipelineConfig::load(args.config.as_deref(), &overrides).map_err(config_err)?;
    let dispatcher = connect_backends(&cfg).map_err(config_err)?;
    let summary = match run_with(&cfg, &dispatcher) {
        Ok(s) => s,
        Err(e @ (PipelineError::Config(_) | PipelineError::Io { .. })) => return Err(config_err(e)),
    };
    print_summary(&summary);
    Ok(if summary.failed_count() > 0 { EXIT_PARTIAL } else { 0 })
}

fn print_summary(summary: &Summary) {
    let done = summary.files.len() - summary.failed_count();
    println!("{} file(s): {done} ok, {} failed", summary.files.len(), summary.failed_count());
    for f in summary.files.iter().filter(|f| f.error.is_some()) {
        println!("  {}: {}", f.stem, f.error.as_deref().unwrap_or_default());
    }
    if let Some(report) = summary.rtf_report() {
        print!("{}", report.render());
    }
}

fn read_tokens(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.split_whitespace().map(normalize_word).filter(|w| !w.is_empty()).collect())
}

fn read_rttm(path: &Path) -> Result<Vec<RttmSegment>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_rttm(&text).with_context(|| format!("parsing {}", path.display()))
}

fn evaluate(e: Evaluate) -> Result<()> {
    let out = match e {
        Evaluate::Wer { reference, hyp } => {
            let b = wer(&read_tokens(&reference)?, &read_tokens(&hyp)?);
            serde_json::to_value(b)?
        }
        Evaluate::Der { reference, hyp, collar, short, turn_window, turn_gap } => {
            let (r, h) = (read_rttm(&reference)?, read_rttm(&hyp)?);
            let full = score(&r, &h, collar)?;
            let mut shorts = serde_json::Map::new();
            for max in short {
                shorts.insert(format!("{max}"), serde_json::to_value(der_short(&r, &h, max, collar)?)?);
            }
            json!({
                "der": full.breakdown,
                "jer": full.jer,
                "mapping": full.mapping,
                "der_short": shorts,
                "der_turn": der_turn(&r, &h, turn_window, turn_gap, collar)?,
            })
        }
        Evaluate::SiSdr { estimate, reference } => {
            let (est, r) = (read_wav(&estimate)?, read_wav(&reference)?);
            let v = si_sdr_buffers(&est, &r)?;
            // JSON has no infinities.
            json!({ "si_sdr_db": if v.is_finite() { json!(v) } else { json!(v.to_string()) } })
        }
        Evaluate::Rtf { summary, stage, duration } => {
            let report = match summary {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    let s: Summary = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                    s.rtf_report().ok_or_else(|| anyhow!("summary holds no processed audio"))?
                }
                None => {
                    let duration = duration.filter(|d| *d > 0.0).ok_or_else(|| config_err("--duration must be positive"))?;
                    let stages = stage
                        .iter()
                        .map(|s| {
                            let (name, t) = s.split_once('=').ok_or_else(|| config_err(format!("bad --stage {s:?}")))?;
                            Ok((name.to_string(), t.parse::<f64>().map_err(|_| config_err(format!("bad --stage {s:?}")))?))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    rtf_report(&stages, duration)
                }
            };
            print!("{}", report.render());
            return Ok(());
        }
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn synth(out: &Path, grid: bool) -> Result<()> {
    let stems = write_corpus(out, &default_corpus())?;
    let mut n = stems.len();
    if grid {
        for spec in overlap_grid() {
            overlap_pair_fixture(&spec).0.write(out)?;
            n += 1;
        }
    }
    println!("wrote {n} fixture(s) to {}", out.display());
    Ok(())
}

fn manifest_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(Result::ok)
                .map(|e| e.path().join("manifest.json"))
                .filter(|m| m.is_file())
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn validate(paths: &[PathBuf]) -> Result<u8> {
    let paths = manifest_paths(paths)?;
    if paths.is_empty() {
        return Err(config_err("no manifests found"));
    }
    let mut bad = 0;
    for p in &paths {
        let problems = match read_manifest(p) {
            Ok(m) => check_manifest(&m, p.parent().unwrap_or(Path::new("."))),
            Err(e) => vec![e.to_string()],
        };
        if problems.is_empty() {
            println!("ok   {}", p.display());
        } else {
            bad += 1;
            println!("FAIL {}", p.display());
            for problem in problems {
                println!("     {problem}");
            }
        }
    }
    Ok(if bad > 0 { EXIT_PARTIAL } else { 0 })
}

fn load_probe_fixture(dir: &Path, stem: Option<&str>) -> Result<(FixtureStore, Fixture)> {
    let store = FixtureStore::load_dir(dir).map_err(config_err)?;
    let stem = match stem {
        Some(s) => s.to_string(),
        None => store.stems().next().ok_or_else(|| config_err(format!("no fixtures in {}", dir.display())))?.to_string(),
    };
    let fx = store.get(&stem).map_err(config_err)?.as_ref().clone();
    Ok((store, fx))
}

fn conformance(args: ConformanceArgs) -> Result<u8> {
    let (store, fx) = load_probe_fixture(&args.fixtures, args.stem.as_deref())?;
    let backend: Arc<dyn Backend> = match (&args.command, &args.tcp, args.mock) {
        (Some(cmd), None, false) if !cmd.is_empty() => Arc::new(StreamConnection::spawn(&cmd[0], &cmd[1..]).map_err(config_err)?),
        (None, Some(addr), false) => Arc::new(StreamConnection::connect_tcp(addr.as_str()).map_err(config_err)?),
        (None, None, true) => Arc::new(MockBackend::new(Arc::new(store), MockConfig::default())),
        _ => bail!(ConfigFailure("give exactly one of --command, --tcp or --mock".into())),
    };
    let report = run_conformance(backend, &Probe::from_fixture(&fx, args.probe_s), Duration::from_secs_f64(args.deadline_s));
    print!("{}", report.render());
    Ok(if report.passed() { 0 } else { EXIT_PARTIAL })
}

fn mock_worker(fixtures: &Path, tcp: Option<&str>) -> Result<()> {
    let store = FixtureStore::load_dir(fixtures).map_err(config_err)?;
    let backend = MockBackend::new(Arc::new(store), MockConfig::default());
    match tcp {
        Some(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            log::info!("mock worker listening on {}", listener.local_addr()?);
            serve_tcp(Arc::new(backend), "mock", listener)?;
        }
        None => {
            let stdout = std::io::stdout();
            serve_stream(&backend, "mock", BufReader::new(std::io::stdin()), stdout.lock())?;
            std::io::stdout().flush()?;
        }
    }
    Ok(())
}
