use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use thiserror::Error;

use quiclens::analyzer::{analyze_path, Mode};
use quiclens::error::{ConfigError, EvalError, IngestError};
use quiclens::eval::{render_table, score};
use quiclens::model::AnalyzerConfig;
use quiclens::output::{read_jsonl, Format, RecordWriter};
use quiclens::synth::{generate, generate_corpus, CorpusConfig, Labels, Pattern, ScenarioConfig, Trace};

#[derive(Parser)]
#[command(name = "quiclens", version, about = "Reconstruct HTTP request/response objects from encrypted QUIC traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze a pcap or qevents trace and emit objects and connection summaries.
    Analyze {
        input: PathBuf,
        #[command(flatten)]
        opts: AnalyzeOpts,
        /// Output file (standard output when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a labeled synthetic trace.
    Synth(SynthOpts),
    /// Score analyzer output (JSON-Lines) against synthetic labels.
    Eval {
        records: PathBuf,
        labels: PathBuf,
        /// Where to write the JSON report.
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
    },
    /// Generate, analyze and score in one go; all artifacts land in --out-dir.
    Pipeline {
        #[command(flatten)]
        synth: SynthOpts,
        #[command(flatten)]
        opts: AnalyzeOpts,
    },
}

#[derive(Args)]
struct AnalyzeOpts {
    #[arg(long, value_enum, default_value_t = Mode::Offline)]
    mode: Mode,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Request length floor once the first request has been seen (bytes).
    #[arg(long)]
    l_req: Option<u32>,
    /// Request length threshold before any request has been seen (bytes).
    #[arg(long)]
    l_req_first: Option<u32>,
    /// Response length floor (bytes).
    #[arg(long)]
    l_resp: Option<u32>,
    #[arg(long)]
    mtu_init: Option<u32>,
    /// RTT in seconds used when the handshake gives no sample.
    #[arg(long)]
    rtt_default: Option<f64>,
    #[arg(long)]
    idle_rtts: Option<f64>,
    #[arg(long)]
    assoc_max_rtts: Option<f64>,
    /// Maximum requests a single matcher group may hold.
    #[arg(long)]
    n_req_cap: Option<usize>,
}

impl AnalyzeOpts {
    fn config(&self) -> Result<AnalyzerConfig, ConfigError> {
        let mut cfg = AnalyzerConfig::default();
        if let Some(v) = self.l_req {
            cfg.l_req = v;
        }
        if let Some(v) = self.l_req_first {
            cfg.l_req_first = v;
        }
        if let Some(v) = self.l_resp {
            cfg.l_resp = v;
        }
        if let Some(v) = self.mtu_init {
            cfg.mtu_init = v;
        }
        if let Some(v) = self.rtt_default {
            cfg.rtt_default_s = v;
        }
        if let Some(v) = self.idle_rtts {
            cfg.timing.idle_rtts = v;
        }
        if let Some(v) = self.assoc_max_rtts {
            cfg.timing.association_max_rtts = v;
        }
        if let Some(v) = self.n_req_cap {
            cfg.n_req_cap = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthOpts {
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Write trace.pcap instead of trace.qevents.
    #[arg(long)]
    pcap: bool,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    loss_rate: f64,
    #[arg(long, default_value_t = 2)]
    ack_every: u32,
    /// Corpus size (ignored with --pattern).
    #[arg(long, default_value_t = 240)]
    connections: u32,
    /// Most request/response pairs per corpus connection.
    #[arg(long, default_value_t = 5)]
    max_pairs: u32,
    /// Generate a single connection of this pattern instead of a corpus.
    #[arg(long, value_enum)]
    pattern: Option<Pattern>,
    /// Single-connection RTT in seconds.
    #[arg(long, default_value_t = 0.1)]
    rtt: f64,
    #[arg(long, default_value_t = 1252)]
    mtu_up: u32,
    #[arg(long, default_value_t = 1252)]
    mtu_down: u32,
    #[arg(long, default_value_t = 2)]
    pairs: u32,
    /// Send requests in back-to-back groups (web_multiplexed only).
    #[arg(long)]
    interleave: bool,
}

impl SynthOpts {
    fn generate(&self) -> Result<(Trace, Labels), ConfigError> {
        match self.pattern {
            Some(pattern) => generate(&ScenarioConfig {
                rtt_s: self.rtt,
                mtu_up: self.mtu_up,
                mtu_down: self.mtu_down,
                pattern,
                n_pairs: self.pairs,
                loss_rate: self.loss_rate,
                ack_every: self.ack_every,
                seed: self.seed,
                interleave: self.interleave,
            }),
            None => generate_corpus(&CorpusConfig {
                connections: self.connections,
                seed: self.seed,
                loss_rate: self.loss_rate,
                max_pairs: self.max_pairs,
                ack_every: self.ack_every,
                ..CorpusConfig::default()
            }),
        }
    }

    /// Writes the trace and labels; returns the trace path.
    fn write(&self) -> Result<PathBuf, CliError> {
        let (trace, labels) = self.generate()?;
        std::fs::create_dir_all(&self.out_dir)?;
        let trace_path = self.out_dir.join(if self.pcap { "trace.pcap" } else { "trace.qevents" });
        let out = BufWriter::new(File::create(&trace_path)?);
        if self.pcap {
            trace.write_pcap(out)?.flush()?;
        } else {
            trace.write_qevents(out)?;
        }
        let labels_path = self.out_dir.join("labels.json");
        let mut out = BufWriter::new(File::create(&labels_path)?);
        labels.write_json(&mut out)?;
        out.flush()?;
        info!(
            "wrote {} datagrams over {} connections to {}",
            labels.datagrams.len(),
            labels.connections.len(),
            trace_path.display()
        );
        Ok(trace_path)
    }
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("malformed {what}: {source}")]
    Json { what: String, source: serde_json::Error },
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Ingest(IngestError::Io(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Ingest(IngestError::Io(_)) => 1,
            CliError::Ingest(_) | CliError::Eval(_) | CliError::Json { .. } => 2,
            CliError::Config(_) => 3,
        }
    }
}

fn analyze(input: &Path, opts: &AnalyzeOpts, out: Box<dyn Write>) -> Result<(), CliError> {
    let cfg = opts.config()?;
    let mut writer = RecordWriter::new(out, opts.format)?;
    let mut n = 0usize;
    analyze_path(input, &cfg, opts.mode, |r| {
        n += 1;
        writer.write(&r)
    })?;
    writer.finish()?.flush()?;
    info!("{n} records from {}", input.display());
    Ok(())
}

fn eval(records: &Path, labels: &Path, report: &Path) -> Result<(), CliError> {
    let envelopes = read_jsonl(BufReader::new(File::open(records)?))?;
    let labels = Labels::read_json(BufReader::new(File::open(labels)?)).map_err(|e| match e.downcast::<serde_json::Error>() {
        Ok(source) => CliError::Json { what: "labels".into(), source },
        Err(e) => e.into(),
    })?;
    let result = score(&envelopes, &labels)?;
    let mut out = BufWriter::new(File::create(report)?);
    serde_json::to_writer_pretty(&mut out, &result).map_err(io::Error::from)?;
    out.flush()?;
    print!("{}", render_table(&result));
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze { input, opts, out } => {
            let sink: Box<dyn Write> = match out {
                Some(p) => Box::new(BufWriter::new(File::create(p)?)),
                None => Box::new(BufWriter::new(io::stdout().lock())),
            };
            analyze(&input, &opts, sink)
        }
        Command::Synth(opts) => opts.write().map(|_| ()),
        Command::Eval { records, labels, report } => eval(&records, &labels, &report),
        Command::Pipeline { synth, mut opts } => {
            opts.format = Format::Json;
            opts.config()?;
            let trace = synth.write()?;
            let records = synth.out_dir.join("records.jsonl");
            analyze(&trace, &opts, Box::new(BufWriter::new(File::create(&records)?)))?;
            eval(&records, &synth.out_dir.join("labels.json"), &synth.out_dir.join("report.json"))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QUICLENS_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // bad arguments are a configuration error; help and version are not errors
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("quiclens: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
