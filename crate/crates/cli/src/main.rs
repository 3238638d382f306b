//! `scancamp` command-line interface.

mod input;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scancamp::campaign::write_distributions_tsv;
use scancamp::cluster::{cut, extract_campaigns, sweep_threshold};
use scancamp::config::{ConfigError, RunConfig, Scope};
use scancamp::detect::{aggregate_scanners, sweep_epsilon, write_probes};
use scancamp::geo::{write_geo_csv, GeoDatabase};
use scancamp::ingest::{write_zeek_log, LogFormat, ParseMode, Protocol};
use scancamp::pipeline::{correlate_probes, detect_probes, PipelineError};
use scancamp::similarity::Feature;
use scancamp::synth::{
    evaluate_campaigns, pairwise_eval, read_truth_tsv, write_truth_tsv, GroundTruth, Scenario,
};
use scancamp::Report;
use tracing::info;

use crate::input::{load_probes, open_log, InputKind};

#[derive(Parser, Debug)]
#[command(
    name = "scancamp",
    version,
    about = "Detect port scans and group scanners into campaigns"
)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract scan probes from a connection log as TSV.
    Detect {
        input: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Cluster scanners and write the campaign report as JSON.
    Correlate {
        /// Probe TSV or connection log; `-` reads stdin.
        input: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Write the similarity matrix as TSV.
        #[arg(long)]
        matrix_out: Option<PathBuf>,
        /// Write the merge list as TSV.
        #[arg(long)]
        dendrogram_out: Option<PathBuf>,
    },
    /// Cluster count for each similarity cutoff in a grid.
    SweepT {
        input: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Comma list or `start:stop:step`.
        #[arg(long, default_value = "0:1:0.05")]
        grid: String,
        /// Add pairwise precision, recall and F1 against a truth file.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Retained scanners and probes for each probe threshold in a grid.
    SweepEpsilon {
        input: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "0,1,2,3,5,10,20,50,100")]
        grid: String,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Plot-ready distributions of probe counts and ports.
    Stats {
        input: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Generate a labeled synthetic connection log from a scenario file.
    Synth {
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        log_out: PathBuf,
        #[arg(long)]
        truth_out: PathBuf,
        /// Geolocation CSV for the generated sources.
        #[arg(long)]
        geo_out: Option<PathBuf>,
    },
    /// Score a report against a truth file.
    Eval {
        report: PathBuf,
        truth: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

/// Parameters shared by the analysis commands. Flags win over `--config`.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// JSON file with any subset of the run parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Deployment scope: sets ε to 10 (backbone), 5 (isp) or 0 (enterprise).
    #[arg(long)]
    scope: Option<Scope>,
    /// Minimum probes per scanner.
    #[arg(long)]
    epsilon: Option<u64>,
    /// Largest destination/source port count classed as "few".
    #[arg(long)]
    x: Option<usize>,
    /// Similarity cutoff in [0, 1].
    #[arg(long)]
    t: Option<f64>,
    /// Geolocation tolerance in degrees.
    #[arg(long)]
    d: Option<f64>,
    /// Feature weight, e.g. `--weight location=0`; repeatable.
    #[arg(long = "weight", value_name = "FEATURE=W")]
    weights: Vec<String>,
    /// Connection states counted as probes, comma separated.
    #[arg(long, value_delimiter = ',')]
    probe_states: Option<Vec<String>>,
    /// Protocols counted as probes, comma separated.
    #[arg(long, value_delimiter = ',')]
    protocols: Option<Vec<String>>,
    /// Geolocation CSV (`network,country,lat,lon`).
    #[arg(long)]
    geo_db: Option<PathBuf>,
    /// Only keep records whose responder lies in this prefix.
    #[arg(long)]
    subnet: Option<String>,
    /// Abort on the first malformed log line.
    #[arg(long)]
    strict: bool,
    /// Input format; detected from the first line when omitted.
    #[arg(long, value_parser = ["zeek", "csv", "probes"])]
    format: Option<String>,
    /// Worker threads for the similarity matrix.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Input(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Input(_) => "input",
            CliError::Internal(_) => "internal",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Input(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Invalid(_) => CliError::Usage(e.to_string()),
            ConfigError::Read { .. } | ConfigError::Parse { .. } => CliError::Input(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(c) => c.into(),
            PipelineError::Ingest(_) => CliError::Input(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

fn write_err(e: io::Error) -> CliError {
    CliError::Internal(format!("write failed: {e}"))
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(scope) = self.scope {
            cfg.epsilon = scope.default_epsilon();
        }
        if let Some(e) = self.epsilon {
            cfg.epsilon = e;
        }
        if let Some(x) = self.x {
            cfg.x = x;
        }
        if let Some(t) = self.t {
            cfg.t = t;
        }
        if let Some(d) = self.d {
            cfg.d = d;
        }
        for spec in &self.weights {
            let (name, value) = spec.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("--weight expects FEATURE=W, got {spec:?}"))
            })?;
            let feature: Feature =
                name.parse()
                    .map_err(|e: scancamp::similarity::SimilarityError| {
                        CliError::Usage(e.to_string())
                    })?;
            let value: f64 = value.parse().map_err(|_| {
                CliError::Usage(format!("--weight {name}: {value:?} is not a number"))
            })?;
            cfg.weights = cfg
                .weights
                .with(feature, value)
                .map_err(|e| CliError::Usage(e.to_string()))?;
        }
        if let Some(states) = &self.probe_states {
            cfg.probe_states = states.clone();
        }
        if let Some(protocols) = &self.protocols {
            cfg.protocols = protocols
                .iter()
                .map(|p| p.parse::<Protocol>().unwrap())
                .collect();
        }
        if let Some(path) = &self.geo_db {
            cfg.geo_db = Some(path.clone());
        }
        if let Some(subnet) = &self.subnet {
            cfg.subnet = Some(subnet.clone());
        }
        cfg.strict |= self.strict;
        if let Some(n) = self.threads {
            cfg.threads = Some(n);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn format(&self) -> Option<InputKind> {
        self.format.as_deref().map(|f| match f {
            "zeek" => InputKind::Log(LogFormat::ZeekTsv),
            "csv" => InputKind::Log(LogFormat::GenericCsv),
            _ => InputKind::Probes,
        })
    }
}

fn parse_mode(cfg: &RunConfig) -> ParseMode {
    if cfg.strict {
        ParseMode::Strict
    } else {
        ParseMode::Lenient
    }
}

fn load_geo(cfg: &RunConfig) -> Result<GeoDatabase, CliError> {
    match &cfg.geo_db {
        None => Ok(GeoDatabase::empty()),
        Some(path) => {
            let file = File::open(path).map_err(io_err(path))?;
            let db = GeoDatabase::from_csv(BufReader::new(file))
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            info!(entries = db.len(), "loaded geolocation database");
            Ok(db)
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    match path {
        None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
        Some(p) if p == Path::new("-") => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
        Some(p) => {
            let file =
                File::create(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(file)))
        }
    }
}

fn finish(mut out: Box<dyn Write>) -> Result<(), CliError> {
    out.flush().map_err(write_err)
}

/// Parses `a,b,c` or `start:stop:step` (stop inclusive within rounding).
fn parse_float_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Usage(format!("invalid grid {s:?}"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let [start, stop, step]: [f64; 3] = [parts[0], parts[1], parts[2]]
            .map(|p| p.trim().parse::<f64>())
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad())?
            .try_into()
            .map_err(|_| bad())?;
        if step.is_nan() || step <= 0.0 || stop < start {
            return Err(bad());
        }
        let steps = ((stop - start) / step + 1e-9).floor() as usize;
        // Rounded to 12 places so 0.1 * 3 prints as 0.3.
        return Ok((0..=steps)
            .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
            .collect());
    }
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect()
}

fn parse_int_grid(s: &str) -> Result<Vec<u64>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Usage(format!("invalid grid {s:?}")))
        })
        .collect()
}

fn read_truth(path: &Path) -> Result<GroundTruth, CliError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_truth_tsv(BufReader::new(file)).map_err(io_err(path))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Detect {
            input,
            run,
            output: out,
        } => {
            let cfg = run.resolve()?;
            let kind = run.format();
            let mut reader = open_log(&input, kind, parse_mode(&cfg))?;
            let (probes, counts) = detect_probes(reader.by_ref(), &cfg)
                .map_err(|e| input::prefix(&input, e.into()))?;
            let scanners = aggregate_scanners(probes.iter().copied());
            let mut w = output(out.as_deref())?;
            write_probes(&mut w, &probes).map_err(write_err)?;
            finish(w)?;
            eprintln!(
                "records={} malformed={} outside_subnet={} probes={} scanners={}",
                counts.records,
                reader.error_count(),
                counts.outside_subnet,
                counts.probes,
                scanners.len()
            );
            Ok(())
        }
        Command::Correlate {
            input,
            run,
            output: out,
            matrix_out,
            dendrogram_out,
        } => {
            let cfg = run.resolve()?;
            let geo = load_geo(&cfg)?;
            let probes = load_probes(&input, run.format(), &cfg)?;
            let c = correlate_probes(probes, &cfg, &geo)?;
            info!(campaigns = c.report.campaigns.len(), "clustering done");
            if let Some(path) = matrix_out {
                let mut w = output(Some(&path))?;
                if let Some(m) = &c.matrix {
                    m.write_tsv(&mut w).map_err(write_err)?;
                }
                finish(w)?;
            }
            if let Some(path) = dendrogram_out {
                let mut w = output(Some(&path))?;
                if let Some(dg) = &c.dendrogram {
                    dg.write_tsv(&mut w).map_err(write_err)?;
                }
                finish(w)?;
            }
            let mut w = output(out.as_deref())?;
            w.write_all(c.report.to_canonical_json().as_bytes())
                .map_err(write_err)?;
            finish(w)
        }
        Command::SweepT {
            input,
            run,
            grid,
            truth,
            output: out,
        } => {
            let cfg = run.resolve()?;
            let grid = parse_float_grid(&grid)?;
            let truth = truth.as_deref().map(read_truth).transpose()?;
            let geo = load_geo(&cfg)?;
            let probes = load_probes(&input, run.format(), &cfg)?;
            let c = correlate_probes(probes, &cfg, &geo)?;
            let mut w = output(out.as_deref())?;
            let write = |w: &mut Box<dyn Write>| -> io::Result<()> {
                match &truth {
                    None => writeln!(w, "t\tclusters")?,
                    Some(_) => writeln!(w, "t\tclusters\tprecision\trecall\tf1")?,
                }
                let Some(dg) = &c.dendrogram else {
                    for t in &grid {
                        match &truth {
                            None => writeln!(w, "{t}\t0")?,
                            Some(truth) => {
                                let s =
                                    pairwise_eval(std::iter::empty::<&[std::net::IpAddr]>(), truth);
                                writeln!(w, "{t}\t0\t{}\t{}\t{}", s.precision, s.recall, s.f1)?
                            }
                        }
                    }
                    return Ok(());
                };
                for (t, clusters) in sweep_threshold(dg, &grid) {
                    match &truth {
                        None => writeln!(w, "{t}\t{clusters}")?,
                        Some(truth) => {
                            let split = extract_campaigns(cut(dg, t));
                            let s = evaluate_campaigns(&split.campaigns, truth);
                            writeln!(
                                w,
                                "{t}\t{clusters}\t{}\t{}\t{}",
                                s.precision, s.recall, s.f1
                            )?
                        }
                    }
                }
                Ok(())
            };
            write(&mut w).map_err(write_err)?;
            finish(w)
        }
        Command::SweepEpsilon {
            input,
            run,
            grid,
            output: out,
        } => {
            let cfg = run.resolve()?;
            let grid = parse_int_grid(&grid)?;
            let probes = load_probes(&input, run.format(), &cfg)?;
            let profiles = aggregate_scanners(probes);
            let mut w = output(out.as_deref())?;
            let write = |w: &mut Box<dyn Write>| -> io::Result<()> {
                writeln!(
                    w,
                    "epsilon\tscanners\tprobes\tscanner_fraction\tprobe_fraction"
                )?;
                for p in sweep_epsilon(&profiles, &grid) {
                    writeln!(
                        w,
                        "{}\t{}\t{}\t{}\t{}",
                        p.epsilon, p.scanners, p.probes, p.scanner_fraction, p.probe_fraction
                    )?;
                }
                Ok(())
            };
            write(&mut w).map_err(write_err)?;
            finish(w)
        }
        Command::Stats {
            input,
            run,
            output: out,
        } => {
            let cfg = run.resolve()?;
            let geo = load_geo(&cfg)?;
            let probes = load_probes(&input, run.format(), &cfg)?;
            let c = correlate_probes(probes, &cfg, &geo)?;
            let s = &c.report.stats;
            eprintln!(
                "scanners={} probes={} campaigns={} distributed_scanners={} distributed_fraction={}",
                s.scanners, s.probes, s.campaigns, s.distributed_scanners, s.distributed_fraction
            );
            let mut w = output(out.as_deref())?;
            write_distributions_tsv(s, &mut w).map_err(write_err)?;
            finish(w)
        }
        Command::Synth {
            scenario,
            seed,
            log_out,
            truth_out,
            geo_out,
        } => {
            let text = std::fs::read_to_string(&scenario).map_err(io_err(&scenario))?;
            let mut sc: Scenario = serde_json::from_str(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", scenario.display())))?;
            if let Some(seed) = seed {
                sc.seed = seed;
            }
            let ds = sc.generate().map_err(|e| CliError::Input(e.to_string()))?;
            let mut w = output(Some(&log_out))?;
            write_zeek_log(&mut w, &ds.records).map_err(write_err)?;
            finish(w)?;
            let mut w = output(Some(&truth_out))?;
            write_truth_tsv(&ds.truth, &mut w).map_err(write_err)?;
            finish(w)?;
            if let Some(path) = geo_out {
                let mut w = output(Some(&path))?;
                write_geo_csv(&mut w, &ds.geo).map_err(|e| CliError::Internal(e.to_string()))?;
                finish(w)?;
            }
            eprintln!(
                "records={} probes={} scanners={}",
                ds.records.len(),
                ds.probe_records(),
                ds.truth.labels.len()
            );
            Ok(())
        }
        Command::Eval {
            report,
            truth,
            output: out,
        } => {
            let text = std::fs::read_to_string(&report).map_err(io_err(&report))?;
            let report: Report = Report::from_json(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", report.display())))?;
            let truth = read_truth(&truth)?;
            let scores = pairwise_eval(
                report.campaigns.iter().map(|c| c.members.as_slice()),
                &truth,
            );
            let mut w = output(out.as_deref())?;
            let json =
                serde_json::to_string(&scores).map_err(|e| CliError::Internal(e.to_string()))?;
            writeln!(w, "{json}").map_err(write_err)?;
            finish(w)
        }
    }
}

fn init_threads(cli: &Cli) -> Result<(), CliError> {
    let threads = match &cli.command {
        Command::Correlate { run, .. }
        | Command::SweepT { run, .. }
        | Command::Stats { run, .. } => run.threads,
        _ => None,
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            if code != 0 {
                eprintln!("error\tusage\t{}", e.kind());
            }
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level)),
        )
        .init();

    match init_threads(&cli).and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "error\t{}\t{}",
                e.kind(),
                e.message().replace(['\t', '\n'], " ")
            );
            ExitCode::from(e.code())
        }
    }
}
