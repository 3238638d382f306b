//! Opening inputs and sniffing their format.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read};
use std::path::Path;

use scancamp::config::RunConfig;
use scancamp::detect::{read_probes, ScanProbe, PROBE_TSV_HEADER};
use scancamp::ingest::{read_conn_log, ConnLogReader, LogFormat, ParseMode};
use scancamp::pipeline::detect_probes;
use tracing::info;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Log(LogFormat),
    Probes,
}

type Source = BufReader<Box<dyn Read>>;

fn open(path: &Path) -> Result<Source, CliError> {
    let inner: Box<dyn Read> = if path == Path::new("-") {
        Box::new(io::stdin())
    } else {
        Box::new(File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?)
    };
    Ok(BufReader::with_capacity(1 << 16, inner))
}

/// Probe TSV by its header, Zeek by a leading `#`, CSV otherwise.
fn sniff(src: &mut Source) -> io::Result<InputKind> {
    let head = src.fill_buf()?;
    Ok(if head.starts_with(PROBE_TSV_HEADER.as_bytes()) {
        InputKind::Probes
    } else if head.starts_with(b"#") {
        InputKind::Log(LogFormat::ZeekTsv)
    } else {
        InputKind::Log(LogFormat::GenericCsv)
    })
}

fn open_sniffed(path: &Path, kind: Option<InputKind>) -> Result<(Source, InputKind), CliError> {
    let mut src = open(path)?;
    let kind = match kind {
        Some(k) => k,
        None => sniff(&mut src).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?,
    };
    Ok((src, kind))
}

fn log_reader(
    path: &Path,
    src: Source,
    format: LogFormat,
    mode: ParseMode,
) -> Result<ConnLogReader<Source>, CliError> {
    read_conn_log(src, format, mode)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Opens a connection log; probe files are rejected.
pub fn open_log(
    path: &Path,
    kind: Option<InputKind>,
    mode: ParseMode,
) -> Result<ConnLogReader<Source>, CliError> {
    match open_sniffed(path, kind)? {
        (_, InputKind::Probes) => Err(CliError::Input(format!(
            "{}: already a probe file; detect expects a connection log",
            path.display()
        ))),
        (src, InputKind::Log(format)) => log_reader(path, src, format, mode),
    }
}

/// Probes from a probe TSV, or detected from a connection log.
///
/// A probe TSV carries no connection state, so only the subnet restriction
/// applies to it.
pub fn load_probes(
    path: &Path,
    kind: Option<InputKind>,
    cfg: &RunConfig,
) -> Result<Vec<ScanProbe>, CliError> {
    let (src, kind) = open_sniffed(path, kind)?;
    match kind {
        InputKind::Probes => {
            let mut probes = read_probes(src)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            if let Some(filter) = cfg.subnet_filter()? {
                probes.retain(|p| filter.contains(p.target_ip));
            }
            info!(probes = probes.len(), "read probe file");
            Ok(probes)
        }
        InputKind::Log(format) => {
            let mode = if cfg.strict {
                ParseMode::Strict
            } else {
                ParseMode::Lenient
            };
            let mut reader = log_reader(path, src, format, mode)?;
            let (probes, counts) =
                detect_probes(reader.by_ref(), cfg).map_err(|e| prefix(path, e.into()))?;
            info!(
                records = counts.records,
                probes = counts.probes,
                malformed = reader.error_count(),
                "read log"
            );
            Ok(probes)
        }
    }
}

pub fn prefix(path: &Path, e: CliError) -> CliError {
    match e {
        CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
        other => other,
    }
}
