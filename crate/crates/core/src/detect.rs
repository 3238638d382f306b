//! Scan probe classification and per-scanner aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, Write};
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{ConnRecord, Protocol};

/// One failed connection attempt attributed to its originator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanProbe {
    pub scanner_ip: IpAddr,
    pub src_port: u16,
    pub target_ip: IpAddr,
    pub target_port: u16,
    pub ts: f64,
}

/// All probes sent by one source IP.
#[derive(Debug, Clone, PartialEq)]
pub struct ScannerProfile {
    scanner_ip: IpAddr,
    probes: Vec<ScanProbe>,
}

impl ScannerProfile {
    /// Fails when `probes` is empty or contains a probe from another source.
    pub fn new(scanner_ip: IpAddr, probes: Vec<ScanProbe>) -> Result<Self, DetectError> {
        if probes.is_empty() {
            return Err(DetectError::EmptyProfile(scanner_ip));
        }
        if let Some(p) = probes.iter().find(|p| p.scanner_ip != scanner_ip) {
            return Err(DetectError::ForeignProbe {
                profile: scanner_ip,
                probe: p.scanner_ip,
            });
        }
        Ok(ScannerProfile { scanner_ip, probes })
    }

    pub fn scanner_ip(&self) -> IpAddr {
        self.scanner_ip
    }

    pub fn probes(&self) -> &[ScanProbe] {
        &self.probes
    }

    pub fn probe_count(&self) -> usize {
        self.probes.len()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("probe classifier needs at least one connection state")]
    EmptyProbeStates,
    #[error("scanner profile for {0} has no probes")]
    EmptyProfile(IpAddr),
    #[error("probe from {probe} does not belong to profile {profile}")]
    ForeignProbe { profile: IpAddr, probe: IpAddr },
}

/// Which connection outcomes count as scan probes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeClassifierConfig {
    probe_states: BTreeSet<String>,
    protocols: BTreeSet<Protocol>,
}

/// Zeek states for attempts that never completed the TCP handshake:
/// no reply (`S0`), rejected (`REJ`), originator SYN answered by a RST
/// (`RSTOS0`) and a half-open SYN without SYN-ACK (`SH`).
pub const DEFAULT_PROBE_STATES: [&str; 4] = ["S0", "REJ", "RSTOS0", "SH"];

impl Default for ProbeClassifierConfig {
    fn default() -> Self {
        ProbeClassifierConfig {
            probe_states: DEFAULT_PROBE_STATES.iter().map(|s| s.to_string()).collect(),
            protocols: [Protocol::Tcp].into_iter().collect(),
        }
    }
}

impl ProbeClassifierConfig {
    pub fn new<S, P>(probe_states: S, protocols: P) -> Result<Self, DetectError>
    where
        S: IntoIterator,
        S::Item: Into<String>,
        P: IntoIterator<Item = Protocol>,
    {
        let probe_states: BTreeSet<String> = probe_states.into_iter().map(Into::into).collect();
        if probe_states.is_empty() {
            return Err(DetectError::EmptyProbeStates);
        }
        Ok(ProbeClassifierConfig {
            probe_states,
            protocols: protocols.into_iter().collect(),
        })
    }

    pub fn probe_states(&self) -> &BTreeSet<String> {
        &self.probe_states
    }

    pub fn protocols(&self) -> &BTreeSet<Protocol> {
        &self.protocols
    }
}

/// Returns the probe for `record` when its protocol and state are configured
/// as scan evidence.
pub fn classify_probe(record: &ConnRecord, cfg: &ProbeClassifierConfig) -> Option<ScanProbe> {
    if !cfg.protocols.contains(&record.proto) || !cfg.probe_states.contains(&record.conn_state) {
        return None;
    }
    Some(ScanProbe {
        scanner_ip: record.orig_ip,
        src_port: record.orig_port,
        target_ip: record.resp_ip,
        target_port: record.resp_port,
        ts: record.ts,
    })
}

/// Groups probes by source IP.
///
/// Profiles come back sorted by address (v4 before v6, then numerically);
/// probes inside a profile keep their input order. Repeated attempts at the
/// same target are all kept.
pub fn aggregate_scanners<I>(probes: I) -> Vec<ScannerProfile>
where
    I: IntoIterator<Item = ScanProbe>,
{
    let mut by_source: BTreeMap<IpAddr, Vec<ScanProbe>> = BTreeMap::new();
    for p in probes {
        by_source.entry(p.scanner_ip).or_default().push(p);
    }
    by_source
        .into_iter()
        .map(|(scanner_ip, probes)| ScannerProfile { scanner_ip, probes })
        .collect()
}

/// Drops profiles with fewer than `epsilon` probes.
pub fn filter_epsilon(profiles: Vec<ScannerProfile>, epsilon: u64) -> Vec<ScannerProfile> {
    profiles
        .into_iter()
        .filter(|p| p.probe_count() as u64 >= epsilon)
        .collect()
}

/// Retained scanners and probes for one ε value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpsilonPoint {
    pub epsilon: u64,
    pub scanners: usize,
    pub probes: u64,
    pub scanner_fraction: f64,
    pub probe_fraction: f64,
}

/// Recounts retained scanners and probes for each ε in `grid`.
pub fn sweep_epsilon(profiles: &[ScannerProfile], grid: &[u64]) -> Vec<EpsilonPoint> {
    let mut counts: Vec<u64> = profiles.iter().map(|p| p.probe_count() as u64).collect();
    counts.sort_unstable();
    // suffix[i] = probes held by profiles counts[i..]
    let mut suffix = vec![0u64; counts.len() + 1];
    for i in (0..counts.len()).rev() {
        suffix[i] = suffix[i + 1] + counts[i];
    }
    let total_scanners = counts.len();
    let total_probes = suffix[0];
    grid.iter()
        .map(|&epsilon| {
            let first = counts.partition_point(|&c| c < epsilon);
            let scanners = total_scanners - first;
            let probes = suffix[first];
            EpsilonPoint {
                epsilon,
                scanners,
                probes,
                scanner_fraction: ratio(scanners as u64, total_scanners as u64),
                probe_fraction: ratio(probes, total_probes),
            }
        })
        .collect()
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Column order of the probe TSV.
pub const PROBE_TSV_HEADER: &str = "scanner_ip\tsrc_port\ttarget_ip\ttarget_port\tts";

#[derive(Debug, Error)]
pub enum ProbeFileError {
    #[error("probe file header must be {PROBE_TSV_HEADER:?}")]
    BadHeader,
    #[error("probe file line {line}: {reason}")]
    BadLine { line: u64, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_probes<'a, W, I>(mut out: W, probes: I) -> io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a ScanProbe>,
{
    writeln!(out, "{PROBE_TSV_HEADER}")?;
    for p in probes {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            p.scanner_ip, p.src_port, p.target_ip, p.target_port, p.ts
        )?;
    }
    Ok(())
}

/// Reads a probe TSV written by [`write_probes`].
pub fn read_probes<R: BufRead>(input: R) -> Result<Vec<ScanProbe>, ProbeFileError> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(|h| h.trim_end_matches('\r')) != Some(PROBE_TSV_HEADER) {
        return Err(ProbeFileError::BadHeader);
    }
    let mut probes = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let line_no = idx as u64 + 2;
        probes.push(
            parse_probe_line(line).map_err(|reason| ProbeFileError::BadLine {
                line: line_no,
                reason,
            })?,
        );
    }
    Ok(probes)
}

fn parse_probe_line(line: &str) -> Result<ScanProbe, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 5 {
        return Err(format!("expected 5 columns, found {}", f.len()));
    }
    let ip = |s: &str| s.parse::<IpAddr>().map_err(|_| format!("invalid IP {s:?}"));
    let port = |s: &str| s.parse::<u16>().map_err(|_| format!("invalid port {s:?}"));
    let ts: f64 = f[4]
        .parse()
        .ok()
        .filter(|t: &f64| t.is_finite() && *t >= 0.0)
        .ok_or_else(|| format!("invalid timestamp {:?}", f[4]))?;
    Ok(ScanProbe {
        scanner_ip: ip(f[0])?,
        src_port: port(f[1])?,
        target_ip: ip(f[2])?,
        target_port: port(f[3])?,
        ts,
    })
}
