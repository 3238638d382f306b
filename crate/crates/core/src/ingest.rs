//! Connection log ingestion.
//!
//! Two input formats are understood: the tab-separated `conn.log` written by
//! Zeek (with its `#`-prefixed metadata lines) and a plain CSV whose header
//! row uses the same field names. Field names are matched with or without the
//! Zeek `id.` prefix, so `id.orig_h` and `orig_h` are equivalent.

use std::fmt;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::IpAddr;
use std::str::FromStr;

use ipnet::IpNet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Transport protocol of a connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Tcp,
    Udp,
    Icmp,
    Other,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Tcp => "tcp",
            Protocol::Udp => "udp",
            Protocol::Icmp => "icmp",
            Protocol::Other => "other",
        }
    }
}

impl FromStr for Protocol {
    type Err = std::convert::Infallible;

    /// Unrecognized protocol names map to [`Protocol::Other`].
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "tcp" => Protocol::Tcp,
            "udp" => Protocol::Udp,
            "icmp" | "icmp6" | "ipv6-icmp" => Protocol::Icmp,
            _ => Protocol::Other,
        })
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One summarized transport connection.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnRecord {
    pub ts: f64,
    pub orig_ip: IpAddr,
    pub orig_port: u16,
    pub resp_ip: IpAddr,
    pub resp_port: u16,
    pub proto: Protocol,
    /// Monitor state token, kept verbatim (`S0`, `SF`, `REJ`, ...).
    pub conn_state: String,
    pub history: Option<String>,
}

/// Why a single data row could not be turned into a [`ConnRecord`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("expected {expected} columns, found {found}")]
    ColumnCount { expected: usize, found: usize },
    #[error("field `{field}` is unset")]
    Unset { field: &'static str },
    #[error("field `{field}`: invalid IP address {value:?}")]
    InvalidIp { field: &'static str, value: String },
    #[error("field `{field}`: invalid port {value:?}")]
    InvalidPort { field: &'static str, value: String },
    #[error("invalid timestamp {0:?}")]
    InvalidTimestamp(String),
    #[error("originator and responder use different IP versions")]
    MixedFamilies,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing header: {0}")]
    MissingHeader(String),
    #[error("unsupported log format {0:?}")]
    UnsupportedFormat(String),
    #[error("line {line}: {source}")]
    Malformed {
        line: u64,
        #[source]
        source: ParseError,
    },
    #[error("invalid subnet {0:?}: {1}")]
    InvalidSubnet(String, String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// The seven required field names, in canonical column order.
pub const REQUIRED_FIELDS: [&str; 7] = [
    "ts",
    "orig_h",
    "orig_p",
    "resp_h",
    "resp_p",
    "proto",
    "conn_state",
];

/// Column positions of the fields a [`ConnRecord`] is built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    ts: usize,
    orig_h: usize,
    orig_p: usize,
    resp_h: usize,
    resp_p: usize,
    proto: usize,
    conn_state: usize,
    history: Option<usize>,
    width: usize,
}

impl Schema {
    /// The seven required fields in canonical order, nothing else.
    pub fn identity() -> Self {
        Schema {
            ts: 0,
            orig_h: 1,
            orig_p: 2,
            resp_h: 3,
            resp_p: 4,
            proto: 5,
            conn_state: 6,
            history: None,
            width: 7,
        }
    }

    /// Builds a schema from header column names.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, IngestError> {
        let find = |wanted: &str| {
            names
                .iter()
                .position(|n| canonical_name(n.as_ref()) == wanted)
        };
        let mut cols = [0usize; 7];
        for (slot, field) in cols.iter_mut().zip(REQUIRED_FIELDS) {
            *slot = find(field).ok_or_else(|| {
                IngestError::MissingHeader(format!("required field `{field}` not declared"))
            })?;
        }
        Ok(Schema {
            ts: cols[0],
            orig_h: cols[1],
            orig_p: cols[2],
            resp_h: cols[3],
            resp_p: cols[4],
            proto: cols[5],
            conn_state: cols[6],
            history: find("history"),
            width: names.len(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

fn canonical_name(name: &str) -> &str {
    let name = name.trim();
    name.strip_prefix("id.").unwrap_or(name)
}

/// Placeholder tokens for absent values.
#[derive(Debug, Clone)]
struct Placeholders {
    unset: String,
    empty: String,
}

impl Default for Placeholders {
    fn default() -> Self {
        Placeholders {
            unset: "-".to_string(),
            empty: "(empty)".to_string(),
        }
    }
}

impl Placeholders {
    fn is_absent(&self, value: &str) -> bool {
        value.is_empty() || value == self.unset || value == self.empty
    }
}

/// Parses one tab-separated data row.
pub fn parse_conn_line(line: &str, schema: &Schema) -> Result<ConnRecord, ParseError> {
    let fields: Vec<&str> = line.split('\t').collect();
    parse_fields(&fields, schema)
}

/// Parses an already split data row.
pub fn parse_fields<S: AsRef<str>>(
    fields: &[S],
    schema: &Schema,
) -> Result<ConnRecord, ParseError> {
    parse_fields_with(fields, schema, &Placeholders::default())
}

fn parse_fields_with<S: AsRef<str>>(
    fields: &[S],
    schema: &Schema,
    marks: &Placeholders,
) -> Result<ConnRecord, ParseError> {
    if fields.len() != schema.width {
        return Err(ParseError::ColumnCount {
            expected: schema.width,
            found: fields.len(),
        });
    }
    let get = |idx: usize, field: &'static str| {
        let v = fields[idx].as_ref().trim();
        if marks.is_absent(v) {
            Err(ParseError::Unset { field })
        } else {
            Ok(v)
        }
    };
    let ip = |idx, field| {
        let v = get(idx, field)?;
        v.parse::<IpAddr>().map_err(|_| ParseError::InvalidIp {
            field,
            value: v.to_string(),
        })
    };
    let port = |idx, field| {
        let v = get(idx, field)?;
        v.parse::<u16>().map_err(|_| ParseError::InvalidPort {
            field,
            value: v.to_string(),
        })
    };

    let ts_raw = get(schema.ts, "ts")?;
    let ts: f64 = ts_raw
        .parse()
        .ok()
        .filter(|t: &f64| t.is_finite() && *t >= 0.0)
        .ok_or_else(|| ParseError::InvalidTimestamp(ts_raw.to_string()))?;
    let orig_ip = ip(schema.orig_h, "orig_h")?;
    let orig_port = port(schema.orig_p, "orig_p")?;
    let resp_ip = ip(schema.resp_h, "resp_h")?;
    let resp_port = port(schema.resp_p, "resp_p")?;
    if orig_ip.is_ipv4() != resp_ip.is_ipv4() {
        return Err(ParseError::MixedFamilies);
    }
    let proto = get(schema.proto, "proto")?
        .parse()
        .unwrap_or(Protocol::Other);
    let conn_state = get(schema.conn_state, "conn_state")?.to_string();
    let history = schema
        .history
        .map(|i| fields[i].as_ref().trim())
        .filter(|h| !marks.is_absent(h))
        .map(str::to_string);

    Ok(ConnRecord {
        ts,
        orig_ip,
        orig_port,
        resp_ip,
        resp_port,
        proto,
        conn_state,
        history,
    })
}

/// Input log format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    ZeekTsv,
    GenericCsv,
}

impl FromStr for LogFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zeek_tsv" | "zeek" | "tsv" => Ok(LogFormat::ZeekTsv),
            "generic_csv" | "csv" => Ok(LogFormat::GenericCsv),
            other => Err(IngestError::UnsupportedFormat(other.to_string())),
        }
    }
}

/// What to do with rows that fail to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Drop the row and count it.
    #[default]
    Lenient,
    /// Yield the error and stop.
    Strict,
}

/// Opens a connection log for streaming.
///
/// The header is consumed eagerly, so a missing or incomplete header is
/// reported here rather than on the first call to `next`.
pub fn read_conn_log<R: Read>(
    source: R,
    format: LogFormat,
    mode: ParseMode,
) -> Result<ConnLogReader<R>, IngestError> {
    let inner = match format {
        LogFormat::ZeekTsv => Inner::Zeek(ZeekRows::open(source)?),
        LogFormat::GenericCsv => Inner::Csv(CsvRows::open(source)?),
    };
    Ok(ConnLogReader {
        inner,
        mode,
        records: 0,
        errors: 0,
        done: false,
    })
}

/// Streaming iterator over the records of one log.
pub struct ConnLogReader<R: Read> {
    inner: Inner<R>,
    mode: ParseMode,
    records: u64,
    errors: u64,
    done: bool,
}

impl<R: Read> ConnLogReader<R> {
    /// Rows dropped so far in lenient mode.
    pub fn error_count(&self) -> u64 {
        self.errors
    }

    pub fn record_count(&self) -> u64 {
        self.records
    }
}

impl<R: Read> Iterator for ConnLogReader<R> {
    type Item = Result<ConnRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            let row = match &mut self.inner {
                Inner::Zeek(rows) => rows.next_row(),
                Inner::Csv(rows) => rows.next_row(),
            };
            match row {
                None => {
                    self.done = true;
                    return None;
                }
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e));
                }
                Some(Ok((_, Ok(record)))) => {
                    self.records += 1;
                    return Some(Ok(record));
                }
                Some(Ok((line, Err(source)))) => match self.mode {
                    ParseMode::Strict => {
                        self.done = true;
                        return Some(Err(IngestError::Malformed { line, source }));
                    }
                    ParseMode::Lenient => {
                        tracing::debug!(line, error = %source, "dropping malformed row");
                        self.errors += 1;
                    }
                },
            }
        }
    }
}

type Row = Result<(u64, Result<ConnRecord, ParseError>), IngestError>;

enum Inner<R: Read> {
    Zeek(ZeekRows<R>),
    Csv(CsvRows<R>),
}

struct ZeekRows<R: Read> {
    reader: BufReader<R>,
    buf: String,
    line_no: u64,
    separator: String,
    marks: Placeholders,
    schema: Schema,
}

impl<R: Read> ZeekRows<R> {
    fn open(source: R) -> Result<Self, IngestError> {
        let mut rows = ZeekRows {
            reader: BufReader::new(source),
            buf: String::new(),
            line_no: 0,
            separator: "\t".to_string(),
            marks: Placeholders::default(),
            schema: Schema::identity(),
        };
        loop {
            if !rows.advance()? {
                return Err(IngestError::MissingHeader("no #fields line".to_string()));
            }
            let line = trim_eol(&rows.buf).to_owned();
            if line.is_empty() {
                continue;
            }
            if !line.starts_with('#') {
                return Err(IngestError::MissingHeader(format!(
                    "data on line {} before #fields",
                    rows.line_no
                )));
            }
            if rows.directive(&line)? {
                return Ok(rows);
            }
        }
    }

    fn advance(&mut self) -> io::Result<bool> {
        self.buf.clear();
        let n = self.reader.read_line(&mut self.buf)?;
        if n > 0 {
            self.line_no += 1;
        }
        Ok(n > 0)
    }

    /// Applies a metadata line; returns true when it was `#fields`.
    fn directive(&mut self, line: &str) -> Result<bool, IngestError> {
        if let Some(rest) = line.strip_prefix("#separator") {
            self.separator = unescape(rest.trim_start_matches([' ', '\t']));
            return Ok(false);
        }
        let mut parts = line.split(self.separator.as_str());
        match parts.next() {
            Some("#fields") => {
                let names: Vec<&str> = parts.collect();
                self.schema = Schema::from_names(&names)?;
                Ok(true)
            }
            Some("#unset_field") => {
                if let Some(v) = parts.next() {
                    self.marks.unset = v.to_string();
                }
                Ok(false)
            }
            Some("#empty_field") => {
                if let Some(v) = parts.next() {
                    self.marks.empty = v.to_string();
                }
                Ok(false)
            }
            _ => Ok(false),
        }
    }

    fn next_row(&mut self) -> Option<Row> {
        loop {
            match self.advance() {
                Err(e) => return Some(Err(e.into())),
                Ok(false) => return None,
                Ok(true) => {}
            }
            let line = trim_eol(&self.buf).to_string();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('#') {
                if let Err(e) = self.directive(&line) {
                    return Some(Err(e));
                }
                continue;
            }
            let fields: Vec<&str> = line.split(self.separator.as_str()).collect();
            let parsed = parse_fields_with(&fields, &self.schema, &self.marks);
            return Some(Ok((self.line_no, parsed)));
        }
    }
}

struct CsvRows<R: Read> {
    reader: csv::Reader<R>,
    record: csv::StringRecord,
    schema: Schema,
    marks: Placeholders,
}

impl<R: Read> CsvRows<R> {
    fn open(source: R) -> Result<Self, IngestError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .comment(Some(b'#'))
            .from_reader(source);
        let headers = reader.headers().map_err(csv_to_ingest)?.clone();
        if headers.is_empty() {
            return Err(IngestError::MissingHeader("empty input".to_string()));
        }
        let names: Vec<&str> = headers.iter().collect();
        let schema = Schema::from_names(&names)?;
        Ok(CsvRows {
            reader,
            record: csv::StringRecord::new(),
            schema,
            marks: Placeholders::default(),
        })
    }

    fn next_row(&mut self) -> Option<Row> {
        match self.reader.read_record(&mut self.record) {
            Ok(false) => None,
            Ok(true) => {
                let line = self.record.position().map_or(0, |p| p.line());
                let fields: Vec<&str> = self.record.iter().collect();
                Some(Ok((
                    line,
                    parse_fields_with(&fields, &self.schema, &self.marks),
                )))
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                match e.into_kind() {
                    csv::ErrorKind::Io(io) => Some(Err(io.into())),
                    // Invalid UTF-8 and similar per-row problems count as malformed rows.
                    _ => Some(Ok((
                        line,
                        Err(ParseError::ColumnCount {
                            expected: self.schema.width,
                            found: 0,
                        }),
                    ))),
                }
            }
        }
    }
}

fn csv_to_ingest(e: csv::Error) -> IngestError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IngestError::Io(io),
        other => IngestError::MissingHeader(format!("unreadable header: {other:?}")),
    }
}

fn trim_eol(s: &str) -> &str {
    s.trim_end_matches(['\n', '\r'])
}

/// Decodes the `\xHH` escapes Zeek uses in its `#separator` line.
fn unescape(raw: &str) -> String {
    let mut out = String::new();
    let mut rest = raw;
    while let Some(pos) = rest.find("\\x") {
        out.push_str(&rest[..pos]);
        let hex = rest
            .get(pos + 2..pos + 4)
            .and_then(|h| u8::from_str_radix(h, 16).ok());
        match hex {
            Some(b) => {
                out.push(b as char);
                rest = &rest[pos + 4..];
            }
            None => {
                out.push_str("\\x");
                rest = &rest[pos + 2..];
            }
        }
    }
    out.push_str(rest);
    if out.is_empty() {
        "\t".to_string()
    } else {
        out
    }
}

/// Writes records as a Zeek-style `conn.log`.
///
/// Timestamps use the shortest decimal form that parses back to the same
/// value, so the output reads back losslessly.
pub fn write_zeek_log<'a, W, I>(mut out: W, records: I) -> io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a ConnRecord>,
{
    writeln!(out, "#separator \\x09")?;
    writeln!(out, "#set_separator\t,")?;
    writeln!(out, "#empty_field\t(empty)")?;
    writeln!(out, "#unset_field\t-")?;
    writeln!(out, "#path\tconn")?;
    writeln!(
        out,
        "#fields\tts\tuid\tid.orig_h\tid.orig_p\tid.resp_h\tid.resp_p\tproto\tconn_state\thistory"
    )?;
    writeln!(
        out,
        "#types\ttime\tstring\taddr\tport\taddr\tport\tenum\tstring\tstring"
    )?;
    for (i, r) in records.into_iter().enumerate() {
        writeln!(
            out,
            "{}\tC{:015x}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.ts,
            i,
            r.orig_ip,
            r.orig_port,
            r.resp_ip,
            r.resp_port,
            r.proto,
            r.conn_state,
            r.history.as_deref().unwrap_or("-"),
        )?;
    }
    Ok(())
}

/// A monitored network prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubnetFilter {
    cidr: IpNet,
}

impl SubnetFilter {
    /// Rejects prefixes with host bits set below the prefix length.
    pub fn new(cidr: IpNet) -> Result<Self, IngestError> {
        if cidr.trunc() != cidr {
            return Err(IngestError::InvalidSubnet(
                cidr.to_string(),
                "host bits set".to_string(),
            ));
        }
        Ok(SubnetFilter { cidr })
    }

    pub fn cidr(&self) -> IpNet {
        self.cidr
    }

    /// False for addresses of the other IP family.
    pub fn contains(&self, ip: IpAddr) -> bool {
        self.cidr.contains(&ip)
    }

    /// True when either endpoint lies inside the monitored prefix.
    pub fn sees(&self, record: &ConnRecord) -> bool {
        self.contains(record.orig_ip) || self.contains(record.resp_ip)
    }
}

impl FromStr for SubnetFilter {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let net: IpNet = s.parse().map_err(|e: ipnet::AddrParseError| {
            IngestError::InvalidSubnet(s.to_string(), e.to_string())
        })?;
        SubnetFilter::new(net)
    }
}

impl fmt::Display for SubnetFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.cidr.fmt(f)
    }
}

/// Keeps the records whose originator or responder is inside `filter`.
pub fn restrict_visibility<'a, I>(
    records: I,
    filter: &'a SubnetFilter,
) -> impl Iterator<Item = ConnRecord> + 'a
where
    I: IntoIterator<Item = ConnRecord>,
    I::IntoIter: 'a,
{
    records.into_iter().filter(move |r| filter.sees(r))
}
