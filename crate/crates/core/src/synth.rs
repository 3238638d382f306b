//! Labeled synthetic connection logs and pairwise evaluation.
//!
//! # Randomness
//!
//! Every draw comes from a ChaCha8 generator seeded with the scenario seed.
//! Each consumer gets its own stream id, so draws never interleave:
//!
//! | consumer                           | stream id                        |
//! |------------------------------------|----------------------------------|
//! | campaign `c` (targets, shared port)| `(c + 1) << 32`                  |
//! | scanner `s` of campaign `c`        | `(c + 1) << 32 \| (s + 1)`       |
//! | lone noise scanner `k`             | `0x8000_0001 << 32 \| k`         |
//! | benign failing client `k`          | `0x8000_0002 << 32 \| k`         |
//! | completed connection `k`           | `0x8000_0003 << 32 \| k`         |
//!
//! Appending a campaign therefore leaves the draws of earlier campaigns
//! untouched. Address collisions between consumers are resolved by redrawing
//! from the later consumer's own stream.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{self, BufRead, Write};
use std::net::IpAddr;

use ipnet::IpNet;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::Campaign;
use crate::fingerprint::IpVersion;
use crate::geo::{GeoEntry, GeoError, GeoLocation};
use crate::ingest::{ConnRecord, Protocol};
use crate::net::{capacity, nth_address, prefix_of};

/// Start of the synthetic capture window (2019-05-05 00:00:00 UTC).
pub const WINDOW_START: f64 = 1_557_014_400.0;
/// Capture window length in seconds.
pub const WINDOW_SECS: u64 = 900;

const EPHEMERAL: std::ops::RangeInclusive<u16> = 32768..=60999;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("campaign {label}: {what} needs {needed} addresses but {cidr} holds {available}")]
    SpecCapacityExceeded {
        label: String,
        what: &'static str,
        cidr: IpNet,
        needed: u128,
        available: u128,
    },
    #[error("campaign {label}: {reason}")]
    InvalidSpec { label: String, reason: String },
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrcPortStrategy {
    /// One port for every scanner of the campaign.
    FixedShared,
    /// Each scanner picks its own port and keeps it.
    FixedPerScanner,
    /// A fresh ephemeral port per probe.
    EphemeralRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationSpec {
    pub country: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPool {
    pub cidr: IpNet,
    /// Distinct hosts drawn from `cidr`, split near-equally among scanners.
    pub count: usize,
}

/// One coordinated campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSpec {
    pub label: String,
    pub scanner_count: usize,
    pub source_cidr: IpNet,
    #[serde(default)]
    pub source_location: Option<LocationSpec>,
    pub src_port_strategy: SrcPortStrategy,
    pub dst_ports: Vec<u16>,
    pub target_pool: TargetPool,
    /// Distinct `(host, port)` targets per scanner, drawn uniformly from
    /// `[min, max]` and capped at the scanner's hosts × ports. Targets are
    /// visited host-major, so every assigned host is probed once the count
    /// reaches the host share. `None` probes every host on every port.
    #[serde(default)]
    pub probes_per_scanner: Option<(u64, u64)>,
    /// Probe every target twice.
    #[serde(default)]
    pub validation_retries: bool,
    /// Checked against the source and target prefixes when given.
    #[serde(default)]
    pub ip_version: Option<IpVersion>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Clients with one to three failed attempts each.
    pub benign_failure_count: usize,
    /// Independent scanners with randomized fingerprints.
    pub lone_scanner_count: usize,
    /// Successful TCP connections and UDP exchanges that are never probes.
    pub completed_connections: usize,
}

/// Scenario file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub campaigns: Vec<CampaignSpec>,
    #[serde(default)]
    pub noise: NoiseSpec,
}

/// Campaign label per generated scanner; noise scanners carry `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub labels: BTreeMap<IpAddr, Option<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Sorted by timestamp.
    pub records: Vec<ConnRecord>,
    pub truth: GroundTruth,
    pub geo: Vec<GeoEntry>,
}

impl Dataset {
    /// Number of records the default classifier treats as probes.
    pub fn probe_records(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.proto == Protocol::Tcp && r.conn_state != "SF")
            .count()
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_ts(rng: &mut ChaCha8Rng) -> f64 {
    let micros = rng.gen_range(0..WINDOW_SECS * 1_000_000);
    to_ts(micros)
}

fn to_ts(micros: u64) -> f64 {
    // Whole microseconds since epoch, so six-decimal text reads back exactly.
    ((WINDOW_START as u64) * 1_000_000 + micros) as f64 / 1e6
}

/// Draws `count` distinct addresses from `net`, avoiding `taken`.
fn distinct_addresses(
    rng: &mut ChaCha8Rng,
    net: &IpNet,
    count: usize,
    taken: &HashSet<IpAddr>,
) -> Vec<IpAddr> {
    let cap = capacity(net);
    let mut out = Vec::with_capacity(count);
    let mut seen = HashSet::with_capacity(count);
    if cap <= 1 << 20 {
        let mut offsets: Vec<u128> = (0..cap).collect();
        offsets.shuffle(rng);
        for off in offsets {
            let ip = nth_address(net, off);
            if !taken.contains(&ip) {
                out.push(ip);
                if out.len() == count {
                    break;
                }
            }
        }
    } else {
        while out.len() < count {
            let off = rng.gen::<u128>() % cap;
            let ip = nth_address(net, off);
            if !taken.contains(&ip) && seen.insert(ip) {
                out.push(ip);
            }
        }
    }
    out
}

fn validate(spec: &CampaignSpec) -> Result<(), SynthError> {
    let invalid = |reason: String| SynthError::InvalidSpec {
        label: spec.label.clone(),
        reason,
    };
    if spec.scanner_count == 0 {
        return Err(invalid("scanner_count must be at least 1".into()));
    }
    if spec.dst_ports.is_empty() {
        return Err(invalid("dst_ports is empty".into()));
    }
    let unique: HashSet<u16> = spec.dst_ports.iter().copied().collect();
    if unique.len() != spec.dst_ports.len() {
        return Err(invalid("dst_ports contains duplicates".into()));
    }
    if spec.target_pool.count < spec.scanner_count {
        return Err(invalid(format!(
            "target pool of {} hosts cannot give each of {} scanners a host",
            spec.target_pool.count, spec.scanner_count
        )));
    }
    if let Some((lo, hi)) = spec.probes_per_scanner {
        if lo < 1 || lo > hi {
            return Err(invalid(format!(
                "probes_per_scanner ({lo}, {hi}) needs 1 <= min <= max"
            )));
        }
    }
    if spec.source_cidr.trunc() != spec.source_cidr
        || spec.target_pool.cidr.trunc() != spec.target_pool.cidr
    {
        return Err(invalid("prefixes must not have host bits set".into()));
    }
    let src_v = IpVersion::of(spec.source_cidr.addr());
    if IpVersion::of(spec.target_pool.cidr.addr()) != src_v
        || spec.ip_version.is_some_and(|v| v != src_v)
    {
        return Err(invalid(
            "source, targets and ip_version disagree on the IP version".into(),
        ));
    }
    for (what, cidr, needed) in [
        ("scanner_count", spec.source_cidr, spec.scanner_count),
        (
            "target_pool.count",
            spec.target_pool.cidr,
            spec.target_pool.count,
        ),
    ] {
        if needed as u128 > capacity(&cidr) {
            return Err(SynthError::SpecCapacityExceeded {
                label: spec.label.clone(),
                what,
                cidr,
                needed: needed as u128,
                available: capacity(&cidr),
            });
        }
    }
    Ok(())
}

struct Builder {
    seed: u64,
    records: Vec<ConnRecord>,
    truth: GroundTruth,
    geo: Vec<GeoEntry>,
    geo_nets: HashSet<IpNet>,
    taken: HashSet<IpAddr>,
}

impl Builder {
    fn add_geo(&mut self, network: IpNet, location: GeoLocation) {
        if self.geo_nets.insert(network) {
            self.geo.push(GeoEntry { network, location });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn probe(
        &mut self,
        ts: f64,
        src: IpAddr,
        sport: u16,
        dst: IpAddr,
        dport: u16,
        state: &str,
        history: &str,
    ) {
        self.records.push(ConnRecord {
            ts,
            orig_ip: src,
            orig_port: sport,
            resp_ip: dst,
            resp_port: dport,
            proto: Protocol::Tcp,
            conn_state: state.to_string(),
            history: Some(history.to_string()),
        });
    }

    fn campaign(&mut self, index: usize, spec: &CampaignSpec) -> Result<(), SynthError> {
        validate(spec)?;
        let base = (index as u64 + 1) << 32;
        let mut crng = rng_for(self.seed, base);

        let mut hosts = distinct_addresses(
            &mut crng,
            &spec.target_pool.cidr,
            spec.target_pool.count,
            &HashSet::new(),
        );
        hosts.sort_unstable();
        let shared_port: u16 = crng.gen_range(1024..=65535);

        if let Some(loc) = &spec.source_location {
            let location = GeoLocation::at(loc.country.clone(), loc.lat, loc.lon)?;
            self.add_geo(spec.source_cidr, location);
        }

        let scanners = distinct_addresses(
            &mut crng,
            &spec.source_cidr,
            spec.scanner_count,
            &self.taken,
        );
        if scanners.len() < spec.scanner_count {
            return Err(SynthError::SpecCapacityExceeded {
                label: spec.label.clone(),
                what: "scanner_count (after excluding addresses used by earlier campaigns)",
                cidr: spec.source_cidr,
                needed: spec.scanner_count as u128,
                available: scanners.len() as u128,
            });
        }

        let n_hosts = hosts.len();
        for (s, &scanner) in scanners.iter().enumerate() {
            self.taken.insert(scanner);
            self.truth.labels.insert(scanner, Some(spec.label.clone()));
            let mut rng = rng_for(self.seed, base | (s as u64 + 1));

            let share =
                &hosts[s * n_hosts / spec.scanner_count..(s + 1) * n_hosts / spec.scanner_count];
            let full = (share.len() * spec.dst_ports.len()) as u64;
            let targets = match spec.probes_per_scanner {
                None => full,
                Some((lo, hi)) => rng.gen_range(lo..=hi).min(full),
            } as usize;
            let own_port: u16 = rng.gen_range(1024..=65535);

            let mut times: Vec<u64> = (0..targets)
                .map(|_| rng.gen_range(0..WINDOW_SECS * 1_000_000))
                .collect();
            times.sort_unstable();
            for (k, &t) in times.iter().enumerate() {
                let host = share[k % share.len()];
                let port = spec.dst_ports[(k / share.len()) % spec.dst_ports.len()];
                let attempts = if spec.validation_retries { 2 } else { 1 };
                for a in 0..attempts {
                    let sport = match spec.src_port_strategy {
                        SrcPortStrategy::FixedShared => shared_port,
                        SrcPortStrategy::FixedPerScanner => own_port,
                        SrcPortStrategy::EphemeralRandom => rng.gen_range(EPHEMERAL),
                    };
                    // Retries follow within three seconds.
                    let ts = to_ts(t + a * rng.gen_range(500_000..3_000_000));
                    self.probe(ts, scanner, sport, host, port, "S0", "S");
                }
            }
        }
        Ok(())
    }

    fn lone_scanner(&mut self, k: usize) {
        let mut rng = rng_for(self.seed, (0x8000_0001u64 << 32) | k as u64);
        let scanner = self.fresh_public_v4(&mut rng);
        self.truth.labels.insert(scanner, None);
        let (cc, lat, lon) = *COUNTRIES.choose(&mut rng).expect("non-empty table");
        let location = GeoLocation::at(
            cc,
            lat + rng.gen_range(-8.0..8.0),
            lon + rng.gen_range(-8.0..8.0),
        )
        .expect("jittered coordinates stay in range");
        self.add_geo(prefix_of(scanner, 24), location);

        let strategy = *[
            SrcPortStrategy::FixedShared,
            SrcPortStrategy::FixedPerScanner,
            SrcPortStrategy::EphemeralRandom,
        ]
        .choose(&mut rng)
        .unwrap();
        let n_ports = match rng.gen_range(0..3) {
            0 => 1,
            1 => rng.gen_range(2..=10),
            _ => rng.gen_range(11..=60),
        };
        let mut ports: Vec<u16> = Vec::with_capacity(n_ports);
        while ports.len() < n_ports {
            let p = rng.gen_range(1..=65535);
            if !ports.contains(&p) {
                ports.push(p);
            }
        }
        let n_hosts = rng.gen_range(1..=250usize);
        let target_net = prefix_of(IpAddr::V4(rng.gen::<u32>().into()), 16);
        let hosts = distinct_addresses(&mut rng, &target_net, n_hosts, &HashSet::new());
        let targets = rng.gen_range(n_hosts.max(3)..=(n_hosts * n_ports).max(3));
        let retries = rng.gen_bool(0.25);
        let fixed_port: u16 = rng.gen_range(1024..=65535);

        for k in 0..targets {
            let host = hosts[k % hosts.len()];
            let port = ports[(k / hosts.len()) % ports.len()];
            let t = rng.gen_range(0..WINDOW_SECS * 1_000_000);
            for a in 0..if retries { 2 } else { 1 } {
                let sport = match strategy {
                    SrcPortStrategy::EphemeralRandom => rng.gen_range(EPHEMERAL),
                    _ => fixed_port,
                };
                self.probe(
                    to_ts(t + a * 1_000_000),
                    scanner,
                    sport,
                    host,
                    port,
                    "S0",
                    "S",
                );
            }
        }
    }

    fn benign_failure(&mut self, k: usize) {
        let mut rng = rng_for(self.seed, (0x8000_0002u64 << 32) | k as u64);
        let client = self.fresh_public_v4(&mut rng);
        self.truth.labels.insert(client, None);
        let server = IpAddr::V4(rng.gen::<u32>().into());
        let port = *[80u16, 443, 22, 25, 53, 993, 8080]
            .choose(&mut rng)
            .unwrap();
        for _ in 0..rng.gen_range(1..=3) {
            let (state, history) = if rng.gen_bool(0.5) {
                ("S0", "S")
            } else {
                ("REJ", "Sr")
            };
            let ts = random_ts(&mut rng);
            let sport = rng.gen_range(EPHEMERAL);
            self.probe(ts, client, sport, server, port, state, history);
        }
    }

    fn completed(&mut self, k: usize) {
        let mut rng = rng_for(self.seed, (0x8000_0003u64 << 32) | k as u64);
        let client = IpAddr::V4(rng.gen::<u32>().into());
        let server = IpAddr::V4(rng.gen::<u32>().into());
        let ts = random_ts(&mut rng);
        let sport = rng.gen_range(EPHEMERAL);
        let udp = rng.gen_bool(0.1);
        self.records.push(ConnRecord {
            ts,
            orig_ip: client,
            orig_port: sport,
            resp_ip: server,
            resp_port: if udp { 53 } else { 443 },
            proto: if udp { Protocol::Udp } else { Protocol::Tcp },
            conn_state: if udp { "S0" } else { "SF" }.to_string(),
            history: Some(if udp { "D" } else { "ShADadFf" }.to_string()),
        });
    }

    /// A unicast v4 address from 1.0.0.0 to 223.255.255.255 not used yet.
    fn fresh_public_v4(&mut self, rng: &mut ChaCha8Rng) -> IpAddr {
        loop {
            let ip = IpAddr::V4(rng.gen_range(0x0100_0000u32..0xE000_0000).into());
            if self.taken.insert(ip) {
                return ip;
            }
        }
    }
}

/// Countries for noise scanners with reference coordinates.
const COUNTRIES: [(&str, f64, f64); 10] = [
    ("US", 39.0, -98.0),
    ("CN", 35.0, 105.0),
    ("RU", 60.0, 90.0),
    ("BR", -10.0, -52.0),
    ("DE", 51.0, 10.0),
    ("IN", 21.0, 78.0),
    ("VN", 16.0, 107.0),
    ("NL", 52.3, 5.3),
    ("KR", 36.5, 127.8),
    ("FR", 46.5, 2.5),
];

/// Generates a dataset. Identical scenarios yield identical datasets.
pub fn generate_dataset(
    campaigns: &[CampaignSpec],
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Dataset, SynthError> {
    let mut b = Builder {
        seed,
        records: Vec::new(),
        truth: GroundTruth::default(),
        geo: Vec::new(),
        geo_nets: HashSet::new(),
        taken: HashSet::new(),
    };
    for (i, spec) in campaigns.iter().enumerate() {
        b.campaign(i, spec)?;
    }
    for k in 0..noise.lone_scanner_count {
        b.lone_scanner(k);
    }
    for k in 0..noise.benign_failure_count {
        b.benign_failure(k);
    }
    for k in 0..noise.completed_connections {
        b.completed(k);
    }
    b.records.sort_by(|x, y| x.ts.total_cmp(&y.ts));
    Ok(Dataset {
        records: b.records,
        truth: b.truth,
        geo: b.geo,
    })
}

impl Scenario {
    pub fn generate(&self) -> Result<Dataset, SynthError> {
        generate_dataset(&self.campaigns, &self.noise, self.seed)
    }
}

pub const TRUTH_HEADER: &str = "scanner_ip\tlabel";

/// `scanner_ip<TAB>label`, with `-` for unlabeled scanners.
pub fn write_truth_tsv<W: Write>(truth: &GroundTruth, mut out: W) -> io::Result<()> {
    writeln!(out, "{TRUTH_HEADER}")?;
    for (ip, label) in &truth.labels {
        writeln!(out, "{ip}\t{}", label.as_deref().unwrap_or("-"))?;
    }
    Ok(())
}

pub fn read_truth_tsv<R: BufRead>(input: R) -> io::Result<GroundTruth> {
    let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim_end) != Some(TRUTH_HEADER) {
        return Err(bad(format!("truth file must start with {TRUTH_HEADER:?}")));
    }
    let mut truth = GroundTruth::default();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let (ip, label) = line
            .split_once('\t')
            .ok_or_else(|| bad(format!("truth line {}: expected two columns", i + 2)))?;
        let ip: IpAddr = ip
            .parse()
            .map_err(|_| bad(format!("truth line {}: invalid IP {ip:?}", i + 2)))?;
        let label = (label != "-").then(|| label.to_string());
        truth.labels.insert(ip, label);
    }
    Ok(truth)
}

/// Pair-counting scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairwiseScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positive_pairs: u64,
    pub predicted_pairs: u64,
    pub truth_pairs: u64,
}

fn pairs(k: u64) -> u64 {
    k * k.saturating_sub(1) / 2
}

/// Precision and recall over scanner pairs placed in one campaign.
///
/// With no predicted pairs precision is 1; with no true pairs recall is 1.
pub fn pairwise_eval<'a, I>(predicted: I, truth: &GroundTruth) -> PairwiseScores
where
    I: IntoIterator<Item = &'a [IpAddr]>,
{
    let mut predicted_pairs = 0;
    let mut tp = 0;
    for members in predicted {
        predicted_pairs += pairs(members.len() as u64);
        let mut per_label: HashMap<&str, u64> = HashMap::new();
        for ip in members {
            if let Some(Some(label)) = truth.labels.get(ip) {
                *per_label.entry(label.as_str()).or_default() += 1;
            }
        }
        tp += per_label.values().map(|&c| pairs(c)).sum::<u64>();
    }
    let mut label_sizes: HashMap<&str, u64> = HashMap::new();
    for label in truth.labels.values().flatten() {
        *label_sizes.entry(label.as_str()).or_default() += 1;
    }
    let truth_pairs: u64 = label_sizes.values().map(|&c| pairs(c)).sum();

    let precision = if predicted_pairs == 0 {
        1.0
    } else {
        tp as f64 / predicted_pairs as f64
    };
    let recall = if truth_pairs == 0 {
        1.0
    } else {
        tp as f64 / truth_pairs as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PairwiseScores {
        precision,
        recall,
        f1,
        true_positive_pairs: tp,
        predicted_pairs,
        truth_pairs,
    }
}

/// [`pairwise_eval`] over campaigns.
pub fn evaluate_campaigns(campaigns: &[Campaign], truth: &GroundTruth) -> PairwiseScores {
    pairwise_eval(campaigns.iter().map(|c| c.members.as_slice()), truth)
}
