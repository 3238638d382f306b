//! Campaign summaries, dataset statistics and the JSON report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, Write};
use std::net::IpAddr;

use ipnet::IpNet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{Campaign, CampaignSplit};
use crate::detect::ScannerProfile;
use crate::fingerprint::{Fingerprint, IpVersion, PortClass};
use crate::net::minimal_covering_cidr;
use crate::similarity::FeatureWeights;

/// Placeholder in `countries` for members without a known location.
pub const UNKNOWN_COUNTRY: &str = "unknown";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CampaignError {
    #[error("no fingerprint for campaign member {0}")]
    MissingFingerprint(IpAddr),
    #[error("a campaign needs at least two members, got {0}")]
    TooFewMembers(usize),
}

/// Collective fingerprint of one campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub member_count: usize,
    pub total_probes: u64,
    pub src_ports: BTreeSet<PortClass>,
    pub dst_ports: BTreeSet<PortClass>,
    pub vertical: BTreeSet<bool>,
    pub horizontal: BTreeSet<bool>,
    pub validation: BTreeSet<bool>,
    pub ip_versions: BTreeSet<IpVersion>,
    /// `[min, max]`
    pub target_hosts_range: (u64, u64),
    /// `[min, max]`
    pub probe_count_range: (u64, u64),
    /// One covering prefix per IP version present, v4 first.
    pub covering_cidrs: Vec<IpNet>,
    pub countries: BTreeSet<String>,
}

pub fn summarize_campaign(
    c: &Campaign,
    fps: &HashMap<IpAddr, &Fingerprint>,
) -> Result<CampaignSummary, CampaignError> {
    if c.members.len() < 2 {
        return Err(CampaignError::TooFewMembers(c.members.len()));
    }
    let members = c
        .members
        .iter()
        .map(|ip| {
            fps.get(ip)
                .copied()
                .ok_or(CampaignError::MissingFingerprint(*ip))
        })
        .collect::<Result<Vec<&Fingerprint>, _>>()?;

    let range = |f: fn(&Fingerprint) -> u64| {
        members
            .iter()
            .map(|m| f(m))
            .fold((u64::MAX, u64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (v4, v6): (Vec<IpAddr>, Vec<IpAddr>) = c.members.iter().partition(|ip| ip.is_ipv4());
    let covering_cidrs = [v4, v6]
        .into_iter()
        .filter(|ips| !ips.is_empty())
        .map(|ips| minimal_covering_cidr(ips).expect("single-family non-empty set"))
        .collect();

    Ok(CampaignSummary {
        member_count: members.len(),
        total_probes: members.iter().map(|m| m.probe_count).sum(),
        src_ports: members.iter().map(|m| m.src_ports).collect(),
        dst_ports: members.iter().map(|m| m.dst_ports).collect(),
        vertical: members.iter().map(|m| m.vertical.is_vertical()).collect(),
        horizontal: members.iter().map(|m| m.horizontal).collect(),
        validation: members.iter().map(|m| m.validation).collect(),
        ip_versions: members.iter().map(|m| m.ip_version).collect(),
        target_hosts_range: range(|f| f.target_hosts),
        probe_count_range: range(|f| f.probe_count),
        covering_cidrs,
        countries: members
            .iter()
            .map(|m| m.location.country().unwrap_or(UNKNOWN_COUNTRY).to_string())
            .collect(),
    })
}

/// `(value, number of scanners)` pairs, ascending by value.
pub type Distribution = Vec<(u64, u64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub scanners: usize,
    pub probes: u64,
    pub campaigns: usize,
    pub distributed_scanners: usize,
    pub standalone_scanners: usize,
    pub distributed_fraction: f64,
    pub probe_count_distribution: Distribution,
    pub src_port_distribution: Distribution,
    pub dst_port_distribution: Distribution,
}

fn distribution<I: IntoIterator<Item = u64>>(values: I) -> Distribution {
    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    counts.into_iter().collect()
}

pub fn dataset_stats(profiles: &[ScannerProfile], split: &CampaignSplit) -> DatasetStats {
    let distinct = |f: fn(&crate::detect::ScanProbe) -> u16| {
        distribution(
            profiles
                .iter()
                .map(|p| p.probes().iter().map(f).collect::<BTreeSet<u16>>().len() as u64),
        )
    };
    DatasetStats {
        scanners: profiles.len(),
        probes: profiles.iter().map(|p| p.probe_count() as u64).sum(),
        campaigns: split.campaigns.len(),
        distributed_scanners: split.distributed_scanners(),
        standalone_scanners: split.standalone.len(),
        distributed_fraction: split.distributed_fraction(),
        probe_count_distribution: distribution(profiles.iter().map(|p| p.probe_count() as u64)),
        src_port_distribution: distinct(|p| p.src_port),
        dst_port_distribution: distinct(|p| p.target_port),
    }
}

/// Plot-ready TSV of the three per-scanner distributions.
pub fn write_distributions_tsv<W: Write>(stats: &DatasetStats, mut out: W) -> io::Result<()> {
    writeln!(out, "distribution\tvalue\tscanners")?;
    for (name, dist) in [
        ("probe_count", &stats.probe_count_distribution),
        ("src_ports", &stats.src_port_distribution),
        ("dst_ports", &stats.dst_port_distribution),
    ] {
        for (value, scanners) in dist {
            writeln!(out, "{name}\t{value}\t{scanners}")?;
        }
    }
    Ok(())
}

/// Parameters a report was produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunParameters {
    pub epsilon: u64,
    /// Few/Multiple port boundary.
    pub x: usize,
    /// Similarity cutoff.
    pub t: f64,
    /// Geolocation tolerance in degrees.
    pub d: f64,
    pub weights: FeatureWeights,
    pub probe_states: Vec<String>,
    pub protocols: Vec<String>,
    pub subnet: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub members: Vec<IpAddr>,
    pub formation_similarity: f64,
    pub summary: CampaignSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub parameters: RunParameters,
    /// Scanners and probes before the ε filter.
    pub input_scanners: usize,
    pub input_probes: u64,
    pub stats: DatasetStats,
    pub campaigns: Vec<CampaignReport>,
    pub standalone: Vec<IpAddr>,
}

impl Report {
    /// Pretty JSON with object keys in sorted order, newline terminated.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report is always serializable");
        let mut s = serde_json::to_string_pretty(&sort_keys(value)).expect("json value serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

fn sort_keys(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> =
                map.into_iter().map(|(k, v)| (k, sort_keys(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::Campaign;
    use crate::detect::ScanProbe;
    use crate::fingerprint::Vertical;
    use crate::geo::GeoLocation;

    fn ip(s: &str) -> IpAddr {
        s.parse().unwrap()
    }

    fn fp(addr: &str, src: PortClass, hosts: u64) -> Fingerprint {
        Fingerprint {
            scanner_ip: ip(addr),
            src_ports: src,
            dst_ports: PortClass::Single(30443),
            vertical: Vertical::MultiHost,
            horizontal: false,
            validation: false,
            ip_version: IpVersion::of(ip(addr)),
            target_hosts: hosts,
            probe_count: hosts,
            location: GeoLocation::at("FR", 48.85, 2.35).unwrap(),
        }
    }

    fn index(fps: &[Fingerprint]) -> HashMap<IpAddr, &Fingerprint> {
        fps.iter().map(|f| (f.scanner_ip, f)).collect()
    }

    #[test]
    fn twenty_seven_member_block() {
        let fps: Vec<Fingerprint> = (0..27)
            .map(|i| {
                fp(
                    &format!("88.138.143.{}", i + 3),
                    PortClass::Single(30443),
                    591 + i * 7,
                )
            })
            .chain([
                fp("88.138.143.0", PortClass::Single(30443), 700),
                fp("88.138.143.31", PortClass::Single(30443), 799),
            ])
            .collect();
        let mut members: Vec<IpAddr> = fps.iter().map(|f| f.scanner_ip).collect();
        members.sort();
        let c = Campaign {
            members,
            formation_similarity: 0.9,
        };
        let s = summarize_campaign(&c, &index(&fps)).unwrap();
        assert_eq!(s.member_count, 29);
        assert_eq!(s.dst_ports, [PortClass::Single(30443)].into());
        assert_eq!(
            s.covering_cidrs,
            vec!["88.138.143.0/27".parse::<IpNet>().unwrap()]
        );
        assert_eq!(s.countries, ["FR".to_string()].into());
        assert_eq!(s.target_hosts_range, (591, 799));
        assert_eq!(
            s.total_probes,
            fps.iter().map(|f| f.probe_count).sum::<u64>()
        );
    }

    #[test]
    fn two_source_ports() {
        let fps = [
            fp("185.173.217.210", PortClass::Single(46960), 260_299),
            fp("185.173.217.213", PortClass::Single(55776), 211_552),
        ];
        let c = Campaign {
            members: fps.iter().map(|f| f.scanner_ip).collect(),
            formation_similarity: 0.8,
        };
        let s = summarize_campaign(&c, &index(&fps)).unwrap();
        assert_eq!(
            s.src_ports,
            [PortClass::Single(46960), PortClass::Single(55776)].into()
        );
        assert_eq!(s.target_hosts_range, (211_552, 260_299));
        assert_eq!(
            s.covering_cidrs,
            vec!["185.173.217.208/29".parse::<IpNet>().unwrap()]
        );
    }

    #[test]
    fn mixed_versions_get_one_prefix_each() {
        let mut v6 = fp("2001:db8::1", PortClass::Few, 10);
        v6.location = GeoLocation::unknown();
        let fps = [fp("10.0.0.1", PortClass::Few, 10), v6];
        let c = Campaign {
            members: fps.iter().map(|f| f.scanner_ip).collect(),
            formation_similarity: 0.5,
        };
        let s = summarize_campaign(&c, &index(&fps)).unwrap();
        assert_eq!(s.covering_cidrs.len(), 2);
        assert_eq!(s.ip_versions.len(), 2);
        assert!(s.countries.contains(UNKNOWN_COUNTRY));
    }

    #[test]
    fn missing_fingerprint_is_an_error() {
        let fps = [fp("10.0.0.1", PortClass::Few, 10)];
        let c = Campaign {
            members: vec![ip("10.0.0.1"), ip("10.0.0.2")],
            formation_similarity: 0.5,
        };
        assert_eq!(
            summarize_campaign(&c, &index(&fps)),
            Err(CampaignError::MissingFingerprint(ip("10.0.0.2")))
        );
    }

    fn profile(addr: &str, src_ports: &[u16]) -> ScannerProfile {
        let probes = src_ports
            .iter()
            .map(|&p| ScanProbe {
                scanner_ip: ip(addr),
                src_port: p,
                target_ip: ip("192.0.2.1"),
                target_port: 80,
                ts: 0.0,
            })
            .collect();
        ScannerProfile::new(ip(addr), probes).unwrap()
    }

    #[test]
    fn stats_distributions() {
        let profiles = [
            profile("10.0.0.1", &[1]),
            profile("10.0.0.2", &[5, 5]),
            profile("10.0.0.3", &[1, 2]),
        ];
        let stats = dataset_stats(&profiles, &CampaignSplit::default());
        assert_eq!(stats.src_port_distribution, vec![(1, 2), (2, 1)]);
        assert_eq!(stats.dst_port_distribution, vec![(1, 3)]);
        assert_eq!(stats.probe_count_distribution, vec![(1, 1), (2, 2)]);
        assert_eq!(stats.probes, 5);
        assert_eq!(stats.distributed_fraction, 0.0);

        let mut buf = Vec::new();
        write_distributions_tsv(&stats, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("src_ports\t1\t2\n"));
    }
}
