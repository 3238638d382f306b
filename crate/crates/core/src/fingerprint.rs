//! Ten-feature scanner fingerprints.
//!
//! Attacker-side features describe the scanning tool (source ports,
//! validation, source subnet and location); target-side features describe the
//! intention (destination ports, vertical/horizontal geometry, IP version and
//! the magnitudes of target hosts and probes).
//!
//! Terminology note: a scan touching more than one target host is *vertical*
//! here, and a scan touching several ports on one host is *horizontal*.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::net::IpAddr;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::detect::ScannerProfile;
use crate::geo::{GeoDatabase, GeoLocation};

/// Default boundary between Few and Multiple ports.
pub const DEFAULT_FEW_MAX: usize = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FingerprintError {
    #[error("port class of an empty port set")]
    EmptyPortSet,
    #[error("few/multiple boundary must be at least 1")]
    InvalidBoundary,
    #[error("invalid port class {0:?}")]
    InvalidPortClass(String),
}

/// Single (with its port), Few (2..=X ports) or Multiple (> X ports).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PortClass {
    Single(u16),
    Few,
    Multiple,
}

impl fmt::Display for PortClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PortClass::Single(p) => write!(f, "S+{p}"),
            PortClass::Few => f.write_str("F"),
            PortClass::Multiple => f.write_str("M"),
        }
    }
}

impl FromStr for PortClass {
    type Err = FingerprintError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "F" => Ok(PortClass::Few),
            "M" => Ok(PortClass::Multiple),
            _ => s
                .strip_prefix("S+")
                .and_then(|p| p.parse().ok())
                .map(PortClass::Single)
                .ok_or_else(|| FingerprintError::InvalidPortClass(s.to_string())),
        }
    }
}

impl Serialize for PortClass {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PortClass {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Classifies a set of distinct ports against the boundary `few_max` (X).
pub fn port_class(
    distinct_ports: &BTreeSet<u16>,
    few_max: usize,
) -> Result<PortClass, FingerprintError> {
    if few_max < 1 {
        return Err(FingerprintError::InvalidBoundary);
    }
    match distinct_ports.len() {
        0 => Err(FingerprintError::EmptyPortSet),
        1 => Ok(PortClass::Single(*distinct_ports.first().unwrap())),
        n if n <= few_max => Ok(PortClass::Few),
        _ => Ok(PortClass::Multiple),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IpVersion {
    V4,
    V6,
}

impl IpVersion {
    pub fn of(ip: IpAddr) -> Self {
        if ip.is_ipv4() {
            IpVersion::V4
        } else {
            IpVersion::V6
        }
    }
}

/// Whether a scan spans several hosts; a single-host scan remembers its host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Vertical {
    MultiHost,
    SingleHost(IpAddr),
}

impl Vertical {
    pub fn is_vertical(&self) -> bool {
        matches!(self, Vertical::MultiHost)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub scanner_ip: IpAddr,
    pub src_ports: PortClass,
    pub dst_ports: PortClass,
    pub vertical: Vertical,
    /// Some target host was probed on at least two distinct ports.
    pub horizontal: bool,
    /// Some (host, port) target was probed at least twice.
    pub validation: bool,
    pub ip_version: IpVersion,
    pub target_hosts: u64,
    pub probe_count: u64,
    pub location: GeoLocation,
}

/// Computes the fingerprint of one scanner. Probe order does not matter.
pub fn compute_fingerprint(
    profile: &ScannerProfile,
    few_max: usize,
    geo: &GeoDatabase,
) -> Result<Fingerprint, FingerprintError> {
    let probes = profile.probes();
    let mut src_ports = BTreeSet::new();
    let mut dst_ports = BTreeSet::new();
    let mut ports_per_host: HashMap<IpAddr, HashSet<u16>> = HashMap::new();
    let mut seen_targets: HashSet<(IpAddr, u16)> = HashSet::with_capacity(probes.len());
    let mut validation = false;

    for p in probes {
        src_ports.insert(p.src_port);
        dst_ports.insert(p.target_port);
        ports_per_host
            .entry(p.target_ip)
            .or_default()
            .insert(p.target_port);
        if !seen_targets.insert((p.target_ip, p.target_port)) {
            validation = true;
        }
    }

    let vertical = if ports_per_host.len() > 1 {
        Vertical::MultiHost
    } else {
        // ScannerProfile guarantees at least one probe.
        Vertical::SingleHost(*ports_per_host.keys().next().expect("non-empty profile"))
    };
    let horizontal = ports_per_host.values().any(|ports| ports.len() >= 2);

    Ok(Fingerprint {
        scanner_ip: profile.scanner_ip(),
        src_ports: port_class(&src_ports, few_max)?,
        dst_ports: port_class(&dst_ports, few_max)?,
        vertical,
        horizontal,
        validation,
        ip_version: IpVersion::of(profile.scanner_ip()),
        target_hosts: ports_per_host.len() as u64,
        probe_count: probes.len() as u64,
        location: geo.lookup(profile.scanner_ip()),
    })
}

/// Fingerprints every profile in parallel, preserving input order.
pub fn fingerprint_all(
    profiles: &[ScannerProfile],
    few_max: usize,
    geo: &GeoDatabase,
) -> Result<Vec<Fingerprint>, FingerprintError> {
    profiles
        .par_iter()
        .map(|p| compute_fingerprint(p, few_max, geo))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::ScanProbe;
    use proptest::prelude::*;

    fn ip(s: &str) -> IpAddr {
        s.parse().unwrap()
    }

    fn profile(targets: &[(&str, u16, u16)]) -> ScannerProfile {
        let scanner = ip("88.138.143.5");
        let probes = targets
            .iter()
            .enumerate()
            .map(|(i, &(host, sport, dport))| ScanProbe {
                scanner_ip: scanner,
                src_port: sport,
                target_ip: ip(host),
                target_port: dport,
                ts: i as f64,
            })
            .collect();
        ScannerProfile::new(scanner, probes).unwrap()
    }

    #[test]
    fn port_class_boundaries() {
        assert_eq!(
            port_class(&[30443].into(), 10),
            Ok(PortClass::Single(30443))
        );
        assert_eq!(port_class(&(1..=10).collect(), 10), Ok(PortClass::Few));
        assert_eq!(port_class(&(1..=11).collect(), 10), Ok(PortClass::Multiple));
        assert_eq!(
            port_class(&BTreeSet::new(), 10),
            Err(FingerprintError::EmptyPortSet)
        );
        assert_eq!(port_class(&[1, 2].into(), 1), Ok(PortClass::Multiple));
    }

    #[test]
    fn port_class_text_form() {
        for c in [
            PortClass::Single(30443),
            PortClass::Few,
            PortClass::Multiple,
        ] {
            assert_eq!(c.to_string().parse::<PortClass>(), Ok(c));
        }
        assert_eq!(PortClass::Single(30443).to_string(), "S+30443");
        assert!("S+70000".parse::<PortClass>().is_err());
    }

    #[test]
    fn single_port_multi_host_scan() {
        let fp = compute_fingerprint(
            &profile(&[
                ("10.0.0.1", 30443, 30443),
                ("10.0.0.2", 30443, 30443),
                ("10.0.0.3", 30443, 30443),
            ]),
            10,
            &GeoDatabase::empty(),
        )
        .unwrap();
        assert_eq!(fp.src_ports, PortClass::Single(30443));
        assert_eq!(fp.dst_ports, PortClass::Single(30443));
        assert!(fp.vertical.is_vertical());
        assert!(!fp.horizontal);
        assert!(!fp.validation);
        assert_eq!((fp.target_hosts, fp.probe_count), (3, 3));
        assert_eq!(fp.ip_version, IpVersion::V4);
    }

    #[test]
    fn repeated_probe_is_validation() {
        let fp = compute_fingerprint(
            &profile(&[("10.0.0.1", 1000, 80), ("10.0.0.1", 1000, 80)]),
            10,
            &GeoDatabase::empty(),
        )
        .unwrap();
        assert_eq!(fp.vertical, Vertical::SingleHost(ip("10.0.0.1")));
        assert!(!fp.horizontal);
        assert!(fp.validation);
    }

    #[test]
    fn two_ports_one_host_is_horizontal() {
        let fp = compute_fingerprint(
            &profile(&[("10.0.0.1", 1000, 22), ("10.0.0.1", 1000, 80)]),
            10,
            &GeoDatabase::empty(),
        )
        .unwrap();
        assert_eq!(fp.vertical, Vertical::SingleHost(ip("10.0.0.1")));
        assert!(fp.horizontal);
        assert!(!fp.validation);
        assert_eq!(fp.dst_ports, PortClass::Few);
    }

    #[test]
    fn location_from_database() {
        let db = GeoDatabase::from_csv(
            "network,country,lat,lon\n88.138.143.0/27,FR,48.85,2.35\n".as_bytes(),
        )
        .unwrap();
        let fp = compute_fingerprint(&profile(&[("10.0.0.1", 1, 1)]), 10, &db).unwrap();
        assert_eq!(fp.location.country(), Some("FR"));
    }

    fn arb_targets() -> impl Strategy<Value = Vec<(u8, u16, u16)>> {
        proptest::collection::vec((0u8..6, 0u16..4, 0u16..15), 1..40)
    }

    fn build(targets: &[(u8, u16, u16)]) -> ScannerProfile {
        let scanner = ip("192.0.2.1");
        let probes = targets
            .iter()
            .enumerate()
            .map(|(i, &(h, sp, dp))| ScanProbe {
                scanner_ip: scanner,
                src_port: sp,
                target_ip: IpAddr::V4([198, 51, 100, h].into()),
                target_port: dp,
                ts: i as f64,
            })
            .collect();
        ScannerProfile::new(scanner, probes).unwrap()
    }

    proptest! {
        #[test]
        fn fingerprint_invariants(targets in arb_targets(), seed in any::<u64>()) {
            let geo = GeoDatabase::empty();
            let fp = compute_fingerprint(&build(&targets), 3, &geo).unwrap();
            let hosts: BTreeSet<u8> = targets.iter().map(|t| t.0).collect();
            prop_assert_eq!(fp.target_hosts as usize, hosts.len());
            prop_assert_eq!(fp.probe_count as usize, targets.len());
            prop_assert!(fp.probe_count >= fp.target_hosts && fp.target_hosts >= 1);
            prop_assert_eq!(fp.vertical.is_vertical(), fp.target_hosts >= 2);
            if fp.horizontal || fp.validation {
                prop_assert!(fp.probe_count >= 2);
            }

            // Shuffle with a cheap deterministic permutation.
            let mut shuffled = targets.clone();
            let n = shuffled.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(compute_fingerprint(&build(&shuffled), 3, &geo).unwrap(), fp);
        }

        #[test]
        fn raising_boundary_never_moves_few_to_multiple(ports in proptest::collection::btree_set(any::<u16>(), 1..40), x in 1usize..30, dx in 0usize..30) {
            let lo = port_class(&ports, x).unwrap();
            let hi = port_class(&ports, x + dx).unwrap();
            if lo == PortClass::Few {
                prop_assert_eq!(hi, PortClass::Few);
            }
        }
    }
}
