//! Per-feature and aggregate scanner similarity.
//!
//! Each of the ten features yields a score in `[0, 1]`; the aggregate is their
//! weighted mean `Σ s(i)·w(i) / Σ w(i)`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{self, Write};
use std::net::IpAddr;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fingerprint::{Fingerprint, IpVersion, PortClass, Vertical};
use crate::geo::GeoLocation;
use crate::net::{bit_width, common_prefix_len};

/// Default per-axis coordinate tolerance, in degrees.
pub const DEFAULT_GEO_TOLERANCE: f64 = 5.0;

/// Scanner count above which building the matrix logs a memory warning.
pub const DEFAULT_MATRIX_WARN_ABOVE: usize = 30_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("all feature weights are zero")]
    AllWeightsZero,
    #[error("weight for {0} must be finite and non-negative")]
    InvalidWeight(Feature),
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("scanner {0} appears twice")]
    DuplicateScanner(IpAddr),
    #[error("no fingerprints to compare")]
    Empty,
    #[error("geo tolerance must be positive")]
    InvalidTolerance,
    #[error("condensed matrix has {found} entries, expected {expected}")]
    BadCondensedLength { expected: usize, found: usize },
    #[error("similarity {0} outside [0, 1]")]
    OutOfRange(f64),
}

/// The ten fingerprint features, in weight-vector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Feature {
    SrcPorts,
    DstPorts,
    Vertical,
    Horizontal,
    Validation,
    IpVersion,
    TargetHostsMagnitude,
    ProbeCountMagnitude,
    Subnet,
    Location,
}

impl Feature {
    pub const ALL: [Feature; 10] = [
        Feature::SrcPorts,
        Feature::DstPorts,
        Feature::Vertical,
        Feature::Horizontal,
        Feature::Validation,
        Feature::IpVersion,
        Feature::TargetHostsMagnitude,
        Feature::ProbeCountMagnitude,
        Feature::Subnet,
        Feature::Location,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::SrcPorts => "src_ports",
            Feature::DstPorts => "dst_ports",
            Feature::Vertical => "vertical",
            Feature::Horizontal => "horizontal",
            Feature::Validation => "validation",
            Feature::IpVersion => "ip_version",
            Feature::TargetHostsMagnitude => "target_hosts_mag",
            Feature::ProbeCountMagnitude => "probe_count_mag",
            Feature::Subnet => "subnet",
            Feature::Location => "location",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = SimilarityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Feature::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| SimilarityError::UnknownFeature(s.to_string()))
    }
}

/// Non-negative weight per feature, at least one positive.
///
/// Serialized as a map from feature name to weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct FeatureWeights {
    w: [f64; 10],
}

impl Default for FeatureWeights {
    /// Ports 4; scan geometry, validation, subnet and location 2; IP version
    /// and both magnitudes 1. Total 21.
    fn default() -> Self {
        FeatureWeights {
            w: [4.0, 4.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 2.0, 2.0],
        }
    }
}

impl FeatureWeights {
    /// Weights in [`Feature::ALL`] order.
    pub fn new(w: [f64; 10]) -> Result<Self, SimilarityError> {
        for (f, &v) in Feature::ALL.iter().zip(&w) {
            if !v.is_finite() || v < 0.0 {
                return Err(SimilarityError::InvalidWeight(*f));
            }
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(SimilarityError::AllWeightsZero);
        }
        Ok(FeatureWeights { w })
    }

    pub fn get(&self, f: Feature) -> f64 {
        self.w[f as usize]
    }

    /// Returns a copy with one weight replaced, re-validated.
    pub fn with(&self, f: Feature, value: f64) -> Result<Self, SimilarityError> {
        let mut w = self.w;
        w[f as usize] = value;
        FeatureWeights::new(w)
    }

    pub fn as_array(&self) -> [f64; 10] {
        self.w
    }

    pub fn total(&self) -> f64 {
        self.w.iter().sum()
    }
}

impl TryFrom<BTreeMap<String, f64>> for FeatureWeights {
    type Error = SimilarityError;

    /// Missing features keep their default weight.
    fn try_from(map: BTreeMap<String, f64>) -> Result<Self, Self::Error> {
        let mut w = FeatureWeights::default().w;
        for (name, v) in map {
            w[name.parse::<Feature>()? as usize] = v;
        }
        FeatureWeights::new(w)
    }
}

impl From<FeatureWeights> for BTreeMap<String, f64> {
    fn from(fw: FeatureWeights) -> Self {
        Feature::ALL
            .iter()
            .map(|f| (f.name().to_string(), fw.get(*f)))
            .collect()
    }
}

/// 0 on category mismatch; Few/Few and Multiple/Multiple score 1; two single
/// ports score 1 when equal and 0.5 otherwise.
pub fn sim_port_class(a: PortClass, b: PortClass) -> f64 {
    match (a, b) {
        (PortClass::Single(p), PortClass::Single(q)) => {
            if p == q {
                1.0
            } else {
                0.5
            }
        }
        (PortClass::Few, PortClass::Few) | (PortClass::Multiple, PortClass::Multiple) => 1.0,
        _ => 0.0,
    }
}

/// Two single-host scans only match when they target the same host.
pub fn sim_vertical(a: &Vertical, b: &Vertical) -> f64 {
    match (a, b) {
        (Vertical::MultiHost, Vertical::MultiHost) => 1.0,
        (Vertical::SingleHost(h1), Vertical::SingleHost(h2)) if h1 == h2 => 1.0,
        _ => 0.0,
    }
}

pub fn sim_flag(a: bool, b: bool) -> f64 {
    if a == b {
        1.0
    } else {
        0.0
    }
}

pub fn sim_ip_version(a: IpVersion, b: IpVersion) -> f64 {
    sim_flag(a == IpVersion::V4, b == IpVersion::V4)
}

/// 1 when `|a - b| < min(a, b)`, i.e. the counts share an order of magnitude.
pub fn sim_magnitude(a: u64, b: u64) -> f64 {
    if a.abs_diff(b) < a.min(b) {
        1.0
    } else {
        0.0
    }
}

/// Fraction of equal leading address bits; 0 across IP versions.
pub fn sim_subnet(a: IpAddr, b: IpAddr) -> f64 {
    match common_prefix_len(a, b) {
        Some(k) => f64::from(k) / f64::from(bit_width(a)),
        None => 0.0,
    }
}

/// 1 within `tolerance` degrees on both axes, 0.5 for the same country,
/// 0 otherwise. Unknown locations never match.
pub fn sim_geo(a: &GeoLocation, b: &GeoLocation, tolerance: f64) -> f64 {
    if let (Some((lat1, lon1)), Some((lat2, lon2))) = (a.coords(), b.coords()) {
        if (lat1 - lat2).abs() <= tolerance && (lon1 - lon2).abs() <= tolerance {
            return 1.0;
        }
    }
    match (a.country(), b.country()) {
        (Some(x), Some(y)) if x == y => 0.5,
        _ => 0.0,
    }
}

/// The ten per-feature scores in [`Feature::ALL`] order.
pub fn feature_scores(a: &Fingerprint, b: &Fingerprint, tolerance: f64) -> [f64; 10] {
    [
        sim_port_class(a.src_ports, b.src_ports),
        sim_port_class(a.dst_ports, b.dst_ports),
        sim_vertical(&a.vertical, &b.vertical),
        sim_flag(a.horizontal, b.horizontal),
        sim_flag(a.validation, b.validation),
        sim_ip_version(a.ip_version, b.ip_version),
        sim_magnitude(a.target_hosts, b.target_hosts),
        sim_magnitude(a.probe_count, b.probe_count),
        sim_subnet(a.scanner_ip, b.scanner_ip),
        sim_geo(&a.location, &b.location, tolerance),
    ]
}

/// Weighted mean of per-feature scores.
pub fn weighted_mean(scores: &[f64; 10], w: &FeatureWeights) -> f64 {
    let num: f64 = scores.iter().zip(&w.w).map(|(s, w)| s * w).sum();
    num / w.total()
}

/// Aggregate similarity of two fingerprints.
pub fn similarity(
    a: &Fingerprint,
    b: &Fingerprint,
    w: &FeatureWeights,
    tolerance: f64,
) -> Result<f64, SimilarityError> {
    if w.total() == 0.0 {
        return Err(SimilarityError::AllWeightsZero);
    }
    Ok(weighted_mean(&feature_scores(a, b, tolerance), w))
}

/// Symmetric pairwise similarities with unit diagonal, stored as the strict
/// upper triangle in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    ids: Vec<IpAddr>,
    upper: Vec<f64>,
}

impl SimilarityMatrix {
    /// Wraps a condensed upper triangle of length `n(n-1)/2`.
    pub fn from_condensed(ids: Vec<IpAddr>, upper: Vec<f64>) -> Result<Self, SimilarityError> {
        let n = ids.len();
        if n == 0 {
            return Err(SimilarityError::Empty);
        }
        let expected = n * (n - 1) / 2;
        if upper.len() != expected {
            return Err(SimilarityError::BadCondensedLength {
                expected,
                found: upper.len(),
            });
        }
        if let Some(&bad) = upper.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SimilarityError::OutOfRange(bad));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|ip| !seen.insert(**ip)) {
            return Err(SimilarityError::DuplicateScanner(*dup));
        }
        Ok(SimilarityMatrix { ids, upper })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[IpAddr] {
        &self.ids
    }

    pub fn condensed(&self) -> &[f64] {
        &self.upper
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Less => self.upper[condensed_index(self.len(), i, j)],
            std::cmp::Ordering::Greater => self.upper[condensed_index(self.len(), j, i)],
        }
    }

    /// Debug export: the id row, then one row per scanner with its entries
    /// right of the diagonal.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let ids: Vec<String> = self.ids.iter().map(ToString::to_string).collect();
        writeln!(out, "{}", ids.join("\t"))?;
        let n = self.len();
        for (i, id) in ids.iter().enumerate() {
            write!(out, "{id}")?;
            for j in i + 1..n {
                write!(out, "\t{}", self.get(i, j))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Position of `(i, j)`, `i < j`, in a row-major strict upper triangle.
pub fn condensed_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

/// Options for [`build_matrix`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrixOptions {
    pub geo_tolerance: f64,
    pub warn_above: usize,
}

impl Default for MatrixOptions {
    fn default() -> Self {
        MatrixOptions {
            geo_tolerance: DEFAULT_GEO_TOLERANCE,
            warn_above: DEFAULT_MATRIX_WARN_ABOVE,
        }
    }
}

/// All-pairs similarity matrix.
///
/// Rows are computed in parallel on the current rayon pool and concatenated
/// in order, so the result is identical to a sequential evaluation.
pub fn build_matrix(
    fps: &[Fingerprint],
    w: &FeatureWeights,
    opts: MatrixOptions,
) -> Result<SimilarityMatrix, SimilarityError> {
    if fps.is_empty() {
        return Err(SimilarityError::Empty);
    }
    if opts.geo_tolerance.is_nan() || opts.geo_tolerance <= 0.0 {
        return Err(SimilarityError::InvalidTolerance);
    }
    let mut seen = HashSet::with_capacity(fps.len());
    if let Some(dup) = fps.iter().find(|f| !seen.insert(f.scanner_ip)) {
        return Err(SimilarityError::DuplicateScanner(dup.scanner_ip));
    }
    let n = fps.len();
    if n > opts.warn_above {
        tracing::warn!(
            scanners = n,
            entries = n * (n - 1) / 2,
            "similarity matrix grows quadratically; expect high memory use"
        );
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            fps[i + 1..]
                .iter()
                .map(|b| weighted_mean(&feature_scores(&fps[i], b, opts.geo_tolerance), w))
                .collect()
        })
        .collect();
    let upper = rows.concat();
    Ok(SimilarityMatrix {
        ids: fps.iter().map(|f| f.scanner_ip).collect(),
        upper,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoLocation;

    fn ip(s: &str) -> IpAddr {
        s.parse().unwrap()
    }

    pub(crate) fn fp(addr: &str) -> Fingerprint {
        Fingerprint {
            scanner_ip: ip(addr),
            src_ports: PortClass::Single(30443),
            dst_ports: PortClass::Single(30443),
            vertical: Vertical::MultiHost,
            horizontal: false,
            validation: false,
            ip_version: IpVersion::of(ip(addr)),
            target_hosts: 591,
            probe_count: 591,
            location: GeoLocation::at("FR", 48.85, 2.35).unwrap(),
        }
    }

    #[test]
    fn default_weights_total_21() {
        let w = FeatureWeights::default();
        assert_eq!(w.total(), 21.0);
        assert_eq!(w.get(Feature::SrcPorts), 4.0);
        assert_eq!(w.get(Feature::Location), 2.0);
        assert_eq!(w.get(Feature::ProbeCountMagnitude), 1.0);
    }

    #[test]
    fn weights_validation() {
        assert_eq!(
            FeatureWeights::new([0.0; 10]),
            Err(SimilarityError::AllWeightsZero)
        );
        let mut w = [1.0; 10];
        w[3] = -1.0;
        assert_eq!(
            FeatureWeights::new(w),
            Err(SimilarityError::InvalidWeight(Feature::Horizontal))
        );
        let json = r#"{"src_ports": 1.0, "location": 0.0}"#;
        let parsed: FeatureWeights = serde_json::from_str(json).unwrap();
        assert_eq!(parsed.get(Feature::SrcPorts), 1.0);
        assert_eq!(parsed.get(Feature::DstPorts), 4.0);
        assert_eq!(parsed.get(Feature::Location), 0.0);
        assert!(serde_json::from_str::<FeatureWeights>(r#"{"ttl": 1.0}"#).is_err());
    }

    #[test]
    fn port_rule_examples() {
        assert_eq!(
            sim_port_class(PortClass::Single(30443), PortClass::Single(30443)),
            1.0
        );
        assert_eq!(
            sim_port_class(PortClass::Single(46960), PortClass::Single(55776)),
            0.5
        );
        assert_eq!(sim_port_class(PortClass::Few, PortClass::Multiple), 0.0);
        assert_eq!(sim_port_class(PortClass::Single(1), PortClass::Few), 0.0);
        assert_eq!(
            sim_port_class(PortClass::Multiple, PortClass::Multiple),
            1.0
        );
    }

    #[test]
    fn vertical_rule_examples() {
        let h1 = Vertical::SingleHost(ip("198.51.100.2"));
        let h2 = Vertical::SingleHost(ip("198.51.100.3"));
        assert_eq!(
            sim_vertical(&Vertical::MultiHost, &Vertical::MultiHost),
            1.0
        );
        assert_eq!(sim_vertical(&h1, &h1), 1.0);
        assert_eq!(sim_vertical(&h1, &h2), 0.0);
        assert_eq!(sim_vertical(&h1, &Vertical::MultiHost), 0.0);
    }

    #[test]
    fn flag_and_version_rules() {
        assert_eq!(sim_flag(true, true), 1.0);
        assert_eq!(sim_flag(true, false), 0.0);
        assert_eq!(sim_ip_version(IpVersion::V4, IpVersion::V6), 0.0);
        assert_eq!(sim_ip_version(IpVersion::V6, IpVersion::V6), 1.0);
    }

    #[test]
    fn magnitude_rule_examples() {
        assert_eq!(sim_magnitude(100, 150), 1.0);
        assert_eq!(sim_magnitude(10, 30), 0.0);
        assert_eq!(sim_magnitude(591, 799), 1.0);
        assert_eq!(sim_magnitude(10, 20), 0.0);
        assert_eq!(sim_magnitude(1, 1), 1.0);
    }

    #[test]
    fn subnet_rule_examples() {
        assert_eq!(sim_subnet(ip("10.0.0.1"), ip("10.0.0.1")), 1.0);
        // 88.138.143.0 and 88.138.143.16 share 27 leading bits.
        assert_eq!(
            sim_subnet(ip("88.138.143.0"), ip("88.138.143.16")),
            27.0 / 32.0
        );
        assert_eq!(sim_subnet(ip("10.0.0.1"), ip("::1")), 0.0);
        assert_eq!(sim_subnet(ip("::"), ip("8000::")), 0.0);
    }

    #[test]
    fn geo_rule_examples() {
        let paris = GeoLocation::at("FR", 48.85, 2.35).unwrap();
        let toulouse = GeoLocation::at("FR", 43.60, 1.44).unwrap();
        let amsterdam = GeoLocation::at("NL", 52.37, 4.89).unwrap();
        let madrid = GeoLocation::at("ES", 40.42, -3.70).unwrap();
        assert_eq!(sim_geo(&paris, &paris, 5.0), 1.0);
        assert_eq!(sim_geo(&paris, &toulouse, 5.0), 0.5);
        // Different countries inside the box still count as nearby.
        assert_eq!(sim_geo(&paris, &amsterdam, 5.0), 1.0);
        assert_eq!(sim_geo(&paris, &madrid, 5.0), 0.0);
        assert_eq!(
            sim_geo(&GeoLocation::unknown(), &GeoLocation::unknown(), 5.0),
            0.0
        );
        let fr = GeoLocation::in_country("FR").unwrap();
        assert_eq!(sim_geo(&fr, &paris, 5.0), 0.5);
    }

    #[test]
    fn aggregate_examples() {
        let w = FeatureWeights::default();
        let a = fp("88.138.143.1");
        assert_eq!(similarity(&a, &a, &w, 5.0).unwrap(), 1.0);

        let s = [0.5, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        // Independent scalar route: each feature's loss is (1 - s) * w.
        let loss = 4.0 * 0.5 + 4.0 * 0.5;
        let expected = (21.0 - loss) / 21.0;
        assert!((weighted_mean(&s, &w) - expected).abs() < 1e-12);
        assert!((weighted_mean(&s, &w) - 17.0 / 21.0).abs() < 1e-12);
        assert_eq!(weighted_mean(&[0.0; 10], &w), 0.0);
    }

    #[test]
    fn matrix_examples() {
        let w = FeatureWeights::default();
        let one = build_matrix(&[fp("10.0.0.1")], &w, MatrixOptions::default()).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one.condensed().is_empty());
        assert_eq!(one.get(0, 0), 1.0);

        let fps = [fp("10.0.0.1"), fp("10.0.0.2"), fp("192.0.2.1")];
        let m = build_matrix(&fps, &w, MatrixOptions::default()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), m.get(j, i));
                let direct = if i == j {
                    1.0
                } else {
                    similarity(&fps[i], &fps[j], &w, 5.0).unwrap()
                };
                assert_eq!(m.get(i, j), direct);
            }
        }
        assert!(m.get(0, 1) > m.get(0, 2));

        assert_eq!(
            build_matrix(
                &[fp("10.0.0.1"), fp("10.0.0.1")],
                &w,
                MatrixOptions::default()
            ),
            Err(SimilarityError::DuplicateScanner(ip("10.0.0.1")))
        );
        assert_eq!(
            build_matrix(&[], &w, MatrixOptions::default()),
            Err(SimilarityError::Empty)
        );
    }

    #[test]
    fn condensed_indexing() {
        let n = 5;
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                assert_eq!(condensed_index(n, i, j), k);
                k += 1;
            }
        }
    }

    #[test]
    fn matrix_tsv_export() {
        let w = FeatureWeights::default();
        let m = build_matrix(
            &[fp("10.0.0.1"), fp("10.0.0.1").clone_with_ip("10.0.0.2")],
            &w,
            MatrixOptions::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "10.0.0.1\t10.0.0.2");
        assert!(lines[1].starts_with("10.0.0.1\t0.9"));
        assert_eq!(lines[2], "10.0.0.2");
    }

    impl Fingerprint {
        fn clone_with_ip(&self, addr: &str) -> Fingerprint {
            let mut f = self.clone();
            f.scanner_ip = ip(addr);
            f
        }
    }
}
