//! Detection and correlation of distributed port scans.
//!
//! The pipeline runs in stages, one module each:
//!
//! 1. [`ingest`] parses connection logs (Zeek `conn.log` TSV or CSV) into
//!    [`ConnRecord`](ingest::ConnRecord)s and optionally restricts them to a
//!    monitored subnet.
//! 2. [`detect`] turns failed connection attempts into scan probes, groups
//!    them per source IP and drops sources below the probe threshold ε.
//! 3. [`fingerprint`] characterizes each scanner with ten features covering
//!    its tool (source ports, validation, subnet, location) and its intention
//!    (destination ports, scan geometry, magnitudes, IP version).
//! 4. [`similarity`] scores scanner pairs with a weighted average of
//!    per-feature similarities and builds the pairwise matrix.
//! 5. [`cluster`] runs UPGMA over `1 - similarity` and cuts the dendrogram at
//!    a similarity threshold `t`.
//! 6. [`campaign`] summarizes multi-scanner clusters and dataset statistics
//!    into a stable JSON report.
//!
//! [`synth`] produces labeled synthetic logs and scores correlation output
//! against ground truth; [`pipeline`] wires the stages together under a
//! [`RunConfig`](config::RunConfig).

pub mod campaign;
pub mod cluster;
pub mod config;
pub mod detect;
pub mod fingerprint;
pub mod geo;
pub mod ingest;
pub mod net;
pub mod pipeline;
pub mod similarity;
pub mod synth;

pub use campaign::{CampaignSummary, DatasetStats, Report};
pub use cluster::{Campaign, Cluster, Dendrogram};
pub use config::RunConfig;
pub use detect::{ProbeClassifierConfig, ScanProbe, ScannerProfile};
pub use fingerprint::{Fingerprint, PortClass};
pub use geo::{GeoDatabase, GeoLocation};
pub use ingest::{ConnRecord, LogFormat, Protocol, SubnetFilter};
pub use similarity::{FeatureWeights, SimilarityMatrix};
