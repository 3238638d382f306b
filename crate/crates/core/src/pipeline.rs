//! End-to-end wiring of the stages under a [`RunConfig`].

use std::collections::HashMap;
use std::net::IpAddr;

use thiserror::Error;

use crate::campaign::{
    dataset_stats, summarize_campaign, CampaignError, CampaignReport, Report, RunParameters,
};
use crate::cluster::{cut, extract_campaigns, upgma, Dendrogram};
use crate::config::{ConfigError, RunConfig};
use crate::detect::{
    aggregate_scanners, classify_probe, filter_epsilon, ScanProbe, ScannerProfile,
};
use crate::fingerprint::{fingerprint_all, Fingerprint, FingerprintError};
use crate::geo::GeoDatabase;
use crate::ingest::{ConnRecord, IngestError};
use crate::similarity::{build_matrix, MatrixOptions, SimilarityError, SimilarityMatrix};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Campaign(#[from] CampaignError),
}

/// Counters from a detection pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DetectCounts {
    pub records: u64,
    /// Records dropped by the visibility subnet.
    pub outside_subnet: u64,
    pub probes: u64,
}

/// Streams records through visibility restriction and probe classification.
///
/// Records are consumed one at a time; only probes are kept.
pub fn detect_probes<I>(
    records: I,
    cfg: &RunConfig,
) -> Result<(Vec<ScanProbe>, DetectCounts), PipelineError>
where
    I: IntoIterator<Item = Result<ConnRecord, IngestError>>,
{
    let classifier = cfg.classifier()?;
    let subnet = cfg.subnet_filter()?;
    let mut counts = DetectCounts::default();
    let mut probes = Vec::new();
    for record in records {
        let record = record?;
        counts.records += 1;
        if let Some(f) = &subnet {
            if !f.sees(&record) {
                counts.outside_subnet += 1;
                continue;
            }
        }
        if let Some(p) = classify_probe(&record, &classifier) {
            probes.push(p);
        }
    }
    counts.probes = probes.len() as u64;
    Ok((probes, counts))
}

/// Everything computed by [`correlate`]; the matrix and dendrogram are kept
/// for optional export and threshold sweeps.
#[derive(Debug, Clone)]
pub struct Correlation {
    pub report: Report,
    pub fingerprints: Vec<Fingerprint>,
    pub matrix: Option<SimilarityMatrix>,
    pub dendrogram: Option<Dendrogram>,
}

/// Fingerprints the profiles that survive ε, clusters them and builds the
/// report.
pub fn correlate(
    profiles: Vec<ScannerProfile>,
    cfg: &RunConfig,
    geo: &GeoDatabase,
) -> Result<Correlation, PipelineError> {
    cfg.validate()?;
    let input_scanners = profiles.len();
    let input_probes = profiles.iter().map(|p| p.probe_count() as u64).sum();
    let profiles = filter_epsilon(profiles, cfg.epsilon);
    let fingerprints = fingerprint_all(&profiles, cfg.x, geo)?;

    let (matrix, dendrogram, split) = if fingerprints.is_empty() {
        (None, None, Default::default())
    } else {
        let opts = MatrixOptions {
            geo_tolerance: cfg.d,
            ..MatrixOptions::default()
        };
        let matrix = build_matrix(&fingerprints, &cfg.weights, opts)?;
        let dg = upgma(&matrix);
        let split = extract_campaigns(cut(&dg, cfg.t));
        (Some(matrix), Some(dg), split)
    };

    let index: HashMap<IpAddr, &Fingerprint> =
        fingerprints.iter().map(|f| (f.scanner_ip, f)).collect();
    let campaigns = split
        .campaigns
        .iter()
        .map(|c| {
            Ok(CampaignReport {
                members: c.members.clone(),
                formation_similarity: c.formation_similarity,
                summary: summarize_campaign(c, &index)?,
            })
        })
        .collect::<Result<Vec<_>, CampaignError>>()?;

    let report = Report {
        parameters: parameters(cfg),
        input_scanners,
        input_probes,
        stats: dataset_stats(&profiles, &split),
        campaigns,
        standalone: split.standalone.clone(),
    };
    Ok(Correlation {
        report,
        fingerprints,
        matrix,
        dendrogram,
    })
}

/// Convenience: aggregate probes and correlate.
pub fn correlate_probes(
    probes: Vec<ScanProbe>,
    cfg: &RunConfig,
    geo: &GeoDatabase,
) -> Result<Correlation, PipelineError> {
    correlate(aggregate_scanners(probes), cfg, geo)
}

fn parameters(cfg: &RunConfig) -> RunParameters {
    let classifier = cfg.classifier().expect("validated");
    RunParameters {
        epsilon: cfg.epsilon,
        x: cfg.x,
        t: cfg.t,
        d: cfg.d,
        weights: cfg.weights,
        probe_states: classifier.probe_states().iter().cloned().collect(),
        protocols: classifier
            .protocols()
            .iter()
            .map(|p| p.to_string())
            .collect(),
        subnet: cfg.subnet.clone(),
    }
}
