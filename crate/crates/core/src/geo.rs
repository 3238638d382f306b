//! Offline geolocation by longest-prefix match.
//!
//! The database is a CSV with header `network,country,lat,lon`, one CIDR per
//! row. Coordinates may be left empty when only the country is known.

use std::collections::HashMap;
use std::io::Read;
use std::net::IpAddr;

use ipnet::IpNet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::prefix_of;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("geo database row {row}: {reason}")]
    BadRow { row: u64, reason: String },
    #[error("geo database header must be `network,country,lat,lon`")]
    BadHeader,
    #[error("duplicate network {0} in geo database")]
    DuplicateNetwork(IpNet),
    #[error("invalid location: {0}")]
    InvalidLocation(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Source location of an address.
///
/// Coordinates are only present together with a country.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GeoLocation {
    country: Option<String>,
    coords: Option<(f64, f64)>,
}

impl GeoLocation {
    pub fn unknown() -> Self {
        GeoLocation::default()
    }

    pub fn in_country(country: impl Into<String>) -> Result<Self, GeoError> {
        let country = country.into();
        if country.len() != 2 || !country.chars().all(|c| c.is_ascii_alphabetic()) {
            return Err(GeoError::InvalidLocation(format!(
                "country code {country:?}"
            )));
        }
        Ok(GeoLocation {
            country: Some(country.to_ascii_uppercase()),
            coords: None,
        })
    }

    pub fn at(country: impl Into<String>, lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::InvalidLocation(format!(
                "coordinates ({lat}, {lon})"
            )));
        }
        let mut loc = GeoLocation::in_country(country)?;
        loc.coords = Some((lat, lon));
        Ok(loc)
    }

    pub fn country(&self) -> Option<&str> {
        self.country.as_deref()
    }

    /// `(lat, lon)` in degrees.
    pub fn coords(&self) -> Option<(f64, f64)> {
        self.coords
    }

    pub fn is_known(&self) -> bool {
        self.country.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoEntry {
    pub network: IpNet,
    pub location: GeoLocation,
}

/// Immutable prefix table; lookups probe each stored prefix length from the
/// longest down, one hash lookup per length.
#[derive(Debug, Clone, Default)]
pub struct GeoDatabase {
    table: HashMap<IpNet, GeoLocation>,
    v4_lens: Vec<u8>,
    v6_lens: Vec<u8>,
}

impl GeoDatabase {
    /// A database without entries; every lookup yields an unknown location.
    pub fn empty() -> Self {
        GeoDatabase::default()
    }

    pub fn from_entries<I: IntoIterator<Item = GeoEntry>>(entries: I) -> Result<Self, GeoError> {
        let mut db = GeoDatabase::default();
        for e in entries {
            let net = e.network.trunc();
            if db.table.insert(net, e.location).is_some() {
                return Err(GeoError::DuplicateNetwork(net));
            }
            let lens = match net {
                IpNet::V4(_) => &mut db.v4_lens,
                IpNet::V6(_) => &mut db.v6_lens,
            };
            if !lens.contains(&net.prefix_len()) {
                lens.push(net.prefix_len());
            }
        }
        db.v4_lens.sort_unstable_by(|a, b| b.cmp(a));
        db.v6_lens.sort_unstable_by(|a, b| b.cmp(a));
        Ok(db)
    }

    pub fn from_csv<R: Read>(input: R) -> Result<Self, GeoError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(input);
        let header: Vec<String> = reader
            .headers()?
            .iter()
            .map(|h| h.to_ascii_lowercase())
            .collect();
        if header != ["network", "country", "lat", "lon"] {
            return Err(GeoError::BadHeader);
        }
        let mut entries = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row?;
            let row_no = i as u64 + 2;
            let bad = |reason: String| GeoError::BadRow {
                row: row_no,
                reason,
            };
            let network: IpNet = row[0]
                .parse()
                .map_err(|_| bad(format!("invalid network {:?}", &row[0])))?;
            let location = match (&row[1], &row[2], &row[3]) {
                ("", "", "") => GeoLocation::unknown(),
                (cc, "", "") => GeoLocation::in_country(cc).map_err(|e| bad(e.to_string()))?,
                (cc, lat, lon) => {
                    let lat: f64 = lat
                        .parse()
                        .map_err(|_| bad(format!("invalid latitude {lat:?}")))?;
                    let lon: f64 = lon
                        .parse()
                        .map_err(|_| bad(format!("invalid longitude {lon:?}")))?;
                    GeoLocation::at(cc, lat, lon).map_err(|e| bad(e.to_string()))?
                }
            };
            entries.push(GeoEntry { network, location });
        }
        GeoDatabase::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Longest-prefix match; unknown when nothing contains `ip`.
    pub fn lookup(&self, ip: IpAddr) -> GeoLocation {
        let lens = if ip.is_ipv4() {
            &self.v4_lens
        } else {
            &self.v6_lens
        };
        lens.iter()
            .find_map(|&len| self.table.get(&prefix_of(ip, len)))
            .cloned()
            .unwrap_or_default()
    }
}

/// Writes entries in the format [`GeoDatabase::from_csv`] reads.
pub fn write_geo_csv<'a, W, I>(out: W, entries: I) -> Result<(), GeoError>
where
    W: std::io::Write,
    I: IntoIterator<Item = &'a GeoEntry>,
{
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["network", "country", "lat", "lon"])?;
    for e in entries {
        let (lat, lon) = e
            .location
            .coords()
            .map_or((String::new(), String::new()), |(a, b)| {
                (a.to_string(), b.to_string())
            });
        w.write_record([
            e.network.to_string(),
            e.location.country().unwrap_or("").to_string(),
            lat,
            lon,
        ])?;
    }
    w.flush().map_err(|e| GeoError::Csv(e.into()))?;
    Ok(())
}
