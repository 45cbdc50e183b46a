//! Violation-rate targets from scan sessions.
//!
//! A session's rate is `violations / capacity`, clamped to [0, 1]. Raw labels
//! put each session in the slot whose center is nearest its midpoint. Smoothed
//! labels spread every session over its own slot and the `neighbor_slots`
//! slots on either side:
//!
//! ```text
//! y(t) = 1/|S| · Σ_{s ∈ S} exp(−d_s / σ) · p_s
//! ```
//!
//! where `S` are the sessions that fall in slot `t` or its neighbors and `d_s`
//! is the distance in minutes from the session midpoint to the center of `t`.
//! Cells that receive no session are not labeled.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::domain::{CellKey, ScanSession, Sector, SectorSet, TimeSlot, SLOTS_PER_DAY};
use crate::error::{Error, Result};
use crate::io::{format_date, read_rows, write_rows};
use crate::kv::{self, KvConfig};

/// Scans of one sector closer than this are one session.
pub const SESSION_MERGE_GAP_MINUTES: i64 = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRate {
    pub sector_id: String,
    pub midpoint: NaiveDateTime,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotLabel {
    pub sector_id: String,
    pub slot: TimeSlot,
    pub target: f64,
    /// Number of sessions that contributed.
    pub support: u32,
}

impl SlotLabel {
    pub fn key(&self) -> CellKey {
        CellKey {
            sector_id: self.sector_id.clone(),
            slot: self.slot,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub sigma_minutes: f64,
    pub neighbor_slots: u32,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            sigma_minutes: 210.0,
            neighbor_slots: 1,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_minutes > 0.0) {
            return Err(Error::Invalid(format!(
                "sigma_minutes must be > 0, got {}",
                self.sigma_minutes
            )));
        }
        Ok(())
    }
}

impl KvConfig for SmoothingConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "sigma_minutes" => self.sigma_minutes = kv::value(key, v)?,
            "neighbor_slots" => self.neighbor_slots = kv::value(key, v)?,
            _ => return Err(kv::unknown(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("sigma_minutes", self.sigma_minutes.to_string()),
            ("neighbor_slots", self.neighbor_slots.to_string()),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Raw,
    Smoothed,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(LabelMode::Raw),
            "smoothed" => Ok(LabelMode::Smoothed),
            other => Err(Error::Invalid(format!("label mode must be raw or smoothed, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelMode::Raw => "raw",
            LabelMode::Smoothed => "smoothed",
        })
    }
}

/// Labels plus the number of sessions dropped for lying outside 07:00–19:00.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Labeling {
    pub labels: Vec<SlotLabel>,
    pub dropped: usize,
}

/// Violations over capacity for one session, clamped to [0, 1].
pub fn session_rate(scan: &ScanSession, sector: &Sector) -> Result<SessionRate> {
    if scan.sector_id != sector.id {
        return Err(Error::Invalid(format!(
            "scan of sector {} paired with sector {}",
            scan.sector_id, sector.id
        )));
    }
    if sector.capacity == 0 {
        return Err(Error::Invalid(format!("sector {}: capacity must be ≥ 1", sector.id)));
    }
    Ok(SessionRate {
        sector_id: scan.sector_id.clone(),
        midpoint: scan.timestamp,
        rate: (scan.violations as f64 / sector.capacity as f64).clamp(0.0, 1.0),
    })
}

/// Group scans into sessions and compute their rates.
///
/// Scans of one sector separated by at most [`SESSION_MERGE_GAP_MINUTES`]
/// from the previous scan chain into one session. The merged midpoint is the
/// mean scan time and the merged rate is the mean of the member rates.
/// Output is sorted by (sector id, midpoint).
pub fn session_rates(scans: &[ScanSession], sectors: &SectorSet) -> Result<Vec<SessionRate>> {
    let mut by_sector: BTreeMap<&str, Vec<&ScanSession>> = BTreeMap::new();
    for scan in scans {
        by_sector.entry(scan.sector_id.as_str()).or_default().push(scan);
    }
    let gap = Duration::minutes(SESSION_MERGE_GAP_MINUTES);
    let mut out = Vec::with_capacity(scans.len());
    for (id, mut group) in by_sector {
        let sector = sectors
            .get(id)
            .ok_or_else(|| Error::UnknownSector(id.to_string()))?;
        group.sort_by_key(|s| s.timestamp);
        let mut start = 0;
        for i in 1..=group.len() {
            if i < group.len() && group[i].timestamp - group[i - 1].timestamp <= gap {
                continue;
            }
            let members = &group[start..i];
            let rates = members
                .iter()
                .map(|s| session_rate(s, sector).map(|r| r.rate))
                .collect::<Result<Vec<_>>>()?;
            let anchor = members[0].timestamp;
            let offset_secs: i64 = members
                .iter()
                .map(|s| (s.timestamp - anchor).num_seconds())
                .sum::<i64>();
            let n = members.len() as i64;
            out.push(SessionRate {
                sector_id: id.to_string(),
                midpoint: anchor + Duration::seconds((offset_secs + n / 2) / n),
                rate: rates.iter().sum::<f64>() / rates.len() as f64,
            });
            start = i;
        }
    }
    Ok(out)
}

fn group_by_day(sessions: &[SessionRate]) -> (BTreeMap<(&str, NaiveDate), Vec<(u8, &SessionRate)>>, usize) {
    let mut groups: BTreeMap<(&str, NaiveDate), Vec<(u8, &SessionRate)>> = BTreeMap::new();
    let mut dropped = 0;
    for s in sessions {
        match TimeSlot::nearest(s.midpoint) {
            Some(slot) => groups
                .entry((s.sector_id.as_str(), slot.date))
                .or_default()
                .push((slot.index(), s)),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("{dropped} sessions outside enforcement hours were dropped");
    }
    (groups, dropped)
}

/// Raw labels: each session goes to its nearest slot; sessions sharing a cell
/// are averaged.
pub fn assign_raw(sessions: &[SessionRate]) -> Labeling {
    let (groups, dropped) = group_by_day(sessions);
    let mut labels = Vec::new();
    for ((id, date), members) in groups {
        let mut sums = [(0.0f64, 0u32); SLOTS_PER_DAY as usize];
        for (idx, s) in members {
            sums[idx as usize].0 += s.rate;
            sums[idx as usize].1 += 1;
        }
        for (idx, (sum, n)) in sums.into_iter().enumerate() {
            if n > 0 {
                labels.push(SlotLabel {
                    sector_id: id.to_string(),
                    slot: TimeSlot::new(date, idx as u8).expect("index < 12"),
                    target: (sum / n as f64).clamp(0.0, 1.0),
                    support: n,
                });
            }
        }
    }
    Labeling { labels, dropped }
}

/// Smoothed and augmented labels.
pub fn smooth(sessions: &[SessionRate], cfg: &SmoothingConfig) -> Result<Labeling> {
    cfg.validate()?;
    let (groups, dropped) = group_by_day(sessions);
    let reach = cfg.neighbor_slots as i32;
    let mut labels = Vec::new();
    for ((id, date), members) in groups {
        for slot in TimeSlot::all_of(date) {
            let center = slot.center();
            let t = slot.index() as i32;
            let mut sum = 0.0;
            let mut support = 0u32;
            for &(idx, s) in &members {
                if (idx as i32 - t).abs() > reach {
                    continue;
                }
                let d_minutes = (s.midpoint - center).num_seconds().abs() as f64 / 60.0;
                sum += (-d_minutes / cfg.sigma_minutes).exp() * s.rate;
                support += 1;
            }
            if support > 0 {
                labels.push(SlotLabel {
                    sector_id: id.to_string(),
                    slot,
                    target: (sum / support as f64).clamp(0.0, 1.0),
                    support,
                });
            }
        }
    }
    Ok(Labeling { labels, dropped })
}

pub fn label(sessions: &[SessionRate], mode: LabelMode, cfg: &SmoothingConfig) -> Result<Labeling> {
    match mode {
        LabelMode::Raw => Ok(assign_raw(sessions)),
        LabelMode::Smoothed => smooth(sessions, cfg),
    }
}

pub const LABELS_HEADER: &[&str] = &["sector_id", "date", "slot", "target", "support"];

pub fn save_labels(path: impl AsRef<Path>, labels: &[SlotLabel]) -> Result<()> {
    write_rows(
        path.as_ref(),
        LABELS_HEADER,
        labels.iter().map(|l| {
            [
                l.sector_id.clone(),
                format_date(l.slot.date),
                l.slot.index().to_string(),
                l.target.to_string(),
                l.support.to_string(),
            ]
        }),
    )
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<SlotLabel>> {
    read_rows(path.as_ref(), LABELS_HEADER, |row| {
        let slot = TimeSlot::new(row.date(1)?, row.parse(2, "slot")?).map_err(|e| row.wrap(e))?;
        let target: f64 = row.parse(3, "target")?;
        let support: u32 = row.parse(4, "support")?;
        if !(0.0..=1.0).contains(&target) {
            return Err(row.wrap(Error::Invalid(format!("target {target} outside [0, 1]"))));
        }
        if support < 1 {
            return Err(row.wrap(Error::Invalid("support must be ≥ 1".into())));
        }
        Ok(SlotLabel {
            sector_id: row.str(0)?.to_string(),
            slot,
            target,
            support,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorStat {
    pub sector_id: String,
    pub lat: f64,
    pub lon: f64,
    pub mean_rate: f64,
    pub n_labels: usize,
}

/// Per-sector mean violation rates, for mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialStats {
    /// Sectors with at least one label, in sector-file order.
    pub sectors: Vec<SectorStat>,
    /// Mean over all labels.
    pub global_mean: f64,
    pub min_sector_mean: f64,
    pub max_sector_mean: f64,
}

pub fn spatial_stats(labels: &[SlotLabel], sectors: &SectorSet) -> Result<SpatialStats> {
    if labels.is_empty() {
        return Err(Error::Empty("label set"));
    }
    let mut acc = vec![(0.0f64, 0usize); sectors.len()];
    for l in labels {
        let i = sectors
            .position(&l.sector_id)
            .ok_or_else(|| Error::UnknownSector(l.sector_id.clone()))?;
        acc[i].0 += l.target;
        acc[i].1 += 1;
    }
    let stats: Vec<SectorStat> = sectors
        .iter()
        .zip(&acc)
        .filter(|(_, (_, n))| *n > 0)
        .map(|(s, &(sum, n))| SectorStat {
            sector_id: s.id.clone(),
            lat: s.center.lat,
            lon: s.center.lon,
            mean_rate: sum / n as f64,
            n_labels: n,
        })
        .collect();
    let global_mean = labels.iter().map(|l| l.target).sum::<f64>() / labels.len() as f64;
    let min_sector_mean = stats.iter().map(|s| s.mean_rate).fold(f64::INFINITY, f64::min);
    let max_sector_mean = stats.iter().map(|s| s.mean_rate).fold(f64::NEG_INFINITY, f64::max);
    Ok(SpatialStats {
        sectors: stats,
        global_mean,
        min_sector_mean,
        max_sector_mean,
    })
}

impl SpatialStats {
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(
            path.as_ref(),
            &["sector_id", "lat", "lon", "mean_rate", "n_labels"],
            self.sectors.iter().map(|s| {
                [
                    s.sector_id.clone(),
                    s.lat.to_string(),
                    s.lon.to_string(),
                    s.mean_rate.to_string(),
                    s.n_labels.to_string(),
                ]
            }),
        )
    }

    pub fn to_geojson(&self) -> serde_json::Value {
        let features: Vec<serde_json::Value> = self
            .sectors
            .iter()
            .map(|s| {
                serde_json::json!({
                    "type": "Feature",
                    "geometry": { "type": "Point", "coordinates": [s.lon, s.lat] },
                    "properties": {
                        "sector_id": s.sector_id,
                        "mean_rate": s.mean_rate,
                        "n_labels": s.n_labels,
                    },
                })
            })
            .collect();
        serde_json::json!({
            "type": "FeatureCollection",
            "features": features,
            "properties": {
                "global_mean": self.global_mean,
                "min_sector_mean": self.min_sector_mean,
                "max_sector_mean": self.max_sector_mean,
            },
        })
    }

    pub fn save_geojson(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, &self.to_geojson())
    }
}
