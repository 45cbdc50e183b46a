//! Domain types shared by every stage of the pipeline: sectors, points of
//! interest, scan sessions, weather, calendar flags and enforcement time slots.
//!
//! All timestamps are naive local civil time. Enforcement runs from 07:00 to
//! 19:00 and is divided into twelve one-hour slots.

use std::collections::HashMap;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of one-hour enforcement slots per day.
pub const SLOTS_PER_DAY: u8 = 12;
/// Hour at which enforcement (and slot 0) starts.
pub const ENFORCEMENT_START_HOUR: u32 = 7;
/// Mean Earth radius used for great-circle distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || self.lat.is_nan() {
            return Err(Error::Invalid(format!("latitude {} outside [-90, 90]", self.lat)));
        }
        if !(-180.0..=180.0).contains(&self.lon) || self.lon.is_nan() {
            return Err(Error::Invalid(format!("longitude {} outside [-180, 180]", self.lon)));
        }
        Ok(())
    }
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: LatLon, b: LatLon) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sector {
    pub id: String,
    pub center: LatLon,
    /// Number of marked parking slots.
    pub capacity: u32,
}

impl Sector {
    pub fn new(id: impl Into<String>, lat: f64, lon: f64, capacity: u32) -> Result<Self> {
        let sector = Self {
            id: id.into(),
            center: LatLon::new(lat, lon),
            capacity,
        };
        sector.validate()?;
        Ok(sector)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Invalid("sector id must not be empty".into()));
        }
        if self.capacity < 1 {
            return Err(Error::Invalid(format!(
                "sector {}: capacity must be ≥ 1",
                self.id
            )));
        }
        self.center.validate()
    }
}

/// Ordered collection of sectors with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SectorSet {
    sectors: Vec<Sector>,
    index: HashMap<String, usize>,
}

impl SectorSet {
    pub fn new(sectors: Vec<Sector>) -> Result<Self> {
        let mut index = HashMap::with_capacity(sectors.len());
        for (i, s) in sectors.iter().enumerate() {
            s.validate()?;
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate sector id {:?}", s.id)));
            }
        }
        Ok(Self { sectors, index })
    }

    pub fn len(&self) -> usize {
        self.sectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sector> {
        self.index.get(id).map(|&i| &self.sectors[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sector> {
        self.sectors.iter()
    }

    pub fn as_slice(&self) -> &[Sector] {
        &self.sectors
    }
}

impl<'a> IntoIterator for &'a SectorSet {
    type Item = &'a Sector;
    type IntoIter = std::slice::Iter<'a, Sector>;

    fn into_iter(self) -> Self::IntoIter {
        self.sectors.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub name: String,
    pub location: LatLon,
}

/// Points of interest. Row order defines the distance-feature column order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoiSet(Vec<Poi>);

impl PoiSet {
    pub const DEFAULT_LEN: usize = 19;

    pub fn new(pois: Vec<Poi>) -> Result<Self> {
        for p in &pois {
            p.location.validate()?;
        }
        Ok(Self(pois))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Poi> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[Poi] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanSession {
    pub sector_id: String,
    pub timestamp: NaiveDateTime,
    pub cars_scanned: u32,
    pub violations: u32,
}

impl ScanSession {
    pub fn validate(&self) -> Result<()> {
        if self.violations > self.cars_scanned {
            return Err(Error::Invalid(format!(
                "sector {} at {}: {} violations exceed {} cars scanned",
                self.sector_id, self.timestamp, self.violations, self.cars_scanned
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherRecord {
    pub timestamp: NaiveDateTime,
    pub temperature_c: f64,
    pub humidity_pct: f64,
}

/// Hourly weather observations in strictly increasing time order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeatherSeries {
    records: Vec<WeatherRecord>,
    has_gaps: bool,
}

impl WeatherSeries {
    pub fn new(records: Vec<WeatherRecord>) -> Result<Self> {
        let mut has_gaps = false;
        for r in &records {
            if r.timestamp.minute() != 0 || r.timestamp.second() != 0 {
                return Err(Error::Invalid(format!(
                    "weather timestamp {} is not on the hour",
                    r.timestamp
                )));
            }
            if !(0.0..=100.0).contains(&r.humidity_pct) {
                return Err(Error::Invalid(format!(
                    "humidity {} at {} outside [0, 100]",
                    r.humidity_pct, r.timestamp
                )));
            }
            if !r.temperature_c.is_finite() {
                return Err(Error::Invalid(format!("non-finite temperature at {}", r.timestamp)));
            }
        }
        for pair in records.windows(2) {
            let step = pair[1].timestamp - pair[0].timestamp;
            if step <= Duration::zero() {
                return Err(Error::Invalid(format!(
                    "weather timestamps not strictly increasing at {}",
                    pair[1].timestamp
                )));
            }
            if step > Duration::hours(1) {
                has_gaps = true;
            }
        }
        Ok(Self { records, has_gaps })
    }

    pub fn records(&self) -> &[WeatherRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// True when at least one hour is missing between consecutive records.
    pub fn has_gaps(&self) -> bool {
        self.has_gaps
    }

    /// Value at `at`, or the last value before it, or the first value of the
    /// series when nothing precedes `at`.
    pub fn carried_forward(&self, at: NaiveDateTime) -> Option<&WeatherRecord> {
        let idx = self.records.partition_point(|r| r.timestamp <= at);
        if idx == 0 {
            self.records.first()
        } else {
            Some(&self.records[idx - 1])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalendarInfo {
    pub date: NaiveDate,
    pub is_holiday: bool,
    pub is_pandemic: bool,
}

/// Per-date calendar flags, at most one record per date.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Calendar {
    days: Vec<CalendarInfo>,
    index: HashMap<NaiveDate, usize>,
}

impl Calendar {
    pub fn new(mut days: Vec<CalendarInfo>) -> Result<Self> {
        days.sort_by_key(|d| d.date);
        let mut index = HashMap::with_capacity(days.len());
        for (i, d) in days.iter().enumerate() {
            if index.insert(d.date, i).is_some() {
                return Err(Error::Invalid(format!("duplicate calendar date {}", d.date)));
            }
        }
        Ok(Self { days, index })
    }

    pub fn get(&self, date: NaiveDate) -> Option<&CalendarInfo> {
        self.index.get(&date).map(|&i| &self.days[i])
    }

    pub fn require(&self, date: NaiveDate) -> Result<&CalendarInfo> {
        self.get(date).ok_or(Error::MissingCalendar(date))
    }

    pub fn days(&self) -> &[CalendarInfo] {
        &self.days
    }
}

/// One of the twelve hourly enforcement slots of a date.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeSlot {
    pub date: NaiveDate,
    index: u8,
}

impl TimeSlot {
    pub fn new(date: NaiveDate, index: u8) -> Result<Self> {
        if index >= SLOTS_PER_DAY {
            return Err(Error::Invalid(format!("slot index {index} outside [0, 11]")));
        }
        Ok(Self { date, index })
    }

    pub fn index(&self) -> u8 {
        self.index
    }

    pub fn start(&self) -> NaiveDateTime {
        self.date
            .and_time(NaiveTime::from_hms_opt(ENFORCEMENT_START_HOUR + self.index as u32, 0, 0).unwrap())
    }

    pub fn end(&self) -> NaiveDateTime {
        self.start() + Duration::hours(1)
    }

    /// Slot center: 07:30 + index hours.
    pub fn center(&self) -> NaiveDateTime {
        self.start() + Duration::minutes(30)
    }

    /// The slot whose center is nearest to `at`; a point equidistant from two
    /// centers goes to the earlier slot. `None` outside 07:00–19:00 inclusive.
    pub fn nearest(at: NaiveDateTime) -> Option<Self> {
        let open = at.date().and_time(NaiveTime::from_hms_opt(ENFORCEMENT_START_HOUR, 0, 0).unwrap());
        let secs = (at - open).num_seconds();
        if secs < 0 || secs > SLOTS_PER_DAY as i64 * 3600 {
            return None;
        }
        // Centers sit at 1800 + 3600k seconds; ties round toward the earlier one.
        let index = if secs <= 3600 { 0 } else { (secs - 3600 + 3599) / 3600 };
        Some(Self {
            date: at.date(),
            index: index.min(SLOTS_PER_DAY as i64 - 1) as u8,
        })
    }

    /// Slot on the same date shifted by `offset`, if it stays within the day.
    pub fn shifted(&self, offset: i32) -> Option<Self> {
        let i = self.index as i32 + offset;
        (0..SLOTS_PER_DAY as i32).contains(&i).then(|| Self {
            date: self.date,
            index: i as u8,
        })
    }

    pub fn all_of(date: NaiveDate) -> impl Iterator<Item = TimeSlot> {
        (0..SLOTS_PER_DAY).map(move |index| TimeSlot { date, index })
    }
}

pub fn slot_center(slot: TimeSlot) -> NaiveDateTime {
    slot.center()
}

/// Number of days in the month containing `date`.
pub fn days_in_month(date: NaiveDate) -> u32 {
    let (y, m) = (date.year(), date.month());
    let first_next = if m == 12 {
        NaiveDate::from_ymd_opt(y + 1, 1, 1)
    } else {
        NaiveDate::from_ymd_opt(y, m + 1, 1)
    }
    .unwrap();
    first_next.pred_opt().unwrap().day()
}

/// Identity of one prediction cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub sector_id: String,
    pub slot: TimeSlot,
}
