//! Feature encoding for one (sector, date, slot) cell.
//!
//! Column layout of the 28-wide raw vector:
//!
//! | columns  | content                                        |
//! |----------|------------------------------------------------|
//! | 0..=18   | distance in km to each PoI, in PoI-file order  |
//! | 19       | sector capacity                                |
//! | 20       | weekday, `sin(2πw/7)` with Monday = 0          |
//! | 21       | day of month, `sin(2π(d−1)/N_d)`               |
//! | 22       | month, `sin(2π(m−1)/12)`                       |
//! | 23       | slot offset in hours since 07:00               |
//! | 24       | temperature, mean over the weather window      |
//! | 25       | humidity, mean over the weather window         |
//! | 26       | public holiday flag                            |
//! | 27       | pandemic period flag                           |
//!
//! Datasets keep raw features; a [`Standardizer`] fit on training rows only is
//! applied just before the network sees them.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::domain::{
    days_in_month, haversine_km, Calendar, CellKey, PoiSet, Sector, SectorSet, TimeSlot,
    WeatherSeries,
};
use crate::error::{Error, Result};
use crate::io::{format_date, read_rows, write_rows};
use crate::labeling::SlotLabel;

pub const N_POIS: usize = 19;
pub const FEATURE_DIM: usize = 28;
pub const DEFAULT_WEATHER_WINDOW: usize = 6;

pub const COL_CAPACITY: usize = 19;
pub const COL_WEEKDAY: usize = 20;
pub const COL_DAY: usize = 21;
pub const COL_MONTH: usize = 22;
pub const COL_SLOT: usize = 23;
pub const COL_TEMPERATURE: usize = 24;
pub const COL_HUMIDITY: usize = 25;
pub const COL_HOLIDAY: usize = 26;
pub const COL_PANDEMIC: usize = 27;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn values(&self) -> &[f64; FEATURE_DIM] {
        &self.0
    }
}

fn check_range(value: i64, lo: i64, hi: i64, what: &str) -> Result<()> {
    if value < lo || value > hi {
        return Err(Error::Invalid(format!("{what} {value} outside [{lo}, {hi}]")));
    }
    Ok(())
}

/// `sin(2π·w/7)`, Monday = 0.
pub fn encode_weekday(w: u32) -> Result<f64> {
    check_range(w as i64, 0, 6, "weekday")?;
    Ok((2.0 * PI * w as f64 / 7.0).sin())
}

/// `sin(2π·(d−1)/n_days)`.
pub fn encode_day(d: u32, n_days: u32) -> Result<f64> {
    check_range(n_days as i64, 28, 31, "month length")?;
    check_range(d as i64, 1, n_days as i64, "day")?;
    Ok((2.0 * PI * (d - 1) as f64 / n_days as f64).sin())
}

/// `sin(2π·(m−1)/12)`. January and July collide by construction.
pub fn encode_month(m: u32) -> Result<f64> {
    check_range(m as i64, 1, 12, "month")?;
    Ok((2.0 * PI * (m - 1) as f64 / 12.0).sin())
}

/// Hours since enforcement start; standardized downstream.
pub fn encode_slot(index: u8) -> Result<f64> {
    check_range(index as i64, 0, 11, "slot index")?;
    Ok(index as f64)
}

/// Mean temperature and humidity over the `window` hours ending at `at`
/// (current hour included). Missing hours take the last earlier value, or the
/// first value of the series when nothing precedes them.
pub fn encode_weather(series: &WeatherSeries, at: NaiveDateTime, window: usize) -> Result<(f64, f64)> {
    if series.is_empty() {
        return Err(Error::Empty("weather series"));
    }
    if window == 0 {
        return Err(Error::Invalid("weather window must be ≥ 1".into()));
    }
    let (mut t, mut h) = (0.0, 0.0);
    for i in 0..window {
        let rec = series
            .carried_forward(at - Duration::hours(i as i64))
            .expect("series is nonempty");
        t += rec.temperature_c;
        h += rec.humidity_pct;
    }
    Ok((t / window as f64, h / window as f64))
}

pub fn poi_distances(sector: &Sector, pois: &PoiSet) -> Vec<f64> {
    pois.iter()
        .map(|p| haversine_km(sector.center, p.location))
        .collect()
}

/// Assemble the raw 28-column vector for one cell.
pub fn build_vector(
    sector: &Sector,
    slot: TimeSlot,
    weather: &WeatherSeries,
    calendar: &Calendar,
    pois: &PoiSet,
) -> Result<FeatureVector> {
    let distances = poi_distances(sector, pois);
    assemble(sector, &distances, slot, weather, calendar, DEFAULT_WEATHER_WINDOW)
}

fn assemble(
    sector: &Sector,
    distances: &[f64],
    slot: TimeSlot,
    weather: &WeatherSeries,
    calendar: &Calendar,
    window: usize,
) -> Result<FeatureVector> {
    if distances.len() != N_POIS {
        return Err(Error::WidthMismatch {
            expected: N_POIS,
            found: distances.len(),
        });
    }
    let info = calendar.require(slot.date)?;
    let date = slot.date;
    let (temperature, humidity) = encode_weather(weather, slot.start(), window)?;

    let mut v = [0.0; FEATURE_DIM];
    v[..N_POIS].copy_from_slice(distances);
    v[COL_CAPACITY] = sector.capacity as f64;
    v[COL_WEEKDAY] = encode_weekday(date.weekday().num_days_from_monday())?;
    v[COL_DAY] = encode_day(date.day(), days_in_month(date))?;
    v[COL_MONTH] = encode_month(date.month())?;
    v[COL_SLOT] = encode_slot(slot.index())?;
    v[COL_TEMPERATURE] = temperature;
    v[COL_HUMIDITY] = humidity;
    v[COL_HOLIDAY] = if info.is_holiday { 1.0 } else { 0.0 };
    v[COL_PANDEMIC] = if info.is_pandemic { 1.0 } else { 0.0 };
    Ok(FeatureVector(v))
}

/// Context data needed to featurize cells, with PoI distances cached per sector.
pub struct Featurizer<'a> {
    sectors: &'a SectorSet,
    weather: &'a WeatherSeries,
    calendar: &'a Calendar,
    window: usize,
    distances: HashMap<&'a str, Vec<f64>>,
}

impl<'a> Featurizer<'a> {
    pub fn new(
        sectors: &'a SectorSet,
        pois: &'a PoiSet,
        weather: &'a WeatherSeries,
        calendar: &'a Calendar,
    ) -> Result<Self> {
        if pois.len() != N_POIS {
            return Err(Error::Invalid(format!(
                "expected {N_POIS} points of interest, found {}",
                pois.len()
            )));
        }
        if weather.is_empty() {
            return Err(Error::Empty("weather series"));
        }
        let distances = sectors
            .iter()
            .map(|s| (s.id.as_str(), poi_distances(s, pois)))
            .collect();
        Ok(Self {
            sectors,
            weather,
            calendar,
            window: DEFAULT_WEATHER_WINDOW,
            distances,
        })
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn vector(&self, key: &CellKey) -> Result<FeatureVector> {
        let sector = self
            .sectors
            .get(&key.sector_id)
            .ok_or_else(|| Error::UnknownSector(key.sector_id.clone()))?;
        let distances = &self.distances[sector.id.as_str()];
        assemble(sector, distances, key.slot, self.weather, self.calendar, self.window)
    }

    /// One dataset row per label, in label order. Every label date must have a
    /// calendar record.
    pub fn dataset(&self, labels: &[SlotLabel]) -> Result<Dataset> {
        let rows = labels
            .iter()
            .map(|l| {
                let key = l.key();
                Ok(DatasetRow {
                    features: self.vector(&key)?,
                    key,
                    target: l.target,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { rows })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub key: CellKey,
    pub features: FeatureVector,
    /// Violation rate in [0, 1].
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub rows: Vec<DatasetRow>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    pub fn targets(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.target).collect()
    }

    pub fn standardized(&self, std: &Standardizer) -> Dataset {
        Dataset {
            rows: self
                .rows
                .iter()
                .map(|r| DatasetRow {
                    key: r.key.clone(),
                    features: std.apply(&r.features),
                    target: r.target,
                })
                .collect(),
        }
    }

    pub fn header() -> Vec<String> {
        let mut h: Vec<String> = (0..FEATURE_DIM).map(|i| format!("f{i:02}")).collect();
        h.extend(["sector_id", "date", "slot", "target"].map(String::from));
        h
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = Self::header();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_rows(
            path.as_ref(),
            &header,
            self.rows.iter().map(|r| {
                let mut rec: Vec<String> = r.features.0.iter().map(f64::to_string).collect();
                rec.push(r.key.sector_id.clone());
                rec.push(format_date(r.key.slot.date));
                rec.push(r.key.slot.index().to_string());
                rec.push(r.target.to_string());
                rec
            }),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let header = Self::header();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = read_rows(path.as_ref(), &header, |row| {
            let mut v = [0.0; FEATURE_DIM];
            for (i, x) in v.iter_mut().enumerate() {
                *x = row.parse(i, "feature")?;
            }
            let index: u8 = row.parse(FEATURE_DIM + 2, "slot")?;
            let slot = TimeSlot::new(row.date(FEATURE_DIM + 1)?, index).map_err(|e| row.wrap(e))?;
            let target: f64 = row.parse(FEATURE_DIM + 3, "target")?;
            if !(0.0..=1.0).contains(&target) {
                return Err(row.wrap(Error::Invalid(format!("target {target} outside [0, 1]"))));
            }
            Ok(DatasetRow {
                key: CellKey {
                    sector_id: row.str(FEATURE_DIM)?.to_string(),
                    slot,
                },
                features: FeatureVector(v),
                target,
            })
        })?;
        Ok(Dataset { rows })
    }
}

/// Per-column z-scoring with statistics from the training split.
///
/// Columns without variance are stored as mean 0, std 1 and pass through
/// unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a FeatureVector>) -> Result<Self> {
        let rows: Vec<&FeatureVector> = rows.into_iter().collect();
        if rows.is_empty() {
            return Err(Error::Empty("standardizer fit set"));
        }
        if rows.len() < 2 {
            return Err(Error::Invalid("standardizer needs at least 2 rows".into()));
        }
        let n = rows.len() as f64;
        let mut means = vec![0.0; FEATURE_DIM];
        let mut stds = vec![1.0; FEATURE_DIM];
        for c in 0..FEATURE_DIM {
            let first = rows[0].0[c];
            if rows.iter().all(|r| r.0[c] == first) {
                continue;
            }
            let mean = rows.iter().map(|r| r.0[c]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r.0[c] - mean).powi(2)).sum::<f64>() / n;
            means[c] = mean;
            stds[c] = var.sqrt();
        }
        Ok(Self { means, stds })
    }

    pub fn fit_dataset(dataset: &Dataset) -> Result<Self> {
        Self::fit(dataset.rows.iter().map(|r| &r.features))
    }

    pub fn apply(&self, v: &FeatureVector) -> FeatureVector {
        let mut out = [0.0; FEATURE_DIM];
        for (c, o) in out.iter_mut().enumerate() {
            *o = (v.0[c] - self.means[c]) / self.stds[c];
        }
        FeatureVector(out)
    }

    pub fn invert(&self, z: &FeatureVector) -> FeatureVector {
        let mut out = [0.0; FEATURE_DIM];
        for (c, o) in out.iter_mut().enumerate() {
            *o = z.0[c] * self.stds[c] + self.means[c];
        }
        FeatureVector(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.len() != FEATURE_DIM || self.stds.len() != FEATURE_DIM {
            return Err(Error::WidthMismatch {
                expected: FEATURE_DIM,
                found: self.means.len().min(self.stds.len()),
            });
        }
        if self.stds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Invalid("standardizer stds must be positive and finite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CalendarInfo, LatLon, Poi, WeatherRecord};
    use chrono::{NaiveDate, NaiveTime};
    use proptest::prelude::*;

    fn hour(date: NaiveDate, h: u32) -> NaiveDateTime {
        date.and_time(NaiveTime::from_hms_opt(h, 0, 0).unwrap())
    }

    fn series(date: NaiveDate, first_hour: u32, temps: &[f64]) -> WeatherSeries {
        WeatherSeries::new(
            temps
                .iter()
                .enumerate()
                .map(|(i, &t)| WeatherRecord {
                    timestamp: hour(date, first_hour + i as u32),
                    temperature_c: t,
                    humidity_pct: 40.0 + t,
                })
                .collect(),
        )
        .unwrap()
    }

    fn pois() -> PoiSet {
        PoiSet::new(
            (0..N_POIS)
                .map(|i| Poi {
                    name: format!("P{i}"),
                    location: LatLon::new(40.60 + 0.003 * i as f64, 22.93 + 0.002 * (i % 5) as f64),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn weekday_values() {
        assert_eq!(encode_weekday(0).unwrap(), 0.0);
        // sin(2π/7), 30 digits: 0.781831482468029808708444526674
        assert!((encode_weekday(1).unwrap() - 0.781_831_482_468_029_8).abs() < 1e-15);
        let all: Vec<f64> = (0..7).map(|w| encode_weekday(w).unwrap()).collect();
        for i in 0..7 {
            for j in i + 1..7 {
                assert!((all[i] - all[j]).abs() > 1e-3);
            }
        }
        assert!(encode_weekday(7).is_err());
    }

    #[test]
    fn day_and_month_values() {
        assert_eq!(encode_day(1, 31).unwrap(), 0.0);
        assert!(encode_day(16, 30).unwrap().abs() < 1e-15);
        assert!((encode_day(8, 28).unwrap() - 1.0).abs() < 1e-15);
        assert!(encode_day(31, 30).is_err());
        assert_eq!(encode_month(1).unwrap(), 0.0);
        assert!((encode_month(4).unwrap() - 1.0).abs() < 1e-15);
        assert!(encode_month(7).unwrap().abs() < 1e-15);
        assert!(encode_month(0).is_err() && encode_month(13).is_err());
    }

    #[test]
    fn slot_values() {
        assert_eq!(encode_slot(0).unwrap(), 0.0);
        assert_eq!(encode_slot(5).unwrap(), 5.0);
        assert_eq!(encode_slot(11).unwrap(), 11.0);
        assert!(encode_slot(12).is_err());
    }

    #[test]
    fn weather_window() {
        let d = NaiveDate::from_ymd_opt(2022, 3, 4).unwrap();
        let s = series(d, 0, &[20.0; 24]);
        assert_eq!(encode_weather(&s, hour(d, 12), 6).unwrap().0, 20.0);

        let s = series(d, 7, &[10.0, 11.0, 12.0, 13.0, 14.0, 15.0]);
        let (t, h) = encode_weather(&s, hour(d, 12), 6).unwrap();
        assert_eq!(t, 12.5);
        assert_eq!(h, 52.5);

        let s = series(d, 12, &[17.0, 30.0]);
        assert_eq!(encode_weather(&s, hour(d, 12), 6).unwrap().0, 17.0);
    }

    #[test]
    fn poi_distance_contract() {
        let pois = pois();
        let p3 = pois.as_slice()[3].location;
        let sector = Sector::new("S", p3.lat, p3.lon, 5).unwrap();
        let d = poi_distances(&sector, &pois);
        assert_eq!(d.len(), N_POIS);
        assert_eq!(d[3], 0.0);

        let mut reversed: Vec<Poi> = pois.as_slice().to_vec();
        reversed.reverse();
        let r = poi_distances(&sector, &PoiSet::new(reversed).unwrap());
        let mut back = r.clone();
        back.reverse();
        assert_eq!(back, d);
    }

    #[test]
    fn vector_layout() {
        let d = NaiveDate::from_ymd_opt(2022, 3, 25).unwrap();
        let pois = pois();
        let sector = Sector::new("S", 40.62, 22.95, 9).unwrap();
        let weather = series(d, 0, &(0..24).map(|i| i as f64).collect::<Vec<_>>());
        let cal = Calendar::new(vec![CalendarInfo {
            date: d,
            is_holiday: true,
            is_pandemic: false,
        }])
        .unwrap();
        let a = build_vector(&sector, TimeSlot::new(d, 2).unwrap(), &weather, &cal, &pois).unwrap();
        let b = build_vector(&sector, TimeSlot::new(d, 7).unwrap(), &weather, &cal, &pois).unwrap();
        assert_eq!(a.0.len(), FEATURE_DIM);
        assert_eq!(a.0[COL_HOLIDAY], 1.0);
        assert_eq!(a.0[COL_PANDEMIC], 0.0);
        assert_eq!(a.0[COL_CAPACITY], 9.0);
        let differing: Vec<usize> = (0..FEATURE_DIM).filter(|&c| a.0[c] != b.0[c]).collect();
        assert_eq!(differing, vec![COL_SLOT, COL_TEMPERATURE, COL_HUMIDITY]);

        let other = NaiveDate::from_ymd_opt(2022, 3, 26).unwrap();
        assert!(matches!(
            build_vector(&sector, TimeSlot::new(other, 0).unwrap(), &weather, &cal, &pois),
            Err(Error::MissingCalendar(_))
        ));
    }

    fn fv(values: &[f64]) -> FeatureVector {
        let mut v = [0.0; FEATURE_DIM];
        v[..values.len()].copy_from_slice(values);
        FeatureVector(v)
    }

    #[test]
    fn standardizer_rules() {
        let rows = vec![fv(&[1.0, 10.0, 3.0]), fv(&[3.0, 20.0, 3.0]), fv(&[5.0, 60.0, 3.0])];
        let std = Standardizer::fit(&rows).unwrap();
        let mut at_mean = [0.0; FEATURE_DIM];
        at_mean[0] = 3.0;
        at_mean[1] = 30.0;
        let z = std.apply(&FeatureVector(at_mean));
        assert_eq!(z.0[0], 0.0);
        assert_eq!(z.0[1], 0.0);
        // constant column passes through
        assert_eq!(std.apply(&rows[0]).0[2], 3.0);
        assert!(Standardizer::fit(std::iter::empty()).is_err());
        assert!(Standardizer::fit(&rows[..1]).is_err());
    }

    #[test]
    fn standardized_training_set_moments() {
        let mut rng_state = 7u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        let rows: Vec<FeatureVector> = (0..200)
            .map(|_| {
                let mut v = [0.0; FEATURE_DIM];
                for (c, x) in v.iter_mut().enumerate() {
                    *x = next() * (c + 1) as f64 + c as f64;
                }
                v[COL_HOLIDAY] = 0.0;
                FeatureVector(v)
            })
            .collect();
        let std = Standardizer::fit(&rows).unwrap();
        let z: Vec<FeatureVector> = rows.iter().map(|r| std.apply(r)).collect();
        for c in 0..FEATURE_DIM {
            if c == COL_HOLIDAY {
                continue;
            }
            let n = z.len() as f64;
            let mean = z.iter().map(|r| r.0[c]).sum::<f64>() / n;
            let sd = (z.iter().map(|r| (r.0[c] - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-9, "col {c} mean {mean}");
            assert!((sd - 1.0).abs() < 1e-9, "col {c} sd {sd}");
        }
    }

    proptest! {
        #[test]
        fn weekday_periodic(w in 0u32..10_000) {
            let extended = (2.0 * PI * w as f64 / 7.0).sin();
            let reduced = encode_weekday(w % 7).unwrap();
            prop_assert!((extended - reduced).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&reduced));
        }

        #[test]
        fn month_periodic(m in 1u32..10_000) {
            let extended = (2.0 * PI * (m - 1) as f64 / 12.0).sin();
            let reduced = encode_month((m - 1) % 12 + 1).unwrap();
            prop_assert!((extended - reduced).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&reduced));
        }

        #[test]
        fn day_in_range(n in 28u32..=31, d in 1u32..=31) {
            prop_assume!(d <= n);
            let x = encode_day(d, n).unwrap();
            prop_assert!((-1.0..=1.0).contains(&x));
        }

        #[test]
        fn standardizer_invertible(data in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, FEATURE_DIM), 2..20)) {
            let rows: Vec<FeatureVector> = data.iter().map(|r| fv(r)).collect();
            let std = Standardizer::fit(&rows).unwrap();
            for r in &rows {
                let back = std.invert(&std.apply(r));
                for c in 0..FEATURE_DIM {
                    prop_assert!((back.0[c] - r.0[c]).abs() <= 1e-12 * r.0[c].abs().max(1.0));
                }
            }
        }
    }
}
