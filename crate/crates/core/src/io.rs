//! CSV ingestion and persistence for the interchange formats.
//!
//! | file           | header                                        |
//! |----------------|-----------------------------------------------|
//! | `sectors.csv`  | `id,lat,lon,capacity`                         |
//! | `pois.csv`     | `name,lat,lon`                                |
//! | `scans.csv`    | `sector_id,timestamp,cars_scanned,violations` |
//! | `weather.csv`  | `timestamp,temperature_c,humidity_pct`        |
//! | `calendar.csv` | `date,is_holiday,is_pandemic`                 |
//!
//! Timestamps are `YYYY-MM-DDTHH:MM`, dates `YYYY-MM-DD`, flags `0`/`1`.
//! Floats are written in shortest round-trip form; a load/save cycle is
//! byte-stable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};

use crate::domain::{
    Calendar, CalendarInfo, LatLon, Poi, PoiSet, ScanSession, Sector, SectorSet, WeatherRecord,
    WeatherSeries,
};
use crate::error::{Error, Result};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M";
pub const DATE_FORMAT: &str = "%Y-%m-%d";

pub const SECTORS_HEADER: &[&str] = &["id", "lat", "lon", "capacity"];
pub const POIS_HEADER: &[&str] = &["name", "lat", "lon"];
pub const SCANS_HEADER: &[&str] = &["sector_id", "timestamp", "cars_scanned", "violations"];
pub const WEATHER_HEADER: &[&str] = &["timestamp", "temperature_c", "humidity_pct"];
pub const CALENDAR_HEADER: &[&str] = &["date", "is_holiday", "is_pandemic"];

/// A CSV row with its 1-based line number and source path for error messages.
pub struct Row<'a> {
    path: &'a Path,
    line: u64,
    record: csv::StringRecord,
}

impl Row<'_> {
    pub fn line(&self) -> u64 {
        self.line
    }

    pub fn str(&self, col: usize) -> Result<&str> {
        self.record
            .get(col)
            .ok_or_else(|| Error::parse(self.path, self.line, format!("missing column {col}")))
    }

    pub fn parse<T: FromStr>(&self, col: usize, what: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.str(col)?;
        raw.trim()
            .parse()
            .map_err(|e| Error::parse(self.path, self.line, format!("bad {what} {raw:?}: {e}")))
    }

    pub fn timestamp(&self, col: usize) -> Result<NaiveDateTime> {
        let raw = self.str(col)?;
        NaiveDateTime::parse_from_str(raw.trim(), TIMESTAMP_FORMAT)
            .map_err(|e| Error::parse(self.path, self.line, format!("bad timestamp {raw:?}: {e}")))
    }

    pub fn date(&self, col: usize) -> Result<NaiveDate> {
        let raw = self.str(col)?;
        NaiveDate::parse_from_str(raw.trim(), DATE_FORMAT)
            .map_err(|e| Error::parse(self.path, self.line, format!("bad date {raw:?}: {e}")))
    }

    pub fn flag(&self, col: usize) -> Result<bool> {
        match self.str(col)?.trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::parse(
                self.path,
                self.line,
                format!("flag must be 0 or 1, got {other:?}"),
            )),
        }
    }

    /// Attach this row's location to a validation error.
    pub fn wrap(&self, err: Error) -> Error {
        match err {
            Error::Invalid(msg) => Error::parse(self.path, self.line, msg),
            other => other,
        }
    }
}

/// Read a CSV file, checking the header exactly, and map every data row.
pub fn read_rows<T>(
    path: &Path,
    header: &[&str],
    mut f: impl FnMut(&Row<'_>) -> Result<T>,
) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(BufReader::new(file));
    let found = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    if found.iter().map(str::trim).ne(header.iter().copied()) {
        return Err(Error::parse(
            path,
            1,
            format!("expected header {:?}, found {:?}", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| match e.position() {
            Some(pos) => Error::parse(path, pos.line(), e.to_string()),
            None => Error::csv(path, e),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row = Row { path, line, record };
        out.push(f(&row)?);
    }
    Ok(out)
}

/// Write rows to `path` with LF line endings.
pub fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file));
    writer.write_record(header).map_err(|e| Error::csv(path, e))?;
    for row in rows {
        writer.write_record(row).map_err(|e| Error::csv(path, e))?;
    }
    let mut inner = writer
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

pub fn format_timestamp(ts: NaiveDateTime) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

pub fn format_date(date: NaiveDate) -> String {
    date.format(DATE_FORMAT).to_string()
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn load_sectors(path: impl AsRef<Path>) -> Result<SectorSet> {
    let path = path.as_ref();
    let sectors = read_rows(path, SECTORS_HEADER, |row| {
        let sector = Sector {
            id: row.str(0)?.trim().to_string(),
            center: LatLon::new(row.parse(1, "lat")?, row.parse(2, "lon")?),
            capacity: row.parse(3, "capacity")?,
        };
        sector.validate().map_err(|e| row.wrap(e))?;
        Ok(sector)
    })?;
    SectorSet::new(sectors).map_err(|e| match e {
        Error::Invalid(msg) => Error::parse(path, 0, msg),
        other => other,
    })
}

pub fn save_sectors(path: impl AsRef<Path>, sectors: &SectorSet) -> Result<()> {
    write_rows(
        path.as_ref(),
        SECTORS_HEADER,
        sectors.iter().map(|s| {
            [
                s.id.clone(),
                s.center.lat.to_string(),
                s.center.lon.to_string(),
                s.capacity.to_string(),
            ]
        }),
    )
}

pub fn load_pois(path: impl AsRef<Path>) -> Result<PoiSet> {
    let path = path.as_ref();
    let pois = read_rows(path, POIS_HEADER, |row| {
        let poi = Poi {
            name: row.str(0)?.trim().to_string(),
            location: LatLon::new(row.parse(1, "lat")?, row.parse(2, "lon")?),
        };
        poi.location.validate().map_err(|e| row.wrap(e))?;
        Ok(poi)
    })?;
    PoiSet::new(pois)
}

pub fn save_pois(path: impl AsRef<Path>, pois: &PoiSet) -> Result<()> {
    write_rows(
        path.as_ref(),
        POIS_HEADER,
        pois.iter().map(|p| {
            [
                p.name.clone(),
                p.location.lat.to_string(),
                p.location.lon.to_string(),
            ]
        }),
    )
}

/// Scans sorted by (timestamp, sector id); file order breaks remaining ties.
pub fn load_scans(path: impl AsRef<Path>) -> Result<Vec<ScanSession>> {
    let path = path.as_ref();
    let mut scans = read_rows(path, SCANS_HEADER, |row| {
        let scan = ScanSession {
            sector_id: row.str(0)?.trim().to_string(),
            timestamp: row.timestamp(1)?,
            cars_scanned: row.parse(2, "cars_scanned")?,
            violations: row.parse(3, "violations")?,
        };
        scan.validate().map_err(|e| row.wrap(e))?;
        Ok(scan)
    })?;
    scans.sort_by(|a, b| (a.timestamp, &a.sector_id).cmp(&(b.timestamp, &b.sector_id)));
    Ok(scans)
}

pub fn save_scans(path: impl AsRef<Path>, scans: &[ScanSession]) -> Result<()> {
    write_rows(
        path.as_ref(),
        SCANS_HEADER,
        scans.iter().map(|s| {
            [
                s.sector_id.clone(),
                format_timestamp(s.timestamp),
                s.cars_scanned.to_string(),
                s.violations.to_string(),
            ]
        }),
    )
}

pub fn load_weather(path: impl AsRef<Path>) -> Result<WeatherSeries> {
    let path = path.as_ref();
    let records = read_rows(path, WEATHER_HEADER, |row| {
        Ok(WeatherRecord {
            timestamp: row.timestamp(0)?,
            temperature_c: row.parse(1, "temperature_c")?,
            humidity_pct: row.parse(2, "humidity_pct")?,
        })
    })?;
    let series = WeatherSeries::new(records).map_err(|e| match e {
        Error::Invalid(msg) => Error::parse(path, 0, msg),
        other => other,
    })?;
    if series.has_gaps() {
        log::warn!("{}: weather series has missing hours", path.display());
    }
    Ok(series)
}

pub fn save_weather(path: impl AsRef<Path>, weather: &WeatherSeries) -> Result<()> {
    write_rows(
        path.as_ref(),
        WEATHER_HEADER,
        weather.records().iter().map(|r| {
            [
                format_timestamp(r.timestamp),
                r.temperature_c.to_string(),
                r.humidity_pct.to_string(),
            ]
        }),
    )
}

pub fn load_calendar(path: impl AsRef<Path>) -> Result<Calendar> {
    let path = path.as_ref();
    let days = read_rows(path, CALENDAR_HEADER, |row| {
        Ok(CalendarInfo {
            date: row.date(0)?,
            is_holiday: row.flag(1)?,
            is_pandemic: row.flag(2)?,
        })
    })?;
    Calendar::new(days).map_err(|e| match e {
        Error::Invalid(msg) => Error::parse(path, 0, msg),
        other => other,
    })
}

pub fn save_calendar(path: impl AsRef<Path>, calendar: &Calendar) -> Result<()> {
    write_rows(
        path.as_ref(),
        CALENDAR_HEADER,
        calendar.days().iter().map(|d| {
            [
                format_date(d.date),
                flag(d.is_holiday).to_string(),
                flag(d.is_pandemic).to_string(),
            ]
        }),
    )
}

pub fn write_json<T: serde::Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn single_sector() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "sectors.csv", "id,lat,lon,capacity\nS1,40.63,22.94,11\n");
        let set = load_sectors(&p).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.get("S1").unwrap().capacity, 11);
    }

    #[test]
    fn zero_capacity_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "sectors.csv",
            "id,lat,lon,capacity\nS1,40.63,22.94,11\nS2,40.63,22.94,0\n",
        );
        let msg = load_sectors(&p).unwrap_err().to_string();
        assert!(msg.contains("capacity must be ≥ 1"), "{msg}");
        assert!(msg.contains(":3:"), "{msg}");
    }

    #[test]
    fn duplicate_and_malformed_sectors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "id,lat,lon,capacity\nS1,40,22,1\nS1,40,22,2\n");
        assert!(load_sectors(&p).unwrap_err().to_string().contains("duplicate"));
        let p = write(&dir, "b.csv", "id,lat,lon,capacity\nS1,forty,22,1\n");
        let msg = load_sectors(&p).unwrap_err().to_string();
        assert!(msg.contains(":2:") && msg.contains("lat"), "{msg}");
        let p = write(&dir, "c.csv", "id,lat,capacity\nS1,40,1\n");
        assert!(load_sectors(&p).unwrap_err().to_string().contains("expected header"));
    }

    #[test]
    fn scan_row_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "scans.csv",
            "sector_id,timestamp,cars_scanned,violations\nS1,2022-03-04T12:50,20,7\n",
        );
        let scans = load_scans(&p).unwrap();
        assert_eq!(
            scans,
            vec![ScanSession {
                sector_id: "S1".into(),
                timestamp: NaiveDateTime::parse_from_str("2022-03-04T12:50", TIMESTAMP_FORMAT).unwrap(),
                cars_scanned: 20,
                violations: 7,
            }]
        );
    }

    #[test]
    fn scan_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "scans.csv",
            "sector_id,timestamp,cars_scanned,violations\nS1,2022-03-04T12:50,20,25\n",
        );
        assert!(load_scans(&p).unwrap_err().to_string().contains("exceed"));
        let p = write(
            &dir,
            "scans2.csv",
            "sector_id,timestamp,cars_scanned,violations\nS1,2022-02-30T12:50,20,2\n",
        );
        assert!(load_scans(&p).unwrap_err().to_string().contains("bad timestamp"));
    }

    #[test]
    fn scans_sorted_chronologically() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "scans.csv",
            "sector_id,timestamp,cars_scanned,violations\nS2,2022-03-04T12:50,2,1\nS1,2022-03-04T08:10,3,0\n",
        );
        let scans = load_scans(&p).unwrap();
        assert_eq!(scans[0].sector_id, "S1");
    }

    #[test]
    fn weather_gap_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "weather.csv",
            "timestamp,temperature_c,humidity_pct\n2022-03-04T08:00,10,50\n2022-03-04T09:00,11,50\n2022-03-04T12:00,12,55\n",
        );
        let w = load_weather(&p).unwrap();
        assert!(w.has_gaps());
        assert_eq!(w.len(), 3);
        let p = write(
            &dir,
            "weather2.csv",
            "timestamp,temperature_c,humidity_pct\n2022-03-04T09:00,10,50\n2022-03-04T08:00,11,50\n",
        );
        assert!(load_weather(&p).unwrap_err().to_string().contains("strictly increasing"));
    }

    #[test]
    fn calendar_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "calendar.csv",
            "date,is_holiday,is_pandemic\n2022-03-25,1,0\n2022-03-24,0,1\n",
        );
        let cal = load_calendar(&p).unwrap();
        assert_eq!(cal.days()[0].date, NaiveDate::from_ymd_opt(2022, 3, 24).unwrap());
        assert!(cal.days()[1].is_holiday);
        let p = write(&dir, "bad.csv", "date,is_holiday,is_pandemic\n2022-03-25,yes,0\n");
        assert!(load_calendar(&p).is_err());
    }
}
