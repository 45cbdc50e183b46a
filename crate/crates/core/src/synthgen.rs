//! Synthetic city generator with known ground-truth violation rates.
//!
//! Every (sector, date, slot) cell gets a true rate
//!
//! ```text
//! r = clamp(base_sector + time_of_day + weekday + weather + holiday + pandemic + noise, 0, 1)
//! ```
//!
//! Sector bases are sorted Beta draws with the target global mean, assigned
//! to sectors by the rank of a spatially smooth latent field that rises
//! toward the north, plus a centered offset that grows with distance to the
//! nearest point of interest; remoteness also feeds the latent field.
//! Temporal and calendar terms are centered over the generated period so the
//! global mean stays at the calibration target. A scan lands in each cell with
//! probability `scan_coverage` at a uniform minute inside the slot and
//! observes `Binomial(capacity, r)` violations.

use std::collections::HashMap;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveTime, Timelike};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::domain::{
    haversine_km, Calendar, CalendarInfo, CellKey, LatLon, Poi, PoiSet, ScanSession, Sector,
    SectorSet, TimeSlot, WeatherRecord, WeatherSeries, SLOTS_PER_DAY,
};
use crate::error::{Error, Result};
use crate::io::{format_date, read_rows, write_rows};
use crate::kv::{self, KvConfig};
use crate::pipeline::Corpus;

pub const TRUTH_HEADER: &[&str] = &["sector_id", "date", "slot", "true_rate"];

/// Minutes kept free at both ends of a slot when placing scans. Scans in
/// neighboring cells never chain into one session.
pub const SCAN_MARGIN_MINUTES: u32 = 8;

/// Greek public holidays with a fixed date, as (month, day).
const FIXED_HOLIDAYS: &[(u32, u32)] = &[
    (1, 1),
    (1, 6),
    (3, 25),
    (5, 1),
    (8, 15),
    (10, 28),
    (12, 25),
    (12, 26),
];

/// Weekday offsets Monday..Sunday before centering.
const WEEKDAY_PROFILE: [f64; 7] = [0.0, 0.01, 0.01, 0.02, 0.04, 0.02, -0.10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_sectors: usize,
    pub mean_capacity: f64,
    pub n_pois: usize,
    pub n_days: usize,
    pub start_date: NaiveDate,
    pub scan_coverage: f64,
    pub seed: u64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub global_mean: f64,
    pub sector_min: f64,
    pub sector_max: f64,
    /// Beta concentration of the sector base rates.
    pub concentration: f64,
    /// Spread of the remoteness offset between the most central and the most
    /// remote sector.
    pub remote_offset: f64,
    /// Weight of remoteness in the latent field that orders the base rates.
    pub remote_weight: f64,
    pub north_gradient: f64,
    pub tod_amplitude: f64,
    pub weekday_scale: f64,
    /// Rate change per °C of temperature deviation.
    pub weather_coef: f64,
    pub holiday_effect: f64,
    pub pandemic_effect: f64,
    /// Number of leading days flagged as pandemic days.
    pub pandemic_days: usize,
    pub cell_noise: f64,
    /// Probability that a legally parked car occupies a non-violating space.
    pub legal_occupancy: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_sectors: 396,
            mean_capacity: 11.0,
            n_pois: 19,
            n_days: 180,
            start_date: NaiveDate::from_ymd_opt(2022, 1, 3).unwrap(),
            scan_coverage: 0.15,
            seed: 0,
            lat_min: 40.600,
            lat_max: 40.660,
            lon_min: 22.900,
            lon_max: 22.980,
            global_mean: 0.41,
            sector_min: 0.10,
            sector_max: 0.78,
            concentration: 16.0,
            remote_offset: 0.15,
            remote_weight: 1.0,
            north_gradient: 1.0,
            tod_amplitude: 0.15,
            weekday_scale: 1.0,
            weather_coef: 0.004,
            holiday_effect: -0.05,
            pandemic_effect: -0.06,
            pandemic_days: 45,
            cell_noise: 0.03,
            legal_occupancy: 0.85,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.n_sectors == 0 || self.n_days == 0 {
            return bad("n_sectors and n_days must be ≥ 1".into());
        }
        if self.n_pois == 0 {
            return bad("n_pois must be ≥ 1".into());
        }
        if !(self.mean_capacity >= 1.0) {
            return bad(format!("mean_capacity must be ≥ 1, got {}", self.mean_capacity));
        }
        for (name, p) in [
            ("scan_coverage", self.scan_coverage),
            ("global_mean", self.global_mean),
            ("sector_min", self.sector_min),
            ("sector_max", self.sector_max),
            ("legal_occupancy", self.legal_occupancy),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if !(self.lat_min < self.lat_max && self.lon_min < self.lon_max) {
            return bad("bounding box must have min < max".into());
        }
        LatLon::new(self.lat_min, self.lon_min).validate()?;
        LatLon::new(self.lat_max, self.lon_max).validate()?;
        if !(self.concentration > 0.0) {
            return bad(format!("concentration must be > 0, got {}", self.concentration));
        }
        if !(self.cell_noise >= 0.0) {
            return bad(format!("cell_noise must be ≥ 0, got {}", self.cell_noise));
        }
        Ok(())
    }

    fn check_calibration(&self) {
        if !(0.0 < self.global_mean && self.global_mean < 1.0) {
            log::warn!("global mean {} leaves no room for Beta base rates", self.global_mean);
        }
        if !(self.sector_min < self.global_mean && self.global_mean < self.sector_max) {
            log::warn!(
                "global mean {} outside the sector-mean range [{}, {}]",
                self.global_mean,
                self.sector_min,
                self.sector_max
            );
        }
    }
}

impl KvConfig for GeneratorConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n_sectors" => self.n_sectors = kv::value(key, v)?,
            "mean_capacity" => self.mean_capacity = kv::value(key, v)?,
            "n_pois" => self.n_pois = kv::value(key, v)?,
            "n_days" => self.n_days = kv::value(key, v)?,
            "start_date" => self.start_date = kv::value(key, v)?,
            "scan_coverage" => self.scan_coverage = kv::value(key, v)?,
            "seed" => self.seed = kv::value(key, v)?,
            "lat_min" => self.lat_min = kv::value(key, v)?,
            "lat_max" => self.lat_max = kv::value(key, v)?,
            "lon_min" => self.lon_min = kv::value(key, v)?,
            "lon_max" => self.lon_max = kv::value(key, v)?,
            "global_mean" => self.global_mean = kv::value(key, v)?,
            "sector_min" => self.sector_min = kv::value(key, v)?,
            "sector_max" => self.sector_max = kv::value(key, v)?,
            "concentration" => self.concentration = kv::value(key, v)?,
            "remote_offset" => self.remote_offset = kv::value(key, v)?,
            "remote_weight" => self.remote_weight = kv::value(key, v)?,
            "north_gradient" => self.north_gradient = kv::value(key, v)?,
            "tod_amplitude" => self.tod_amplitude = kv::value(key, v)?,
            "weekday_scale" => self.weekday_scale = kv::value(key, v)?,
            "weather_coef" => self.weather_coef = kv::value(key, v)?,
            "holiday_effect" => self.holiday_effect = kv::value(key, v)?,
            "pandemic_effect" => self.pandemic_effect = kv::value(key, v)?,
            "pandemic_days" => self.pandemic_days = kv::value(key, v)?,
            "cell_noise" => self.cell_noise = kv::value(key, v)?,
            "legal_occupancy" => self.legal_occupancy = kv::value(key, v)?,
            _ => return Err(kv::unknown(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_sectors", self.n_sectors.to_string()),
            ("mean_capacity", self.mean_capacity.to_string()),
            ("n_pois", self.n_pois.to_string()),
            ("n_days", self.n_days.to_string()),
            ("start_date", format_date(self.start_date)),
            ("scan_coverage", self.scan_coverage.to_string()),
            ("seed", self.seed.to_string()),
            ("lat_min", self.lat_min.to_string()),
            ("lat_max", self.lat_max.to_string()),
            ("lon_min", self.lon_min.to_string()),
            ("lon_max", self.lon_max.to_string()),
            ("global_mean", self.global_mean.to_string()),
            ("sector_min", self.sector_min.to_string()),
            ("sector_max", self.sector_max.to_string()),
            ("concentration", self.concentration.to_string()),
            ("remote_offset", self.remote_offset.to_string()),
            ("remote_weight", self.remote_weight.to_string()),
            ("north_gradient", self.north_gradient.to_string()),
            ("tod_amplitude", self.tod_amplitude.to_string()),
            ("weekday_scale", self.weekday_scale.to_string()),
            ("weather_coef", self.weather_coef.to_string()),
            ("holiday_effect", self.holiday_effect.to_string()),
            ("pandemic_effect", self.pandemic_effect.to_string()),
            ("pandemic_days", self.pandemic_days.to_string()),
            ("cell_noise", self.cell_noise.to_string()),
            ("legal_occupancy", self.legal_occupancy.to_string()),
        ]
    }
}

/// True rate of every cell of a generated city.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    start: NaiveDate,
    n_days: usize,
    sector_ids: Vec<String>,
    index: HashMap<String, usize>,
    rates: Vec<f64>,
}

impl GroundTruth {
    pub fn new(start: NaiveDate, n_days: usize, sector_ids: Vec<String>, rates: Vec<f64>) -> Result<Self> {
        let cells = sector_ids.len() * n_days * SLOTS_PER_DAY as usize;
        if rates.len() != cells {
            return Err(Error::WidthMismatch {
                expected: cells,
                found: rates.len(),
            });
        }
        if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Invalid(format!("true rate {r} outside [0, 1]")));
        }
        let mut index = HashMap::with_capacity(sector_ids.len());
        for (i, id) in sector_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate sector {id} in ground truth")));
            }
        }
        Ok(Self {
            start,
            n_days,
            sector_ids,
            index,
            rates,
        })
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    fn offset(&self, key: &CellKey) -> Option<usize> {
        let s = *self.index.get(&key.sector_id)?;
        let d = (key.slot.date - self.start).num_days();
        if d < 0 || d as usize >= self.n_days {
            return None;
        }
        Some((s * self.n_days + d as usize) * SLOTS_PER_DAY as usize + key.slot.index() as usize)
    }

    pub fn get(&self, key: &CellKey) -> Option<f64> {
        self.offset(key).map(|i| self.rates[i])
    }

    /// Mean true rate per sector, in sector order.
    pub fn sector_means(&self) -> Vec<(&str, f64)> {
        let per = self.n_days * SLOTS_PER_DAY as usize;
        self.sector_ids
            .iter()
            .zip(self.rates.chunks(per))
            .map(|(id, c)| (id.as_str(), c.iter().sum::<f64>() / per as f64))
            .collect()
    }

    pub fn mean(&self) -> f64 {
        self.rates.iter().sum::<f64>() / self.rates.len() as f64
    }

    /// Every cell with its rate, ordered by sector, date and slot.
    pub fn cells(&self) -> impl Iterator<Item = (CellKey, f64)> + '_ {
        let per_sector = self.n_days * SLOTS_PER_DAY as usize;
        self.rates.iter().enumerate().map(move |(i, &r)| {
            let s = i / per_sector;
            let rem = i % per_sector;
            let date = self.start + Duration::days((rem / SLOTS_PER_DAY as usize) as i64);
            let slot = TimeSlot::new(date, (rem % SLOTS_PER_DAY as usize) as u8).expect("index < 12");
            (
                CellKey {
                    sector_id: self.sector_ids[s].clone(),
                    slot,
                },
                r,
            )
        })
    }

    /// `truth.csv`: `sector_id,date,slot,true_rate`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(
            path.as_ref(),
            TRUTH_HEADER,
            self.cells().map(|(k, r)| {
                [
                    k.sector_id,
                    format_date(k.slot.date),
                    k.slot.index().to_string(),
                    r.to_string(),
                ]
            }),
        )
    }

    /// Load a truth file written by [`GroundTruth::save`]; cells must be
    /// complete and in canonical order.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let rows = read_rows(path, TRUTH_HEADER, |row| {
            let index: u8 = row.parse(2, "slot")?;
            let slot = TimeSlot::new(row.date(1)?, index).map_err(|e| row.wrap(e))?;
            let rate: f64 = row.parse(3, "true_rate")?;
            Ok((row.str(0)?.to_string(), slot, rate))
        })?;
        let first = rows.first().ok_or(Error::Empty("ground truth"))?;
        let start = first.1.date;
        let mut sector_ids: Vec<String> = Vec::new();
        for (id, _, _) in &rows {
            if sector_ids.last() != Some(id) {
                sector_ids.push(id.clone());
            }
        }
        let n_days = rows.len() / (sector_ids.len() * SLOTS_PER_DAY as usize);
        let truth = Self::new(start, n_days, sector_ids, rows.iter().map(|r| r.2).collect())?;
        for ((key, _), (id, slot, _)) in truth.cells().zip(&rows) {
            if &key.sector_id != id || key.slot != *slot {
                return Err(Error::Invalid(format!(
                    "{}: cells out of canonical order at {id} {} slot {}",
                    path.display(),
                    slot.date,
                    slot.index()
                )));
            }
        }
        Ok(truth)
    }
}

/// MAE of predictions against true rates over the cells known to `truth`.
/// Predictions for unknown cells are skipped.
pub fn oracle_mae(predictions: &[(CellKey, f64)], truth: &GroundTruth) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (key, p) in predictions {
        if let Some(r) = truth.get(key) {
            sum += (p - r).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("overlap between predictions and ground truth"));
    }
    if n < predictions.len() {
        log::warn!("{} predictions have no ground truth cell", predictions.len() - n);
    }
    Ok(sum / n as f64)
}

pub struct SyntheticCity {
    pub corpus: Corpus,
    pub truth: GroundTruth,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut rank = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (x * f).round() / f
}

fn beta(a: f64, b: f64) -> Result<Beta<f64>> {
    Beta::new(a, b).map_err(|e| Error::Invalid(format!("Beta({a}, {b}): {e}")))
}

fn poisson(mean: f64) -> Result<Option<Poisson<f64>>> {
    if mean <= 0.0 {
        return Ok(None);
    }
    Poisson::new(mean)
        .map(Some)
        .map_err(|e| Error::Invalid(format!("Poisson({mean}): {e}")))
}

fn binomial(rng: &mut ChaCha8Rng, n: u32, p: f64) -> u32 {
    Binomial::new(n as u64, p.clamp(0.0, 1.0))
        .expect("probability clamped to [0, 1]")
        .sample(rng) as u32
}

fn generate_pois(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<PoiSet> {
    let (dlat, dlon) = (cfg.lat_max - cfg.lat_min, cfg.lon_max - cfg.lon_min);
    PoiSet::new(
        (0..cfg.n_pois)
            .map(|i| Poi {
                name: format!("poi_{i:02}"),
                location: LatLon::new(
                    round_to(cfg.lat_min + dlat * rng.random_range(0.3..0.7), 6),
                    round_to(cfg.lon_min + dlon * rng.random_range(0.3..0.7), 6),
                ),
            })
            .collect(),
    )
}

fn generate_sectors(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<SectorSet> {
    let extra = poisson(cfg.mean_capacity - 1.0)?;
    let width = (cfg.n_sectors.max(2) - 1).to_string().len().max(3);
    let sectors = (0..cfg.n_sectors)
        .map(|i| {
            let lat = round_to(rng.random_range(cfg.lat_min..cfg.lat_max), 6);
            let lon = round_to(rng.random_range(cfg.lon_min..cfg.lon_max), 6);
            let capacity = 1 + extra.as_ref().map_or(0, |p| p.sample(rng) as u32);
            Sector::new(format!("S{i:0width$}"), lat, lon, capacity)
        })
        .collect::<Result<Vec<_>>>()?;
    SectorSet::new(sectors)
}

/// Sector base rates, before the remoteness offset.
fn base_rates(cfg: &GeneratorConfig, sectors: &SectorSet, pois: &PoiSet, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let n = sectors.len();
    let mu = cfg.global_mean.clamp(1e-3, 1.0 - 1e-3);
    let dist = beta(mu * cfg.concentration, (1.0 - mu) * cfg.concentration)?;
    let mut draws: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    draws.sort_by(f64::total_cmp);
    let shift = cfg.global_mean - draws.iter().sum::<f64>() / n as f64;

    let bumps: Vec<(f64, f64, f64)> = (0..6)
        .map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let remote = ranks(&remoteness(sectors, pois));
    let field: Vec<f64> = sectors
        .iter()
        .zip(remote)
        .map(|(s, q)| {
            let x = (s.center.lon - cfg.lon_min) / (cfg.lon_max - cfg.lon_min);
            let y = (s.center.lat - cfg.lat_min) / (cfg.lat_max - cfg.lat_min);
            let smooth: f64 = bumps
                .iter()
                .map(|&(cx, cy, a)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * 0.25f64.powi(2))).exp())
                .sum();
            smooth + cfg.north_gradient * y + cfg.remote_weight * q as f64 / n.max(2) as f64
        })
        .collect();
    Ok(ranks(&field).into_iter().map(|r| draws[r] + shift).collect())
}

fn generate_weather(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<WeatherSeries> {
    let start = cfg.start_date.and_time(NaiveTime::MIN);
    let anomaly_noise = Normal::new(0.0, 0.6).expect("valid normal");
    let humidity_noise = Normal::new(0.0, 5.0).expect("valid normal");
    let mut anomaly = 0.0;
    let mut records = Vec::with_capacity(cfg.n_days * 24);
    for h in 0..cfg.n_days * 24 {
        let ts = start + Duration::hours(h as i64);
        let doy = ts.ordinal() as f64;
        let seasonal = 17.0 - 10.0 * (2.0 * std::f64::consts::PI * (doy - 20.0) / 365.25).cos();
        let diurnal = 5.0 * (2.0 * std::f64::consts::PI * (ts.hour() as f64 - 15.0) / 24.0).cos();
        anomaly = 0.95 * anomaly + anomaly_noise.sample(rng);
        let temperature = seasonal + diurnal + anomaly;
        let humidity = 62.0 - 1.5 * (temperature - 17.0) + humidity_noise.sample(rng);
        records.push(WeatherRecord {
            timestamp: ts,
            temperature_c: round_to(temperature, 1),
            humidity_pct: round_to(humidity.clamp(10.0, 100.0), 0),
        });
    }
    WeatherSeries::new(records)
}

fn generate_calendar(cfg: &GeneratorConfig) -> Result<Calendar> {
    Calendar::new(
        (0..cfg.n_days)
            .map(|d| {
                let date = cfg.start_date + Duration::days(d as i64);
                CalendarInfo {
                    date,
                    is_holiday: FIXED_HOLIDAYS.contains(&(date.month(), date.day())),
                    is_pandemic: d < cfg.pandemic_days,
                }
            })
            .collect(),
    )
}

/// Generate a synthetic city. The same config always yields the same city.
pub fn generate(cfg: &GeneratorConfig) -> Result<SyntheticCity> {
    cfg.validate()?;
    cfg.check_calibration();
    let mut layout = stream(cfg.seed, 0);
    let pois = generate_pois(cfg, &mut layout)?;
    let sectors = generate_sectors(cfg, &mut layout)?;
    let mut base = base_rates(cfg, &sectors, &pois, &mut layout)?;

    let n = sectors.len();
    for (b, r) in base.iter_mut().zip(ranks(&remoteness(&sectors, &pois))) {
        let q = if n > 1 { r as f64 / (n - 1) as f64 } else { 0.5 };
        *b += cfg.remote_offset * (q - 0.5);
    }
    let peaks: Vec<f64> = (0..n).map(|_| layout.random_range(10.5..14.5)).collect();

    let weather = generate_weather(cfg, &mut stream(cfg.seed, 1))?;
    let calendar = generate_calendar(cfg)?;

    let slot_temps: Vec<f64> = (0..cfg.n_days)
        .flat_map(|d| {
            let date = cfg.start_date + Duration::days(d as i64);
            TimeSlot::all_of(date).map(|s| s.start())
        })
        .map(|t| weather.carried_forward(t).map_or(0.0, |r| r.temperature_c))
        .collect();
    let mean_temp = slot_temps.iter().sum::<f64>() / slot_temps.len() as f64;
    let day_terms: Vec<f64> = calendar
        .days()
        .iter()
        .map(|info| {
            cfg.weekday_scale * WEEKDAY_PROFILE[info.date.weekday().num_days_from_monday() as usize]
                + if info.is_holiday { cfg.holiday_effect } else { 0.0 }
                + if info.is_pandemic { cfg.pandemic_effect } else { 0.0 }
        })
        .collect();
    let day_mean = day_terms.iter().sum::<f64>() / day_terms.len() as f64;

    let mut noise_rng = stream(cfg.seed, 2);
    let noise = Normal::new(0.0, cfg.cell_noise).map_err(|e| Error::Invalid(format!("cell_noise: {e}")))?;
    let slots = SLOTS_PER_DAY as usize;
    let mut rates = Vec::with_capacity(n * cfg.n_days * slots);
    for (s, &b) in base.iter().enumerate() {
        let bump: Vec<f64> = (0..slots)
            .map(|k| (-(7.5 + k as f64 - peaks[s]).powi(2) / (2.0 * 2.5f64.powi(2))).exp())
            .collect();
        let bump_mean = bump.iter().sum::<f64>() / slots as f64;
        for (d, day) in day_terms.iter().enumerate() {
            let day_term = day - day_mean;
            for k in 0..slots {
                let tod = cfg.tod_amplitude * (bump[k] - bump_mean);
                let weather_term = cfg.weather_coef * (slot_temps[d * slots + k] - mean_temp);
                let r = b + tod + day_term + weather_term + noise.sample(&mut noise_rng);
                rates.push(r.clamp(0.0, 1.0));
            }
        }
    }
    let truth = GroundTruth::new(
        cfg.start_date,
        cfg.n_days,
        sectors.iter().map(|s| s.id.clone()).collect(),
        rates,
    )?;

    let mut scan_rng = stream(cfg.seed, 3);
    let mut scans = Vec::new();
    for (key, r) in truth.cells() {
        if !scan_rng.random_bool(cfg.scan_coverage) {
            continue;
        }
        let capacity = sectors.get(&key.sector_id).expect("sector of truth").capacity;
        let minute = scan_rng.random_range(SCAN_MARGIN_MINUTES..=60 - SCAN_MARGIN_MINUTES);
        let violations = binomial(&mut scan_rng, capacity, r);
        let legal = binomial(&mut scan_rng, capacity, cfg.legal_occupancy * (1.0 - r));
        scans.push(ScanSession {
            sector_id: key.sector_id,
            timestamp: key.slot.start() + Duration::minutes(minute as i64),
            cars_scanned: violations + legal,
            violations,
        });
    }
    scans.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.sector_id.cmp(&b.sector_id)));

    let realized = truth.mean();
    if (realized - cfg.global_mean).abs() > 0.05 {
        log::warn!("realized mean rate {realized:.3} misses the target {}", cfg.global_mean);
    }
    let means = truth.sector_means();
    let lo = means.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    let hi = means.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
    if lo > cfg.sector_min + 0.05 || hi < cfg.sector_max - 0.05 {
        log::warn!(
            "sector means span [{lo:.3}, {hi:.3}], target [{}, {}]",
            cfg.sector_min,
            cfg.sector_max
        );
    }

    Ok(SyntheticCity {
        corpus: Corpus {
            sectors,
            pois,
            weather,
            calendar,
            scans,
        },
        truth,
    })
}

/// Pearson correlation; `None` for fewer than two points or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Distance from every sector to its nearest point of interest, in km.
pub fn remoteness(sectors: &SectorSet, pois: &PoiSet) -> Vec<f64> {
    sectors
        .iter()
        .map(|s| {
            pois.iter()
                .map(|p| haversine_km(s.center, p.location))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}
