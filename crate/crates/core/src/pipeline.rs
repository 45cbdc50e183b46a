//! End-to-end stages over a data directory: corpus loading, labeling,
//! dataset building, the smoothing ablation and the cross-validation
//! comparison of raw and smoothed training labels.
//!
//! Both the ablation and the comparison split scan *sessions*, not label
//! rows, and label each side separately. Smoothing spreads one session over
//! up to three cells, so a row-level split would place copies of a test
//! session in the training set.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Calendar, CellKey, PoiSet, ScanSession, SectorSet, TimeSlot, WeatherSeries};
use crate::error::{Error, Result};
use crate::featurize::{Dataset, Featurizer};
use crate::kv::{self, KvConfig};
use crate::io::{
    self, format_date, load_calendar, load_pois, load_scans, load_sectors, load_weather, read_rows,
    write_rows,
};
use crate::labeling::{label, session_rates, LabelMode, Labeling, SessionRate, SmoothingConfig};
use crate::neuralnet::Checkpoint;
use crate::synthgen::{oracle_mae, GroundTruth};
use crate::trainer::{
    baseline_mae, fit, fit_monitored, fold_assignment, fold_split, mae, predict_checkpoint, stratified_split, CurvePoint, CvSummary,
    EvalReport, TrainConfig,
};

pub const SECTORS_FILE: &str = "sectors.csv";
pub const POIS_FILE: &str = "pois.csv";
pub const SCANS_FILE: &str = "scans.csv";
pub const WEATHER_FILE: &str = "weather.csv";
pub const CALENDAR_FILE: &str = "calendar.csv";
pub const TRUTH_FILE: &str = "truth.csv";

pub const PREDICTIONS_HEADER: &[&str] = &["sector_id", "date", "slot", "predicted_rate"];
pub const TABLE_HEADER: &[&str] = &["Method", "Raw Test Set (MAE)", "Smoothed Test Set (MAE)"];

/// Every input of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sectors: SectorSet,
    pub pois: PoiSet,
    pub weather: WeatherSeries,
    pub calendar: Calendar,
    pub scans: Vec<ScanSession>,
}

impl Corpus {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Self {
            sectors: load_sectors(dir.join(SECTORS_FILE))?,
            pois: load_pois(dir.join(POIS_FILE))?,
            weather: load_weather(dir.join(WEATHER_FILE))?,
            calendar: load_calendar(dir.join(CALENDAR_FILE))?,
            scans: load_scans(dir.join(SCANS_FILE))?,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::save_sectors(dir.join(SECTORS_FILE), &self.sectors)?;
        io::save_pois(dir.join(POIS_FILE), &self.pois)?;
        io::save_weather(dir.join(WEATHER_FILE), &self.weather)?;
        io::save_calendar(dir.join(CALENDAR_FILE), &self.calendar)?;
        io::save_scans(dir.join(SCANS_FILE), &self.scans)
    }

    /// File names written by [`Corpus::save`].
    pub fn file_names() -> [&'static str; 5] {
        [SECTORS_FILE, POIS_FILE, WEATHER_FILE, CALENDAR_FILE, SCANS_FILE]
    }

    pub fn sessions(&self) -> Result<Vec<SessionRate>> {
        session_rates(&self.scans, &self.sectors)
    }

    pub fn featurizer(&self) -> Result<Featurizer<'_>> {
        Featurizer::new(&self.sectors, &self.pois, &self.weather, &self.calendar)
    }

    pub fn label(&self, mode: LabelMode, smoothing: &SmoothingConfig) -> Result<Labeling> {
        label(&self.sessions()?, mode, smoothing)
    }

    pub fn dataset(&self, sessions: &[SessionRate], mode: LabelMode, smoothing: &SmoothingConfig) -> Result<Dataset> {
        let labeling = label(sessions, mode, smoothing)?;
        self.featurizer()?.dataset(&labeling.labels)
    }
}

/// Predictions of a checkpoint for every row of a raw dataset.
pub fn predictions(ck: &Checkpoint, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<(CellKey, f64)>> {
    let preds = predict_checkpoint(ck, dataset, cfg)?;
    Ok(dataset.rows.iter().map(|r| r.key.clone()).zip(preds).collect())
}

/// `predictions.csv`: `sector_id,date,slot,predicted_rate`.
pub fn save_predictions(path: impl AsRef<Path>, preds: &[(CellKey, f64)]) -> Result<()> {
    write_rows(
        path.as_ref(),
        PREDICTIONS_HEADER,
        preds.iter().map(|(k, p)| {
            [
                k.sector_id.clone(),
                format_date(k.slot.date),
                k.slot.index().to_string(),
                p.to_string(),
            ]
        }),
    )
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<(CellKey, f64)>> {
    read_rows(path.as_ref(), PREDICTIONS_HEADER, |row| {
        let slot = TimeSlot::new(row.date(1)?, row.parse(2, "slot")?).map_err(|e| row.wrap(e))?;
        let rate: f64 = row.parse(3, "predicted_rate")?;
        if !(0.0..=1.0).contains(&rate) {
            return Err(row.wrap(Error::Invalid(format!("predicted rate {rate} outside [0, 1]"))));
        }
        Ok((
            CellKey {
                sector_id: row.str(0)?.to_string(),
                slot,
            },
            rate,
        ))
    })
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Split sessions into (train, test), stratified by sector.
pub fn split_sessions(
    sessions: &[SessionRate],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<SessionRate>, Vec<SessionRate>)> {
    let strata: Vec<&str> = sessions.iter().map(|s| s.sector_id.as_str()).collect();
    let split = stratified_split(&strata, test_fraction, seed)?;
    Ok((pick(sessions, &split.train), pick(sessions, &split.test)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub smoothing: SmoothingConfig,
    pub train: TrainConfig,
    pub test_fraction: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            smoothing: SmoothingConfig::default(),
            train: TrainConfig::default(),
            test_fraction: 0.2,
        }
    }
}

impl KvConfig for AblationConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "test_fraction" => self.test_fraction = kv::value(key, v)?,
            "sigma_minutes" | "neighbor_slots" => self.smoothing.set(key, v)?,
            _ => self.train.set(key, v)?,
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut e = vec![("test_fraction", self.test_fraction.to_string())];
        e.extend(self.smoothing.entries());
        e.extend(self.train.entries());
        e
    }
}

/// MAE of one trained model on both test sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub raw_test: f64,
    pub smoothed_test: f64,
    /// MAE against true rates on the raw test cells, when truth is known.
    pub oracle_raw_test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub without_smoothing: AblationRow,
    pub with_smoothing: AblationRow,
    /// Mean raw training target as a constant, on the raw test set.
    pub baseline_raw_test: f64,
    /// Mean smoothed training target as a constant, on the smoothed test set.
    pub baseline_smoothed_test: f64,
    pub train_rows: (usize, usize),
    pub test_rows: (usize, usize),
    pub reports: (EvalReport, EvalReport),
}

impl AblationTable {
    pub fn cells(&self) -> [f64; 4] {
        [
            self.without_smoothing.raw_test,
            self.without_smoothing.smoothed_test,
            self.with_smoothing.raw_test,
            self.with_smoothing.smoothed_test,
        ]
    }

    /// Two rows under the headers `Method,Raw Test Set (MAE),Smoothed Test Set (MAE)`.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(
            path.as_ref(),
            TABLE_HEADER,
            [
                ("Without Smoothing", &self.without_smoothing),
                ("With Smoothing", &self.with_smoothing),
            ]
            .into_iter()
            .map(|(name, row)| [name.to_string(), row.raw_test.to_string(), row.smoothed_test.to_string()]),
        )
    }
}

/// Train on raw and on smoothed labels of the same training sessions and
/// evaluate both models on raw and smoothed labels of the held-out sessions.
pub fn ablation(
    corpus: &Corpus,
    cfg: &AblationConfig,
    seed: u64,
    truth: Option<&GroundTruth>,
) -> Result<AblationTable> {
    let sessions = corpus.sessions()?;
    let (train_s, test_s) = split_sessions(&sessions, cfg.test_fraction, seed)?;
    let train_raw = corpus.dataset(&train_s, LabelMode::Raw, &cfg.smoothing)?;
    let train_smooth = corpus.dataset(&train_s, LabelMode::Smoothed, &cfg.smoothing)?;
    let test_raw = corpus.dataset(&test_s, LabelMode::Raw, &cfg.smoothing)?;
    let test_smooth = corpus.dataset(&test_s, LabelMode::Smoothed, &cfg.smoothing)?;

    let tcfg = TrainConfig { seed, ..cfg.train.clone() };
    let row = |train: &Dataset| -> Result<(AblationRow, EvalReport)> {
        let fitted = fit(train, Some(&test_raw), &tcfg)?;
        let on_raw = predictions(&fitted.checkpoint, &test_raw, &tcfg)?;
        let on_smooth = predict_checkpoint(&fitted.checkpoint, &test_smooth, &tcfg)?;
        let raw_preds: Vec<f64> = on_raw.iter().map(|p| p.1).collect();
        Ok((
            AblationRow {
                raw_test: mae(&raw_preds, &test_raw.targets())?,
                smoothed_test: mae(&on_smooth, &test_smooth.targets())?,
                oracle_raw_test: truth.map(|t| oracle_mae(&on_raw, t)).transpose()?,
            },
            fitted.report,
        ))
    };
    let (without_smoothing, raw_report) = row(&train_raw)?;
    let (with_smoothing, smooth_report) = row(&train_smooth)?;
    Ok(AblationTable {
        without_smoothing,
        with_smoothing,
        baseline_raw_test: baseline_mae(&train_raw, &test_raw)?,
        baseline_smoothed_test: baseline_mae(&train_smooth, &test_smooth)?,
        train_rows: (train_raw.len(), train_smooth.len()),
        test_rows: (test_raw.len(), test_smooth.len()),
        reports: (raw_report, smooth_report),
    })
}

/// Cross-validation of raw-label and smoothed-label training with
/// session-level folds. Both are validated on the raw labels of the held-out
/// sessions every epoch; the smoothed-label runs additionally track the
/// smoothed labels of the held-out sessions in `extra_curves[0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvComparison {
    pub raw: CvSummary,
    pub smoothed: CvSummary,
}

impl CvComparison {
    /// Best (lowest over epochs) validation MAE per fold, raw then smoothed.
    pub fn best_per_fold(&self) -> Vec<(f64, f64)> {
        let best = |r: &EvalReport| r.curve.iter().map(|p| p.mae).fold(f64::INFINITY, f64::min);
        self.raw
            .reports
            .iter()
            .zip(&self.smoothed.reports)
            .map(|(a, b)| (best(a), best(b)))
            .collect()
    }

    /// Folds where smoothed training reaches a lower best validation MAE.
    pub fn smoothed_wins(&self) -> usize {
        self.best_per_fold().iter().filter(|(r, s)| s < r).count()
    }

    /// Best smoothed-label validation MAE of the smoothed-label runs per fold.
    pub fn best_smoothed_on_smoothed(&self) -> Vec<f64> {
        self.smoothed
            .reports
            .iter()
            .map(|r| r.extra_curves.first().map_or(f64::NAN, |c| c.iter().map(|p| p.mae).fold(f64::INFINITY, f64::min)))
            .collect()
    }

    /// `train_labels,val_labels,fold,epoch,val_mae`.
    pub fn save_curves(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut rows = Vec::new();
        let mut push = |train: &str, val: &str, fold: usize, curve: &[CurvePoint]| {
            for p in curve {
                rows.push([
                    train.to_string(),
                    val.to_string(),
                    fold.to_string(),
                    p.epoch.to_string(),
                    p.mae.to_string(),
                ]);
            }
        };
        for (i, r) in self.raw.reports.iter().enumerate() {
            push("raw", "raw", r.fold.unwrap_or(i), &r.curve);
        }
        for (i, r) in self.smoothed.reports.iter().enumerate() {
            push("smoothed", "raw", r.fold.unwrap_or(i), &r.curve);
            if let Some(c) = r.extra_curves.first() {
                push("smoothed", "smoothed", r.fold.unwrap_or(i), c);
            }
        }
        write_rows(path.as_ref(), &["train_labels", "val_labels", "fold", "epoch", "val_mae"], rows)
    }
}

pub fn cv_compare(
    corpus: &Corpus,
    smoothing: &SmoothingConfig,
    cfg: &TrainConfig,
    k: usize,
) -> Result<CvComparison> {
    let sessions = corpus.sessions()?;
    let folds = fold_assignment(sessions.len(), k, cfg.seed)?;
    let (mut raw, mut smoothed) = (Vec::with_capacity(k), Vec::with_capacity(k));
    for fold in 0..k {
        let split = fold_split(&folds, fold);
        let train_s = pick(&sessions, &split.train);
        let val_s = pick(&sessions, &split.test);
        let val = corpus.dataset(&val_s, LabelMode::Raw, smoothing)?;
        let val_smooth = corpus.dataset(&val_s, LabelMode::Smoothed, smoothing)?;
        for (mode, out) in [(LabelMode::Raw, &mut raw), (LabelMode::Smoothed, &mut smoothed)] {
            let train = corpus.dataset(&train_s, mode, smoothing)?;
            let monitor: &[&Dataset] = match mode {
                LabelMode::Raw => &[],
                LabelMode::Smoothed => &[&val_smooth],
            };
            let mut report = fit_monitored(&train, Some(&val), monitor, cfg)?.report;
            report.fold = Some(fold);
            log::info!("fold {fold} {mode}: final validation MAE {:.4}", report.mae_raw);
            out.push(report);
        }
    }
    Ok(CvComparison {
        raw: CvSummary::from_reports(raw)?,
        smoothed: CvSummary::from_reports(smoothed)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, GeneratorConfig};

    fn tiny_city() -> (Corpus, GroundTruth) {
        let city = generate(&GeneratorConfig {
            n_sectors: 12,
            n_days: 14,
            scan_coverage: 0.3,
            ..GeneratorConfig::default()
        })
        .unwrap();
        (city.corpus, city.truth)
    }

    #[test]
    fn corpus_round_trip() {
        let (corpus, _) = tiny_city();
        let dir = tempfile::tempdir().unwrap();
        corpus.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back, corpus);
        let again = dir.path().join("again");
        back.save(&again).unwrap();
        for name in Corpus::file_names() {
            assert_eq!(
                std::fs::read(dir.path().join(name)).unwrap(),
                std::fs::read(again.join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn session_split_is_disjoint_and_stratified() {
        let (corpus, _) = tiny_city();
        let sessions = corpus.sessions().unwrap();
        let (train, test) = split_sessions(&sessions, 0.2, 1).unwrap();
        assert_eq!(train.len() + test.len(), sessions.len());
        assert_eq!(test.len(), (sessions.len() as f64 * 0.2).round() as usize);
        for s in &test {
            assert!(!train.contains(s));
        }
    }

    #[test]
    fn ablation_runs_on_tiny_city() {
        let (corpus, truth) = tiny_city();
        let cfg = AblationConfig {
            train: TrainConfig {
                epochs: 2,
                batch_size: 64,
                ..TrainConfig::default()
            },
            ..AblationConfig::default()
        };
        let t = ablation(&corpus, &cfg, 3, Some(&truth)).unwrap();
        assert!(t.cells().iter().all(|c| c.is_finite() && *c >= 0.0));
        assert!(t.train_rows.1 > t.train_rows.0);
        assert!(t.with_smoothing.oracle_raw_test.is_some());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("table.csv");
        t.save_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "Method,Raw Test Set (MAE),Smoothed Test Set (MAE)");
        assert!(lines[1].starts_with("Without Smoothing,"));
        assert!(lines[2].starts_with("With Smoothing,"));
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn cv_compare_emits_full_curves() {
        let (corpus, _) = tiny_city();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let cmp = cv_compare(&corpus, &SmoothingConfig::default(), &cfg, 4).unwrap();
        assert_eq!(cmp.raw.reports.len(), 4);
        assert_eq!(cmp.best_per_fold().len(), 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curves.csv");
        cmp.save_curves(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 1 + 3 * 4 * 2);
        assert!(cmp.best_smoothed_on_smoothed().iter().all(|m| m.is_finite()));
    }
}
