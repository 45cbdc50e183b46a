//! Training and evaluation: target renormalization, Adamax with exponential
//! learning-rate decay, mini-batch MSE training, MAE evaluation, the
//! mean-predictor baseline, stratified 80/20 splitting and k-fold
//! cross-validation.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{Dataset, Standardizer, FEATURE_DIM};
use crate::io::write_rows;
use crate::kv::{self, KvConfig};
use crate::neuralnet::{Checkpoint, MlpModel, Residual, DEFAULT_DIMS};

const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Total learning-rate decay factor over the run.
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub target_lo: f64,
    pub target_hi: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            decay: 0.25,
            epochs: 100,
            batch_size: 256,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            target_lo: 0.1,
            target_hi: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be ≥ 0, got {}", self.lr0));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must be in (0, 1], got {}", self.decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must be in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be > 0".into());
        }
        if !(0.0 < self.target_lo && self.target_lo < self.target_hi && self.target_hi < 1.0) {
            return bad(format!(
                "need 0 < target_lo < target_hi < 1, got {} and {}",
                self.target_lo, self.target_hi
            ));
        }
        Ok(())
    }
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "lr0" => self.lr0 = kv::value(key, v)?,
            "decay" => self.decay = kv::value(key, v)?,
            "epochs" => self.epochs = kv::value(key, v)?,
            "batch_size" => self.batch_size = kv::value(key, v)?,
            "beta1" => self.beta1 = kv::value(key, v)?,
            "beta2" => self.beta2 = kv::value(key, v)?,
            "eps" => self.eps = kv::value(key, v)?,
            "seed" => self.seed = kv::value(key, v)?,
            "target_lo" => self.target_lo = kv::value(key, v)?,
            "target_hi" => self.target_hi = kv::value(key, v)?,
            _ => return Err(kv::unknown(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr0", self.lr0.to_string()),
            ("decay", self.decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("seed", self.seed.to_string()),
            ("target_lo", self.target_lo.to_string()),
            ("target_hi", self.target_hi.to_string()),
        ]
    }
}

/// Map a rate in [0, 1] into [lo, hi].
pub fn renorm_target(y: f64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * y
}

/// Inverse of [`renorm_target`], clamped to [0, 1].
pub fn denorm_pred(y: f64, lo: f64, hi: f64) -> f64 {
    ((y - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// `lr0 · decay^(epoch / (epochs − 1))`: lr0 at the first epoch and
/// `lr0 · decay` at the last. Runs shorter than two epochs keep lr0.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.epochs < 2 {
        return cfg.lr0;
    }
    let frac = epoch.min(cfg.epochs - 1) as f64 / (cfg.epochs - 1) as f64;
    cfg.lr0 * cfg.decay.powf(frac)
}

/// Adamax moments for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamaxState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    /// First moment per tensor.
    pub m: Vec<Vec<f64>>,
    /// Exponentially weighted infinity norm per tensor.
    pub u: Vec<Vec<f64>>,
}

impl AdamaxState {
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            u: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &MlpModel, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = model
            .layers()
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect();
        Self::new(&sizes, cfg.beta1, cfg.beta2, cfg.eps)
    }

    /// One update:
    ///
    /// ```text
    /// t += 1
    /// m = β1·m + (1 − β1)·g
    /// u = max(β2·u, |g|)
    /// θ −= lr / (1 − β1^t) · m / (u + eps)
    /// ```
    ///
    /// Nothing is modified when any gradient entry is non-finite.
    pub fn step(&mut self, mut params: Vec<&mut [f64]>, grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (tensor, g) in grads.iter().enumerate() {
            if g.len() != self.m[tensor].len() || params[tensor].len() != g.len() {
                return Err(Error::ShapeMismatch {
                    layer: tensor / 2 + 1,
                    detail: format!("tensor {tensor} size {} vs state {}", g.len(), self.m[tensor].len()),
                });
            }
            if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { tensor, index, value });
            }
        }
        self.t += 1;
        let step = lr / (1.0 - self.beta1.powi(self.t as i32));
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (tensor, theta) in params.iter_mut().enumerate() {
            let (m, u, g) = (&mut self.m[tensor], &mut self.u[tensor], grads[tensor]);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                u[i] = (b2 * u[i]).max(g[i].abs());
                theta[i] -= step * m[i] / (u[i] + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Number of completed epochs, from 1.
    pub epoch: usize,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// MAE of denormalized predictions against raw targets on the evaluation
    /// rows (the validation set when one was given, else the training set).
    pub mae_raw: f64,
    /// MAE of the constant training-mean predictor on the same rows.
    pub mae_baseline: f64,
    /// Validation MAE after every epoch.
    pub curve: Vec<CurvePoint>,
    /// Mean training MSE (renormalized scale) of every epoch.
    pub train_loss: Vec<f64>,
    pub fold: Option<usize>,
    /// Per-epoch MAE on each additional monitoring set.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_curves: Vec<Vec<CurvePoint>>,
}

/// Rows of a dataset as an `n × 28` matrix.
pub fn design_matrix(ds: &Dataset) -> Array2<f64> {
    let mut x = Array2::zeros((ds.len(), FEATURE_DIM));
    for (mut row, r) in x.axis_iter_mut(Axis(0)).zip(&ds.rows) {
        row.assign(&ndarray::ArrayView1::from(&r.features.0[..]));
    }
    x
}

/// Denormalized predictions for every row of `x`.
pub fn predict_rates(model: &MlpModel, x: ArrayView2<'_, f64>, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.nrows());
    for chunk in x.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
        let y = model.predict(chunk)?;
        out.extend(y.iter().map(|&v| denorm_pred(v, cfg.target_lo, cfg.target_hi)));
    }
    Ok(out)
}

pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::WidthMismatch {
            expected: targets.len(),
            found: predictions.len(),
        });
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / predictions.len() as f64)
}

/// MAE of a model on a standardized dataset.
pub fn evaluate_mae(model: &MlpModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let preds = predict_rates(model, design_matrix(dataset).view(), cfg)?;
    mae(&preds, &dataset.targets())
}

pub fn mean_target(dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("training set"));
    }
    Ok(dataset.rows.iter().map(|r| r.target).sum::<f64>() / dataset.len() as f64)
}

/// MAE on `test` of a constant prediction equal to the mean `train` target.
pub fn baseline_mae(train: &Dataset, test: &Dataset) -> Result<f64> {
    let mean = mean_target(train)?;
    mae(&vec![mean; test.len()], &test.targets())
}

pub struct TrainOutcome {
    pub model: MlpModel,
    pub report: EvalReport,
}

/// Fit the standard residual network on a standardized training set.
pub fn train(train_set: &Dataset, validation: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let model = MlpModel::init(&DEFAULT_DIMS, Some(Residual::default()), cfg.seed)?;
    train_model(model, train_set, validation, cfg)
}

/// Train `model` in place of a fresh initialization; any architecture with a
/// 28-wide input works.
pub fn train_model(
    model: MlpModel,
    train_set: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_model_monitored(model, train_set, validation, &[], cfg)
}

/// [`train_model`] that also records the per-epoch MAE on every set in
/// `monitor` into `extra_curves`.
pub fn train_model_monitored(
    mut model: MlpModel,
    train_set: &Dataset,
    validation: Option<&Dataset>,
    monitor: &[&Dataset],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if validation.is_some_and(|v| v.is_empty()) || monitor.iter().any(|m| m.is_empty()) {
        return Err(Error::Empty("validation set"));
    }
    let monitored: Vec<(Array2<f64>, Vec<f64>)> =
        monitor.iter().map(|m| (design_matrix(m), m.targets())).collect();
    let mut extra_curves = vec![Vec::with_capacity(cfg.epochs); monitor.len()];
    let x = design_matrix(train_set);
    let y: Array1<f64> = train_set
        .rows
        .iter()
        .map(|r| renorm_target(r.target, cfg.target_lo, cfg.target_hi))
        .collect();
    let x_val = validation.map(design_matrix);
    let y_val = validation.map(Dataset::targets);

    let mut opt = AdamaxState::for_model(&model, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed_0f_5b_u64));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut train_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x.select(Axis(0), idx);
            let yb = y.select(Axis(0), idx);
            let cache = model.forward(xb.view())?;
            let diff = &cache.output - &yb;
            let batch_loss = diff.mapv(|d| d * d).sum();
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            loss_sum += batch_loss;
            let d_out = diff.mapv(|d| 2.0 * d / idx.len() as f64);
            let grads = model.backward(&cache, &d_out)?;
            opt.step(model.parameters_mut(), &grads.as_slices(), lr)?;
        }
        train_loss.push(loss_sum / train_set.len() as f64);
        if let (Some(xv), Some(yv)) = (&x_val, &y_val) {
            let preds = predict_rates(&model, xv.view(), cfg)?;
            curve.push(CurvePoint {
                epoch: epoch + 1,
                mae: mae(&preds, yv)?,
            });
        }
        for ((xm, ym), out) in monitored.iter().zip(&mut extra_curves) {
            let preds = predict_rates(&model, xm.view(), cfg)?;
            out.push(CurvePoint {
                epoch: epoch + 1,
                mae: mae(&preds, ym)?,
            });
        }
        log::debug!(
            "epoch {} lr {lr:.3e} loss {:.5} val {:?}",
            epoch + 1,
            train_loss.last().unwrap(),
            curve.last().map(|c| c.mae)
        );
    }

    let eval_set = validation.unwrap_or(train_set);
    let mae_raw = match curve.last() {
        Some(p) => p.mae,
        None => evaluate_mae(&model, eval_set, cfg)?,
    };
    let report = EvalReport {
        mae_raw,
        mae_baseline: baseline_mae(train_set, eval_set)?,
        curve,
        train_loss,
        fold: None,
        extra_curves,
    };
    Ok(TrainOutcome { model, report })
}

/// A trained checkpoint (with its standardizer) and its evaluation.
pub struct Fitted {
    pub checkpoint: Checkpoint,
    pub report: EvalReport,
}

/// Fit a standardizer on raw training rows, then train and evaluate on raw
/// validation rows.
pub fn fit(train_raw: &Dataset, validation_raw: Option<&Dataset>, cfg: &TrainConfig) -> Result<Fitted> {
    fit_monitored(train_raw, validation_raw, &[], cfg)
}

/// [`fit`] with additional raw monitoring sets, see [`train_model_monitored`].
pub fn fit_monitored(
    train_raw: &Dataset,
    validation_raw: Option<&Dataset>,
    monitor_raw: &[&Dataset],
    cfg: &TrainConfig,
) -> Result<Fitted> {
    let std = Standardizer::fit_dataset(train_raw)?;
    let train_z = train_raw.standardized(&std);
    let val_z = validation_raw.map(|v| v.standardized(&std));
    let monitor_z: Vec<Dataset> = monitor_raw.iter().map(|m| m.standardized(&std)).collect();
    let monitor_refs: Vec<&Dataset> = monitor_z.iter().collect();
    let model = MlpModel::init(&DEFAULT_DIMS, Some(Residual::default()), cfg.seed)?;
    let outcome = train_model_monitored(model, &train_z, val_z.as_ref(), &monitor_refs, cfg)?;
    Ok(Fitted {
        checkpoint: Checkpoint {
            model: outcome.model,
            standardizer: Some(std),
        },
        report: outcome.report,
    })
}

/// Denormalized predictions of a checkpoint on raw rows.
pub fn predict_checkpoint(ck: &Checkpoint, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let ds = match &ck.standardizer {
        Some(s) => dataset.standardized(s),
        None => dataset.clone(),
    };
    predict_rates(&ck.model, design_matrix(&ds).view(), cfg)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random split stratified by `strata`: every stratum contributes its share
/// of test rows (within one row), so strata with at least five rows appear on
/// both sides. Both index lists are ascending.
pub fn stratified_split<K: Ord>(strata: &[K], test_fraction: f64, seed: u64) -> Result<Split> {
    if strata.len() < 5 {
        return Err(Error::Invalid(format!(
            "need at least 5 rows to split, got {}",
            strata.len()
        )));
    }
    if !(0.0 < test_fraction && test_fraction < 1.0) {
        return Err(Error::Invalid(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let mut groups: BTreeMap<&K, Vec<usize>> = BTreeMap::new();
    for (i, k) in strata.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut seen = 0usize;
    for (_, mut idx) in groups {
        let before = (seen as f64 * test_fraction).round() as usize;
        seen += idx.len();
        let after = (seen as f64 * test_fraction).round() as usize;
        let n_test = after - before;
        idx.shuffle(&mut rng);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// 80/20 split of dataset rows, stratified by sector.
pub fn split_80_20(dataset: &Dataset, seed: u64) -> Result<Split> {
    let strata: Vec<&str> = dataset.rows.iter().map(|r| r.key.sector_id.as_str()).collect();
    stratified_split(&strata, 0.2, seed)
}

/// Chronological split: the latest dates go to the test side until it holds
/// at least `test_fraction` of the rows. Dates are never divided.
pub fn temporal_split(dates: &[NaiveDate], test_fraction: f64) -> Result<Split> {
    if dates.len() < 5 {
        return Err(Error::Invalid(format!("need at least 5 rows to split, got {}", dates.len())));
    }
    let mut per_date: BTreeMap<NaiveDate, usize> = BTreeMap::new();
    for d in dates {
        *per_date.entry(*d).or_default() += 1;
    }
    let wanted = (dates.len() as f64 * test_fraction).round() as usize;
    let mut taken = 0;
    let mut cutoff = None;
    for (d, n) in per_date.iter().rev() {
        if taken >= wanted {
            break;
        }
        taken += n;
        cutoff = Some(*d);
    }
    let cutoff = cutoff.ok_or_else(|| Error::Invalid("test fraction leaves no test rows".into()))?;
    let (test, train): (Vec<usize>, Vec<usize>) = (0..dates.len()).partition(|&i| dates[i] >= cutoff);
    if train.is_empty() {
        return Err(Error::Invalid("temporal split leaves no training rows".into()));
    }
    Ok(Split { train, test })
}

/// Assign rows to `k` folds of near-equal size. Returns the fold of each row.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Invalid(format!("k must be ≥ 2, got {k}")));
    }
    if k > n {
        return Err(Error::Invalid(format!("k = {k} exceeds the {n} rows")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        fold[row] = pos % k;
    }
    Ok(fold)
}

pub fn fold_split(folds: &[usize], fold: usize) -> Split {
    let (test, train) = (0..folds.len()).partition(|&i| folds[i] == fold);
    Split { train, test }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub reports: Vec<EvalReport>,
    /// Mean validation MAE across folds per epoch.
    pub mean_curve: Vec<CurvePoint>,
    /// Epoch with the lowest mean validation MAE.
    pub recommended_epoch: usize,
}

impl CvSummary {
    pub fn from_reports(reports: Vec<EvalReport>) -> Result<Self> {
        let epochs = reports.iter().map(|r| r.curve.len()).min().unwrap_or(0);
        if epochs == 0 {
            return Err(Error::Empty("cross-validation curves"));
        }
        let mean_curve: Vec<CurvePoint> = (0..epochs)
            .map(|e| CurvePoint {
                epoch: e + 1,
                mae: reports.iter().map(|r| r.curve[e].mae).sum::<f64>() / reports.len() as f64,
            })
            .collect();
        let recommended_epoch = mean_curve
            .iter()
            .min_by(|a, b| a.mae.total_cmp(&b.mae))
            .map(|p| p.epoch)
            .expect("nonempty");
        Ok(Self {
            reports,
            mean_curve,
            recommended_epoch,
        })
    }

    /// `fold,epoch,val_mae`, one row per fold and epoch.
    pub fn save_curves(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(
            path.as_ref(),
            &["fold", "epoch", "val_mae"],
            self.reports.iter().enumerate().flat_map(|(i, r)| {
                let fold = r.fold.unwrap_or(i);
                r.curve
                    .iter()
                    .map(move |p| [fold.to_string(), p.epoch.to_string(), p.mae.to_string()])
            }),
        )
    }
}

/// k-fold cross-validation on raw rows; every fold trains from scratch with a
/// standardizer fit on its own training part.
pub fn cross_validate(dataset: &Dataset, cfg: &TrainConfig, k: usize) -> Result<CvSummary> {
    let folds = fold_assignment(dataset.len(), k, cfg.seed)?;
    let mut reports = Vec::with_capacity(k);
    for fold in 0..k {
        let split = fold_split(&folds, fold);
        let fitted = fit(&dataset.subset(&split.train), Some(&dataset.subset(&split.test)), cfg)?;
        let mut report = fitted.report;
        report.fold = Some(fold);
        reports.push(report);
    }
    CvSummary::from_reports(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CellKey, TimeSlot};
    use crate::featurize::{DatasetRow, FeatureVector};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn renorm_pair() {
        assert_eq!(renorm_target(0.0, 0.1, 0.9), 0.1);
        assert_eq!(renorm_target(1.0, 0.1, 0.9), 0.9);
        for y in [0.0, 0.25, 0.5, 1.0] {
            assert!((denorm_pred(renorm_target(y, 0.1, 0.9), 0.1, 0.9) - y).abs() < 1e-15);
        }
        assert_eq!(denorm_pred(0.05, 0.1, 0.9), 0.0);
        assert_eq!(denorm_pred(0.95, 0.1, 0.9), 1.0);
    }

    #[test]
    fn adamax_first_step_by_hand() {
        let mut st = AdamaxState::new(&[1], 0.9, 0.999, 1e-8);
        let mut theta = [0.0];
        st.step(vec![&mut theta[..]], &[&[2.0]], 0.001).unwrap();
        assert!((st.m[0][0] - 0.2).abs() < 1e-15);
        assert_eq!(st.u[0][0], 2.0);
        let expected = -(0.001 / (1.0 - 0.9)) * 0.2 / (2.0 + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-15, "{}", theta[0]);
        assert!((theta[0] + 0.001).abs() < 1e-10);
    }

    #[test]
    fn adamax_zero_gradient_is_noop() {
        let mut st = AdamaxState::new(&[3], 0.9, 0.999, 1e-8);
        let mut theta = [0.5, -1.0, 2.0];
        for _ in 0..10 {
            st.step(vec![&mut theta[..]], &[&[0.0, 0.0, 0.0]], 0.01).unwrap();
        }
        assert_eq!(theta, [0.5, -1.0, 2.0]);
    }

    #[test]
    fn adamax_rejects_non_finite() {
        let mut st = AdamaxState::new(&[2], 0.9, 0.999, 1e-8);
        let mut theta = [0.5, 1.0];
        let err = st.step(vec![&mut theta[..]], &[&[0.1, f64::NAN]], 0.01).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { tensor: 0, index: 1, .. }));
        assert_eq!(theta, [0.5, 1.0]);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.001);
        assert!((lr_schedule(99, &cfg) - 0.00025).abs() < 1e-15);
        let odd = TrainConfig { epochs: 101, ..cfg.clone() };
        assert!((lr_schedule(50, &odd) - 0.0005).abs() < 1e-9);
        let one = TrainConfig { epochs: 1, ..cfg };
        assert_eq!(lr_schedule(0, &one), 0.001);
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = TrainConfig {
            epochs: 7,
            seed: 42,
            ..TrainConfig::default()
        };
        let mut back = TrainConfig::default();
        back.apply_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
        assert!(back.apply_kv_str("learning_rate = 1").is_err());
    }

    fn row(i: usize, sector: usize, target: f64) -> DatasetRow {
        let mut v = [0.0; FEATURE_DIM];
        v[0] = i as f64;
        DatasetRow {
            key: CellKey {
                sector_id: format!("S{sector}"),
                slot: TimeSlot::new(NaiveDate::from_ymd_opt(2022, 1, 1).unwrap() + chrono::Duration::days(i as i64), 0).unwrap(),
            },
            features: FeatureVector(v),
            target,
        }
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((mae(&[0.5, 0.5], &[0.3, 0.7]).unwrap() - 0.2).abs() < 1e-15);
        assert!(mae(&[], &[]).is_err());
        let train = Dataset { rows: vec![row(0, 0, 0.2), row(1, 0, 0.6)] };
        let test = Dataset { rows: vec![row(2, 0, 0.1), row(3, 0, 0.9)] };
        // mean 0.4 → |0.1−0.4| and |0.9−0.4|
        assert!((baseline_mae(&train, &test).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = Dataset { rows: (0..100).map(|i| row(i, 0, 0.5)).collect() };
        let s = split_80_20(&ds, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (80, 20));
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, split_80_20(&ds, 3).unwrap());
        assert_ne!(s, split_80_20(&ds, 4).unwrap());
        assert!(split_80_20(&Dataset { rows: (0..4).map(|i| row(i, 0, 0.5)).collect() }, 0).is_err());
    }

    #[test]
    fn temporal_split_takes_latest_dates() {
        let dates: Vec<NaiveDate> = (0..10)
            .map(|i| NaiveDate::from_ymd_opt(2022, 1, 1).unwrap() + chrono::Duration::days(i))
            .collect();
        let s = temporal_split(&dates, 0.2).unwrap();
        assert_eq!(s.test, vec![8, 9]);
        assert_eq!(s.train.len(), 8);
    }

    #[test]
    fn folds_partition_rows() {
        let folds = fold_assignment(400, 4, 1).unwrap();
        for f in 0..4 {
            let s = fold_split(&folds, f);
            assert_eq!((s.train.len(), s.test.len()), (300, 100));
        }
        assert!(fold_assignment(3, 4, 1).is_err());
        assert!(fold_assignment(10, 1, 1).is_err());
    }

    proptest! {
        #[test]
        fn stratified_split_properties(sizes in proptest::collection::vec(1usize..30, 1..12), seed in 0u64..1000) {
            let strata: Vec<usize> = sizes.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat(k).take(n)).collect();
            prop_assume!(strata.len() >= 5);
            let s = stratified_split(&strata, 0.2, seed).unwrap();
            prop_assert_eq!(s.test.len(), (strata.len() as f64 * 0.2).round() as usize);
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..strata.len()).collect::<Vec<_>>());
            for (k, &n) in sizes.iter().enumerate() {
                if n >= 5 {
                    prop_assert!(s.test.iter().any(|&i| strata[i] == k));
                    prop_assert!(s.train.iter().any(|&i| strata[i] == k));
                }
            }
        }

        #[test]
        fn adamax_infinity_norm_monotone(grads in proptest::collection::vec(-5.0f64..5.0, 1..50)) {
            let mut st = AdamaxState::new(&[1], 0.9, 0.999, 1e-8);
            let mut theta = [0.0];
            for g in grads {
                let prev = st.u[0][0];
                st.step(vec![&mut theta[..]], &[&[g]], 0.001).unwrap();
                prop_assert!(st.u[0][0] >= 0.999 * prev);
                prop_assert!(st.u[0][0] >= 0.0);
            }
        }
    }

    #[test]
    fn evaluate_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<DatasetRow> = (0..50)
            .map(|i| {
                let mut r = row(i, i % 3, rng.random_range(0.0..1.0));
                for c in 0..FEATURE_DIM {
                    r.features.0[c] = rng.random_range(-1.0..1.0);
                }
                r
            })
            .collect();
        let ds = Dataset { rows: rows.clone() };
        let mut rev = rows;
        rev.reverse();
        let model = MlpModel::standard(2);
        let cfg = TrainConfig::default();
        let a = evaluate_mae(&model, &ds, &cfg).unwrap();
        let b = evaluate_mae(&model, &Dataset { rows: rev }, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn toy_set(n: usize, seed: u64, target: impl Fn(&[f64; FEATURE_DIM]) -> f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset {
            rows: (0..n)
                .map(|i| {
                    let mut r = row(i, i % 4, 0.0);
                    for c in 0..FEATURE_DIM {
                        r.features.0[c] = rng.random_range(-1.0..1.0);
                    }
                    r.target = target(&r.features.0);
                    r
                })
                .collect(),
        }
    }

    fn flat_weights(model: &MlpModel) -> Vec<f64> {
        let mut m = model.clone();
        m.parameters_mut().into_iter().flat_map(|p| p.to_vec()).collect()
    }

    #[test]
    fn zero_learning_rate_keeps_initial_weights() {
        let ds = toy_set(64, 1, |_| 0.3);
        let cfg = TrainConfig { lr0: 0.0, epochs: 3, batch_size: 16, seed: 9, ..TrainConfig::default() };
        let out = train(&ds, None, &cfg).unwrap();
        assert_eq!(flat_weights(&out.model), flat_weights(&MlpModel::standard(9)));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy_set(120, 2, |f| 0.5 + 0.3 * f[0].tanh());
        let cfg = TrainConfig { epochs: 3, batch_size: 32, seed: 4, ..TrainConfig::default() };
        let a = train(&ds, Some(&ds), &cfg).unwrap();
        let b = train(&ds, Some(&ds), &cfg).unwrap();
        assert_eq!(flat_weights(&a.model), flat_weights(&b.model));
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn toy_loss_does_not_climb() {
        let ds = toy_set(200, 3, |f| if f[0] + 0.5 * f[1] > 0.0 { 0.8 } else { 0.2 });
        let cfg = TrainConfig { epochs: 10, batch_size: 32, seed: 1, ..TrainConfig::default() };
        let loss = train(&ds, None, &cfg).unwrap().report.train_loss;
        for w in loss.windows(2) {
            assert!(w[1] <= 1.05 * w[0], "{loss:?}");
        }
        assert!(loss[9] < loss[0]);
    }

    #[test]
    fn constant_target_is_learned() {
        let ds = toy_set(200, 4, |_| 0.4);
        let cfg = TrainConfig { epochs: 40, batch_size: 32, seed: 2, ..TrainConfig::default() };
        let out = train(&ds, None, &cfg).unwrap();
        let preds = predict_rates(&out.model, design_matrix(&ds).view(), &cfg).unwrap();
        let worst = preds.iter().map(|p| (p - 0.4).abs()).fold(0.0, f64::max);
        assert!(worst < 0.02, "{worst}");
    }

    #[test]
    fn baseline_matches_direct_computation() {
        let train_set = toy_set(30, 5, |f| (f[2] + 1.0) / 2.0);
        let test = toy_set(20, 6, |f| (f[3] + 1.0) / 2.0);
        let mean = train_set.targets().iter().sum::<f64>() / 30.0;
        let direct = test.targets().iter().map(|y| (y - mean).abs()).sum::<f64>() / 20.0;
        assert!((baseline_mae(&train_set, &test).unwrap() - direct).abs() < 1e-15);
    }
}
