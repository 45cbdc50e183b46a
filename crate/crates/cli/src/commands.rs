use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use parkrate::domain::{CellKey, TimeSlot};
use parkrate::featurize::{Dataset, DatasetRow, Standardizer};
use parkrate::io::{load_scans, load_sectors, write_json};
use parkrate::kv::KvConfig;
use parkrate::labeling::{self, save_labels, spatial_stats, LabelMode, SmoothingConfig};
use parkrate::neuralnet::Checkpoint;
use parkrate::pipeline::{
    self, ablation, cv_compare, save_predictions, AblationConfig, Corpus, SCANS_FILE, SECTORS_FILE, TRUTH_FILE,
};
use parkrate::synthgen::{generate, GeneratorConfig, GroundTruth};
use parkrate::trainer::{
    cross_validate, fit, mae, mean_target, predict_checkpoint, split_80_20, temporal_split, Split, TrainConfig,
};

use crate::run::Run;
use crate::{
    AblationArgs, BuildArgs, Cli, Command, CvArgs, EvalArgs, LabelArgs, Mode, PredictArgs, SmoothingArgs,
    SplitKind, SynthArgs, TrainArgs, TrainFlags,
};

pub fn dispatch(cli: &Cli) -> Result<()> {
    let name = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Label(_) => "label",
        Command::Build(_) => "build",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Cv(_) => "cv",
        Command::Ablation(_) => "ablation",
        Command::Predict(_) => "predict",
    };
    let mut run = Run::new(name, &cli.out_dir, cli.seed)?;
    let result = match &cli.command {
        Command::Synth(a) => synth(cli, a, &mut run),
        Command::Label(a) => label(cli, a, &mut run),
        Command::Build(a) => build(cli, a, &mut run),
        Command::Train(a) => train(cli, a, &mut run),
        Command::Eval(a) => eval(cli, a, &mut run),
        Command::Cv(a) => cv(cli, a, &mut run),
        Command::Ablation(a) => run_ablation(cli, a, &mut run),
        Command::Predict(a) => predict(cli, a, &mut run),
    };
    if let Err(e) = result {
        run.cleanup();
        return Err(e);
    }
    run.finish()
}

fn apply_config<C: KvConfig>(cfg: &mut C, cli: &Cli, run: &mut Run) -> Result<()> {
    if let Some(path) = &cli.config {
        run.input(path)?;
        cfg.apply_kv_file(path)?;
    }
    Ok(())
}

fn apply_train_flags(cfg: &mut TrainConfig, flags: &TrainFlags, seed: u64) {
    if let Some(e) = flags.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = flags.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = flags.lr0 {
        cfg.lr0 = lr;
    }
    cfg.seed = seed;
}

fn apply_smoothing_flags(cfg: &mut SmoothingConfig, flags: &SmoothingArgs) {
    if let Some(s) = flags.sigma_minutes {
        cfg.sigma_minutes = s;
    }
    if let Some(n) = flags.neighbor_slots {
        cfg.neighbor_slots = n;
    }
}

fn train_config(cli: &Cli, flags: &TrainFlags, run: &mut Run) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    apply_config(&mut cfg, cli, run)?;
    apply_train_flags(&mut cfg, flags, cli.seed);
    cfg.validate()?;
    run.record_config(cfg.entries());
    Ok(cfg)
}

fn ablation_config(cli: &Cli, train: &TrainFlags, smoothing: &SmoothingArgs, run: &mut Run) -> Result<AblationConfig> {
    let mut cfg = AblationConfig::default();
    apply_config(&mut cfg, cli, run)?;
    apply_train_flags(&mut cfg.train, train, cli.seed);
    apply_smoothing_flags(&mut cfg.smoothing, smoothing);
    cfg.train.validate()?;
    cfg.smoothing.validate()?;
    run.record_config(cfg.entries());
    Ok(cfg)
}

fn load_corpus(dir: &Path, run: &mut Run) -> Result<Corpus> {
    for name in Corpus::file_names() {
        run.input(&dir.join(name))?;
    }
    Ok(Corpus::load(dir)?)
}

fn load_dataset(path: &Path, run: &mut Run) -> Result<Dataset> {
    run.input(path)?;
    let ds = Dataset::load(path)?;
    anyhow::ensure!(!ds.is_empty(), "dataset {} has no rows", path.display());
    Ok(ds)
}

fn load_checkpoint(path: &Path, run: &mut Run) -> Result<Checkpoint> {
    run.input(path)?;
    Ok(Checkpoint::load(path)?)
}

fn split_dataset(ds: &Dataset, kind: SplitKind, seed: u64) -> Result<Split> {
    Ok(match kind {
        SplitKind::Random => split_80_20(ds, seed)?,
        SplitKind::Temporal => {
            let dates: Vec<_> = ds.rows.iter().map(|r| r.key.slot.date).collect();
            temporal_split(&dates, 0.2)?
        }
    })
}

fn synth(cli: &Cli, a: &SynthArgs, run: &mut Run) -> Result<()> {
    let mut cfg = GeneratorConfig::default();
    apply_config(&mut cfg, cli, run)?;
    if let Some(n) = a.n_sectors {
        cfg.n_sectors = n;
    }
    if let Some(n) = a.n_days {
        cfg.n_days = n;
    }
    if let Some(c) = a.scan_coverage {
        cfg.scan_coverage = c;
    }
    cfg.seed = cli.seed;
    run.record_config(cfg.entries());
    for name in Corpus::file_names() {
        run.output(name);
    }
    let truth_path = run.output(TRUTH_FILE);
    let city = generate(&cfg)?;
    city.corpus.save(run.out_dir())?;
    city.truth.save(truth_path)?;
    println!(
        "{} sectors, {} days, {} scans, mean true rate {:.4}",
        city.corpus.sectors.len(),
        cfg.n_days,
        city.corpus.scans.len(),
        city.truth.mean()
    );
    Ok(())
}

fn label(cli: &Cli, a: &LabelArgs, run: &mut Run) -> Result<()> {
    let mut cfg = SmoothingConfig::default();
    apply_config(&mut cfg, cli, run)?;
    apply_smoothing_flags(&mut cfg, &a.smoothing);
    let mode = match a.mode {
        Mode::Raw => LabelMode::Raw,
        Mode::Smoothed => LabelMode::Smoothed,
    };
    run.record_config(cfg.entries());
    run.set("mode", mode);
    let sectors = load_sectors(run.input(&a.data.join(SECTORS_FILE))?)?;
    let scans = load_scans(run.input(&a.data.join(SCANS_FILE))?)?;
    let labels_path = run.output("labels.csv");
    let stats_csv = run.output("sector_stats.csv");
    let stats_geo = run.output("sector_stats.geojson");

    let sessions = labeling::session_rates(&scans, &sectors)?;
    let labeling = labeling::label(&sessions, mode, &cfg)?;
    save_labels(&labels_path, &labeling.labels)?;
    let stats = spatial_stats(&labeling.labels, &sectors)?;
    stats.save_csv(&stats_csv)?;
    stats.save_geojson(&stats_geo)?;
    println!(
        "{} {mode} labels from {} sessions ({} outside enforcement hours); global mean {:.4}, sector means [{:.4}, {:.4}]",
        labeling.labels.len(),
        sessions.len(),
        labeling.dropped,
        stats.global_mean,
        stats.min_sector_mean,
        stats.max_sector_mean
    );
    Ok(())
}

fn build(cli: &Cli, a: &BuildArgs, run: &mut Run) -> Result<()> {
    if cli.config.is_some() {
        log::warn!("build has no configuration keys; --config ignored");
    }
    let corpus = load_corpus(&a.data, run)?;
    let labels = labeling::load_labels(run.input(&a.labels)?)?;
    let dataset_path = run.output("dataset.csv");
    let std_path = run.output("standardizer.json");

    let mut featurizer = corpus.featurizer()?;
    if let Some(w) = a.window {
        anyhow::ensure!(w >= 1, "weather window must be at least one hour");
        featurizer = featurizer.with_window(w);
        run.set("window", w);
    }
    let ds = featurizer.dataset(&labels)?;
    anyhow::ensure!(!ds.is_empty(), "no labels to featurize in {}", a.labels.display());
    let split = split_80_20(&ds, cli.seed)?;
    let std = Standardizer::fit_dataset(&ds.subset(&split.train))?;
    ds.save(&dataset_path)?;
    write_json(&std_path, &std)?;
    println!("{} rows, standardizer fit on {} training rows", ds.len(), split.train.len());
    Ok(())
}

#[derive(Serialize)]
struct Evaluation {
    scope: &'static str,
    rows: usize,
    mae: f64,
    mae_baseline: f64,
}

fn train(cli: &Cli, a: &TrainArgs, run: &mut Run) -> Result<()> {
    let cfg = train_config(cli, &a.train, run)?;
    run.set("split", format!("{:?}", a.split).to_lowercase());
    let ds = load_dataset(&a.dataset, run)?;
    let model_path = run.output(&a.out);
    let report_path = run.output(&a.report);

    let split = split_dataset(&ds, a.split, cli.seed)?;
    let fitted = fit(&ds.subset(&split.train), Some(&ds.subset(&split.test)), &cfg)?;
    fitted.checkpoint.save(&model_path)?;
    write_json(&report_path, &fitted.report)?;
    println!(
        "test MAE {:.4}, baseline {:.4} ({} train / {} test rows, {} epochs)",
        fitted.report.mae_raw,
        fitted.report.mae_baseline,
        split.train.len(),
        split.test.len(),
        cfg.epochs
    );
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs, run: &mut Run) -> Result<()> {
    let mut cfg = TrainConfig::default();
    apply_config(&mut cfg, cli, run)?;
    run.record_config(cfg.entries());
    let ck = load_checkpoint(&a.model, run)?;
    let ds = load_dataset(&a.dataset, run)?;
    let out = run.output("eval_report.json");

    let (scope, eval_set, reference) = if a.all {
        ("all", ds.clone(), ds)
    } else {
        let split = split_dataset(&ds, a.split, cli.seed)?;
        ("test", ds.subset(&split.test), ds.subset(&split.train))
    };
    let preds = predict_checkpoint(&ck, &eval_set, &cfg)?;
    let targets = eval_set.targets();
    let baseline = mean_target(&reference)?;
    let report = Evaluation {
        scope,
        rows: eval_set.len(),
        mae: mae(&preds, &targets)?,
        mae_baseline: mae(&vec![baseline; targets.len()], &targets)?,
    };
    write_json(&out, &report)?;
    println!("{} rows ({scope}): MAE {:.4}, baseline {:.4}", report.rows, report.mae, report.mae_baseline);
    Ok(())
}

fn cv(cli: &Cli, a: &CvArgs, run: &mut Run) -> Result<()> {
    run.set("k", a.k);
    if let Some(data) = &a.data {
        let cfg = ablation_config(cli, &a.train, &a.smoothing, run)?;
        let corpus = load_corpus(data, run)?;
        let curves = run.output("cv_compare_curves.csv");
        let summary = run.output("cv_compare.json");
        let cmp = cv_compare(&corpus, &cfg.smoothing, &cfg.train, a.k)?;
        cmp.save_curves(&curves)?;
        write_json(&summary, &cmp)?;
        for (fold, (raw, smoothed)) in cmp.best_per_fold().into_iter().enumerate() {
            println!("fold {fold}: best raw-label MAE {raw:.4}, best smoothed-label MAE {smoothed:.4}");
        }
        println!("smoothed labels better in {} of {} folds", cmp.smoothed_wins(), a.k);
        return Ok(());
    }
    let dataset = a.dataset.as_ref().expect("clap requires --dataset or --data");
    let cfg = train_config(cli, &a.train, run)?;
    let ds = load_dataset(dataset, run)?;
    let curves = run.output("cv_curves.csv");
    let summary = run.output("cv_summary.json");
    let cv = cross_validate(&ds, &cfg, a.k)?;
    cv.save_curves(&curves)?;
    write_json(&summary, &cv)?;
    println!("recommended epoch {}", cv.recommended_epoch);
    Ok(())
}

fn run_ablation(cli: &Cli, a: &AblationArgs, run: &mut Run) -> Result<()> {
    let cfg = ablation_config(cli, &a.train, &a.smoothing, run)?;
    let corpus = load_corpus(&a.data, run)?;
    let truth_path: Option<PathBuf> = match &a.truth {
        Some(p) => Some(p.clone()),
        None => Some(a.data.join(TRUTH_FILE)).filter(|p| p.is_file()),
    };
    let truth = match &truth_path {
        Some(p) => Some(GroundTruth::load(run.input(p)?).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let table_path = run.output("table.csv");
    let json_path = run.output("ablation.json");
    let table = ablation(&corpus, &cfg, cli.seed, truth.as_ref())?;
    table.save_csv(&table_path)?;
    write_json(&json_path, &table)?;
    println!("{:<18} {:>18} {:>24}", "Method", "Raw Test Set (MAE)", "Smoothed Test Set (MAE)");
    for (name, row) in [("Without Smoothing", &table.without_smoothing), ("With Smoothing", &table.with_smoothing)] {
        println!("{name:<18} {:>18.4} {:>24.4}", row.raw_test, row.smoothed_test);
    }
    println!("baseline (training mean) on raw test set: {:.4}", table.baseline_raw_test);
    Ok(())
}

fn predict(cli: &Cli, a: &PredictArgs, run: &mut Run) -> Result<()> {
    let mut cfg = TrainConfig::default();
    apply_config(&mut cfg, cli, run)?;
    run.record_config(cfg.entries());
    let ck = load_checkpoint(&a.model, run)?;
    let ds = match (&a.dataset, &a.data) {
        (Some(path), _) => load_dataset(path, run)?,
        (None, Some(dir)) => {
            let corpus = load_corpus(dir, run)?;
            let featurizer = corpus.featurizer()?;
            let mut rows = Vec::new();
            for &date in &a.date {
                for sector in corpus.sectors.iter() {
                    for slot in TimeSlot::all_of(date) {
                        let key = CellKey {
                            sector_id: sector.id.clone(),
                            slot,
                        };
                        rows.push(DatasetRow {
                            features: featurizer.vector(&key)?,
                            key,
                            target: 0.0,
                        });
                    }
                }
            }
            Dataset { rows }
        }
        (None, None) => anyhow::bail!("predict needs --dataset or --data with --date"),
    };
    let out = run.output("predictions.csv");
    let preds = pipeline::predictions(&ck, &ds, &cfg)?;
    save_predictions(&out, &preds)?;
    println!("{} predictions written to {}", preds.len(), out.display());
    Ok(())
}
