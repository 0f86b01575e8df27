//! Subcommand bodies. Each reads what earlier commands left in the output
//! directory and writes only deterministic artifacts; wall-clock data goes
//! to the sidecar log.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ganuq_core::data::{extrapolation_split, generate_synthetic, load_csv_inferred, uniform_split, write_csv, BandSplit};
use ganuq_core::distill::{distill, monte_carlo_sigma_syst};
use ganuq_core::ensemble::train_adversarial_ensemble;
use ganuq_core::eval::{feature_groups, run_scan_experiment, run_uniform_experiment, scan_groups, sigma_syst_bands, spearman};
use ganuq_core::mcdropout::{train_mc_dropout_gan, virtual_ensemble};
use ganuq_core::rng::{derive_seed, substream};
use ganuq_core::sampler::MemberSampler;
use ganuq_core::{
    Dataset, EfficiencyReport, Ensemble, Error, Normalizer, Result, SystUncertainty, UncertainGenerator,
    VarianceRegressorPair, VirtualEnsemble,
};

use crate::config::{Method, RunConfig, SplitKind};

const DATA_CSV: &str = "data/dataset.csv";
const DATA_MANIFEST: &str = "data/manifest.json";
const MODEL_MANIFEST: &str = "model/manifest.json";
const ENSEMBLE_DIR: &str = "model/ensemble";
const DROPOUT_MODEL: &str = "model/dropout_model.json";
const REGRESSORS: &str = "distill/regressors.json";

#[derive(Debug, Serialize, Deserialize)]
struct DataManifest {
    rows: usize,
    fingerprint: String,
    species: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    method: Method,
    data_fingerprint: String,
    train_rows: usize,
    species: Option<String>,
    normalizer: Normalizer,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Raw dataset: the generated copy when one exists, else the configured CSV,
/// else a fresh synthetic draw.
fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let out = &cfg.output_dir;
    let generated = out.join(DATA_CSV);
    if generated.exists() {
        let ds = load_csv_inferred(&generated)?;
        let manifest: DataManifest = read_json(&out.join(DATA_MANIFEST))?;
        if ds.fingerprint() != manifest.fingerprint {
            return Err(Error::Ingestion {
                line: 0,
                message: format!(
                    "{} does not match the fingerprint recorded when it was generated; rerun `ganuq generate`",
                    generated.display()
                ),
            });
        }
        return Ok(ds);
    }
    match (&cfg.data.csv, &cfg.data.synthetic) {
        (Some(path), _) => load_csv_inferred(path),
        (None, Some(spec)) => generate_synthetic(spec, cfg.data.n_rows),
        (None, None) => Err(Error::Config("no data source configured".into())),
    }
}

/// Raw train/test parts plus the band split when the config asks for one.
struct Prepared {
    train: Dataset,
    test: Dataset,
    bands: Option<BandSplit>,
    fingerprint: String,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let ds = load_dataset(cfg)?;
    let fingerprint = ds.fingerprint();
    let split = &cfg.data.split;
    match split.kind {
        SplitKind::Uniform => {
            let (train, test) = uniform_split(&ds, &[split.train_fraction], derive_seed(cfg.seed, "split"))?;
            Ok(Prepared { train, test, bands: None, fingerprint })
        }
        SplitKind::Extrapolation => {
            let direction = split.direction.as_deref().unwrap_or_default();
            let bands = extrapolation_split(&ds, direction, split.train_fraction, split.n_test_bands)?;
            Ok(Prepared { train: bands.train_set(), test: bands.test_set(), bands: Some(bands), fingerprint })
        }
    }
}

fn training_rows(cfg: &RunConfig, normalized_train: &Dataset) -> Result<Dataset> {
    match &cfg.model.species {
        Some(name) => normalized_train.filter_species(name),
        None => Ok(normalized_train.clone()),
    }
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.output_dir;
    let ds = match (&cfg.data.csv, &cfg.data.synthetic) {
        (Some(path), _) => load_csv_inferred(path)?,
        (None, Some(spec)) => generate_synthetic(spec, cfg.data.n_rows)?,
        (None, None) => return Err(Error::Config("no data source configured".into())),
    };
    let path = out.join(DATA_CSV);
    fs::create_dir_all(path.parent().unwrap_or(out))?;
    write_csv(&ds, &path)?;
    // Species indices follow first appearance in the file, so fingerprint
    // what a reader will see.
    let reread = load_csv_inferred(&path)?;
    write_json(
        &out.join(DATA_MANIFEST),
        &DataManifest { rows: reread.len(), fingerprint: reread.fingerprint(), species: reread.species_names.clone() },
    )?;
    println!("wrote {} rows to {}", reread.len(), path.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.output_dir;
    let prepared = prepare(cfg)?;
    let normalizer = Normalizer::fit(&prepared.train)?;
    let rows = training_rows(cfg, &normalizer.apply(&prepared.train)?)?;
    let manifest = ModelManifest {
        method: cfg.model.method,
        data_fingerprint: prepared.fingerprint.clone(),
        train_rows: rows.len(),
        species: cfg.model.species.clone(),
        normalizer,
    };
    let _ = fs::remove_dir_all(out.join("model"));
    match cfg.model.method {
        Method::Ensemble => {
            let e = &cfg.model.ensemble;
            let ensemble = train_adversarial_ensemble(&cfg.model.gan, &e.schedule, e.n_members, &rows)?;
            ensemble.save(&out.join(ENSEMBLE_DIR))?;
            println!("trained {} ensemble members on {} rows", e.n_members, rows.len());
        }
        Method::Mcdropout => {
            let d = &cfg.model.mcdropout;
            let (gen, critic, log) = train_mc_dropout_gan(&cfg.model.gan, &d.spec, &rows)?;
            let virtual_family = virtual_ensemble(&gen, &d.spec, d.n_masks, d.mask_seed)?;
            fs::create_dir_all(out.join("model"))?;
            fs::write(out.join(DROPOUT_MODEL), virtual_family.to_json()? + "\n")?;
            fs::write(out.join("model/critic.json"), critic.to_json()? + "\n")?;
            write_json(&out.join("model/training_log.json"), &log)?;
            println!("trained dropout generator on {} rows; {} masks", rows.len(), d.n_masks);
        }
    }
    write_json(&out.join(MODEL_MANIFEST), &manifest)
}

/// Trained family plus the normalizer it works in.
struct Model {
    family: Box<dyn UncertainGenerator>,
    normalizer: Normalizer,
}

fn load_model(cfg: &RunConfig, data_fingerprint: &str) -> Result<Model> {
    let out = &cfg.output_dir;
    let manifest_path = out.join(MODEL_MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::Config(format!(
            "no trained model under {}; run `ganuq train` with this config first",
            out.join("model").display()
        )));
    }
    let manifest: ModelManifest = read_json(&manifest_path)?;
    if manifest.data_fingerprint != data_fingerprint {
        return Err(Error::Config("the trained model was fitted on different data; rerun `ganuq train`".into()));
    }
    let family: Box<dyn UncertainGenerator> = match manifest.method {
        Method::Ensemble => Box::new(Ensemble::load(&out.join(ENSEMBLE_DIR))?),
        Method::Mcdropout => Box::new(VirtualEnsemble::from_json(&fs::read_to_string(out.join(DROPOUT_MODEL))?)?),
    };
    Ok(Model { family, normalizer: manifest.normalizer })
}

#[derive(Debug, Serialize)]
struct CheckPoint {
    conditions: Vec<f64>,
    distilled: Vec<f64>,
    monte_carlo: Vec<f64>,
}

pub fn distill_cmd(cfg: &RunConfig) -> Result<()> {
    if !cfg.distill.enabled {
        println!("distillation disabled in config");
        return Ok(());
    }
    let out = &cfg.output_dir;
    let prepared = prepare(cfg)?;
    let model = load_model(cfg, &prepared.fingerprint)?;
    let train = training_rows(cfg, &model.normalizer.apply(&prepared.train)?)?;
    let pair = distill(model.family.as_ref(), &train.conditions, &cfg.distill.params)?;
    fs::create_dir_all(out.join("distill"))?;
    fs::write(out.join(REGRESSORS), pair.to_json()? + "\n")?;

    // Built-in oracle mode: held-out points against direct Monte Carlo.
    let test = training_rows(cfg, &model.normalizer.apply(&prepared.test)?)?;
    let n = cfg.distill.check_points.min(test.len());
    let mut rng = substream(cfg.distill.params.seed, "check");
    let rows: Vec<usize> = (0..n).map(|i| i * test.len() / n.max(1)).collect();
    let cond = test.conditions.select_rows(&rows);
    let syst = SystUncertainty::new(pair);
    let distilled = syst.sigma_syst(&cond)?;
    let mc = monte_carlo_sigma_syst(
        model.family.as_ref(),
        cfg.distill.params.reference_member,
        &cond,
        cfg.distill.check_pairs,
        &mut rng,
    )?;
    let points: Vec<CheckPoint> = (0..n)
        .map(|r| CheckPoint {
            conditions: cond.row(r).to_vec(),
            distilled: distilled.row(r).to_vec(),
            monte_carlo: mc.row(r).to_vec(),
        })
        .collect();
    write_json(&out.join("distill/sigma_syst_check.json"), &points)?;
    println!("distilled regressors written; {} check points, {} clamped entries", n, syst.clamp_count());
    Ok(())
}

fn load_syst(out: &Path) -> Result<Option<SystUncertainty>> {
    let path = out.join(REGRESSORS);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(SystUncertainty::new(VarianceRegressorPair::from_json(&fs::read_to_string(path)?)?)))
}

fn write_report(dir: &Path, stem: &str, report: &EfficiencyReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.json")), report.to_json()? + "\n")?;
    fs::write(dir.join(format!("{stem}.csv")), report.to_csv())?;
    fs::write(dir.join(format!("{stem}.svg")), report.to_svg())?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    signal: String,
    background: String,
    threshold: f64,
    coverage: f64,
    mean_half_width: f64,
    distilled_coverage: Option<f64>,
    /// Spearman correlation of test band index with band half-width.
    band_trend: Option<f64>,
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.output_dir;
    let prepared = prepare(cfg)?;
    let model = load_model(cfg, &prepared.fingerprint)?;
    let train = model.normalizer.apply(&prepared.train)?;
    let test = model.normalizer.apply(&prepared.test)?;
    let reports = run_uniform_experiment(model.family.as_ref(), &train, &test, &cfg.eval.specs, &cfg.eval.uniform)?;
    let syst = load_syst(out)?;
    let dir = out.join("eval");
    let _ = fs::remove_dir_all(&dir);
    let mut summary = Vec::new();
    for (i, report) in reports.iter().enumerate() {
        let stem = format!("uniform_{i}_{}", report.spec.signal);
        write_report(&dir, &stem, report)?;
        let distilled = match &syst {
            Some(syst) => {
                let groups = feature_groups(&test, cfg.eval.uniform.feature, &report.edges)?;
                let reference = MemberSampler::new(model.family.as_ref(), cfg.distill.params.reference_member)?;
                let mut rng = substream(cfg.eval.uniform.seed, &format!("distilled-{i}"));
                let d = sigma_syst_bands(report, &reference, &groups, syst, &mut rng)?;
                write_report(&dir, &format!("{stem}_distilled"), &d)?;
                Some(d.coverage)
            }
            None => None,
        };
        println!("coverage {} vs {}: {}", report.spec.signal, report.spec.background, report.coverage);
        summary.push(SummaryRow {
            signal: report.spec.signal.clone(),
            background: report.spec.background.clone(),
            threshold: report.spec.fitted_threshold()?,
            coverage: report.coverage,
            mean_half_width: report.mean_half_width(),
            distilled_coverage: distilled,
            band_trend: None,
        });
    }
    write_json(&dir.join("summary.json"), &summary)
}

/// Spearman correlation between test band order and half-width.
pub fn band_trend(report: &EfficiencyReport, n_train_bands: usize) -> f64 {
    let test: Vec<_> = report.bins.iter().filter(|b| b.index >= n_train_bands).collect();
    let index: Vec<f64> = test.iter().map(|b| b.index as f64).collect();
    let width: Vec<f64> = test.iter().map(|b| b.half_width).collect();
    spearman(&index, &width)
}

pub fn scan(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.output_dir;
    let prepared = prepare(cfg)?;
    let Some(bands) = &prepared.bands else {
        return Err(Error::Config("`scan` needs data.split.kind = \"extrapolation\"".into()));
    };
    let model = load_model(cfg, &prepared.fingerprint)?;
    let split = bands.normalized(&model.normalizer)?;
    let reports = run_scan_experiment(model.family.as_ref(), &split, &cfg.eval.specs, &cfg.eval.scan)?;
    let syst = load_syst(out)?;
    let dir = out.join("scan");
    let _ = fs::remove_dir_all(&dir);
    let mut summary = Vec::new();
    for (i, report) in reports.iter().enumerate() {
        let stem = format!("scan_{i}_{}", report.spec.signal);
        write_report(&dir, &stem, report)?;
        let distilled = match &syst {
            Some(syst) => {
                let groups = scan_groups(&split, &cfg.eval.scan)?;
                let reference = MemberSampler::new(model.family.as_ref(), cfg.distill.params.reference_member)?;
                let mut rng = substream(cfg.eval.scan.seed, &format!("distilled-{i}"));
                let d = sigma_syst_bands(report, &reference, &groups, syst, &mut rng)?;
                write_report(&dir, &format!("{stem}_distilled"), &d)?;
                Some(d.coverage)
            }
            None => None,
        };
        let trend = band_trend(report, cfg.eval.scan.n_train_bands);
        println!(
            "scan {} vs {}: coverage {}, band trend {}",
            report.spec.signal, report.spec.background, report.coverage, trend
        );
        summary.push(SummaryRow {
            signal: report.spec.signal.clone(),
            background: report.spec.background.clone(),
            threshold: report.spec.fitted_threshold()?,
            coverage: report.coverage,
            mean_half_width: report.mean_half_width(),
            distilled_coverage: distilled,
            band_trend: Some(trend),
        });
    }
    write_json(&dir.join("summary.json"), &summary)
}

/// Output directory artifacts that must be byte-identical across reruns.
pub fn artifact_files(out: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut stack = vec![out.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                if path.file_name().is_some_and(|n| n != "logs") {
                    stack.push(path);
                }
            } else if path.file_name().is_some_and(|n| n != crate::LOCK_FILE) {
                files.push(path);
            }
        }
    }
    files.sort();
    Ok(files)
}
