use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crisp_core::data::{corrupt_mask, generate_dataset_with, load_dataset, save_dataset, CorruptionConfig, Dataset, Sample};
use crisp_core::io::{decode_uncertainty_raw, encode_pgm, encode_uncertainty_raw, load_mask_pgm, save_mask_pgm, unit_to_u8};
use crisp_core::mask::Mask;
use crisp_core::metrics::{evaluate as evaluate_maps, EvalReport};
use crisp_core::model::{save_checkpoint, CrispModel};
use crisp_core::training::{evaluate_split, train_split, TrainHistory};
use crisp_core::uncertainty::{build_bank, default_m, edge_uncertainty, entropy_uncertainty, CrispEstimator, LatentBank, UncertaintyMap};
use crisp_core::CrispError;

use crate::config::{Method, PredSource, RunConfig};

/// Invalid arguments or configuration; the binary exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// True for errors caused by the invocation rather than the data.
pub fn is_usage_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some() || matches!(c.downcast_ref::<CrispError>(), Some(CrispError::Config(_)))
    })
}

pub const TRAIN_FILE: &str = "train.bin";
pub const VAL_FILE: &str = "val.bin";
pub const TEST_FILE: &str = "test.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.txt";

/// Outputs are written to a hidden sibling directory and moved into place
/// only on success; dropping an uncommitted stage deletes it.
pub struct Staging {
    target: PathBuf,
    dir: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(target: &Path) -> Result<Self> {
        if target.exists() && fs::read_dir(target).map(|mut d| d.next().is_some()).unwrap_or(true) {
            bail!(usage(format!("output directory {} already exists and is not empty", target.display())));
        }
        let name = target
            .file_name()
            .ok_or_else(|| usage(format!("invalid output directory {}", target.display())))?
            .to_string_lossy()
            .into_owned();
        if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let dir = target.with_file_name(format!(".{name}.partial"));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            target: target.to_path_buf(),
            dir,
            committed: false,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir(&self.target)?;
        }
        fs::rename(&self.dir, &self.target).with_context(|| format!("moving outputs to {}", self.target.display()))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn load_split(cfg: &RunConfig, name: &str) -> Result<Dataset> {
    let path = cfg.data_dir.join(name);
    load_dataset(&path).with_context(|| format!("loading dataset {}", path.display()))
}

/// Adopts the geometry stored in a dataset so dumps reflect what ran.
fn adopt_geometry(cfg: &mut RunConfig, d: &Dataset) {
    cfg.height = d.height;
    cfg.width = d.width;
    cfg.classes = d.num_classes;
}

fn check_same_geometry(a: &Dataset, b: &Dataset, what: &str) -> Result<()> {
    if (a.height, a.width, a.num_classes) != (b.height, b.width, b.num_classes) {
        bail!(
            "{what} has geometry {}x{}x{}, expected {}x{}x{}",
            b.num_classes,
            b.height,
            b.width,
            a.num_classes,
            a.height,
            a.width
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestFile {
    pub name: String,
    pub count: usize,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub format: String,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    pub files: Vec<ManifestFile>,
}

/// Writes `train.bin`, `val.bin` and `test.bin`. `count` samples are split
/// into train and validation by `val_fraction`; the test set has
/// `test_count` samples. Each file draws from its own seed.
pub fn gen_data(cfg: &RunConfig) -> Result<Manifest> {
    if !(2..=3).contains(&cfg.classes) {
        bail!(usage(format!("classes must be 2 or 3, got {}", cfg.classes)));
    }
    if cfg.height < 16 || cfg.width < 16 {
        bail!(usage(format!("images must be at least 16x16, got {}x{}", cfg.height, cfg.width)));
    }
    if !(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0) {
        bail!(usage(format!("val_fraction must be in (0,1), got {}", cfg.val_fraction)));
    }
    let n_val = (cfg.count as f64 * cfg.val_fraction).round() as usize;
    let n_train = cfg.count.saturating_sub(n_val);
    if n_val == 0 || n_train == 0 || cfg.test_count == 0 {
        bail!(usage(format!(
            "count {} with val_fraction {} and test_count {} leaves an empty split",
            cfg.count, cfg.val_fraction, cfg.test_count
        )));
    }
    let stage = Staging::new(&cfg.out)?;
    let shape = cfg.shape_config();
    let mut files = Vec::new();
    for (name, count, seed) in [
        (TRAIN_FILE, n_train, cfg.seed),
        (VAL_FILE, n_val, cfg.seed.wrapping_add(1)),
        (TEST_FILE, cfg.test_count, cfg.seed.wrapping_add(2)),
    ] {
        let d = generate_dataset_with(count, cfg.height, cfg.width, cfg.classes, seed, &shape)?;
        let path = stage.path(name);
        save_dataset(&d, &path)?;
        files.push(ManifestFile {
            name: name.into(),
            count,
            seed,
            sha256: sha256_hex(&fs::read(&path)?),
        });
    }
    let manifest = Manifest {
        format: "CRSPDS01".into(),
        height: cfg.height,
        width: cfg.width,
        classes: cfg.classes,
        noise_sigma: cfg.noise_sigma,
        files,
    };
    stage.write("manifest.json", serde_json::to_string_pretty(&manifest)? + "\n")?;
    stage.write(CONFIG_FILE, cfg.dump("gen-data"))?;
    stage.commit()?;
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub selected_epoch: usize,
    pub train_diag_accuracy: f64,
    pub val_diag_accuracy: f64,
    pub val_loss: f64,
}

/// Trains on `train.bin`, early-stops on `val.bin`, and writes the selected
/// checkpoint with its history.
pub fn train(cfg: &RunConfig, mut progress: impl FnMut(&str)) -> Result<(TrainSummary, TrainHistory)> {
    let mut cfg = cfg.clone();
    cfg.train_config().validate()?;
    let train_set = load_split(&cfg, TRAIN_FILE)?;
    let val_set = load_split(&cfg, VAL_FILE)?;
    check_same_geometry(&train_set, &val_set, VAL_FILE)?;
    adopt_geometry(&mut cfg, &train_set);
    cfg.model_config().validate()?;
    let stage = Staging::new(&cfg.out)?;

    let train_refs: Vec<&Sample> = train_set.samples.iter().collect();
    let val_refs: Vec<&Sample> = val_set.samples.iter().collect();
    let tc = cfg.train_config();
    let (model, history) = train_split(&train_refs, &val_refs, cfg.model_config(), &tc, |e| {
        progress(&format!(
            "epoch {:>4}  train {:.4}  val {:.4}  val diag {:.3}",
            e.epoch, e.train_loss, e.val_loss, e.diag_accuracy
        ))
    })?;
    let selected = history.selected().expect("training ran at least one epoch");
    let train_stats = evaluate_split(&model, &train_refs, tc.batch_size, &tc.objective())?;
    let summary = TrainSummary {
        epochs_run: history.epochs.len(),
        selected_epoch: history.selected_epoch,
        train_diag_accuracy: train_stats.diag_accuracy,
        val_diag_accuracy: selected.diag_accuracy,
        val_loss: selected.val_loss,
    };
    save_checkpoint(&model, &stage.path(CHECKPOINT_FILE))?;
    stage.write("history.csv", history.to_csv())?;
    stage.write("summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    stage.write(CONFIG_FILE, cfg.dump("train"))?;
    stage.commit()?;
    Ok((summary, history))
}

fn load_model(cfg: &RunConfig) -> Result<(CrispModel, Vec<u8>)> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| usage(format!("method {} needs --checkpoint", cfg.method.name())))?;
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let model = crisp_core::model::decode_checkpoint(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((model, bytes))
}

/// Latent bank over the train and validation ground truths, cached under a
/// key derived from the checkpoint and both mask files.
fn bank_for(cfg: &RunConfig, model: &CrispModel, checkpoint_bytes: &[u8]) -> Result<LatentBank> {
    let mut hasher = Sha256::new();
    hasher.update(b"CRSPBK01");
    hasher.update((checkpoint_bytes.len() as u64).to_le_bytes());
    hasher.update(checkpoint_bytes);
    let mut masks = Vec::new();
    for name in [TRAIN_FILE, VAL_FILE] {
        let path = cfg.data_dir.join(name);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
        let d = crisp_core::data::decode_dataset(&bytes).with_context(|| format!("loading {}", path.display()))?;
        model.check_geometry(d.height, d.width, d.num_classes)?;
        masks.extend(d.masks());
    }
    let key = hex::encode(&hasher.finalize()[..8]);
    let cache_dir = match &cfg.bank_cache {
        None => return Ok(build_bank(&masks, model)?),
        Some(dir) if dir.as_os_str() == "auto" => cfg
            .checkpoint
            .as_ref()
            .and_then(|c| c.parent())
            .map(Path::to_path_buf)
            .unwrap_or_default(),
        Some(dir) => dir.clone(),
    };
    let path = cache_dir.join(format!("bank-{key}.bin"));
    if let Ok(bank) = LatentBank::load(&path) {
        if bank.len() == masks.len() {
            return Ok(bank);
        }
    }
    let bank = build_bank(&masks, model)?;
    if fs::create_dir_all(&cache_dir).is_ok() {
        // best effort; an unwritable cache only costs a rebuild
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        if bank.save(&tmp).is_ok() {
            let _ = fs::rename(&tmp, &path);
        }
    }
    Ok(bank)
}

/// Predictions for every test sample, with the severity used (if any).
fn predictions(cfg: &RunConfig, test: &Dataset, model: Option<&CrispModel>) -> Result<Vec<(Mask, Option<f64>)>> {
    match cfg.pred_source {
        PredSource::Corrupt => {
            if cfg.severities.is_empty() {
                bail!(usage("severities must list at least one value"));
            }
            if let Some(s) = cfg.severities.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
                bail!(usage(format!("severity {s} must be a non-negative number")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.corrupt_seed);
            Ok(test
                .samples
                .iter()
                .map(|s| {
                    let severity = cfg.severities[rng.gen_range(0..cfg.severities.len())];
                    let corruption = CorruptionConfig {
                        severity,
                        modes: cfg.corrupt_modes.clone(),
                        seed: rng.gen(),
                    };
                    (corrupt_mask(&s.mask, &corruption), Some(severity))
                })
                .collect())
        }
        PredSource::Model => {
            let model = model.expect("model loaded for model predictions");
            test.samples
                .iter()
                .map(|s| Ok((model.segment(&s.image)?.argmax(), None)))
                .collect()
        }
        PredSource::External => {
            let dir = cfg
                .pred_dir
                .as_ref()
                .ok_or_else(|| usage("pred_source external needs --pred-dir"))?;
            (0..test.len())
                .map(|i| {
                    let path = dir.join(pred_name(i));
                    let m = load_mask_pgm(&path, test.num_classes).with_context(|| format!("loading {}", path.display()))?;
                    if (m.height(), m.width()) != (test.height, test.width) {
                        bail!("{} is {}x{}, expected {}x{}", path.display(), m.height(), m.width(), test.height, test.width);
                    }
                    Ok((m, None))
                })
                .collect()
        }
    }
}

pub fn pred_name(i: usize) -> String {
    format!("pred_{i:04}.pgm")
}

pub fn unc_pgm_name(i: usize) -> String {
    format!("unc_{i:04}.pgm")
}

pub fn unc_raw_name(i: usize) -> String {
    format!("unc_{i:04}.raw")
}

fn resolve_m(cfg: &RunConfig, n: usize) -> Result<usize> {
    let m = match (cfg.m, cfg.m_ratio) {
        (Some(m), _) => m,
        (None, Some(r)) => {
            if !(r > 0.0 && r <= 1.0) {
                bail!(usage(format!("m_ratio must be in (0,1], got {r}")));
            }
            ((r * n as f64).round() as usize).max(1)
        }
        (None, None) => default_m(n),
    };
    if m == 0 || m > n {
        bail!(usage(format!("M = {m} must be between 1 and the bank size {n}")));
    }
    Ok(m)
}

/// Everything needed to score a method: inputs, predictions and maps.
pub struct Estimates {
    pub test: Dataset,
    pub predictions: Vec<Mask>,
    pub severities: Vec<Option<f64>>,
    pub maps: Vec<UncertaintyMap>,
    pub m: Option<usize>,
    pub bank_size: Option<usize>,
}

struct Prepared {
    test: Dataset,
    predictions: Vec<Mask>,
    severities: Vec<Option<f64>>,
    model: Option<CrispModel>,
    bank: Option<LatentBank>,
}

fn prepare(cfg: &RunConfig, need_bank: bool) -> Result<Prepared> {
    let needs_model = matches!(cfg.method, Method::Crisp | Method::Entropy) || cfg.pred_source == PredSource::Model;
    if cfg.method == Method::Entropy && cfg.pred_source != PredSource::Model {
        bail!(usage("the entropy baseline scores the model's own predictions; use --pred-source model"));
    }
    let test = load_split(cfg, TEST_FILE)?;
    let (model, bytes) = if needs_model {
        let (m, b) = load_model(cfg)?;
        m.check_geometry(test.height, test.width, test.num_classes)?;
        (Some(m), b)
    } else {
        (None, Vec::new())
    };
    let bank = match (&model, need_bank) {
        (Some(model), true) => Some(bank_for(cfg, model, &bytes)?),
        _ => None,
    };
    let (predictions, severities) = predictions(cfg, &test, model.as_ref())?.into_iter().unzip();
    Ok(Prepared {
        test,
        predictions,
        severities,
        model,
        bank,
    })
}

fn crisp_maps(model: &CrispModel, bank: &LatentBank, cfg: &RunConfig, test: &Dataset, preds: &[Mask], m: usize) -> Result<Vec<UncertaintyMap>> {
    let estimator = CrispEstimator::new(model, bank)?.with_normalization(cfg.normalization);
    test.samples
        .iter()
        .zip(preds)
        .enumerate()
        .map(|(i, (s, p))| Ok(estimator.estimate(&s.image, p, m).with_context(|| format!("sample {i}"))?.map))
        .collect()
}

pub fn compute_estimates(cfg: &RunConfig) -> Result<Estimates> {
    let p = prepare(cfg, cfg.method == Method::Crisp)?;
    let (maps, m, bank_size) = match cfg.method {
        Method::Crisp => {
            let bank = p.bank.as_ref().expect("bank built for crisp");
            let m = resolve_m(cfg, bank.len())?;
            let model = p.model.as_ref().expect("model loaded for crisp");
            (crisp_maps(model, bank, cfg, &p.test, &p.predictions, m)?, Some(m), Some(bank.len()))
        }
        Method::Edge => (p.predictions.iter().map(edge_uncertainty).collect(), None, None),
        Method::Entropy => {
            let model = p.model.as_ref().expect("model loaded for entropy");
            let maps = p
                .test
                .samples
                .iter()
                .map(|s| Ok(entropy_uncertainty(&model.segment(&s.image)?)))
                .collect::<Result<_>>()?;
            (maps, None, None)
        }
    };
    Ok(Estimates {
        test: p.test,
        predictions: p.predictions,
        severities: p.severities,
        maps,
        m,
        bank_size,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateSummary {
    pub method: String,
    pub samples: usize,
    pub m: Option<usize>,
    pub bank_size: Option<usize>,
}

/// Writes `pred_XXXX.pgm`, `unc_XXXX.pgm` and `unc_XXXX.raw` per test
/// sample, plus `samples.csv`.
pub fn estimate(cfg: &RunConfig) -> Result<EstimateSummary> {
    let stage = Staging::new(&cfg.out)?;
    let mut cfg = cfg.clone();
    let est = compute_estimates(&cfg)?;
    adopt_geometry(&mut cfg, &est.test);
    if let Some(m) = est.m {
        cfg.m = Some(m);
    }
    let mut table = String::from("index,severity,mean_uncertainty\n");
    for (i, ((pred, map), sev)) in est.predictions.iter().zip(&est.maps).zip(&est.severities).enumerate() {
        save_mask_pgm(pred, &stage.path(&pred_name(i)))?;
        stage.write(&unc_pgm_name(i), encode_pgm(map.width, map.height, &unit_to_u8(&map.values)))?;
        stage.write(&unc_raw_name(i), encode_uncertainty_raw(map.height, map.width, &map.values))?;
        let mean = map.values.iter().sum::<f64>() / map.values.len() as f64;
        let sev = sev.map_or_else(String::new, |s| s.to_string());
        table.push_str(&format!("{i},{sev},{mean}\n"));
    }
    let summary = EstimateSummary {
        method: cfg.method.name().into(),
        samples: est.maps.len(),
        m: est.m,
        bank_size: est.bank_size,
    };
    stage.write("samples.csv", table)?;
    stage.write("summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    stage.write(CONFIG_FILE, cfg.dump("estimate"))?;
    stage.commit()?;
    Ok(summary)
}

/// Reads the predictions and raw maps written by [`estimate`].
pub fn load_estimates(maps_dir: &Path, test: &Dataset) -> Result<(Vec<Mask>, Vec<UncertaintyMap>)> {
    let listed = fs::read_dir(maps_dir)
        .with_context(|| format!("reading {}", maps_dir.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.starts_with("pred_") && name.ends_with(".pgm")
        })
        .count();
    if listed != test.len() {
        bail!(
            "{} holds {listed} predictions but the test set has {} samples",
            maps_dir.display(),
            test.len()
        );
    }
    let mut preds = Vec::with_capacity(test.len());
    let mut maps = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let pred_path = maps_dir.join(pred_name(i));
        let pred = load_mask_pgm(&pred_path, test.num_classes).with_context(|| format!("loading {}", pred_path.display()))?;
        let raw_path = maps_dir.join(unc_raw_name(i));
        let bytes = fs::read(&raw_path).with_context(|| format!("reading {}", raw_path.display()))?;
        let (h, w, values) = decode_uncertainty_raw(&bytes).with_context(|| format!("loading {}", raw_path.display()))?;
        if (h, w) != (test.height, test.width) || (pred.height(), pred.width()) != (test.height, test.width) {
            bail!("sample {i}: outputs do not match the {}x{} test images", test.height, test.width);
        }
        preds.push(pred);
        maps.push(UncertaintyMap::new(h, w, values)?);
    }
    Ok((preds, maps))
}

/// Scores the maps in `maps_dir` against `test.bin`; writes `report.json`,
/// `per_sample.csv` and `pixel_confidence.csv`.
pub fn evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    let stage = Staging::new(&cfg.out)?;
    let test = load_split(cfg, TEST_FILE)?;
    let (preds, maps) = load_estimates(&cfg.maps_dir, &test)?;
    let gts = test.masks();
    let report = evaluate_maps(&gts, &preds, &maps, &cfg.metrics_config())?;
    let mut pixels = String::from("confidence,correct\n");
    for ((gt, pred), map) in gts.iter().zip(&preds).zip(&maps) {
        for ((c, g), p) in map.confidences().iter().zip(gt.labels()).zip(pred.labels()) {
            pixels.push_str(&format!("{c},{}\n", (g == p) as u8));
        }
    }
    stage.write("report.json", serde_json::to_string_pretty(&report)? + "\n")?;
    stage.write("per_sample.csv", report.per_sample_csv())?;
    stage.write("pixel_confidence.csv", pixels)?;
    let mut cfg = cfg.clone();
    adopt_geometry(&mut cfg, &test);
    stage.write(CONFIG_FILE, cfg.dump("evaluate"))?;
    stage.commit()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub m: usize,
    pub correlation: Option<f64>,
    pub weighted_mi: f64,
}

/// CRISP estimation and evaluation for every M in `m_list`, sharing one
/// bank and one set of predictions.
pub fn ablate_m(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    if cfg.m_list.is_empty() {
        bail!(usage("m_list must name at least one M"));
    }
    let mut cfg = cfg.clone();
    cfg.method = Method::Crisp;
    let stage = Staging::new(&cfg.out)?;
    let p = prepare(&cfg, true)?;
    let (model, bank) = (p.model.as_ref().unwrap(), p.bank.as_ref().unwrap());
    let gts = p.test.masks();
    let mut rows = Vec::new();
    let mut csv = String::from("m,correlation,weighted_mi\n");
    for &m in &cfg.m_list {
        let mut one = cfg.clone();
        one.m = Some(m);
        let m = resolve_m(&one, bank.len())?;
        let maps = crisp_maps(model, bank, &cfg, &p.test, &p.predictions, m)?;
        let report = evaluate_maps(&gts, &p.predictions, &maps, &cfg.metrics_config())?;
        let row = AblationRow {
            m,
            correlation: report.aggregate.correlation,
            weighted_mi: report.aggregate.weighted_mi,
        };
        let corr = row.correlation.map_or_else(String::new, |c| c.to_string());
        csv.push_str(&format!("{},{corr},{}\n", row.m, row.weighted_mi));
        rows.push(row);
    }
    stage.write("ablation.csv", csv)?;
    adopt_geometry(&mut cfg, &p.test);
    stage.write(CONFIG_FILE, cfg.dump("ablate-m"))?;
    stage.commit()?;
    Ok(rows)
}
