//! Training loop over a phantom dataset directory.

use crate::dataset::{self, Manifest, Sample, Split};
use crate::error::{LabError, Result};
use crate::{modelio, volio};
use afl_core::loss::{LossSpec, PROB_EPS};
use afl_core::metrics::{confusion, SampleMetrics};
use afl_core::params::{gamma_adaptive, AdaptiveParams};
use afl_core::rng::{derive_seed, Xoshiro256StarStar};
use afl_core::{MaskVolume, SgdConfig, TinySeg3D};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use std::collections::hash_map::{DefaultHasher, Entry};
use std::collections::HashMap;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

pub const HISTORY_CSV: &str = "history.csv";
pub const MODEL_BIN: &str = "model.bin";
pub const CONFIG_ECHO: &str = "config.echo.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const PREDICTIONS_DIR: &str = "predictions";

/// Stream indices under the training seed.
const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossSpec,
    /// Probability clamp used inside the losses; only the library value is
    /// accepted.
    pub clamp_eps: f64,
    /// Threshold turning probabilities into labels for the metrics.
    pub threshold: f64,
    /// Write the final validation probabilities next to the metrics.
    pub save_predictions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 40,
            batch_size: 1,
            seed: 0,
            loss: LossSpec::default(),
            clamp_eps: PROB_EPS,
            threshold: 0.5,
            save_predictions: true,
        }
    }
}

impl TrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: afl_core::Error| LabError::Config(e.to_string());
        self.sgd().validate().map_err(cfg)?;
        self.loss.validate().map_err(cfg)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(LabError::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.clamp_eps != PROB_EPS {
            return Err(LabError::Config(format!("clamp_eps is fixed at {PROB_EPS:e}")));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(LabError::Config("threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou: f64,
    pub val_dsc: f64,
    pub val_sensitivity: f64,
    pub val_specificity: f64,
}

/// Final-model metrics of one validation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub iou: f64,
    pub dsc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl EvalRow {
    pub fn new(id: impl Into<String>, m: &SampleMetrics) -> Self {
        Self { id: id.into(), iou: m.iou, dsc: m.dsc, sensitivity: m.sensitivity, specificity: m.specificity }
    }

    pub fn metrics(&self) -> SampleMetrics {
        SampleMetrics { iou: self.iou, dsc: self.dsc, sensitivity: self.sensitivity, specificity: self.specificity }
    }
}

/// Adaptive parameters per distinct mask, keyed by a content hash. Masks are
/// compared in full on lookup, so a hash collision cannot return the wrong
/// entry.
#[derive(Debug, Default)]
pub struct ParamsCache {
    map: HashMap<u64, Vec<(MaskVolume, AdaptiveParams)>>,
    hits: usize,
}

impl ParamsCache {
    pub fn get(&mut self, mask: &MaskVolume) -> Result<AdaptiveParams> {
        let mut h = DefaultHasher::new();
        mask.dims().hash(&mut h);
        mask.data().hash(&mut h);
        let bucket = match self.map.entry(h.finish()) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(Vec::new()),
        };
        if let Some((_, p)) = bucket.iter().find(|(m, _)| m == mask) {
            self.hits += 1;
            return Ok(*p);
        }
        let p = gamma_adaptive(mask)?;
        bucket.push((mask.clone(), p));
        Ok(p)
    }

    pub fn hits(&self) -> usize {
        self.hits
    }

    pub fn len(&self) -> usize {
        self.map.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub eval: Vec<EvalRow>,
    pub model: TinySeg3D,
}

/// Metrics of `model` on every sample of `set`, in manifest order.
fn evaluate_set(model: &TinySeg3D, set: &[&Sample], threshold: f64) -> Result<Vec<SampleMetrics>> {
    set.iter()
        .map(|s| {
            let prob = model.forward(&s.image)?;
            Ok(SampleMetrics::from(&confusion(&prob, &s.mask, threshold)?))
        })
        .collect()
}

/// Trains on the samples of the dataset in `data` and writes `history.csv`,
/// `model.bin`, `config.echo.json`, `eval.csv` and (optionally) validation
/// predictions into `out`.
pub fn train(data: &Path, cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = Manifest::load(data)?;
    if manifest.samples.is_empty() {
        return Err(LabError::Data(format!("{}: manifest lists no samples", data.display())));
    }
    let samples = dataset::load_samples(data, &manifest)?;
    let outcome = train_samples(&samples, cfg)?;
    write_run(out, data, cfg, &samples, &outcome)?;
    Ok(outcome)
}

/// The training loop proper, without any file output.
pub fn train_samples(samples: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].entry.split == Split::Train).collect();
    if train_idx.is_empty() {
        return Err(LabError::Data("no training samples".into()));
    }
    let mut val: Vec<&Sample> = samples.iter().filter(|s| s.entry.split == Split::Val).collect();
    if val.is_empty() {
        warn!("no validation samples; reporting metrics on the training samples");
        val = train_idx.iter().map(|&i| &samples[i]).collect();
    }

    let mut cache = ParamsCache::default();
    for &i in &train_idx {
        let p = cache.get(&samples[i].mask)?;
        if p.counts.p_fg == 0 {
            warn!("sample {} has an empty mask", samples[i].entry.id);
        }
    }

    let sgd = cfg.sgd();
    let mut model = TinySeg3D::init(derive_seed(cfg.seed, INIT_STREAM));
    let mut rng = Xoshiro256StarStar::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.clone();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<f64>> = None;
            for &i in batch {
                let s = &samples[i];
                let params = cache.get(&s.mask)?;
                let (loss, grads) = model.backward(&s.image, &s.mask, &cfg.loss, Some(&params))?;
                if !loss.is_finite() || grads.0.iter().any(|g| !g.is_finite()) {
                    return Err(LabError::Numerical(format!("non-finite loss or gradient on {} in epoch {epoch}", s.entry.id)));
                }
                loss_sum += loss;
                match acc.as_mut() {
                    None => acc = Some(grads.0),
                    Some(a) => a.iter_mut().zip(&grads.0).for_each(|(a, g)| *a += g),
                }
            }
            let mut g = acc.expect("non-empty batch");
            if batch.len() > 1 {
                let scale = 1.0 / batch.len() as f64;
                g.iter_mut().for_each(|x| *x *= scale);
            }
            model.sgd_step(&afl_core::ParamGrads(g), &sgd);
        }
        let evals = evaluate_set(&model, &val, cfg.threshold)?;
        let mean = SampleMetrics::mean(&evals).expect("validation set is non-empty");
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            val_iou: mean.iou,
            val_dsc: mean.dsc,
            val_sensitivity: mean.sensitivity,
            val_specificity: mean.specificity,
        };
        info!(
            "epoch {epoch}/{}: loss {:.6} val dsc {:.4} iou {:.4}",
            cfg.epochs, rec.train_loss, rec.val_dsc, rec.val_iou
        );
        history.push(rec);
    }
    let eval = evaluate_set(&model, &val, cfg.threshold)?
        .iter()
        .zip(&val)
        .map(|(m, s)| EvalRow::new(&s.entry.id, m))
        .collect();
    Ok(TrainOutcome { history, eval, model })
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigEcho {
    pub data: PathBuf,
    pub dataset_seed: u64,
    pub train: TrainConfig,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> LabError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => LabError::io(path, io),
        other => LabError::Data(format!("{}: {other:?}", path.display())),
    }
}

fn write_run(out: &Path, data: &Path, cfg: &TrainConfig, samples: &[Sample], outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    let manifest = Manifest::load(data)?;
    let echo = ConfigEcho { data: data.to_path_buf(), dataset_seed: manifest.seed, train: cfg.clone() };
    let path = out.join(CONFIG_ECHO);
    fs::write(&path, serde_json::to_string_pretty(&echo).expect("config serializes") + "\n")
        .map_err(|e| LabError::io(&path, e))?;
    write_csv(&out.join(HISTORY_CSV), &outcome.history)?;
    modelio::save(&outcome.model, &out.join(MODEL_BIN))?;
    if cfg.save_predictions {
        let dir = out.join(PREDICTIONS_DIR);
        fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
        for row in &outcome.eval {
            let s = samples.iter().find(|s| s.entry.id == row.id).expect("evaluated sample exists");
            let prob = outcome.model.forward(&s.image)?;
            volio::write_image(&prob, &dir.join(format!("{}_pred", row.id)))?;
        }
    }
    // Written last: its presence marks a completed run.
    write_csv(&out.join(EVAL_CSV), &outcome.eval)
}

/// True when `out` holds a completed run whose echo matches `cfg` and `data`.
pub fn is_complete(out: &Path, data: &Path, cfg: &TrainConfig) -> bool {
    let Ok(text) = fs::read_to_string(out.join(CONFIG_ECHO)) else {
        return false;
    };
    let Ok(echo) = serde_json::from_str::<ConfigEcho>(&text) else {
        return false;
    };
    echo.data == data && echo.train == *cfg && out.join(EVAL_CSV).is_file() && out.join(MODEL_BIN).is_file()
}
