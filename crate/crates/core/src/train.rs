//! Training loop shared by every regime, with per-epoch metrics.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{self, DataError, EncodedDataset};
use crate::model::{self, DenseParams, Head, ModelConfig, ModelError};
use crate::optim::{self, AdamConfig, AdamState, OptimError, RowOptimizer, Schedule};
use crate::quant::{self, QuantError, QuantSpec, RngStream, RoundingMode};
use crate::regimes::{
    self, FpMeter, GradScale, RegimeError, RegimeKind, StepSizeUpdate,
};
use crate::store::{
    DeltaLayout, MemoryFootprint, QuantizedEmbeddingTable, RoundingKey, SparseBatch, StoreError,
    DELTA_FLOOR,
};
use crate::synth::{self, SynthConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: String, iteration: u64 },
    #[error(transparent)]
    Regime(#[from] RegimeError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(SynthConfig),
    Encoded {
        path: String,
        /// Vocabulary manifest written by preprocessing, if any.
        vocab: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub head: Head,
    pub dim: usize,
    pub regime: RegimeKind,
    pub bits: u8,
    pub rounding: RoundingMode,
    /// Defaults to feature-wise for ALPT and global otherwise.
    pub layout: Option<DeltaLayout>,
    /// Initial step size (or `alpha / q` for PACT). Defaults to
    /// `clip / q` when a clip is set, else `init_scale / q`.
    pub delta_init: Option<f64>,
    /// LPT pre-quantization clip `[-clip, clip]`.
    pub clip: Option<f64>,
    /// Embeddings start `Uniform(-init_scale, init_scale)`.
    pub init_scale: f64,
    /// Learning rate for embedding rows.
    pub lr: f64,
    /// Learning rate for the dense parameters, which use persistent Adam.
    pub dense_lr: f64,
    pub schedule: Schedule,
    pub embedding_optimizer: RowOptimizer,
    pub embedding_wd: f64,
    pub delta_lr: f64,
    pub delta_wd: f64,
    pub delta_optimizer: RowOptimizer,
    pub grad_scale: GradScale,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SynthConfig::default()),
            head: Head::Fm,
            dim: 16,
            regime: RegimeKind::Alpt,
            bits: 8,
            rounding: RoundingMode::Stochastic,
            layout: None,
            delta_init: None,
            clip: None,
            init_scale: 0.01,
            lr: 0.001,
            dense_lr: 0.001,
            schedule: Schedule::epoch_decay_default(0.001),
            embedding_optimizer: RowOptimizer::Adam,
            embedding_wd: 0.0,
            delta_lr: 2e-5,
            delta_wd: 0.0,
            delta_optimizer: RowOptimizer::Adam,
            grad_scale: GradScale::Bdq,
            adam: AdamConfig::default(),
            batch_size: 256,
            epochs: 15,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn resolved_layout(&self) -> DeltaLayout {
        self.layout.unwrap_or(match self.regime {
            RegimeKind::Alpt => DeltaLayout::FeatureWise,
            _ => DeltaLayout::Global,
        })
    }

    pub fn resolved_delta(&self) -> f64 {
        let q = f64::from(quant::code_max(self.bits));
        self.delta_init
            .unwrap_or_else(|| self.clip.unwrap_or(self.init_scale) / q)
    }

    /// Fill every defaulted field so the manifest alone reproduces the run.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.layout = Some(self.resolved_layout());
        c.delta_init = Some(self.resolved_delta());
        c.schedule.base_lr = self.lr;
        c
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        QuantSpec::new(self.bits, self.resolved_delta(), self.rounding)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("dense_lr", self.dense_lr),
            ("init_scale", self.init_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("delta_lr", self.delta_lr),
            ("delta_wd", self.delta_wd),
            ("embedding_wd", self.embedding_wd),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if let Some(c) = self.clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("clip must be positive, got {c}"));
            }
        }
        if self.regime == RegimeKind::Alpt && self.resolved_layout() != DeltaLayout::FeatureWise {
            return bad("alpt needs a feature-wise layout".into());
        }
        Ok(())
    }
}

/// Sub-seed for one purpose, derived from the run seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFingerprint {
    pub samples: usize,
    pub fields: usize,
    pub vocab_size: u32,
    pub sha256: String,
}

impl DataFingerprint {
    pub fn of(d: &EncodedDataset) -> Self {
        let mut h = Sha256::new();
        for i in 0..d.samples() {
            h.update([u8::from(d.labels[i])]);
            for id in d.row(i) {
                h.update(id.to_le_bytes());
            }
        }
        Self {
            samples: d.samples(),
            fields: d.fields,
            vocab_size: d.vocab_size,
            sha256: hex(&h.finalize()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub data: DataFingerprint,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig, data: &EncodedDataset) -> Self {
        let mut m = Self {
            run_id: String::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.resolved(),
            data: DataFingerprint::of(data),
        };
        let body = serde_json::to_vec(&m).expect("manifest serializes");
        m.run_id = hex(&Sha256::digest(&body)[..8]);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub epoch: u64,
    pub iteration: u64,
    pub split: Split,
    pub logloss: f64,
    pub auc: Option<f64>,
    pub training_ratio: f64,
    pub inference_ratio: f64,
    /// Updated entries whose stored value did not move (quantized regimes).
    pub stagnant: u64,
    pub delta: Option<DeltaStats>,
}

#[derive(Debug, Clone, PartialEq)]
enum Embeddings {
    Full(Vec<f64>),
    /// Shadow table plus its learned scalar: the step size for LSQ, the clip
    /// value for PACT.
    Shadow { w: Vec<f64>, scalar: f64 },
    Quantized(QuantizedEmbeddingTable),
}

/// Trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    regime: RegimeKind,
    bits: u8,
    dim: usize,
    rows: usize,
    embeddings: Embeddings,
    pub dense: DenseParams,
}

impl ModelState {
    fn init(cfg: &ExperimentConfig, rows: usize, model: &ModelConfig) -> Result<Self, TrainError> {
        let init_seed = derive_seed(cfg.seed, "init");
        let delta = cfg.resolved_delta();
        let draw = || {
            let mut w = Vec::with_capacity(rows * cfg.dim);
            for r in 0..rows {
                let mut rng = RngStream::keyed(init_seed, r as u64, 0);
                for _ in 0..cfg.dim {
                    w.push((2.0 * rng.next_unit() - 1.0) * cfg.init_scale);
                }
            }
            w
        };
        let q = f64::from(quant::code_max(cfg.bits));
        let embeddings = match cfg.regime {
            RegimeKind::Fp => Embeddings::Full(draw()),
            RegimeKind::QatLsq => Embeddings::Shadow { w: draw(), scalar: delta },
            RegimeKind::QatPact => Embeddings::Shadow { w: draw(), scalar: delta * q },
            RegimeKind::Lpt | RegimeKind::Alpt => Embeddings::Quantized(QuantizedEmbeddingTable::init(
                rows,
                cfg.dim,
                QuantSpec::new(cfg.bits, delta, cfg.rounding)?,
                cfg.resolved_layout(),
                cfg.init_scale,
                Some(delta),
                init_seed,
            )?),
        };
        Ok(Self {
            regime: cfg.regime,
            bits: cfg.bits,
            dim: cfg.dim,
            rows,
            embeddings,
            dense: DenseParams::zeros(model),
        })
    }

    /// Values the model sees for the given rows.
    pub fn gather(&self, ids: &[u32]) -> Result<Vec<f64>, TrainError> {
        let d = self.dim;
        let pick = |w: &[f64]| -> Vec<f64> {
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                out.extend_from_slice(&w[id as usize * d..(id as usize + 1) * d]);
            }
            out
        };
        Ok(match &self.embeddings {
            Embeddings::Full(w) => pick(w),
            Embeddings::Shadow { w, scalar } => {
                let mut v = pick(w);
                for x in v.iter_mut() {
                    *x = match self.regime {
                        RegimeKind::QatPact => regimes::pact_quantize(*x, *scalar, self.bits)?,
                        _ => quant::fake_quantize_det(*x, self.bits, *scalar)?,
                    };
                }
                v
            }
            Embeddings::Quantized(t) => t.gather(ids)?,
        })
    }

    pub fn footprint(&self) -> MemoryFootprint {
        match &self.embeddings {
            Embeddings::Full(_) => MemoryFootprint::full_precision(self.rows, self.dim),
            Embeddings::Shadow { .. } => MemoryFootprint::shadow_trained(self.rows, self.dim, self.bits),
            Embeddings::Quantized(t) => t.footprint(),
        }
    }

    pub fn delta_stats(&self) -> Option<DeltaStats> {
        let q = f64::from(quant::code_max(self.bits));
        match &self.embeddings {
            Embeddings::Full(_) => None,
            Embeddings::Shadow { scalar, .. } => {
                let d = match self.regime {
                    RegimeKind::QatPact => scalar / q,
                    _ => *scalar,
                };
                Some(DeltaStats { min: d, mean: d, max: d })
            }
            Embeddings::Quantized(t) => {
                let ds = t.deltas();
                let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
                for &d in ds {
                    let d = f64::from(d);
                    min = min.min(d);
                    max = max.max(d);
                    sum += d;
                }
                Some(DeltaStats { min, mean: sum / ds.len() as f64, max })
            }
        }
    }

    /// The stored table, if the regime trains in low precision.
    pub fn quantized_table(&self) -> Option<&QuantizedEmbeddingTable> {
        match &self.embeddings {
            Embeddings::Quantized(t) => Some(t),
            _ => None,
        }
    }

    /// Write the embeddings: an `LPQE` checkpoint for quantized and QAT
    /// regimes (QAT shadows are quantized with their learned step size), or
    /// raw little-endian `f32` rows after an `LPQF` header for full precision.
    pub fn write_embeddings<W: Write>(&self, mut w: W) -> Result<(), TrainError> {
        match &self.embeddings {
            Embeddings::Quantized(t) => t.write_checkpoint(w)?,
            Embeddings::Shadow { .. } => {
                let delta = self.delta_stats().expect("shadow has a step size").mean;
                let mut t = QuantizedEmbeddingTable::zeros(
                    self.rows,
                    self.dim,
                    QuantSpec::new(self.bits, delta, RoundingMode::Deterministic)?,
                    DeltaLayout::Global,
                )?;
                let ids: Vec<u32> = (0..self.rows as u32).collect();
                let vals = self.gather(&ids)?;
                t.scatter_requantize(&ids, &vals, None, RoundingKey { seed: 0, iteration: 0 })?;
                t.write_checkpoint(w)?;
            }
            Embeddings::Full(v) => {
                w.write_all(b"LPQF")?;
                w.write_all(&(self.rows as u64).to_le_bytes())?;
                w.write_all(&(self.dim as u32).to_le_bytes())?;
                for x in v {
                    w.write_all(&(*x as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub records: Vec<MetricRecord>,
    pub best_epoch: u64,
    pub best: ModelState,
    pub last: ModelState,
    pub footprint: MemoryFootprint,
    pub meter: FpMeter,
}

impl RunOutput {
    pub fn validation_logloss(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == Split::Validation)
            .map(|r| r.logloss)
            .collect()
    }

    pub fn best_validation(&self) -> &MetricRecord {
        self.records
            .iter()
            .find(|r| r.split == Split::Validation && r.epoch == self.best_epoch)
            .expect("best epoch has a validation record")
    }

    pub fn test(&self) -> &MetricRecord {
        self.records
            .iter()
            .find(|r| r.split == Split::Test)
            .expect("test record present")
    }
}

/// Load or generate the dataset a config points at.
pub fn load_data(cfg: &ExperimentConfig) -> Result<EncodedDataset, TrainError> {
    match &cfg.data {
        DataSource::Synthetic(s) => Ok(synth::synth_ctr(s)?.data),
        DataSource::Encoded { path, vocab } => {
            let size = match vocab {
                Some(p) => {
                    let v: data::FeatureVocabulary = serde_json::from_reader(std::fs::File::open(p)?)?;
                    Some(v.size)
                }
                None => None,
            };
            let f = std::fs::File::open(path)?;
            Ok(EncodedDataset::read(std::io::BufReader::new(f), size)?)
        }
    }
}

fn check_finite(values: &[f64], what: &str, iteration: u64) -> Result<(), TrainError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TrainError::NonFinite {
            what: what.to_string(),
            iteration,
        })
    }
}

/// Mean logloss and AUC of the model on a set of samples.
pub fn evaluate(
    state: &ModelState,
    model: &ModelConfig,
    data: &EncodedDataset,
    idx: &[usize],
    batch_size: usize,
) -> Result<(f64, Option<f64>), TrainError> {
    let mut scores = Vec::with_capacity(idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    let mut loss = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (ids, lab) = data.select(chunk);
        let batch = SparseBatch::from_samples(&ids, data.fields, data.vocab_size as usize)?;
        let rows = state.gather(batch.feature_ids())?;
        let (logits, _) = model::forward(model, &state.dense, &rows, batch.slots())?;
        for (z, &y) in logits.iter().zip(&lab) {
            loss += model::logloss(*z, y).0;
        }
        scores.extend(logits);
        labels.extend(lab);
    }
    let auc = model::auc(&scores, &labels).ok();
    Ok((loss / idx.len().max(1) as f64, auc))
}

/// Train one run. Each record is passed to `sink` as soon as it is produced.
pub fn run_experiment<F>(
    cfg: &ExperimentConfig,
    data: &EncodedDataset,
    mut sink: F,
) -> Result<RunOutput, TrainError>
where
    F: FnMut(&MetricRecord) -> Result<(), TrainError>,
{
    cfg.validate()?;
    let manifest = RunManifest::new(cfg, data);
    let run_id = manifest.run_id.clone();
    let model = ModelConfig {
        head: cfg.head,
        fields: data.fields,
        dim: cfg.dim,
    };
    let rows = data.vocab_size as usize;
    let split = data::split(data.samples(), derive_seed(cfg.seed, "split"))?;
    let mut state = ModelState::init(cfg, rows, &model)?;
    let mut dense_adam = AdamState::new(state.dense.to_vec().len(), cfg.adam);
    let mut meter = FpMeter::default();
    if cfg.regime.keeps_full_precision() {
        meter.hold(rows * cfg.dim);
    }
    let schedule = Schedule {
        base_lr: cfg.lr,
        ..cfg.schedule.clone()
    };
    let round_seed = derive_seed(cfg.seed, "round");
    let shuffle_seed = derive_seed(cfg.seed, "shuffle");
    let q = f64::from(quant::code_max(cfg.bits));
    let fp = state.footprint();

    let mut records = Vec::new();
    let mut emit = |r: MetricRecord, records: &mut Vec<MetricRecord>| -> Result<(), TrainError> {
        sink(&r)?;
        records.push(r);
        Ok(())
    };
    let mut iteration = 0u64;
    let mut best: Option<(f64, u64, ModelState)> = None;
    let mut order = split.train.clone();

    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr_at(epoch)?;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed ^ epoch));
        let mut train_loss = 0.0;
        let mut train_scores = Vec::with_capacity(order.len());
        let mut train_labels = Vec::with_capacity(order.len());
        let mut stagnant = 0u64;

        for chunk in order.chunks(cfg.batch_size) {
            iteration += 1;
            let (ids, labels) = data.select(chunk);
            let batch = SparseBatch::from_samples(&ids, data.fields, rows)?;
            let fids = batch.feature_ids();
            let b = chunk.len() as f64;

            let gathered = state.gather(fids)?;
            meter.alloc(gathered.len());
            let (logits, tape) = model::forward(&model, &state.dense, &gathered, batch.slots())?;
            let mut dlogits = Vec::with_capacity(logits.len());
            for (z, &y) in logits.iter().zip(&labels) {
                let (l, dz) = model::logloss(*z, y);
                train_loss += l;
                dlogits.push(dz / b);
            }
            check_finite(&logits, "logit", iteration)?;
            train_scores.extend_from_slice(&logits);
            train_labels.extend_from_slice(&labels);
            let grads = model::backward(tape, &dlogits)?;
            check_finite(&grads.rows, "embedding gradient", iteration)?;

            let mut dense = state.dense.to_vec();
            let dense_lr = cfg.dense_lr * lr / cfg.lr;
            optim::adam_step(&mut dense_adam, &mut dense, &grads.dense_vec(), dense_lr, 0.0)?;
            state.dense.assign(&dense);

            let step = StepSizeUpdate {
                // step sizes follow the same decay as the weights
                lr: cfg.delta_lr * lr / cfg.lr,
                weight_decay: cfg.delta_wd,
                grad_scale: cfg.grad_scale.factor(chunk.len(), cfg.dim, cfg.bits),
                optimizer: cfg.delta_optimizer,
                adam: cfg.adam,
            };
            let key = RoundingKey {
                seed: round_seed,
                iteration,
            };
            let d = cfg.dim;
            let regime = state.regime;
            match &mut state.embeddings {
                Embeddings::Full(w) => {
                    let mut new = gathered;
                    cfg.embedding_optimizer
                        .step(&mut new, &grads.rows, lr, cfg.embedding_wd, cfg.adam)?;
                    for (j, &id) in fids.iter().enumerate() {
                        let r = id as usize;
                        w[r * d..(r + 1) * d].copy_from_slice(&new[j * d..(j + 1) * d]);
                    }
                }
                Embeddings::Shadow { w, scalar } => {
                    let mut shadow = Vec::with_capacity(fids.len() * d);
                    for &id in fids {
                        shadow.extend_from_slice(&w[id as usize * d..(id as usize + 1) * d]);
                    }
                    meter.alloc(shadow.len());
                    let raw = match regime {
                        RegimeKind::QatPact => regimes::pact_alpha_grad(&shadow, &grads.rows, *scalar)?,
                        _ => {
                            let spec = QuantSpec::new(cfg.bits, *scalar, RoundingMode::Deterministic)?;
                            regimes::lsq_delta_grad(&shadow, &grads.rows, &spec)?
                        }
                    };
                    cfg.embedding_optimizer
                        .step(&mut shadow, &grads.rows, lr, cfg.embedding_wd, cfg.adam)?;
                    let floor = match regime {
                        RegimeKind::QatPact => DELTA_FLOOR * q,
                        _ => DELTA_FLOOR,
                    };
                    let (next, _) = step.apply(*scalar, raw)?;
                    *scalar = next.max(floor);
                    for (j, &id) in fids.iter().enumerate() {
                        let r = id as usize;
                        w[r * d..(r + 1) * d].copy_from_slice(&shadow[j * d..(j + 1) * d]);
                    }
                    meter.free(shadow.len());
                }
                Embeddings::Quantized(table) => {
                    let mut new = gathered;
                    cfg.embedding_optimizer
                        .step(&mut new, &grads.rows, lr, cfg.embedding_wd, cfg.adam)?;
                    check_finite(&new, "embedding update", iteration)?;
                    let stats = if regime == RegimeKind::Alpt {
                        let dense_now = state.dense.clone();
                        let slots = batch.slots();
                        let refeed = |qrows: &[f64]| -> Result<Vec<f64>, RegimeError> {
                            let (z, tape) = model::forward(&model, &dense_now, qrows, slots)?;
                            let dz: Vec<f64> = z
                                .iter()
                                .zip(&labels)
                                .map(|(z, &y)| model::logloss(*z, y).1 / b)
                                .collect();
                            Ok(model::backward(tape, &dz)?.rows)
                        };
                        regimes::alpt_requantize(table, fids, &new, &step, refeed, key, &mut meter)?
                    } else {
                        regimes::lpt_requantize(table, fids, &mut new, cfg.clip, key)?
                    };
                    stagnant += stats.stagnant as u64;
                }
            }
            meter.free(fids.len() * d);
            if let Some(ds) = state.delta_stats() {
                if !(ds.min.is_finite() && ds.max.is_finite()) {
                    return Err(TrainError::NonFinite {
                        what: "step size".into(),
                        iteration,
                    });
                }
            }
        }

        let delta = state.delta_stats();
        let train_ll = train_loss / order.len().max(1) as f64;
        if !train_ll.is_finite() {
            return Err(TrainError::NonFinite {
                what: "training loss".into(),
                iteration,
            });
        }
        emit(
            MetricRecord {
                run_id: run_id.clone(),
                epoch,
                iteration,
                split: Split::Train,
                logloss: train_ll,
                auc: model::auc(&train_scores, &train_labels).ok(),
                training_ratio: fp.training_ratio,
                inference_ratio: fp.inference_ratio,
                stagnant,
                delta,
            },
            &mut records,
        )?;
        let (val_ll, val_auc) = evaluate(&state, &model, data, &split.validation, cfg.batch_size.max(1024))?;
        if !val_ll.is_finite() {
            return Err(TrainError::NonFinite {
                what: "validation loss".into(),
                iteration,
            });
        }
        emit(
            MetricRecord {
                run_id: run_id.clone(),
                epoch,
                iteration,
                split: Split::Validation,
                logloss: val_ll,
                auc: val_auc,
                training_ratio: fp.training_ratio,
                inference_ratio: fp.inference_ratio,
                stagnant,
                delta,
            },
            &mut records,
        )?;
        if best.as_ref().is_none_or(|(l, _, _)| val_ll < *l) {
            best = Some((val_ll, epoch, state.clone()));
        }
    }

    let (_, best_epoch, best_state) = best.expect("at least one epoch");
    let (test_ll, test_auc) = evaluate(&best_state, &model, data, &split.test, cfg.batch_size.max(1024))?;
    emit(
        MetricRecord {
            run_id: run_id.clone(),
            epoch: best_epoch,
            iteration,
            split: Split::Test,
            logloss: test_ll,
            auc: test_auc,
            training_ratio: fp.training_ratio,
            inference_ratio: fp.inference_ratio,
            stagnant: 0,
            delta: best_state.delta_stats(),
        },
        &mut records,
    )?;

    Ok(RunOutput {
        manifest,
        records,
        best_epoch,
        best: best_state,
        last: state,
        footprint: fp,
        meter,
    })
}

/// Write `manifest.json`, `metrics.jsonl`, `checkpoint.bin` and `dense.json`
/// into `dir`.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&out.manifest)? + "\n",
    )?;
    let mut m = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?);
    for r in &out.records {
        serde_json::to_writer(&mut m, r)?;
        m.write_all(b"\n")?;
    }
    m.flush()?;
    let mut c = std::io::BufWriter::new(std::fs::File::create(dir.join("checkpoint.bin"))?);
    out.best.write_embeddings(&mut c)?;
    c.flush()?;
    std::fs::write(dir.join("dense.json"), serde_json::to_string(&out.best.dense)? + "\n")?;
    Ok(())
}
