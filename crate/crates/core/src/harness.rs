//! Training and evaluation harness.
//!
//! [`pretrain`] fits one L2D model to a list of records. [`run_loo`] trains
//! one fresh model per class on every other class and scores the held-out
//! prediction. Trained models are frozen into a [`LookupTable`] for hint
//! rendering. [`gen_synthetic`] builds a dataset whose embeddings carry a
//! known amount of depth information.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth_data::{expected_depth, BinningSpec, ClassRecord, DepthHistogram, DepthRecord};
use crate::embedding::{EmbeddingStore, EmbeddingVector};
use crate::l2d::{adam_step, AdamConfig, AdamState, Gradients, L2DConfig, MlpParameters, Mode, CLASS_BINS};
use crate::losses::{eigen_metrics, kldiv_batch, silog_from_log, EigenMetrics, KlDirection, SilogForm};
use crate::rng::{self, RngSeed};
use crate::{Error, Result, BACKGROUND};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub init_seed: RngSeed,
    pub shuffle_seed: RngSeed,
    pub adam: AdamConfig,
    pub silog_form: SilogForm,
    pub kl_direction: KlDirection,
    /// Binning used to turn predicted distributions into depths.
    pub binning: BinningSpec,
}

impl TrainSpec {
    /// 100 epochs, batches of 1000.
    pub fn inst(seed: RngSeed) -> Self {
        Self {
            epochs: 100,
            batch_size: 1000,
            init_seed: seed,
            shuffle_seed: seed,
            adam: AdamConfig::default(),
            silog_form: SilogForm::default(),
            kl_direction: KlDirection::default(),
            binning: BinningSpec::default(),
        }
    }

    /// 100 epochs, one batch of every other class (capped at 100).
    pub fn loo(n_classes: usize, seed: RngSeed) -> Self {
        Self {
            batch_size: n_classes.saturating_sub(1).clamp(1, 100),
            ..Self::inst(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be at least 1"));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::invalid("optimizer hyperparameters out of range"));
        }
        self.binning.validate()
    }
}

/// Records resolved to model inputs, with fallback bookkeeping.
struct Prepared {
    inputs: Vec<Vec<f64>>,
    fallbacks: BTreeMap<String, usize>,
}

fn prepare(config: &L2DConfig, store: &EmbeddingStore, records: &[DepthRecord]) -> Result<Prepared> {
    if records.is_empty() {
        return Err(Error::invalid("no training records"));
    }
    if store.dim() != config.input_dim {
        return Err(Error::DimMismatch {
            expected: config.input_dim,
            actual: store.dim(),
        });
    }
    let mut inputs = Vec::with_capacity(records.len());
    let mut fallbacks = BTreeMap::new();
    for r in records {
        let hit = store.lookup(&r.label)?;
        if hit.fallback {
            *fallbacks.entry(r.label.clone()).or_insert(0) += 1;
        }
        if config.mode == Mode::Classification {
            match &r.histogram {
                Some(h) if h.len() == CLASS_BINS => {}
                Some(h) => {
                    return Err(Error::invalid(format!(
                        "record `{}` has {} bins, classification needs {CLASS_BINS}",
                        r.label,
                        h.len()
                    )))
                }
                None => {
                    return Err(Error::invalid(format!(
                        "record `{}` has no histogram, required for classification mode",
                        r.label
                    )))
                }
            }
        }
        inputs.push(hit.vector.to_f64());
    }
    Ok(Prepared { inputs, fallbacks })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub params: MlpParameters,
    /// Mean training loss per epoch, measured before each batch's update.
    pub epoch_losses: Vec<f64>,
    /// Labels that were resolved to `background`, with record counts.
    pub fallbacks: BTreeMap<String, usize>,
}

/// Loss and parameter gradients of one batch: SILog over the batch in
/// log-mean mode, mean KL divergence in classification mode.
pub fn batch_loss(
    params: &MlpParameters,
    spec: &TrainSpec,
    inputs: &[&[f64]],
    records: &[&DepthRecord],
) -> Result<(f64, Gradients)> {
    let traces = inputs.iter().map(|x| params.forward(x)).collect::<Result<Vec<_>>>()?;
    let (loss, out_grads): (f64, Vec<Vec<f64>>) = match params.mode() {
        Mode::LogMean => {
            let log_pred: Vec<f64> = traces.iter().map(|t| t.output()[0]).collect();
            let gt: Vec<f64> = records.iter().map(|r| r.mean_depth).collect();
            let lg = silog_from_log(&log_pred, &gt, spec.silog_form)?;
            (lg.loss, lg.grad.into_iter().map(|g| vec![g]).collect())
        }
        Mode::Classification => {
            let targets: Vec<&[f64]> = records
                .iter()
                .map(|r| r.histogram.as_ref().expect("checked in prepare").probs())
                .collect();
            let preds: Vec<&[f64]> = traces.iter().map(|t| t.output()).collect();
            kldiv_batch(&targets, &preds, spec.kl_direction)?
        }
    };
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("training loss became {loss}")));
    }
    let mut grads = Gradients::zeros_like(params);
    for (trace, g) in traces.iter().zip(&out_grads) {
        grads.add_assign(&params.backward(trace, g)?);
    }
    Ok((loss, grads))
}

/// Fits a fresh model (seeded by `spec.init_seed`) to `records`.
pub fn pretrain(
    config: &L2DConfig,
    store: &EmbeddingStore,
    records: &[DepthRecord],
    spec: &TrainSpec,
) -> Result<PretrainOutcome> {
    pretrain_observed(config, store, records, spec, &mut |_| {})
}

/// [`pretrain`], calling `observer` with the record indices of every batch.
///
/// Each epoch visits every record exactly once in a freshly shuffled order;
/// the last batch of an epoch may be short. The returned parameters are
/// rounded to `f32` so a saved checkpoint reproduces them exactly.
pub fn pretrain_observed(
    config: &L2DConfig,
    store: &EmbeddingStore,
    records: &[DepthRecord],
    spec: &TrainSpec,
    observer: &mut dyn FnMut(&[usize]),
) -> Result<PretrainOutcome> {
    spec.validate()?;
    config.validate()?;
    let prepared = prepare(config, store, records)?;
    let mut params = MlpParameters::init(config, spec.init_seed)?;
    let mut adam = AdamState::new(&params);
    let mut shuffle = rng::stream(spec.shuffle_seed, rng::stream::SHUFFLE);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut epoch_losses = Vec::with_capacity(spec.epochs);

    for _ in 0..spec.epochs {
        rng::shuffle(&mut shuffle, &mut order);
        let mut weighted = 0.0;
        for batch in order.chunks(spec.batch_size) {
            observer(batch);
            let inputs: Vec<&[f64]> = batch.iter().map(|&i| prepared.inputs[i].as_slice()).collect();
            let recs: Vec<&DepthRecord> = batch.iter().map(|&i| &records[i]).collect();
            let (loss, grads) = batch_loss(&params, spec, &inputs, &recs)?;
            weighted += loss * batch.len() as f64;
            adam_step(&mut params, &grads, &mut adam, &spec.adam)?;
        }
        epoch_losses.push(weighted / records.len() as f64);
    }
    params.quantize_f32();
    Ok(PretrainOutcome {
        params,
        epoch_losses,
        fallbacks: prepared.fallbacks,
    })
}

/// Full-batch loss of `params` on `records`.
pub fn dataset_loss(
    params: &MlpParameters,
    store: &EmbeddingStore,
    records: &[DepthRecord],
    spec: &TrainSpec,
) -> Result<f64> {
    let prepared = prepare(params.config(), store, records)?;
    let inputs: Vec<&[f64]> = prepared.inputs.iter().map(Vec::as_slice).collect();
    let recs: Vec<&DepthRecord> = records.iter().collect();
    Ok(batch_loss(params, spec, &inputs, &recs)?.0)
}

/// Frozen prediction for one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupEntry {
    pub label: String,
    pub mean_depth: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features50: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_probs: Option<Vec<f64>>,
}

/// Predicted depth (and, for classification, features and log-probabilities)
/// for one embedding. Classification depth is the expected bin centre.
pub fn predict(params: &MlpParameters, input: &[f64], binning: &BinningSpec) -> Result<LookupEntry> {
    let entry = match params.mode() {
        Mode::LogMean => {
            let (log_depth, _) = params.forward_logmean(input)?;
            LookupEntry {
                label: String::new(),
                mean_depth: log_depth.exp(),
                features50: None,
                log_probs: None,
            }
        }
        Mode::Classification => {
            let (out, _) = params.forward_classification(input)?;
            let probs: Vec<f64> = out.log_probs.iter().map(|v| v.exp()).collect();
            let hist = DepthHistogram::from_probs(probs)?;
            LookupEntry {
                label: String::new(),
                mean_depth: expected_depth(&hist, binning),
                features50: Some(out.features),
                log_probs: Some(out.log_probs),
            }
        }
    };
    if !(entry.mean_depth.is_finite() && entry.mean_depth > 0.0) {
        return Err(Error::Numerical(format!(
            "predicted depth {} is not positive",
            entry.mean_depth
        )));
    }
    Ok(entry)
}

/// Label -> frozen prediction, in vocabulary order.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    entries: Vec<LookupEntry>,
    index: HashMap<String, usize>,
}

impl LookupTable {
    pub fn from_entries(entries: Vec<LookupEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if !(e.mean_depth.is_finite() && e.mean_depth > 0.0) {
                return Err(Error::invalid(format!("entry `{}` has non-positive depth", e.label)));
            }
            if index.insert(e.label.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate lookup label `{}`", e.label)));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn entries(&self) -> &[LookupEntry] {
        &self.entries
    }

    pub fn get(&self, label: &str) -> Option<&LookupEntry> {
        self.index.get(label).map(|&i| &self.entries[i])
    }

    /// Exact entry, else the `background` entry (flagged as a fallback).
    pub fn resolve(&self, label: &str) -> Result<(&LookupEntry, bool)> {
        if let Some(e) = self.get(label) {
            return Ok((e, false));
        }
        self.get(BACKGROUND)
            .map(|e| (e, true))
            .ok_or_else(|| Error::Unresolvable(label.to_owned()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).map_err(|err| Error::format(path, err.to_string()))?;
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?);
        }
        Self::from_entries(entries).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Table with one fresh forward pass per vocabulary label.
pub fn export_lookup(
    params: &MlpParameters,
    store: &EmbeddingStore,
    vocabulary: &[impl AsRef<str>],
    binning: &BinningSpec,
) -> Result<LookupTable> {
    let entries = vocabulary
        .iter()
        .map(|label| {
            let label = label.as_ref();
            let input = store.lookup(label)?.vector.to_f64();
            Ok(LookupEntry {
                label: label.to_owned(),
                ..predict(params, &input, binning)?
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LookupTable::from_entries(entries)
}

/// Table built from saved leave-one-out predictions.
///
/// Vocabulary labels without a prediction take the `background` prediction
/// when one exists.
pub fn export_lookup_from_predictions(
    predictions: &[LookupEntry],
    vocabulary: &[impl AsRef<str>],
) -> Result<LookupTable> {
    let saved = LookupTable::from_entries(predictions.to_vec())?;
    let entries = vocabulary
        .iter()
        .map(|label| {
            let label = label.as_ref();
            let (e, _) = saved.resolve(label)?;
            Ok(LookupEntry {
                label: label.to_owned(),
                ..e.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LookupTable::from_entries(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooRow {
    pub label: String,
    pub predicted_depth: f64,
    pub gt_depth: f64,
    /// The held-out label itself resolved to `background`.
    pub fallback: bool,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub config: L2DConfig,
    pub train: TrainSpec,
    pub rows: Vec<LooRow>,
    /// Each class counts once.
    pub metrics: EigenMetrics,
    /// Training-record fallbacks summed over all runs.
    pub fallback_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooOutcome {
    pub report: LooReport,
    /// Model trained without class `i`, for each `i`.
    pub models: Vec<MlpParameters>,
    /// Held-out prediction per class, labelled.
    pub predictions: Vec<LookupEntry>,
}

impl LooOutcome {
    pub fn lookup_table(&self, vocabulary: &[impl AsRef<str>]) -> Result<LookupTable> {
        export_lookup_from_predictions(&self.predictions, vocabulary)
    }
}

/// Leave-one-out protocol: for each class, train a fresh model on all other
/// classes and predict the held-out class at the end of training.
///
/// `workers > 1` runs classes in parallel; results do not depend on it.
pub fn run_loo(
    config: &L2DConfig,
    store: &EmbeddingStore,
    classes: &[ClassRecord],
    spec: &TrainSpec,
    workers: usize,
) -> Result<LooOutcome> {
    run_loo_observed(config, store, classes, spec, workers, &|_, _| {})
}

/// [`run_loo`], calling `observer(held_out, batch_labels)` for every training batch.
pub fn run_loo_observed(
    config: &L2DConfig,
    store: &EmbeddingStore,
    classes: &[ClassRecord],
    spec: &TrainSpec,
    workers: usize,
    observer: &(dyn Fn(usize, &[&str]) + Sync),
) -> Result<LooOutcome> {
    if classes.len() < 2 {
        return Err(Error::invalid("leave-one-out needs at least two classes"));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = classes.iter().find(|c| !seen.insert(c.label.as_str())) {
        return Err(Error::invalid(format!("class `{}` appears twice", dup.label)));
    }
    spec.validate()?;
    // Fail fast on unresolvable labels or missing histograms.
    prepare(config, store, classes)?;

    let one = |held_out: usize| -> Result<(LooRow, MlpParameters, LookupEntry, usize)> {
        let train: Vec<DepthRecord> = classes
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != held_out)
            .map(|(_, c)| c.clone())
            .collect();
        let outcome = pretrain_observed(config, store, &train, spec, &mut |batch| {
            let labels: Vec<&str> = batch.iter().map(|&i| train[i].label.as_str()).collect();
            observer(held_out, &labels);
        })?;
        let target = &classes[held_out];
        let hit = store.lookup(&target.label)?;
        let entry = LookupEntry {
            label: target.label.clone(),
            ..predict(&outcome.params, &hit.vector.to_f64(), &spec.binning)?
        };
        let row = LooRow {
            label: target.label.clone(),
            predicted_depth: entry.mean_depth,
            gt_depth: target.mean_depth,
            fallback: hit.fallback,
            epoch_losses: outcome.epoch_losses,
        };
        let fallbacks = outcome.fallbacks.values().sum();
        Ok((row, outcome.params, entry, fallbacks))
    };

    let results: Vec<_> = if workers <= 1 {
        (0..classes.len()).map(one).collect::<Result<_>>()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?
            .install(|| (0..classes.len()).into_par_iter().map(one).collect::<Result<_>>())?
    };

    let mut rows = Vec::with_capacity(results.len());
    let mut models = Vec::with_capacity(results.len());
    let mut predictions = Vec::with_capacity(results.len());
    let mut fallback_count = 0;
    for (row, model, entry, fb) in results {
        rows.push(row);
        models.push(model);
        predictions.push(entry);
        fallback_count += fb;
    }
    let pred: Vec<f64> = rows.iter().map(|r| r.predicted_depth).collect();
    let gt: Vec<f64> = rows.iter().map(|r| r.gt_depth).collect();
    let metrics = eigen_metrics(&pred, &gt)?;
    Ok(LooOutcome {
        report: LooReport {
            config: config.clone(),
            train: spec.clone(),
            rows,
            metrics,
            fallback_count,
        },
        models,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub store: EmbeddingStore,
    pub records: Vec<ClassRecord>,
}

pub const SYNTHETIC_MIN_DEPTH: f64 = 0.5;
pub const SYNTHETIC_MAX_DEPTH: f64 = 9.5;

/// Classes with known depth signal in their embeddings.
///
/// Class `i` (labelled `class_000`, ...) gets a log-uniform mean depth in
/// `[0.5, 9.5)`. With `u` its log depth rescaled to `[0, 1)`, embedding
/// component `j < signal_dims` is `a_j * u + b_j` (`a_j` in `[0.5, 1)`,
/// `b_j` in `[0, 0.25)`, shared by all classes) and every other component is
/// `noise_sigma * U[0, 1)`. The store also holds a noise-only `background`.
/// Histograms are discretized Gaussians centred on the class mean, narrow
/// enough to stay inside the binning range.
pub fn gen_synthetic(
    n_classes: usize,
    dim: usize,
    signal_dims: usize,
    noise_sigma: f64,
    seed: RngSeed,
) -> Result<SyntheticData> {
    if n_classes < 2 {
        return Err(Error::invalid("synthetic data needs at least two classes"));
    }
    if signal_dims == 0 || signal_dims > dim {
        return Err(Error::invalid(format!(
            "signal dims must be in 1..={dim}, got {signal_dims}"
        )));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::invalid("noise sigma must be finite and non-negative"));
    }
    let binning = BinningSpec::default();
    let mut r = rng::stream(seed, rng::stream::SYNTHETIC);
    let slopes: Vec<f64> = (0..signal_dims).map(|_| rng::uniform(&mut r, 0.5, 1.0)).collect();
    let offsets: Vec<f64> = (0..signal_dims).map(|_| rng::uniform(&mut r, 0.0, 0.25)).collect();
    let log_span = (SYNTHETIC_MAX_DEPTH / SYNTHETIC_MIN_DEPTH).ln();

    let mut store = EmbeddingStore::new(dim)?;
    let mut records = Vec::with_capacity(n_classes);
    for i in 0..n_classes {
        let u = rng::unit_f64(&mut r);
        let depth = SYNTHETIC_MIN_DEPTH * (u * log_span).exp();
        let values: Vec<f32> = (0..dim)
            .map(|j| {
                if j < signal_dims {
                    (slopes[j] * u + offsets[j]) as f32
                } else {
                    (noise_sigma * rng::unit_f64(&mut r)) as f32
                }
            })
            .collect();
        let label = format!("class_{i:03}");
        store.insert(label.clone(), EmbeddingVector::new(values)?)?;
        let pixel_count = 200 + (rng::unit_f64(&mut r) * 4800.0) as u64;
        records.push(ClassRecord {
            label,
            pixel_count,
            mean_depth: depth,
            histogram: Some(gaussian_histogram(depth, &binning)),
        });
    }
    let background: Vec<f32> = (0..dim)
        .map(|j| {
            if j < signal_dims {
                0.0
            } else {
                (noise_sigma * rng::unit_f64(&mut r)) as f32
            }
        })
        .collect();
    store.insert(BACKGROUND, EmbeddingVector::new(background)?)?;
    Ok(SyntheticData { store, records })
}

fn gaussian_histogram(mean: f64, binning: &BinningSpec) -> DepthHistogram {
    let range = (mean - binning.min_depth).min(binning.max_depth - mean);
    let sigma = (0.05 * mean).min(range / 3.0);
    let weights: Vec<f64> = (0..binning.bin_count)
        .map(|k| {
            let z = (binning.bin_center(k) - mean) / sigma;
            (-0.5 * z * z).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    DepthHistogram::from_probs(weights.into_iter().map(|w| w / total).collect()).expect("gaussian weights are positive")
}
