//! End-to-end glue: pair ingestion with preprocessing, feature and target
//! extraction, dataset assembly, training and mask-based enhancement.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::degrade::{load_pair, surrogate_code, DegradeProfile};
use crate::dsp::{
    band_limit, istft, level_normalize, log_magnitude, normalize, read_wav, stft, AudioBuffer, NormStats,
    SignalRole, Spectrogram, StftConfig, BAND_LIMIT_HZ, LOG_FLOOR, TARGET_LEVEL_DB,
};
use crate::error::{Error, Result};
use crate::manifest::{CodedSource, Manifest, Record, Split};
use crate::mask::{apply_mask, compute_irm, modified_mask, MaskConfig, MaskMatrix};
use crate::metrics::{self, MetricReport};
use crate::nn::{
    build_model, context_windows, infer_masks, train, Dataset, ModelSpec, Network, SavedModel, TrainConfig,
    TrainOutcome,
};

/// Feature and target settings shared by training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mask: MaskConfig,
    pub floor_eps: f64,
    /// Band-limit both signals to this upper edge; `None` disables it.
    pub band_limit_hz: Option<f64>,
    /// Active-level target in dBov; `None` disables normalization.
    pub level_db: Option<f64>,
    /// Train on modified masks/targets rather than plain IRMs.
    pub modified_target: bool,
    /// Search range for delay compensation of file pairs, in samples.
    pub max_lag: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mask: MaskConfig::default(),
            floor_eps: LOG_FLOOR,
            band_limit_hz: Some(BAND_LIMIT_HZ),
            level_db: Some(TARGET_LEVEL_DB),
            modified_target: true,
            max_lag: 800,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        if !(self.floor_eps > 0.0) {
            return Err(Error::InvalidConfig(format!("floor_eps must be positive, got {}", self.floor_eps)));
        }
        Ok(())
    }
}

/// Band limiting followed by level normalization. Silent buffers skip the
/// normalization rather than failing.
pub fn preprocess(buf: &AudioBuffer, cfg: &PipelineConfig) -> Result<AudioBuffer> {
    let mut out = match cfg.band_limit_hz {
        Some(hz) => band_limit(buf, hz)?,
        None => buf.clone(),
    };
    if let Some(db) = cfg.level_db {
        match level_normalize(&out, db) {
            Ok((scaled, _)) => out = scaled,
            Err(Error::CannotNormalize) => log::warn!("silent signal left at its original level"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// A preprocessed, equal-length clean/coded pair.
#[derive(Debug, Clone)]
pub struct Pair {
    pub id: String,
    /// Preset name or `file`.
    pub source: String,
    pub split: Split,
    pub clean: AudioBuffer,
    pub coded: AudioBuffer,
}

/// Per-record surrogate seed; independent of which split is being loaded.
pub fn surrogate_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

/// Reads and preprocesses record `index` of a manifest.
pub fn load_record(record: &Record, index: usize, cfg: &PipelineConfig, seed: u64) -> Result<Pair> {
    let (clean, coded) = match &record.coded {
        CodedSource::Surrogate(preset) => {
            let clean = preprocess(&read_wav(&record.clean, SignalRole::Clean)?, cfg)?;
            let coded = surrogate_code(&clean, &DegradeProfile::preset(*preset, surrogate_seed(seed, index)))?;
            (clean, preprocess(&coded, cfg)?)
        }
        CodedSource::File(path) => {
            let pair = load_pair(&record.clean, path, cfg.max_lag)?;
            (preprocess(&pair.clean, cfg)?, preprocess(&pair.coded, cfg)?)
        }
    };
    Ok(Pair {
        id: record.id(),
        source: record.source_label(),
        split: record.split,
        clean: clean.with_role(SignalRole::Clean),
        coded: coded.with_role(SignalRole::Coded),
    })
}

/// Order-preserving parallel map over `items` with at most `jobs` threads.
pub fn par_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let results: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Loads every record of `split` (all records when `None`), in manifest order.
pub fn load_split(
    manifest: &Manifest,
    split: Option<Split>,
    cfg: &PipelineConfig,
    seed: u64,
    jobs: usize,
) -> Result<Vec<Pair>> {
    let selected: Vec<(usize, &Record)> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| split.is_none_or(|s| r.split == s))
        .collect();
    if selected.is_empty() {
        let what = split.map_or("any".to_string(), |s| format!("'{s}'"));
        return Err(Error::Empty(format!("manifest has no {what} records")));
    }
    par_map(&selected, jobs, |(i, r)| load_record(r, *i, cfg, seed))
}

/// STFT-domain view of a pair.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub coded_spec: Spectrogram,
    /// `T × 205`.
    pub clean_mag: Array2<f64>,
    pub coded_mag: Array2<f64>,
    /// Unnormalized log-magnitude features of the coded signal.
    pub log_features: Array2<f64>,
}

pub fn analyze(pair: &Pair, cfg: &PipelineConfig) -> Result<Analysis> {
    let stft_cfg = StftConfig::default();
    let clean_spec = stft(&pair.clean, &stft_cfg)?;
    let coded_spec = stft(&pair.coded, &stft_cfg)?;
    Ok(Analysis {
        clean_mag: clean_spec.processed_magnitudes(),
        coded_mag: coded_spec.processed_magnitudes(),
        log_features: log_magnitude(&coded_spec, cfg.floor_eps)?.values,
        coded_spec,
    })
}

/// Training target for every frame: the modified mask by default, else the IRM.
pub fn target_mask(a: &Analysis, cfg: &PipelineConfig) -> Result<MaskMatrix> {
    let irm = compute_irm(&a.clean_mag, &a.coded_mag, cfg.mask.gamma)?;
    if cfg.modified_target {
        modified_mask(&irm, &cfg.mask)
    } else {
        Ok(irm)
    }
}

pub fn norm_stats(analyses: &[Analysis]) -> Result<NormStats> {
    NormStats::from_features(analyses.iter().map(|a| &a.log_features))
}

/// Context windows, targets and coded magnitudes for every frame of every pair.
pub fn build_dataset(analyses: &[Analysis], stats: &NormStats, context: usize, cfg: &PipelineConfig) -> Result<Dataset> {
    let parts = analyses
        .iter()
        .map(|a| {
            let features = normalize(
                &crate::dsp::FeatureMatrix {
                    values: a.log_features.clone(),
                    stats: None,
                },
                Some(stats),
            )?;
            Dataset::new(
                context_windows(&features.values, context),
                target_mask(a, cfg)?.values,
                a.coded_mag.clone(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::concat(&parts)
}

/// Trains a post-filter on preprocessed pairs. `seed` fixes initialization;
/// `train_cfg.seed` fixes shuffling and dropout.
pub fn train_postfilter(
    spec: &ModelSpec,
    train_pairs: &[Pair],
    val_pairs: &[Pair],
    train_cfg: &TrainConfig,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(SavedModel, TrainOutcome)> {
    cfg.validate()?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Empty("training needs non-empty train and val splits".into()));
    }
    let train_a = train_pairs.iter().map(|p| analyze(p, cfg)).collect::<Result<Vec<_>>>()?;
    let val_a = val_pairs.iter().map(|p| analyze(p, cfg)).collect::<Result<Vec<_>>>()?;
    let stats = norm_stats(&train_a)?;
    let train_set = build_dataset(&train_a, &stats, spec.context_frames, cfg)?;
    let val_set = build_dataset(&val_a, &stats, spec.context_frames, cfg)?;
    log::info!(
        "training {} on {} frames, validating on {}",
        spec.kind,
        train_set.len(),
        val_set.len()
    );
    let (mut net, store) = build_model(spec, seed)?;
    log::info!("{} parameters", store.param_count());
    let outcome = train(&mut net, store, train_cfg, &train_set, &val_set)?;
    let model = SavedModel {
        spec: spec.clone(),
        seed,
        norm: Some(stats),
        train: Some(train_cfg.clone()),
        pipeline: Some(serde_json::to_value(cfg).expect("pipeline config serializes")),
        store: outcome.store.clone(),
    };
    Ok((model, outcome))
}

/// A loaded model ready to enhance coded audio.
pub struct PostFilter {
    pub model: SavedModel,
    pub pipeline: PipelineConfig,
    net: Network,
}

impl PostFilter {
    pub fn new(model: SavedModel) -> Result<Self> {
        if model.norm.is_none() {
            return Err(Error::MissingStats);
        }
        let pipeline = match &model.pipeline {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::CorruptModel(format!("pipeline settings: {e}")))?,
            None => PipelineConfig::default(),
        };
        Ok(Self {
            net: model.network()?,
            model,
            pipeline,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(SavedModel::load(path)?)
    }

    pub fn masks(&mut self, coded_spec: &Spectrogram) -> Result<MaskMatrix> {
        let features = log_magnitude(coded_spec, self.pipeline.floor_eps)?;
        let features = normalize(&features, self.model.norm.as_ref())?;
        infer_masks(&mut self.net, &self.model.store, &features)
    }

    /// Masks the coded magnitudes (coded phase, upper band passed through)
    /// and resynthesizes. The result has the iSTFT length of the input's frames.
    pub fn enhance(&mut self, coded: &AudioBuffer) -> Result<AudioBuffer> {
        let cfg = StftConfig::default();
        let enhanced = self.enhance_spectrogram(&stft(coded, &cfg)?)?;
        Ok(istft(&enhanced, &cfg)?.with_role(SignalRole::Enhanced))
    }

    pub fn enhance_spectrogram(&mut self, coded_spec: &Spectrogram) -> Result<Spectrogram> {
        let m = self.masks(coded_spec)?;
        apply_mask(&m, coded_spec)
    }
}

/// Metrics of `test` against `clean`, both truncated to the shorter length.
pub fn score(clean: &AudioBuffer, test: &AudioBuffer) -> Result<MetricReport> {
    let n = clean.len().min(test.len());
    metrics::evaluate(&clean.truncated(n), &test.truncated(n))
}
