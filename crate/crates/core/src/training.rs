//! Frame-predictor pretraining on real videos and detector training on
//! precomputed clip features.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{Clip, Label, Manifest, Split, VideoRecord, CLIP_LENGTH};
use crate::detector::{extract_features, ClipFeatures, Detector, DetectorBundle, DetectorConfig, FrozenComponents};
use crate::error::{Error, Result};
use crate::fusion::{detector_loss, detector_loss_logit_grad, DECISION_THRESHOLD};
use crate::ingestion::{clips_from_video, load_video};
use crate::local_branch::{train_frame_predictor, FramePredictor, PredictorTrainConfig, PredictorTrainReport};
use crate::nn::{copy_values, zero_grad, Adam, Mode, Rng64};
use crate::transcoder::Transcoder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without a strict validation-accuracy improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub clip_length: usize,
    pub stride: usize,
    #[serde(flatten)]
    pub model: DetectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            clip_length: CLIP_LENGTH,
            stride: 1,
            model: DetectorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.clip_length < 3 {
            return Err(Error::Config("clip_length must be at least 3".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub train_clips: usize,
    pub val_clips: usize,
}

/// Percentage of clips whose thresholded probability matches the label.
/// A probability of exactly 0.5 is a FAKE decision.
pub fn accuracy(probabilities: &[f64], labels: &[Label]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::LengthMismatch(probabilities.len(), labels.len()));
    }
    if probabilities.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let correct = probabilities
        .iter()
        .zip(labels)
        .filter(|(p, l)| (**p >= DECISION_THRESHOLD) == (**l == Label::Fake))
        .count();
    Ok(100.0 * correct as f64 / probabilities.len() as f64)
}

fn labels_of(clips: &[ClipFeatures]) -> Vec<Label> {
    clips.iter().map(|c| c.label).collect()
}

/// Train one detector on already extracted features, keeping the weights
/// of the epoch with the best validation accuracy.
pub fn train_on_features(
    train: &[ClipFeatures],
    val: &[ClipFeatures],
    config: &TrainConfig,
) -> Result<(Detector, TrainLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::MissingSplit(Split::Train));
    }
    if val.is_empty() {
        return Err(Error::MissingSplit(Split::Val));
    }
    let mut model = Detector::new(&config.model, config.seed)?;
    let mut best = model.clone();
    let val_labels = labels_of(val);
    let mut log = TrainLog {
        best_val_accuracy: f64::NEG_INFINITY,
        train_clips: train.len(),
        val_clips: val.len(),
        ..Default::default()
    };
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0;
    for epoch in 0..config.max_epochs {
        let mut rng = Rng64::seed_from_u64(config.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(config.batch_size) {
            // batch statistics need at least two samples
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&ClipFeatures> = chunk.iter().map(|&i| &train[i]).collect();
            let targets: Vec<f64> = batch.iter().map(|c| c.label.as_target()).collect();
            let (probs, cache) = model.forward(&batch, Mode::Train)?;
            let probs = probs.to_vec();
            loss_sum += detector_loss(&probs, &targets)? * chunk.len() as f64;
            seen += chunk.len();
            zero_grad(&mut model);
            model.backward(&cache, &detector_loss_logit_grad(&probs, &targets));
            model.update_running(&cache);
            adam.step(&mut model);
        }
        let val_accuracy = accuracy(&model.predict(val, config.batch_size)?, &val_labels)?;
        let train_loss = loss_sum / seen.max(1) as f64;
        info!("epoch {epoch}: train loss {train_loss:.4}, val accuracy {val_accuracy:.2}");
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_accuracy,
        });
        if val_accuracy > log.best_val_accuracy {
            log.best_val_accuracy = val_accuracy;
            log.best_epoch = epoch;
            copy_values(&model, &mut best);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok((best, log))
}

/// Features of the TRAIN, VAL and TEST splits of a manifest, with any
/// per-video failures.
#[derive(Clone, Debug, Default)]
pub struct FeatureSet {
    pub clips: Vec<ClipFeatures>,
    pub failures: Vec<(String, String)>,
}

impl FeatureSet {
    pub fn extract(
        manifest: &Manifest,
        frozen: &FrozenComponents,
        transcoder: &Transcoder,
        clip_length: usize,
        stride: usize,
        workers: usize,
    ) -> Result<Self> {
        let (clips, failures) = extract_features(
            manifest,
            &manifest.records,
            frozen,
            transcoder,
            clip_length,
            stride,
            workers,
        )?;
        Ok(Self { clips, failures })
    }

    pub fn split(&self, split: Split) -> Vec<ClipFeatures> {
        self.clips.iter().filter(|c| c.split == split).cloned().collect()
    }

    pub fn filtered(&self, keep: impl Fn(&ClipFeatures) -> bool) -> Self {
        Self {
            clips: self.clips.iter().filter(|c| keep(c)).cloned().collect(),
            failures: self.failures.clone(),
        }
    }
}

pub fn require_splits(manifest: &Manifest, splits: &[Split]) -> Result<()> {
    for &s in splits {
        if manifest.count(s) == 0 {
            return Err(Error::MissingSplit(s));
        }
    }
    Ok(())
}

#[derive(Clone)]
pub struct TrainOutcome {
    pub bundle: DetectorBundle,
    pub log: TrainLog,
    pub failures: Vec<(String, String)>,
}

/// Train a detector from a manifest with the given frozen components.
///
/// The frozen components are fingerprinted before and after training and
/// the run fails if either changed.
pub fn train_detector(
    manifest: &Manifest,
    config: &TrainConfig,
    frozen: &FrozenComponents,
    transcoder: &Transcoder,
    workers: usize,
) -> Result<TrainOutcome> {
    require_splits(manifest, &[Split::Train, Split::Val])?;
    let before = frozen.fingerprints()?;
    let train_val = manifest.filtered(|r| r.split != Split::Test);
    let features = FeatureSet::extract(&train_val, frozen, transcoder, config.clip_length, config.stride, workers)?;
    let (detector, log) = train_on_features(&features.split(Split::Train), &features.split(Split::Val), config)?;
    check_frozen_unchanged(frozen, &before)?;
    Ok(TrainOutcome {
        bundle: DetectorBundle {
            detector,
            frozen: frozen.clone(),
            clip_length: config.clip_length,
            stride: config.stride,
        },
        log,
        failures: features.failures,
    })
}

pub fn check_frozen_unchanged(frozen: &FrozenComponents, before: &(String, String)) -> Result<()> {
    let after = frozen.fingerprints()?;
    if &after != before {
        return Err(Error::Precondition("a frozen component changed during training".into()));
    }
    Ok(())
}

fn decode_clips(
    manifest: &Manifest,
    records: &[&VideoRecord],
    transcoder: &Transcoder,
    clip_length: usize,
    workers: usize,
) -> Result<Vec<Clip>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Precondition(e.to_string()))?;
    let per_video: Vec<Result<Vec<Clip>>> = pool.install(|| {
        records
            .par_iter()
            .map(|r| clips_from_video(&load_video(transcoder, manifest, r)?, clip_length, 1))
            .collect()
    });
    Ok(per_video.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

/// Train the frame predictor on the REAL videos of the TRAIN split, using
/// REAL VAL videos as held-out data.
pub fn train_predictor_on_manifest(
    manifest: &Manifest,
    config: &PredictorTrainConfig,
    transcoder: &Transcoder,
    clip_length: usize,
    workers: usize,
) -> Result<(FramePredictor, PredictorTrainReport)> {
    require_splits(manifest, &[Split::Train])?;
    let real = |split: Split| -> Vec<&VideoRecord> {
        manifest
            .split(split)
            .filter(|r| r.label == Label::Real && r.degradation.is_none())
            .collect()
    };
    let train = decode_clips(manifest, &real(Split::Train), transcoder, clip_length, workers)?;
    let held_out = decode_clips(manifest, &real(Split::Val), transcoder, clip_length, workers)?;
    train_frame_predictor(train, held_out, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Variant;
    use ndarray::{Array2, Array3};
    use rand::Rng;

    #[test]
    fn accuracy_tie_counts_as_fake() {
        assert_eq!(accuracy(&[0.9, 0.9], &[Label::Fake, Label::Fake]).unwrap(), 100.0);
        assert_eq!(accuracy(&[0.5], &[Label::Fake]).unwrap(), 100.0);
        assert_eq!(accuracy(&[0.5], &[Label::Real]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[], &[]), Err(Error::EmptyEvalSet)));
    }

    #[test]
    fn default_schedule() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.learning_rate, c.model.reduction_ratio, c.clip_length), (64, 1e-3, 4, 7));
        assert_eq!((c.max_epochs, c.patience), (50, 5));
    }

    fn separable(n: usize, seed: u64, split: Split) -> Vec<ClipFeatures> {
        let mut rng = Rng64::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
                let swing = if label == Label::Fake { 2.0 } else { 0.0 };
                ClipFeatures {
                    clip_id: format!("v{i}#0"),
                    source_id: format!("v{i}"),
                    label,
                    generator_tag: None,
                    split,
                    degradation: None,
                    local_map: Array3::from_shape_fn((3, 16, 16), |_| rng.random_range(-0.005..0.005)),
                    tokens: Array2::from_shape_fn((7, 8), |(t, d)| {
                        let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
                        rng.random_range(-0.2..0.2) + if d == 0 { sign * swing } else { 0.0 }
                    }),
                }
            })
            .collect()
    }

    #[test]
    fn learns_a_separable_problem_deterministically() {
        let train = separable(96, 1, Split::Train);
        let val = separable(32, 2, Split::Val);
        let cfg = TrainConfig {
            batch_size: 16,
            max_epochs: 8,
            model: DetectorConfig {
                variant: Variant::CaFusion,
                channels: 8,
                embed_dim: 8,
                heads: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let (a, log) = train_on_features(&train, &val, &cfg).unwrap();
        assert!(log.best_val_accuracy > 90.0, "{log:?}");
        let (b, _) = train_on_features(&train, &val, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_validation_is_missing_split() {
        let train = separable(8, 1, Split::Train);
        let err = train_on_features(&train, &[], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingSplit(Split::Val)));
    }
}
