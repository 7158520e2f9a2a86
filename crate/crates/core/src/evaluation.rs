//! Clip-level scoring and the three report shapes: cross-generator matrix,
//! robustness table and component ablation.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::data_model::{DegradationSpec, Label, Manifest, Operation, Split};
use crate::detector::{ClipFeatures, Detector, DetectorBundle, FrozenComponents, Variant};
use crate::error::{Error, Result};
use crate::nn::Rng64;
use crate::training::{accuracy, require_splits, train_on_features, FeatureSet, TrainConfig};
use crate::transcoder::Transcoder;

/// One line of the per-clip probability dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipPrediction {
    pub clip_id: String,
    pub label: Label,
    /// Probability of FAKE.
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipEvaluation {
    pub accuracy: f64,
    pub predictions: Vec<ClipPrediction>,
}

pub fn evaluate_clips(detector: &Detector, clips: &[ClipFeatures]) -> Result<ClipEvaluation> {
    if clips.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let probs = detector.predict(clips, 64)?;
    let predictions: Vec<ClipPrediction> = clips
        .iter()
        .zip(&probs)
        .map(|(c, &p)| ClipPrediction {
            clip_id: c.clip_id.clone(),
            label: c.label,
            probability: p,
        })
        .collect();
    Ok(ClipEvaluation {
        accuracy: score_predictions(&predictions)?,
        predictions,
    })
}

pub fn score_predictions(predictions: &[ClipPrediction]) -> Result<f64> {
    let probs: Vec<f64> = predictions.iter().map(|p| p.probability).collect();
    let labels: Vec<Label> = predictions.iter().map(|p| p.label).collect();
    accuracy(&probs, &labels)
}

pub fn write_predictions(path: impl AsRef<Path>, predictions: &[ClipPrediction]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in predictions {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<ClipPrediction>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: ClipPrediction = serde_json::from_str(&line)?;
        if !(0.0..=1.0).contains(&p.probability) {
            return Err(Error::Precondition(format!(
                "probability {} of {} outside [0, 1]",
                p.probability, p.clip_id
            )));
        }
        out.push(p);
    }
    Ok(out)
}

/// Accuracy of a probability dump produced by any detector.
pub fn score_external(path: impl AsRef<Path>) -> Result<f64> {
    score_predictions(&read_predictions(path)?)
}

/// A report cell: an accuracy in percent or a marker for a cell that could
/// not be computed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cell {
    Accuracy(f64),
    Failed,
}

impl Cell {
    pub fn value(self) -> Option<f64> {
        match self {
            Cell::Accuracy(v) => Some(v),
            Cell::Failed => None,
        }
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Accuracy(v) => write!(f, "{v:.2}"),
            Cell::Failed => f.write_str("FAILED"),
        }
    }
}

impl Serialize for Cell {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Cell::Accuracy(v) => s.serialize_f64(*v),
            Cell::Failed => s.serialize_str("FAILED"),
        }
    }
}

impl<'de> Deserialize<'de> for Cell {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::Number(n) => Ok(Cell::Accuracy(n.as_f64().unwrap_or(f64::NAN))),
            serde_json::Value::String(s) if s == "FAILED" => Ok(Cell::Failed),
            other => Err(serde::de::Error::custom(format!("bad report cell {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Leading text columns.
    pub labels: Vec<String>,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub config_hash: String,
    pub seed: u64,
    /// Anything else worth keeping: per-seed values, clip counts, failures.
    pub details: BTreeMap<String, serde_json::Value>,
}

/// A table of accuracies laid out like the corresponding paper table.
///
/// Wall-clock timestamps are kept out of the report so that reruns produce
/// identical files; see [`write_run_info`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn row(&self, labels: &[&str]) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.labels.iter().map(String::as_str).eq(labels.iter().copied()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Plain-text table with aligned columns.
    pub fn to_text(&self) -> String {
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.labels.iter().cloned().chain(r.cells.iter().map(Cell::to_string)).collect())
            .collect();
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.chars().count()).collect();
        for row in &body {
            for (i, v) in row.iter().enumerate() {
                if i >= widths.len() {
                    widths.push(0);
                }
                widths[i] = widths[i].max(v.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let parts: Vec<String> = widths
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let v = cells.get(i).map(String::as_str).unwrap_or("");
                    format!("{v:<w$}")
                })
                .collect();
            parts.join(" | ").trim_end().to_string()
        };
        let mut out = format!("{}\n", self.title);
        out += &line(&self.columns);
        out.push('\n');
        out += &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-");
        out.push('\n');
        for row in &body {
            out += &line(row);
            out.push('\n');
        }
        out
    }

    /// Write `<stem>.json` and `<stem>.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json())?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// SHA-256 of the JSON form of any configuration value.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Record wall-clock start and end times of a run next to its reports.
pub fn write_run_info(dir: impl AsRef<Path>, started: std::time::SystemTime, command: &str) -> Result<()> {
    let secs = |t: std::time::SystemTime| t.duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let now = std::time::SystemTime::now();
    let info = serde_json::json!({
        "command": command,
        "started_unix": secs(started),
        "finished_unix": secs(now),
        "elapsed_seconds": now.duration_since(started).map(|d| d.as_secs_f64()).unwrap_or(0.0),
    });
    std::fs::create_dir_all(dir.as_ref())?;
    std::fs::write(dir.as_ref().join("run_info.json"), serde_json::to_string_pretty(&info)? + "\n")?;
    Ok(())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Clips of one split that are REAL or FAKE from `generator`.
fn generator_clips(clips: &[ClipFeatures], split: Split, generator: &str) -> Vec<ClipFeatures> {
    clips
        .iter()
        .filter(|c| c.split == split && (c.label == Label::Real || c.generator_tag.as_deref() == Some(generator)))
        .cloned()
        .collect()
}

fn fake_generators(clips: &[ClipFeatures]) -> Vec<String> {
    let mut g: Vec<String> = clips
        .iter()
        .filter(|c| c.label == Label::Fake)
        .filter_map(|c| c.generator_tag.clone())
        .collect();
    g.sort();
    g.dedup();
    g
}

/// Train on each generator's fakes (plus all reals) and test on every
/// generator's TEST split. One row per training generator, with the row
/// mean in the last column.
pub fn cross_generator_matrix(features: &FeatureSet, config: &TrainConfig) -> Result<EvalReport> {
    let generators = fake_generators(&features.clips);
    if generators.len() < 2 {
        return Err(Error::Precondition(format!(
            "cross-generator evaluation needs at least 2 generators, found {}",
            generators.len()
        )));
    }
    let mut rows = Vec::new();
    let mut details = BTreeMap::new();
    for train_gen in &generators {
        let trained = train_on_features(
            &generator_clips(&features.clips, Split::Train, train_gen),
            &generator_clips(&features.clips, Split::Val, train_gen),
            config,
        );
        let mut cells = Vec::new();
        match trained {
            Ok((detector, log)) => {
                details.insert(format!("train_log/{train_gen}"), serde_json::to_value(&log)?);
                for test_gen in &generators {
                    let test = generator_clips(&features.clips, Split::Test, test_gen);
                    cells.push(match evaluate_clips(&detector, &test) {
                        Ok(e) => Cell::Accuracy(e.accuracy),
                        Err(e) => {
                            details.insert(format!("error/{train_gen}/{test_gen}"), e.to_string().into());
                            Cell::Failed
                        }
                    });
                }
            }
            Err(e) => {
                details.insert(format!("error/{train_gen}"), e.to_string().into());
                cells = vec![Cell::Failed; generators.len()];
            }
        }
        let values: Vec<f64> = cells.iter().filter_map(|c| c.value()).collect();
        cells.push(if values.len() == generators.len() {
            Cell::Accuracy(mean(&values))
        } else {
            Cell::Failed
        });
        rows.push(ReportRow {
            labels: vec![train_gen.clone(), "Ours".into()],
            cells,
        });
    }
    if !features.failures.is_empty() {
        details.insert("failed_videos".into(), serde_json::to_value(&features.failures)?);
    }
    let mut columns = vec!["Train\\Test".to_string(), "Method".to_string()];
    columns.extend(generators.iter().cloned());
    columns.push("Ave.".into());
    Ok(EvalReport {
        title: "Performance evaluation of generalization capability cross different generators (%)".into(),
        columns,
        rows,
        metadata: ReportMetadata {
            config_hash: config_hash(config),
            seed: config.seed,
            details,
        },
    })
}

/// Check the manifest carries enough generators, extract features and run
/// [`cross_generator_matrix`].
pub fn cross_generator_from_manifest(
    manifest: &Manifest,
    config: &TrainConfig,
    frozen: &FrozenComponents,
    transcoder: &Transcoder,
    workers: usize,
) -> Result<EvalReport> {
    let generators = manifest.generators();
    if generators.len() < 2 {
        return Err(Error::Precondition(format!(
            "cross-generator evaluation needs at least 2 generators, found {}",
            generators.len()
        )));
    }
    require_splits(manifest, &Split::ALL)?;
    let features = FeatureSet::extract(manifest, frozen, transcoder, config.clip_length, config.stride, workers)?;
    cross_generator_matrix(&features, config)
}

/// Row order of the robustness table.
pub fn robustness_rows() -> Vec<Option<DegradationSpec>> {
    let mut rows = vec![None];
    for op in Operation::LOSSY {
        for sev in 1..=3 {
            rows.push(Some(DegradationSpec::new(op, sev).expect("valid severity")));
        }
    }
    rows
}

/// Accuracy of one detector on clean and degraded TEST clips.
pub fn robustness_from_features(detector: &Detector, features: &FeatureSet, seed: u64) -> Result<EvalReport> {
    let test: Vec<&ClipFeatures> = features.clips.iter().filter(|c| c.split == Split::Test).collect();
    if !test.iter().any(|c| c.degradation.is_none()) {
        return Err(Error::MissingBaseline);
    }
    let mut rows = Vec::new();
    let mut details = BTreeMap::new();
    for spec in robustness_rows() {
        let clips: Vec<ClipFeatures> = test.iter().filter(|c| c.degradation == spec).map(|c| (*c).clone()).collect();
        let (op, sev) = match spec {
            None => (Operation::None.display_name().to_string(), "None".to_string()),
            Some(s) => (s.operation.display_name().to_string(), s.severity.to_string()),
        };
        let key = spec.map_or("NONE".to_string(), |s| s.tag());
        details.insert(format!("clips/{key}"), clips.len().into());
        let cell = match evaluate_clips(detector, &clips) {
            Ok(e) => Cell::Accuracy(e.accuracy),
            Err(e) => {
                details.insert(format!("error/{key}"), e.to_string().into());
                Cell::Failed
            }
        };
        rows.push(ReportRow {
            labels: vec![op, sev],
            cells: vec![cell],
        });
    }
    if !features.failures.is_empty() {
        details.insert("failed_videos".into(), serde_json::to_value(&features.failures)?);
    }
    Ok(EvalReport {
        title: "Robustness evaluation against different lossy operations (%)".into(),
        columns: vec!["Lossy operations".into(), "Severity".into(), "Ours".into()],
        rows,
        metadata: ReportMetadata {
            config_hash: config_hash(&detector.config),
            seed,
            details,
        },
    })
}

/// Evaluate a detector trained on clean data against a degraded manifest
/// (which must also list the clean TEST videos as the baseline).
pub fn robustness_eval(
    bundle: &DetectorBundle,
    degraded: &Manifest,
    transcoder: &Transcoder,
    workers: usize,
    seed: u64,
) -> Result<EvalReport> {
    let test = degraded.filtered(|r| r.split == Split::Test);
    if !test.records.iter().any(|r| r.degradation.is_none()) {
        return Err(Error::MissingBaseline);
    }
    let features = FeatureSet::extract(&test, &bundle.frozen, transcoder, bundle.clip_length, bundle.stride, workers)?;
    robustness_from_features(&bundle.detector, &features, seed)
}

/// Train and test the three component variants with each seed. The
/// reported accuracy is the median over seeds; every per-seed value is kept
/// in the metadata.
pub fn ablation_run(features: &FeatureSet, config: &TrainConfig, seeds: &[u64]) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::Precondition("ablation needs at least one seed".into()));
    }
    let train = features.split(Split::Train);
    let val = features.split(Split::Val);
    let test = features.split(Split::Test);
    let mut rows = Vec::new();
    let mut details = BTreeMap::new();
    for variant in Variant::ALL {
        let mut accs = Vec::new();
        for &seed in seeds {
            let mut cfg = config.clone();
            cfg.seed = seed;
            cfg.model.variant = variant;
            let (detector, _) = train_on_features(&train, &val, &cfg)?;
            accs.push(evaluate_clips(&detector, &test)?.accuracy);
        }
        details.insert(format!("per_seed/{variant:?}"), serde_json::to_value(&accs)?);
        let mark = |on: bool| if on { "✓" } else { "" }.to_string();
        rows.push(ReportRow {
            labels: vec![
                mark(true),
                mark(variant.uses_local()),
                mark(variant == Variant::CaFusion),
            ],
            cells: vec![Cell::Accuracy(median(&accs))],
        });
    }
    details.insert("seeds".into(), serde_json::to_value(seeds)?);
    Ok(EvalReport {
        title: "The ablation study of key components (%)".into(),
        columns: vec!["f_glob".into(), "f_local".into(), "CA-based fusion".into(), "Acc".into()],
        rows,
        metadata: ReportMetadata {
            config_hash: config_hash(config),
            seed: seeds[0],
            details,
        },
    })
}

/// Control run: TRAIN and VAL labels are shuffled among clips before
/// training, then the detector is scored against the true TEST labels.
pub fn random_label_control(features: &FeatureSet, config: &TrainConfig) -> Result<f64> {
    let mut rng = Rng64::seed_from_u64(config.seed ^ 0xc0_47_801);
    let mut shuffled = |split: Split| {
        let mut clips = features.split(split);
        let mut labels: Vec<Label> = clips.iter().map(|c| c.label).collect();
        labels.shuffle(&mut rng);
        for (c, l) in clips.iter_mut().zip(labels) {
            c.label = l;
        }
        clips
    };
    let train = shuffled(Split::Train);
    let val = shuffled(Split::Val);
    let (detector, _) = train_on_features(&train, &val, config)?;
    Ok(evaluate_clips(&detector, &features.split(Split::Test))?.accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EvalReport {
        EvalReport {
            title: "t".into(),
            columns: vec!["a".into(), "b".into()],
            rows: vec![
                ReportRow {
                    labels: vec!["x".into()],
                    cells: vec![Cell::Accuracy(91.5)],
                },
                ReportRow {
                    labels: vec!["longer".into()],
                    cells: vec![Cell::Failed],
                },
            ],
            metadata: ReportMetadata {
                config_hash: "h".into(),
                seed: 1,
                details: BTreeMap::new(),
            },
        }
    }

    #[test]
    fn cells_round_trip_through_json() {
        let r = report();
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_json().contains("\"FAILED\""));
    }

    #[test]
    fn text_table_is_aligned() {
        let text = report().to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "a      | b");
        assert_eq!(lines[3], "x      | 91.50");
        assert_eq!(lines[4], "longer | FAILED");
    }

    #[test]
    fn robustness_has_ten_rows() {
        let rows = robustness_rows();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows[0], None);
        assert_eq!(rows[9].unwrap().tag(), "H265_CRF_3");
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
