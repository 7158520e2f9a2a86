//! Shared value types: frames, clips, labels, manifests and degradation tags.
//!
//! A manifest is stored as line-delimited JSON. The first line is a header
//! object carrying the split seed and ratio, every following line is one
//! [`VideoRecord`]:
//!
//! ```text
//! {"manifest_version":1,"split_seed":7,"split_ratio":[0.8,0.1,0.1]}
//! {"path":"videos/real_0000.hevc","label":"REAL","generator_tag":null,"split":"TRAIN","frame_count":24}
//! {"path":"videos/drift_0003.hevc","label":"FAKE","generator_tag":"synth-drift","split":"TEST","frame_count":24}
//! ```
//!
//! Degraded copies carry an extra `"degradation":{"operation":"H265_CRF","severity":2}`
//! field. Relative paths are resolved against the manifest's directory.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of temporally adjacent frames per clip.
pub const CLIP_LENGTH: usize = 7;

pub const MIN_FRAME_SIDE: usize = 8;

pub const MANIFEST_VERSION: u32 = 1;

pub const DEFAULT_SPLIT_RATIO: [f64; 3] = [0.8, 0.1, 0.1];

const RATIO_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pixels: Array3<f64>,
    timestamp_index: usize,
}

impl Frame {
    /// `pixels` is H×W×3 with every value finite and in `[0, 1]`.
    pub fn new(pixels: Array3<f64>, timestamp_index: usize) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::InvalidFrame(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_FRAME_SIDE || w < MIN_FRAME_SIDE {
            return Err(Error::InvalidFrame(format!(
                "frame {h}x{w} is smaller than {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}"
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidFrame(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Self {
            pixels,
            timestamp_index,
        })
    }

    /// Packed 8-bit RGB, row-major, divided by 255.
    pub fn from_rgb8(width: usize, height: usize, data: &[u8], timestamp_index: usize) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(width * height * 3, data.len()));
        }
        let pixels = Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
            f64::from(data[(y * width + x) * 3 + c]) / 255.0
        });
        Self::new(pixels, timestamp_index)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn pixels(&self) -> ArrayView3<'_, f64> {
        self.pixels.view()
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn timestamp_index(&self) -> usize {
        self.timestamp_index
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.mean().unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "REAL",
            Label::Fake => "FAKE",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "TRAIN",
            Split::Val => "VAL",
            Split::Test => "TEST",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Operation {
    BitError,
    H265Abr,
    H265Crf,
    None,
}

impl Operation {
    pub const LOSSY: [Operation; 3] = [Operation::BitError, Operation::H265Abr, Operation::H265Crf];

    pub fn as_str(self) -> &'static str {
        match self {
            Operation::BitError => "BIT_ERROR",
            Operation::H265Abr => "H265_ABR",
            Operation::H265Crf => "H265_CRF",
            Operation::None => "NONE",
        }
    }

    /// Row group label used in robustness tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Operation::BitError => "Bit Error",
            Operation::H265Abr => "H.265 ABR",
            Operation::H265Crf => "H.265 CRF",
            Operation::None => "Raw Data",
        }
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Operation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "BIT_ERROR" => Ok(Operation::BitError),
            "H265_ABR" | "ABR" => Ok(Operation::H265Abr),
            "H265_CRF" | "CRF" => Ok(Operation::H265Crf),
            "NONE" => Ok(Operation::None),
            other => Err(Error::Precondition(format!("unknown operation '{other}'"))),
        }
    }
}

/// Which lossy operation was applied and at what severity (1..=3, or 0 for none).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub operation: Operation,
    pub severity: u8,
}

impl DegradationSpec {
    pub const NONE: DegradationSpec = DegradationSpec {
        operation: Operation::None,
        severity: 0,
    };

    pub fn new(operation: Operation, severity: u8) -> Result<Self> {
        let spec = Self {
            operation,
            severity,
        };
        if spec.is_valid() {
            Ok(spec)
        } else {
            Err(Error::UnknownSeverity {
                operation: operation.to_string(),
                severity,
            })
        }
    }

    pub fn is_valid(&self) -> bool {
        match self.operation {
            Operation::None => self.severity == 0,
            _ => (1..=3).contains(&self.severity),
        }
    }

    pub fn tag(&self) -> String {
        format!("{}_{}", self.operation, self.severity)
    }
}

/// A run of exactly `clip_length` consecutive frames from one source video.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    frames: Vec<Frame>,
    pub source_id: String,
    pub label: Label,
    pub generator_tag: Option<String>,
    pub degradation_tag: Option<DegradationSpec>,
}

impl Clip {
    pub fn new(
        frames: Vec<Frame>,
        clip_length: usize,
        source_id: impl Into<String>,
        label: Label,
        generator_tag: Option<String>,
    ) -> Result<Self> {
        if frames.len() != clip_length {
            return Err(Error::InvalidClip(format!(
                "expected {clip_length} frames, got {}",
                frames.len()
            )));
        }
        let shape = frames[0].shape();
        for pair in frames.windows(2) {
            if pair[1].timestamp_index() != pair[0].timestamp_index() + 1 {
                return Err(Error::InvalidClip(format!(
                    "timestamps {} and {} are not consecutive",
                    pair[0].timestamp_index(),
                    pair[1].timestamp_index()
                )));
            }
            if pair[1].shape() != shape {
                return Err(Error::shape(shape, pair[1].shape()));
            }
        }
        Ok(Self {
            frames,
            source_id: source_id.into(),
            label,
            generator_tag,
            degradation_tag: None,
        })
    }

    pub fn with_degradation(mut self, spec: Option<DegradationSpec>) -> Self {
        self.degradation_tag = spec;
        self
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn start_index(&self) -> usize {
        self.frames[0].timestamp_index()
    }

    pub fn clip_id(&self) -> String {
        clip_id(&self.source_id, self.start_index())
    }
}

pub fn clip_id(source_id: &str, start: usize) -> String {
    format!("{source_id}#{start}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub path: PathBuf,
    pub label: Label,
    pub generator_tag: Option<String>,
    pub split: Split,
    pub frame_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degradation: Option<DegradationSpec>,
}

impl VideoRecord {
    /// Opaque identifier: the file stem of `path`.
    pub fn source_id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.to_string_lossy().into_owned())
    }

    /// Stratum used for split assignment.
    pub fn stratum(&self) -> (Label, Option<String>) {
        (self.label, self.generator_tag.clone())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    manifest_version: u32,
    split_seed: u64,
    split_ratio: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<VideoRecord>,
    pub split_seed: u64,
    pub split_ratio: [f64; 3],
    /// Directory that relative record paths resolve against. Not serialized.
    pub root: PathBuf,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            split_seed: 0,
            split_ratio: DEFAULT_SPLIT_RATIO,
            root: PathBuf::new(),
        }
    }
}

impl Manifest {
    pub fn new(records: Vec<VideoRecord>, split_seed: u64, split_ratio: [f64; 3]) -> Self {
        Self {
            records,
            split_seed,
            split_ratio,
            root: PathBuf::new(),
        }
    }

    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = root.into();
        self
    }

    pub fn resolve(&self, record: &VideoRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.root.join(&record.path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Generator tags of FAKE records, sorted and deduplicated.
    pub fn generators(&self) -> Vec<String> {
        let mut tags: Vec<String> = self
            .records
            .iter()
            .filter_map(|r| r.generator_tag.clone())
            .collect();
        tags.sort();
        tags.dedup();
        tags
    }

    /// Sub-manifest with all REAL records plus FAKE records of one generator.
    pub fn for_generator(&self, generator: &str) -> Manifest {
        self.filtered(|r| r.label == Label::Real || r.generator_tag.as_deref() == Some(generator))
    }

    pub fn filtered(&self, keep: impl Fn(&VideoRecord) -> bool) -> Manifest {
        Manifest {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            split_seed: self.split_seed,
            split_ratio: self.split_ratio,
            root: self.root.clone(),
        }
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let header = ManifestHeader {
            manifest_version: MANIFEST_VERSION,
            split_seed: self.split_seed,
            split_ratio: self.split_ratio,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for record in &self.records {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_from(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines().enumerate().filter(|(_, l)| {
            l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true)
        });
        let (_, header_line) = lines
            .next()
            .ok_or_else(|| Error::Manifest("missing header line".into()))?;
        let header: ManifestHeader = serde_json::from_str(&header_line?)
            .map_err(|e| Error::Manifest(format!("bad header: {e}")))?;
        if header.manifest_version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest version {}",
                header.manifest_version
            )));
        }
        let mut records = Vec::new();
        for (lineno, line) in lines {
            let record: VideoRecord = serde_json::from_str(&line?)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", lineno + 1)))?;
            records.push(record);
        }
        Ok(Manifest::new(records, header.split_seed, header.split_ratio))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::read_from(text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self::read_from(std::io::BufReader::new(file))?.with_root(root))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut writer = std::io::BufWriter::new(file);
        self.write_to(&mut writer)?;
        writer.flush()?;
        Ok(())
    }
}

/// One entry per invariant violation, each naming the offending record index.
pub fn validate_manifest(m: &Manifest) -> Vec<String> {
    let mut violations = Vec::new();
    let sum: f64 = m.split_ratio.iter().sum();
    if (sum - 1.0).abs() > RATIO_TOLERANCE {
        violations.push(format!("ratios sum ≠ 1 (sum = {sum})"));
    }
    if m.split_ratio.iter().any(|r| !r.is_finite() || *r < 0.0) {
        violations.push(format!("ratios must be nonnegative: {:?}", m.split_ratio));
    }
    let mut seen_paths: HashMap<&Path, usize> = HashMap::new();
    let mut seen_ids: HashMap<(String, Option<String>), usize> = HashMap::new();
    for (i, r) in m.records.iter().enumerate() {
        match (r.label, r.generator_tag.as_deref()) {
            (Label::Real, Some(tag)) => violations.push(format!(
                "record {i}: REAL record carries generator_tag \"{tag}\""
            )),
            (Label::Fake, None) => {
                violations.push(format!("record {i}: FAKE record has no generator_tag"))
            }
            (Label::Fake, Some(tag)) if tag.trim().is_empty() => {
                violations.push(format!("record {i}: FAKE record has an empty generator_tag"))
            }
            _ => {}
        }
        if r.frame_count == 0 {
            violations.push(format!("record {i}: frame_count must be positive"));
        }
        if let Some(d) = r.degradation {
            if !d.is_valid() {
                violations.push(format!(
                    "record {i}: degradation {} with severity {} is inconsistent",
                    d.operation, d.severity
                ));
            }
        }
        if let Some(j) = seen_paths.insert(r.path.as_path(), i) {
            violations.push(format!("record {i}: duplicates path of record {j}"));
        }
        // degraded copies of one source share its id but differ in tag
        if let Some(j) = seen_ids.insert((r.source_id(), r.degradation.map(|d| d.tag())), i) {
            violations.push(format!("record {i}: duplicates source id of record {j}"));
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(path: &str, label: Label, tag: Option<&str>, split: Split) -> VideoRecord {
        VideoRecord {
            path: path.into(),
            label,
            generator_tag: tag.map(str::to_string),
            split,
            frame_count: 24,
            degradation: None,
        }
    }

    fn valid_manifest() -> Manifest {
        Manifest::new(
            vec![
                record("a.hevc", Label::Real, None, Split::Train),
                record("b.hevc", Label::Fake, Some("potat1"), Split::Val),
                record("c.hevc", Label::Fake, Some("zeroscope"), Split::Test),
            ],
            7,
            DEFAULT_SPLIT_RATIO,
        )
    }

    #[test]
    fn valid_manifest_has_no_violations() {
        assert!(validate_manifest(&valid_manifest()).is_empty());
    }

    #[test]
    fn real_record_with_generator_tag_is_flagged() {
        let mut m = valid_manifest();
        m.records[0].generator_tag = Some("potat1".into());
        let v = validate_manifest(&m);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("record 0"), "{v:?}");
    }

    #[test]
    fn ratio_sum_is_checked() {
        let mut m = valid_manifest();
        m.split_ratio = [0.8, 0.1, 0.2];
        let v = validate_manifest(&m);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("ratios sum ≠ 1"));
    }

    #[test]
    fn fake_without_tag_and_duplicates_are_flagged() {
        let mut m = valid_manifest();
        m.records[1].generator_tag = None;
        m.records.push(m.records[2].clone());
        let v = validate_manifest(&m);
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn frame_rejects_out_of_range_and_tiny() {
        assert!(Frame::new(Array3::from_elem((8, 8, 3), 1.5), 0).is_err());
        assert!(Frame::new(Array3::from_elem((7, 8, 3), 0.5), 0).is_err());
        assert!(Frame::new(Array3::from_elem((8, 8, 1), 0.5), 0).is_err());
        assert!(Frame::new(Array3::from_elem((8, 8, 3), f64::NAN), 0).is_err());
        assert!(Frame::new(Array3::from_elem((8, 8, 3), 0.5), 0).is_ok());
    }

    #[test]
    fn clip_requires_consecutive_timestamps() {
        let f = |t| Frame::new(Array3::zeros((8, 8, 3)), t).unwrap();
        let ok = Clip::new((3..10).map(f).collect(), CLIP_LENGTH, "v", Label::Real, None);
        assert!(ok.is_ok());
        let mut frames: Vec<_> = (0..7).map(f).collect();
        frames[4] = f(9);
        assert!(Clip::new(frames, CLIP_LENGTH, "v", Label::Real, None).is_err());
        assert!(Clip::new((0..6).map(f).collect(), CLIP_LENGTH, "v", Label::Real, None).is_err());
    }

    #[test]
    fn degradation_severity_zero_iff_none() {
        assert!(DegradationSpec::new(Operation::None, 0).is_ok());
        assert!(DegradationSpec::new(Operation::None, 1).is_err());
        assert!(DegradationSpec::new(Operation::H265Crf, 0).is_err());
        assert!(DegradationSpec::new(Operation::H265Crf, 4).is_err());
        assert!(DegradationSpec::new(Operation::BitError, 3).is_ok());
    }

    #[test]
    fn rgb8_conversion_divides_by_255() {
        let data: Vec<u8> = (0..8 * 8 * 3).map(|i| (i % 256) as u8).collect();
        let frame = Frame::from_rgb8(8, 8, &data, 0).unwrap();
        assert_eq!(frame.pixels()[[0, 0, 2]], 2.0 / 255.0);
        assert_eq!(frame.to_rgb8(), data);
    }
}
