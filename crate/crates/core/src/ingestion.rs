//! Decoding, clip slicing, video-level split assignment and the optional
//! lossless frame cache.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data_model::{Clip, Frame, Manifest, Split, VideoRecord};
use crate::error::{Error, Result};
use crate::nn::Rng64;
use crate::transcoder::Transcoder;

/// Frames of one video in presentation order, pixels in `[0, 1]`.
pub fn decode_video(transcoder: &Transcoder, path: &Path) -> Result<Vec<Frame>> {
    Ok(transcoder.decode(path)?.frames)
}

/// A decoded manifest record.
#[derive(Clone, Debug)]
pub struct LoadedVideo {
    pub record: VideoRecord,
    pub frames: Vec<Frame>,
    /// Decoder reported errors and concealed them (`DECODE_DEGRADED`).
    pub decode_degraded: bool,
}

/// Decode a record. Degraded copies are decoded leniently so damaged
/// streams still yield whatever frames the decoder can conceal.
pub fn load_video(transcoder: &Transcoder, manifest: &Manifest, record: &VideoRecord) -> Result<LoadedVideo> {
    let path = manifest.resolve(record);
    let decoded = if record.degradation.is_some() {
        transcoder.decode_lenient(&path)?
    } else {
        transcoder.decode(&path)?
    };
    if decoded.degraded {
        warn!("DECODE_DEGRADED: {}", path.display());
    }
    Ok(LoadedVideo {
        record: record.clone(),
        frames: decoded.frames,
        decode_degraded: decoded.degraded,
    })
}

/// Clip start indices `0, stride, 2·stride, …` with `start + clip_length ≤ frame_count`.
pub fn slice_clips(frame_count: usize, clip_length: usize, stride: usize) -> Result<Vec<usize>> {
    if clip_length < 2 || stride == 0 {
        return Err(Error::Precondition(format!(
            "need clip_length ≥ 2 and stride ≥ 1, got {clip_length} and {stride}"
        )));
    }
    if frame_count < clip_length {
        return Ok(Vec::new());
    }
    Ok((0..=frame_count - clip_length).step_by(stride).collect())
}

/// Every clip of a set of videos as `(source_id, start)` pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipIndex {
    pub entries: Vec<(String, usize)>,
    pub clip_length: usize,
    pub stride: usize,
}

impl ClipIndex {
    pub fn build<'a>(
        records: impl IntoIterator<Item = &'a VideoRecord>,
        clip_length: usize,
        stride: usize,
    ) -> Result<Self> {
        let mut entries = Vec::new();
        for r in records {
            let id = r.source_id();
            for start in slice_clips(r.frame_count as usize, clip_length, stride)? {
                entries.push((id.clone(), start));
            }
        }
        Ok(Self {
            entries,
            clip_length,
            stride,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Materialize the clips of one decoded video.
pub fn clips_from_video(video: &LoadedVideo, clip_length: usize, stride: usize) -> Result<Vec<Clip>> {
    let r = &video.record;
    slice_clips(video.frames.len(), clip_length, stride)?
        .into_iter()
        .map(|s| {
            Clip::new(
                video.frames[s..s + clip_length].to_vec(),
                clip_length,
                r.source_id(),
                r.label,
                r.generator_tag.clone(),
            )
            .map(|c| c.with_degradation(r.degradation))
        })
        .collect()
}

/// Split counts for a stratum of `n` records by largest-remainder rounding.
pub fn split_counts(n: usize, ratio: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratio.iter().map(|r| r * n as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    for i in 0..3 {
        counts[i] = (exact[i] + 1e-9).floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    // stable sort keeps TRAIN, VAL, TEST order among equal remainders
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Assign each record to TRAIN/VAL/TEST, stratified by `(label, generator_tag)`.
///
/// Within a stratum records are ordered by path, shuffled with the seed and
/// cut by [`split_counts`]. Returns the manifest and any warnings.
pub fn assign_splits(records: Vec<VideoRecord>, ratio: [f64; 3], seed: u64) -> Result<(Manifest, Vec<String>)> {
    let sum: f64 = ratio.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || ratio.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::Precondition(format!("split ratio {ratio:?} must be nonnegative and sum to 1")));
    }
    let mut strata: BTreeMap<_, Vec<VideoRecord>> = BTreeMap::new();
    for r in records {
        strata.entry(r.stratum()).or_default().push(r);
    }
    let mut rng = Rng64::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let mut out = Vec::new();
    for ((label, tag), mut group) in strata {
        if group.len() < 3 {
            let msg = format!(
                "EmptyStratum: ({label}, {}) has only {} records",
                tag.as_deref().unwrap_or("-"),
                group.len()
            );
            warn!("{msg}");
            warnings.push(msg);
        }
        group.sort_by(|a, b| a.path.cmp(&b.path));
        group.shuffle(&mut rng);
        let counts = split_counts(group.len(), ratio);
        let mut it = group.into_iter();
        for (split, n) in Split::ALL.into_iter().zip(counts) {
            for mut r in it.by_ref().take(n) {
                r.split = split;
                out.push(r);
            }
        }
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok((Manifest::new(out, seed, ratio), warnings))
}

/// Lossless frame cache laid out as `<root>/<source_id>/<frame_index>.png`.
#[derive(Clone, Debug)]
pub struct FrameCache {
    root: PathBuf,
}

impl FrameCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn frame_path(&self, source_id: &str, index: usize) -> PathBuf {
        self.root.join(source_id).join(format!("{index}.png"))
    }

    pub fn store(&self, source_id: &str, frames: &[Frame]) -> Result<()> {
        std::fs::create_dir_all(self.root.join(source_id))?;
        for f in frames {
            let (h, w) = f.shape();
            image::save_buffer(
                self.frame_path(source_id, f.timestamp_index()),
                &f.to_rgb8(),
                w as u32,
                h as u32,
                image::ColorType::Rgb8,
            )?;
        }
        Ok(())
    }

    /// All cached frames of a source, or `None` if nothing is cached.
    pub fn load(&self, source_id: &str) -> Result<Option<Vec<Frame>>> {
        let mut frames = Vec::new();
        loop {
            let p = self.frame_path(source_id, frames.len());
            if !p.is_file() {
                break;
            }
            let img = image::open(&p)?.to_rgb8();
            let (w, h) = img.dimensions();
            frames.push(Frame::from_rgb8(w as usize, h as usize, img.as_raw(), frames.len())?);
        }
        Ok((!frames.is_empty()).then_some(frames))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Label;

    #[test]
    fn slice_examples() {
        assert_eq!(slice_clips(24, 7, 1).unwrap(), (0..18).collect::<Vec<_>>());
        assert_eq!(slice_clips(7, 7, 1).unwrap(), vec![0]);
        assert!(slice_clips(6, 7, 1).unwrap().is_empty());
        assert_eq!(slice_clips(24, 7, 5).unwrap(), vec![0, 5, 10, 15]);
        assert!(slice_clips(24, 1, 1).is_err());
        assert!(slice_clips(24, 7, 0).is_err());
    }

    #[test]
    fn split_count_examples() {
        assert_eq!(split_counts(1000, [0.8, 0.1, 0.1]), [800, 100, 100]);
        assert_eq!(split_counts(10, [0.8, 0.1, 0.1]), [8, 1, 1]);
        assert_eq!(split_counts(50, [0.8, 0.1, 0.1]), [40, 5, 5]);
        assert_eq!(split_counts(0, [0.8, 0.1, 0.1]), [0, 0, 0]);
    }

    #[test]
    fn small_strata_warn() {
        let recs = vec![VideoRecord {
            path: "a.hevc".into(),
            label: Label::Real,
            generator_tag: None,
            split: Split::Train,
            frame_count: 24,
            degradation: None,
        }];
        let (m, warnings) = assign_splits(recs, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!(m.records.len(), 1);
        assert!(warnings[0].starts_with("EmptyStratum"));
    }
}
