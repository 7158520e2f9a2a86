//! Procedural benchmark videos.
//!
//! Every video shows two textured objects (ellipses or convex polygons) over
//! a static textured background. Real videos move the objects along smooth
//! paths; fake videos add per-frame positional jitter, per-frame appearance
//! drift (area, aspect ratio, brightness), or both.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_model::{Frame, Label, Manifest, Split, VideoRecord, CLIP_LENGTH, DEFAULT_SPLIT_RATIO};
use crate::error::{Error, Result};
use crate::ingestion::assign_splits;
use crate::nn::Rng64;
use crate::transcoder::Transcoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MotionModel {
    ConstantVelocity,
    SinePath,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FakeDefect {
    AppearanceDrift,
    MotionJitter,
    Both,
}

impl FakeDefect {
    /// Generator tag used for fakes of this family.
    pub fn generator_tag(self) -> &'static str {
        match self {
            FakeDefect::AppearanceDrift => "synth-drift",
            FakeDefect::MotionJitter => "synth-jitter",
            FakeDefect::Both => "synth-both",
        }
    }

    fn jitter(self) -> bool {
        matches!(self, FakeDefect::MotionJitter | FakeDefect::Both)
    }

    fn drift(self) -> bool {
        matches!(self, FakeDefect::AppearanceDrift | FakeDefect::Both)
    }

    fn stream(self) -> u64 {
        match self {
            FakeDefect::AppearanceDrift => 1,
            FakeDefect::MotionJitter => 2,
            FakeDefect::Both => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub frames_per_video: usize,
    pub n_videos_per_class: usize,
    pub motion_model: MotionModel,
    /// One block of `n_videos_per_class` fakes per entry.
    pub fake_defects: Vec<FakeDefect>,
    pub defect_magnitude: f64,
    pub seed: u64,
    /// Constant rate factor of the high-quality master encode.
    pub encode_crf: u8,
    pub split_ratio: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames_per_video: 24,
            n_videos_per_class: 50,
            motion_model: MotionModel::ConstantVelocity,
            fake_defects: vec![FakeDefect::Both],
            defect_magnitude: 0.3,
            seed: 0,
            encode_crf: 12,
            split_ratio: DEFAULT_SPLIT_RATIO,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::Precondition(format!(
                "synthetic frames must be at least 32×32, got {}×{}",
                self.height, self.width
            )));
        }
        if self.frames_per_video < CLIP_LENGTH {
            return Err(Error::Precondition(format!(
                "frames_per_video {} is below the clip length {CLIP_LENGTH}",
                self.frames_per_video
            )));
        }
        if !(self.defect_magnitude > 0.0) || !self.defect_magnitude.is_finite() {
            return Err(Error::Precondition(format!(
                "defect_magnitude must be positive, got {}",
                self.defect_magnitude
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { rx: f64, ry: f64 },
    /// Convex polygon given by outward unit normals and offsets.
    Polygon { edges: [(f64, f64, f64); 6], n: usize },
}

#[derive(Clone, Debug)]
struct Object {
    shape: Shape,
    /// Upper bound on the distance from the centre to the boundary.
    extent: f64,
    color: [f64; 3],
    stripe: (f64, f64, f64),
    start: (f64, f64),
    velocity: (f64, f64),
    wobble: Option<(f64, f64, f64)>,
}

#[derive(Clone, Debug)]
struct Scene {
    background: Array3<f64>,
    objects: Vec<Object>,
}

/// Per-frame geometry of one object after defects are applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectState {
    pub center: (f64, f64),
    pub scale: (f64, f64),
    pub brightness: f64,
}

/// Rendered frames with the geometry that produced them.
#[derive(Clone, Debug)]
pub struct SynthVideo {
    pub frames: Vec<Frame>,
    /// `states[object][frame]`
    pub states: Vec<Vec<ObjectState>>,
    /// Rendered coverage area in pixels, `areas[object][frame]`.
    pub areas: Vec<Vec<f64>>,
}

fn seeded(seed: u64, stream: u64, index: usize) -> Rng64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    Rng64::from_seed(key)
}

fn make_scene(spec: &SynthSpec, rng: &mut Rng64) -> Scene {
    let (h, w) = (spec.height, spec.width);
    let mut waves = [(0.0, 0.0, 0.0, 0.0); 3];
    for wv in &mut waves {
        let angle = rng.random_range(0.0..PI);
        let freq = rng.random_range(0.15..0.5);
        *wv = (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..2.0 * PI), rng.random_range(0.05..0.12));
    }
    let base: [f64; 3] = [rng.random_range(0.25..0.6), rng.random_range(0.25..0.6), rng.random_range(0.25..0.6)];
    let background = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let (fx, fy, ph, amp) = waves[c];
        let (gx, gy, gph, gamp) = waves[(c + 1) % 3];
        base[c] + amp * (fx * x as f64 + fy * y as f64 + ph).sin() + 0.5 * gamp * (gx * x as f64 - gy * y as f64 + gph).cos()
    });
    let unit = h.min(w) as f64 / 64.0;
    let frames = spec.frames_per_video as f64;
    let objects = (0..2)
        .map(|_| {
            let radius = rng.random_range(5.0..8.0) * unit;
            let (shape, extent) = if rng.random_bool(0.5) {
                let aspect: f64 = rng.random_range(0.7..1.0);
                (Shape::Ellipse { rx: radius, ry: radius * aspect }, radius)
            } else {
                let n = rng.random_range(4..=6);
                let offset = rng.random_range(0.0..2.0 * PI);
                let mut edges = [(0.0, 0.0, 0.0); 6];
                for (k, e) in edges.iter_mut().enumerate().take(n) {
                    let a = offset + 2.0 * PI * k as f64 / n as f64 + rng.random_range(-0.2..0.2);
                    *e = (a.cos(), a.sin(), radius * rng.random_range(0.75..1.0));
                }
                // vertices of a jittered square sit at most ~1.7 inradii out
                (Shape::Polygon { edges, n }, radius * 1.8)
            };
            let mut speed = rng.random_range(0.5..1.25) * unit;
            let heading = rng.random_range(0.0..2.0 * PI);
            let wobble = match spec.motion_model {
                MotionModel::ConstantVelocity => None,
                MotionModel::SinePath => Some((
                    rng.random_range(1.5..3.0) * unit,
                    rng.random_range(0.2..0.5),
                    rng.random_range(0.0..2.0 * PI),
                )),
            };
            let margin = extent + wobble.map_or(0.0, |w| w.0) + 1.0;
            let room = (h.min(w) as f64 - 2.0 * margin) / (frames - 1.0);
            if speed > room {
                speed = room.max(0.0);
            }
            let velocity = (speed * heading.cos(), speed * heading.sin());
            let travel = (velocity.0 * (frames - 1.0), velocity.1 * (frames - 1.0));
            let span = |len: f64, d: f64| {
                let lo = margin - d.min(0.0);
                let hi = len - margin - d.max(0.0);
                (lo, hi.max(lo + 1e-6))
            };
            let (x0, x1) = span(w as f64, travel.0);
            let (y0, y1) = span(h as f64, travel.1);
            Object {
                shape,
                extent,
                color: [rng.random_range(0.1..0.95), rng.random_range(0.1..0.95), rng.random_range(0.1..0.95)],
                stripe: (rng.random_range(0.4..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0 * PI)),
                start: (rng.random_range(x0..x1), rng.random_range(y0..y1)),
                velocity,
                wobble,
            }
        })
        .collect();
    Scene { background, objects }
}

impl Object {
    fn path(&self, t: usize) -> (f64, f64) {
        let t = t as f64;
        let mut c = (self.start.0 + self.velocity.0 * t, self.start.1 + self.velocity.1 * t);
        if let Some((amp, freq, phase)) = self.wobble {
            let speed = self.velocity.0.hypot(self.velocity.1);
            let (nx, ny) = (-self.velocity.1 / speed, self.velocity.0 / speed);
            let off = amp * (freq * t + phase).sin();
            c.0 += nx * off;
            c.1 += ny * off;
        }
        c
    }

    /// Signed distance (approximate for polygons) of local point `(u, v)`.
    fn distance(&self, u: f64, v: f64) -> f64 {
        match self.shape {
            Shape::Ellipse { rx, ry } => {
                let r = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
                (r - 1.0) * rx.min(ry)
            }
            Shape::Polygon { edges, n } => edges[..n]
                .iter()
                .map(|(nx, ny, d)| nx * u + ny * v - d)
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

fn render(scene: &Scene, states: &[ObjectState], t: usize) -> (Frame, Vec<f64>) {
    let mut px = scene.background.clone();
    let (h, w, _) = px.dim();
    let mut areas = Vec::with_capacity(states.len());
    for (obj, st) in scene.objects.iter().zip(states) {
        let reach = obj.extent * st.scale.0.max(st.scale.1) + 2.0;
        let y0 = (st.center.1 - reach).floor().max(0.0) as usize;
        let y1 = ((st.center.1 + reach).ceil().max(0.0) as usize).min(h);
        let x0 = (st.center.0 - reach).floor().max(0.0) as usize;
        let x1 = ((st.center.0 + reach).ceil().max(0.0) as usize).min(w);
        let mut area = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - st.center.0;
                let dy = y as f64 + 0.5 - st.center.1;
                let (u, v) = (dx / st.scale.0, dy / st.scale.1);
                let d = obj.distance(u, v) * st.scale.0.min(st.scale.1);
                let cover = (0.5 - d).clamp(0.0, 1.0);
                if cover == 0.0 {
                    continue;
                }
                area += cover;
                let (fu, fv, ph) = obj.stripe;
                let tex = 0.12 * (fu * u + fv * v + ph).sin();
                for c in 0..3 {
                    let value = ((obj.color[c] + tex) * st.brightness).clamp(0.0, 1.0);
                    let p = &mut px[[y, x, c]];
                    *p = *p * (1.0 - cover) + value * cover;
                }
            }
        }
        areas.push(area);
    }
    px.mapv_inplace(|v| v.clamp(0.0, 1.0));
    (Frame::new(px, t).expect("valid synthetic frame"), areas)
}

fn generate(spec: &SynthSpec, index: usize, defect: Option<FakeDefect>) -> SynthVideo {
    let stream = defect.map_or(0, FakeDefect::stream);
    let mut rng = seeded(spec.seed, stream, index);
    let scene = make_scene(spec, &mut rng);
    let m = spec.defect_magnitude;
    let jitter = Normal::new(0.0, (m * 5.0).max(1e-12)).expect("positive std");
    let sqrt3 = 3f64.sqrt();
    let (h, w) = (spec.height as f64, spec.width as f64);
    let mut states = vec![Vec::with_capacity(spec.frames_per_video); scene.objects.len()];
    let mut areas = vec![Vec::with_capacity(spec.frames_per_video); scene.objects.len()];
    let mut frames = Vec::with_capacity(spec.frames_per_video);
    for t in 0..spec.frames_per_video {
        let mut frame_states = Vec::with_capacity(scene.objects.len());
        for obj in &scene.objects {
            let mut st = ObjectState {
                center: obj.path(t),
                scale: (1.0, 1.0),
                brightness: 1.0,
            };
            if let Some(d) = defect {
                if d.drift() {
                    let area = (1.0 + m * rng.random_range(-sqrt3..sqrt3)).max(0.1);
                    let aspect = (0.5 * m * rng.random_range(-sqrt3..sqrt3)).exp();
                    st.scale = (area.sqrt() * aspect, area.sqrt() / aspect);
                    let zeta: f64 = StandardNormal.sample(&mut rng);
                    st.brightness = (1.0 + 0.5 * m * zeta).max(0.2);
                }
                if d.jitter() {
                    st.center.0 += jitter.sample(&mut rng);
                    st.center.1 += jitter.sample(&mut rng);
                }
                // keep the object inside the frame after the defect
                let half = obj.extent * st.scale.0.max(st.scale.1) + 1.0;
                st.center.0 = st.center.0.clamp(half.min(w / 2.0), (w - half).max(w / 2.0));
                st.center.1 = st.center.1.clamp(half.min(h / 2.0), (h - half).max(h / 2.0));
            }
            frame_states.push(st);
        }
        let (frame, frame_areas) = render(&scene, &frame_states, t);
        for (k, st) in frame_states.into_iter().enumerate() {
            states[k].push(st);
            areas[k].push(frame_areas[k]);
        }
        frames.push(frame);
    }
    SynthVideo { frames, states, areas }
}

/// A real video: objects follow the configured smooth path exactly.
pub fn gen_real_video(spec: &SynthSpec, index: usize) -> SynthVideo {
    generate(spec, index, None)
}

/// A fake video of one defect family. Fails when the magnitude is not positive.
pub fn gen_fake_video(spec: &SynthSpec, index: usize, defect: FakeDefect) -> Result<SynthVideo> {
    spec.validate()?;
    Ok(generate(spec, index, Some(defect)))
}

/// Output of [`build_synthetic_corpus`].
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub hash: String,
    pub warnings: Vec<String>,
}

pub fn video_name(label: Label, defect: Option<FakeDefect>, index: usize) -> String {
    match (label, defect) {
        (Label::Real, _) | (_, None) => format!("real_{index:04}"),
        (Label::Fake, Some(d)) => format!("{}_{index:04}", d.generator_tag().trim_start_matches("synth-")),
    }
}

/// Render, encode and register the whole corpus under `out`:
/// `out/videos/<source_id>.hevc` plus `out/manifest.jsonl`.
pub fn build_synthetic_corpus(
    spec: &SynthSpec,
    out: &Path,
    transcoder: &Transcoder,
    workers: usize,
) -> Result<SynthCorpus> {
    spec.validate()?;
    let videos_dir = out.join("videos");
    std::fs::create_dir_all(&videos_dir)?;
    let mut jobs: Vec<(Label, Option<FakeDefect>, usize)> =
        (0..spec.n_videos_per_class).map(|i| (Label::Real, None, i)).collect();
    let mut families = spec.fake_defects.clone();
    families.dedup();
    for d in &families {
        jobs.extend((0..spec.n_videos_per_class).map(|i| (Label::Fake, Some(*d), i)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Precondition(e.to_string()))?;
    let records: Vec<VideoRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(label, defect, index)| {
                let video = generate(spec, index, defect);
                let name = video_name(label, defect, index);
                let rel = PathBuf::from("videos").join(format!("{name}.hevc"));
                transcoder.encode_frames(&video.frames, &out.join(&rel), spec.encode_crf)?;
                Ok(VideoRecord {
                    path: rel,
                    label,
                    generator_tag: defect.map(|d| d.generator_tag().to_string()),
                    split: Split::Train,
                    frame_count: spec.frames_per_video as u32,
                    degradation: None,
                })
            })
            .collect::<Result<_>>()
    })?;
    let (manifest, warnings) = assign_splits(records, spec.split_ratio, spec.seed)?;
    let manifest = manifest.with_root(out);
    let manifest_path = out.join("manifest.jsonl");
    manifest.save(&manifest_path)?;
    let hash = corpus_hash(&manifest)?;
    Ok(SynthCorpus {
        manifest,
        manifest_path,
        hash,
        warnings,
    })
}

/// SHA-256 over the manifest text and every referenced file's bytes.
pub fn corpus_hash(manifest: &Manifest) -> Result<String> {
    let mut h = Sha256::new();
    h.update(manifest.to_jsonl().as_bytes());
    for r in &manifest.records {
        h.update(std::fs::read(manifest.resolve(r))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            frames_per_video: 10,
            ..Default::default()
        }
    }

    #[test]
    fn real_video_is_deterministic_and_sized() {
        let a = gen_real_video(&small(), 3);
        let b = gen_real_video(&small(), 3);
        assert_eq!(a.frames.len(), 10);
        assert_eq!(a.frames, b.frames);
        assert_ne!(gen_real_video(&small(), 4).frames, a.frames);
    }

    #[test]
    fn constant_velocity_has_constant_displacement() {
        let v = gen_real_video(&small(), 0);
        for obj in &v.states {
            let d0 = (obj[1].center.0 - obj[0].center.0, obj[1].center.1 - obj[0].center.1);
            for pair in obj.windows(2) {
                let d = (pair[1].center.0 - pair[0].center.0, pair[1].center.1 - pair[0].center.1);
                assert!((d.0 - d0.0).abs() < 1e-9 && (d.1 - d0.1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn objects_stay_inside_real_frames() {
        for i in 0..20 {
            let v = gen_real_video(&SynthSpec::default(), i);
            for obj in &v.areas {
                let first = obj[0];
                assert!(obj.iter().all(|a| (a - first).abs() / first < 0.05), "object clipped in video {i}");
            }
        }
    }

    #[test]
    fn zero_magnitude_is_rejected() {
        let spec = SynthSpec {
            defect_magnitude: 0.0,
            ..small()
        };
        assert!(gen_fake_video(&spec, 0, FakeDefect::MotionJitter).is_err());
    }
}
