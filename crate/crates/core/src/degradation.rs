//! Lossy operations at three severities each: periodic bit errors in the
//! compressed stream, H.265 average-bitrate re-encoding and H.265
//! constant-rate-factor re-encoding.

use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_model::{DegradationSpec, Manifest, Operation, VideoRecord};
use crate::error::{Error, Result};
use crate::nn::Rng64;
use crate::transcoder::{bitrate_of, Transcoder};

/// Bytes per flipped bit for severities 1, 2, 3.
pub const BIT_ERROR_BYTES: [f64; 3] = [10e5, 5e5, 3e5];
/// Target fraction of the original bitrate for severities 1, 2, 3.
pub const ABR_FRACTIONS: [f64; 3] = [0.5, 0.25, 0.125];
pub const CRF_VALUES: [f64; 3] = [27.0, 33.0, 39.0];
pub const MAX_CRF: u8 = 51;

pub fn severity_to_parameter(operation: Operation, severity: u8) -> Result<f64> {
    let table = match operation {
        Operation::BitError => &BIT_ERROR_BYTES,
        Operation::H265Abr => &ABR_FRACTIONS,
        Operation::H265Crf => &CRF_VALUES,
        Operation::None => {
            return Err(Error::UnknownSeverity {
                operation: operation.to_string(),
                severity,
            })
        }
    };
    match severity {
        1..=3 => Ok(table[severity as usize - 1]),
        _ => Err(Error::UnknownSeverity {
            operation: operation.to_string(),
            severity,
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationPlan {
    pub spec: DegradationSpec,
    pub parameter: f64,
    pub rng_seed: u64,
}

impl DegradationPlan {
    pub fn new(operation: Operation, severity: u8, rng_seed: u64) -> Result<Self> {
        let spec = DegradationSpec::new(operation, severity)?;
        Ok(Self {
            spec,
            parameter: severity_to_parameter(operation, severity)?,
            rng_seed,
        })
    }
}

/// Flip one uniformly chosen bit in every complete `bytes_per_error`-byte
/// block. A trailing partial block is left untouched.
pub fn inject_bit_errors(bitstream: &[u8], bytes_per_error: usize, seed: u64) -> Result<Vec<u8>> {
    if bytes_per_error == 0 {
        return Err(Error::Precondition("bytes_per_error must be at least 1".into()));
    }
    let mut out = bitstream.to_vec();
    let mut rng = Rng64::seed_from_u64(seed);
    for block in out.chunks_exact_mut(bytes_per_error) {
        let bit = rng.random_range(0..bytes_per_error * 8);
        block[bit / 8] ^= 1 << (bit % 8);
    }
    Ok(out)
}

/// Bitrates seen by an average-bitrate re-encode, in bits per second.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbrOutcome {
    pub original_bps: f64,
    pub target_bps: f64,
    pub achieved_bps: f64,
    pub frames: usize,
}

pub fn transcode_abr(t: &Transcoder, input: &Path, output: &Path, fraction: f64) -> Result<AbrOutcome> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Precondition(format!("ABR fraction {fraction} not in (0, 1]")));
    }
    let (original_bps, frames) = t.measure_bitrate(input)?;
    let target_bps = fraction * original_bps;
    t.transcode_abr(input, output, target_bps.round().max(1.0) as u64)?;
    let out_frames = t.decode(output)?.frames.len();
    if out_frames != frames {
        return Err(Error::TranscodeFailed {
            path: output.to_path_buf(),
            status: "frame count changed".into(),
            stderr: format!("{frames} frames in, {out_frames} out"),
        });
    }
    let achieved_bps = bitrate_of(std::fs::metadata(output)?.len(), out_frames, t.config().fps);
    Ok(AbrOutcome {
        original_bps,
        target_bps,
        achieved_bps,
        frames,
    })
}

pub fn transcode_crf(t: &Transcoder, input: &Path, output: &Path, crf: u8) -> Result<()> {
    if crf > MAX_CRF {
        return Err(Error::Precondition(format!("crf {crf} outside [0, {MAX_CRF}]")));
    }
    t.transcode_crf(input, output, crf)
}

/// Per-file seed for bit-error positions.
fn file_seed(seed: u64, source_id: &str, spec: DegradationSpec) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(source_id.as_bytes());
    h.update(spec.tag().as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Apply one plan to one file.
pub fn degrade_file(t: &Transcoder, input: &Path, output: &Path, plan: &DegradationPlan, source_id: &str) -> Result<()> {
    if let Some(parent) = output.parent() {
        std::fs::create_dir_all(parent)?;
    }
    match plan.spec.operation {
        Operation::BitError => {
            let bytes = std::fs::read(input)?;
            // make sure the source is decodable before corrupting it
            t.probe(input)?;
            let seed = file_seed(plan.rng_seed, source_id, plan.spec);
            std::fs::write(output, inject_bit_errors(&bytes, plan.parameter as usize, seed)?)?;
            Ok(())
        }
        Operation::H265Abr => transcode_abr(t, input, output, plan.parameter).map(|_| ()),
        Operation::H265Crf => transcode_crf(t, input, output, plan.parameter as u8),
        Operation::None => Err(Error::Precondition("nothing to apply for NONE".into())),
    }
}

/// Which degraded copies to make.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeTemplate {
    pub operations: Vec<Operation>,
    pub severities: Vec<u8>,
    pub seed: u64,
    /// Also list the untouched originals (no degradation tag) in the output
    /// manifest so it can serve as a robustness baseline.
    pub include_clean: bool,
}

impl Default for DegradeTemplate {
    fn default() -> Self {
        Self {
            operations: Operation::LOSSY.to_vec(),
            severities: vec![1, 2, 3],
            seed: 0,
            include_clean: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DegradeOutcome {
    pub manifest: Manifest,
    pub failures: Vec<(PathBuf, String)>,
}

pub fn degraded_path(spec: DegradationSpec, source_id: &str) -> PathBuf {
    PathBuf::from(spec.tag()).join(format!("{source_id}.hevc"))
}

/// Degrade every record under `out/<OPERATION>_<severity>/`. Failures are
/// collected per file; the rest of the corpus still gets processed.
pub fn degrade_corpus(
    manifest: &Manifest,
    template: &DegradeTemplate,
    out: &Path,
    t: &Transcoder,
    workers: usize,
) -> Result<DegradeOutcome> {
    let mut plans = Vec::new();
    for &op in &template.operations {
        for &sev in &template.severities {
            plans.push(DegradationPlan::new(op, sev, template.seed)?);
        }
    }
    let sources: Vec<&VideoRecord> = manifest.records.iter().filter(|r| r.degradation.is_none()).collect();
    let jobs: Vec<(&VideoRecord, DegradationPlan)> = plans
        .iter()
        .flat_map(|p| sources.iter().map(move |r| (*r, *p)))
        .collect();
    std::fs::create_dir_all(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Precondition(e.to_string()))?;
    let results: Vec<std::result::Result<VideoRecord, (PathBuf, String)>> = pool.install(|| {
        jobs.par_iter()
            .map(|(r, plan)| {
                let input = manifest.resolve(r);
                let rel = degraded_path(plan.spec, &r.source_id());
                degrade_file(t, &input, &out.join(&rel), plan, &r.source_id())
                    .map(|()| VideoRecord {
                        path: rel,
                        degradation: Some(plan.spec),
                        ..(*r).clone()
                    })
                    .map_err(|e| {
                        warn!("degrading {} ({}) failed: {e}", input.display(), plan.spec.tag());
                        (input.clone(), format!("{}: {}: {e}", plan.spec.tag(), e.kind()))
                    })
            })
            .collect()
    });
    let mut records = Vec::new();
    if template.include_clean {
        for r in &sources {
            let abs = std::path::absolute(manifest.resolve(r))?;
            records.push(VideoRecord {
                path: abs,
                ..(*r).clone()
            });
        }
    }
    let mut failures = Vec::new();
    for res in results {
        match res {
            Ok(r) => records.push(r),
            Err(f) => failures.push(f),
        }
    }
    Ok(DegradeOutcome {
        manifest: Manifest::new(records, manifest.split_seed, manifest.split_ratio).with_root(out),
        failures,
    })
}
