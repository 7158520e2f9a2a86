//! Subprocess wrapper around an external H.265-capable transcoder.
//!
//! Every invocation is an argument template from [`TranscoderConfig`] with
//! `{input}`, `{output}`, `{width}`, `{height}`, `{fps}`, `{crf}`,
//! `{bitrate}`, `{pass}` and `{stats}` placeholders, so a different
//! executable can be swapped in from the config file. The defaults target
//! ffmpeg built with libx265 and write raw HEVC elementary streams.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data_model::Frame;
use crate::error::{Error, Result};

pub const TRANSCODER_ENV: &str = "TDEFECT_TRANSCODER";
const DEFAULT_PROGRAM: &str = "ffmpeg";
const X265_PARAMS: &str = "log-level=error:info=0:frame-threads=1:pools=none";

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranscoderConfig {
    /// Explicit executable; otherwise `$TDEFECT_TRANSCODER`, then `ffmpeg` on `PATH`.
    pub program: Option<PathBuf>,
    /// Frame rate assumed for elementary streams and used for new encodes.
    pub fps: f64,
    /// Runs the tool on `{input}` and reports stream info on stderr.
    pub probe: Vec<String>,
    /// Decodes `{input}` to packed RGB24 on stdout.
    pub decode: Vec<String>,
    /// Like `decode`, but conceals bitstream errors instead of failing.
    pub decode_lenient: Vec<String>,
    /// Encodes packed RGB24 from stdin to `{output}` at `{crf}`.
    pub encode_raw: Vec<String>,
    pub crf: Vec<String>,
    /// One rate-controlled pass; run `abr_passes` times with `{pass}` = 1, 2, ...
    pub abr: Vec<String>,
    pub abr_passes: u8,
}

impl Default for TranscoderConfig {
    fn default() -> Self {
        Self {
            program: None,
            fps: 24.0,
            probe: strings(&["-hide_banner", "-r", "{fps}", "-i", "{input}"]),
            decode: strings(&[
                "-v", "error", "-r", "{fps}", "-i", "{input}", "-fps_mode", "passthrough", "-f",
                "rawvideo", "-pix_fmt", "rgb24", "-",
            ]),
            decode_lenient: strings(&[
                "-v", "error", "-err_detect", "ignore_err", "-r", "{fps}", "-i", "{input}",
                "-fps_mode", "passthrough", "-f", "rawvideo", "-pix_fmt", "rgb24", "-",
            ]),
            encode_raw: strings(&[
                "-v", "error", "-y", "-f", "rawvideo", "-pix_fmt", "rgb24", "-s",
                "{width}x{height}", "-r", "{fps}", "-i", "-", "-c:v", "libx265", "-preset",
                "medium", "-crf", "{crf}", "-pix_fmt", "yuv420p", "-x265-params", X265_PARAMS,
                "-f", "hevc", "{output}",
            ]),
            crf: strings(&[
                "-v", "error", "-y", "-r", "{fps}", "-i", "{input}", "-c:v", "libx265", "-preset",
                "medium", "-crf", "{crf}", "-pix_fmt", "yuv420p", "-x265-params", X265_PARAMS,
                "-f", "hevc", "{output}",
            ]),
            abr: strings(&[
                "-v", "error", "-y", "-r", "{fps}", "-i", "{input}", "-c:v", "libx265", "-preset",
                "medium", "-b:v", "{bitrate}", "-pix_fmt", "yuv420p", "-x265-params",
                "log-level=error:info=0:frame-threads=1:pools=none:pass={pass}:stats={stats}",
                "-f", "hevc", "{output}",
            ]),
            abr_passes: 2,
        }
    }
}

/// Decoded frames plus whether the decoder reported problems.
#[derive(Clone, Debug)]
pub struct DecodedVideo {
    pub frames: Vec<Frame>,
    pub width: usize,
    pub height: usize,
    /// Set when the lenient decoder emitted diagnostics or exited non-zero.
    pub degraded: bool,
}

#[derive(Clone, Debug)]
pub struct Transcoder {
    program: PathBuf,
    config: TranscoderConfig,
}

#[derive(Default)]
struct Vars<'a> {
    input: Option<&'a Path>,
    output: Option<&'a Path>,
    width: usize,
    height: usize,
    crf: u8,
    bitrate: u64,
    pass: u8,
    stats: Option<&'a Path>,
}

fn find_on_path(name: &str) -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|dir| dir.join(name))
        .find(|p| p.is_file())
}

impl Transcoder {
    /// Resolve the executable: config, then environment variable, then `PATH`.
    pub fn discover(config: &TranscoderConfig) -> Result<Self> {
        let candidate = config
            .program
            .clone()
            .or_else(|| std::env::var_os(TRANSCODER_ENV).map(PathBuf::from));
        let program = match candidate {
            Some(p) if p.is_file() => p,
            Some(p) if p.components().count() == 1 => find_on_path(&p.to_string_lossy())
                .ok_or_else(|| Error::TranscoderUnavailable(format!("'{}' not found on PATH", p.display())))?,
            Some(p) => return Err(Error::TranscoderUnavailable(format!("{} does not exist", p.display()))),
            None => find_on_path(DEFAULT_PROGRAM).ok_or_else(|| {
                Error::TranscoderUnavailable(format!(
                    "no '{DEFAULT_PROGRAM}' on PATH; set {TRANSCODER_ENV} or the config 'program' entry"
                ))
            })?,
        };
        Ok(Self {
            program,
            config: config.clone(),
        })
    }

    pub fn program(&self) -> &Path {
        &self.program
    }

    pub fn config(&self) -> &TranscoderConfig {
        &self.config
    }

    fn render(&self, template: &[String], vars: &Vars<'_>) -> Vec<String> {
        let path = |p: Option<&Path>| p.map(|p| p.to_string_lossy().into_owned()).unwrap_or_default();
        template
            .iter()
            .map(|arg| {
                arg.replace("{input}", &path(vars.input))
                    .replace("{output}", &path(vars.output))
                    .replace("{width}", &vars.width.to_string())
                    .replace("{height}", &vars.height.to_string())
                    .replace("{fps}", &self.config.fps.to_string())
                    .replace("{crf}", &vars.crf.to_string())
                    .replace("{bitrate}", &vars.bitrate.to_string())
                    .replace("{pass}", &vars.pass.to_string())
                    .replace("{stats}", &path(vars.stats))
            })
            .collect()
    }

    fn command(&self, args: Vec<String>) -> Command {
        let mut cmd = Command::new(&self.program);
        cmd.args(args).stdin(Stdio::null());
        cmd
    }

    fn run(&self, args: Vec<String>, target: &Path) -> Result<()> {
        let out = self.command(args).stdout(Stdio::null()).stderr(Stdio::piped()).output()?;
        if !out.status.success() {
            return Err(Error::TranscodeFailed {
                path: target.to_path_buf(),
                status: out.status.to_string(),
                stderr: last_line(&out.stderr),
            });
        }
        Ok(())
    }

    /// `(width, height)` of the first video stream.
    pub fn probe(&self, input: &Path) -> Result<(usize, usize)> {
        static DIMS: OnceLock<Regex> = OnceLock::new();
        let re = DIMS.get_or_init(|| Regex::new(r"Video: .*?, (\d+)x(\d+)").expect("static regex"));
        if !input.is_file() {
            return Err(Error::Decode {
                path: input.to_path_buf(),
                reason: "no such file".into(),
            });
        }
        let args = self.render(&self.config.probe, &Vars { input: Some(input), ..Default::default() });
        let out = self.command(args).stdout(Stdio::null()).stderr(Stdio::piped()).output()?;
        let text = String::from_utf8_lossy(&out.stderr);
        let caps = re.captures(&text).ok_or_else(|| Error::Decode {
            path: input.to_path_buf(),
            reason: format!("no video stream found ({})", last_line(&out.stderr)),
        })?;
        Ok((caps[1].parse().unwrap_or(0), caps[2].parse().unwrap_or(0)))
    }

    /// Strict decode: any decoder failure is a [`Error::Decode`].
    pub fn decode(&self, input: &Path) -> Result<DecodedVideo> {
        let video = self.decode_with(input, &self.config.decode)?;
        if video.degraded {
            return Err(Error::Decode {
                path: input.to_path_buf(),
                reason: "decoder reported errors".into(),
            });
        }
        Ok(video)
    }

    /// Error-concealing decode for damaged streams.
    pub fn decode_lenient(&self, input: &Path) -> Result<DecodedVideo> {
        self.decode_with(input, &self.config.decode_lenient)
    }

    fn decode_with(&self, input: &Path, template: &[String]) -> Result<DecodedVideo> {
        let (width, height) = self.probe(input)?;
        let frame_bytes = width * height * 3;
        if frame_bytes == 0 {
            return Err(Error::Decode {
                path: input.to_path_buf(),
                reason: "zero-sized video stream".into(),
            });
        }
        let args = self.render(template, &Vars { input: Some(input), ..Default::default() });
        let mut child = self.command(args).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn()?;
        let mut stderr = child.stderr.take().expect("piped stderr");
        let err_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr.read_to_end(&mut buf);
            buf
        });
        let mut raw = Vec::new();
        child.stdout.take().expect("piped stdout").read_to_end(&mut raw)?;
        let status = child.wait()?;
        let err = err_reader.join().unwrap_or_default();
        let degraded = !status.success() || !err.iter().all(u8::is_ascii_whitespace);
        let complete = raw.len() / frame_bytes;
        if complete == 0 {
            if status.success() {
                return Err(Error::EmptyVideo(input.to_path_buf()));
            }
            return Err(Error::Decode {
                path: input.to_path_buf(),
                reason: last_line(&err),
            });
        }
        let frames = raw
            .chunks_exact(frame_bytes)
            .enumerate()
            .map(|(t, chunk)| Frame::from_rgb8(width, height, chunk, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecodedVideo {
            frames,
            width,
            height,
            degraded,
        })
    }

    /// Encode frames (all the same shape) to `output` at the given CRF.
    pub fn encode_frames(&self, frames: &[Frame], output: &Path, crf: u8) -> Result<()> {
        let first = frames.first().ok_or(Error::EmptySequence)?;
        let (height, width) = first.shape();
        let args = self.render(
            &self.config.encode_raw,
            &Vars {
                output: Some(output),
                width,
                height,
                crf,
                ..Default::default()
            },
        );
        let mut child = self
            .command(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            for f in frames {
                if f.shape() != (height, width) {
                    return Err(Error::shape((height, width), f.shape()));
                }
                stdin.write_all(&f.to_rgb8())?;
            }
        }
        let out = child.wait_with_output()?;
        if !out.status.success() {
            return Err(Error::TranscodeFailed {
                path: output.to_path_buf(),
                status: out.status.to_string(),
                stderr: last_line(&out.stderr),
            });
        }
        Ok(())
    }

    pub fn transcode_crf(&self, input: &Path, output: &Path, crf: u8) -> Result<()> {
        let args = self.render(
            &self.config.crf,
            &Vars {
                input: Some(input),
                output: Some(output),
                crf,
                ..Default::default()
            },
        );
        self.run(args, output)
    }

    /// Multi-pass average-bitrate encode at `bitrate` bits per second.
    pub fn transcode_abr(&self, input: &Path, output: &Path, bitrate: u64) -> Result<()> {
        let mut stats = output.as_os_str().to_owned();
        stats.push(".x265stats");
        let stats = PathBuf::from(stats);
        let passes = self.config.abr_passes.max(1);
        let mut result = Ok(());
        for pass in 1..=passes {
            // a single configured pass runs x265 in plain ABR mode
            let pass_id = if passes == 1 { 0 } else if pass == passes { 2 } else { 1 };
            let mut template = self.config.abr.clone();
            if pass_id == 0 {
                for arg in &mut template {
                    *arg = arg.replace(":pass={pass}:stats={stats}", "");
                }
            }
            let args = self.render(
                &template,
                &Vars {
                    input: Some(input),
                    output: Some(output),
                    bitrate,
                    pass: pass_id,
                    stats: Some(&stats),
                    ..Default::default()
                },
            );
            result = self.run(args, output);
            if result.is_err() {
                break;
            }
        }
        for suffix in ["", ".cutree", ".temp", ".cutree.temp"] {
            let mut p = stats.as_os_str().to_owned();
            p.push(suffix);
            let _ = std::fs::remove_file(PathBuf::from(p));
        }
        result
    }

    /// Stream size over duration, in bits per second, with the frame count.
    pub fn measure_bitrate(&self, input: &Path) -> Result<(f64, usize)> {
        let bytes = std::fs::metadata(input)?.len();
        let frames = self.decode_lenient(input)?.frames.len();
        Ok((bitrate_of(bytes, frames, self.config.fps), frames))
    }
}

pub fn bitrate_of(bytes: u64, frames: usize, fps: f64) -> f64 {
    bytes as f64 * 8.0 * fps / frames.max(1) as f64
}

fn last_line(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes)
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("")
        .trim()
        .to_string()
}

/// Peak signal-to-noise ratio in dB between two equal-length frame sequences.
pub fn psnr(reference: &[Frame], test: &[Frame]) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::LengthMismatch(reference.len(), test.len()));
    }
    let mut se = 0.0;
    let mut n = 0usize;
    for (a, b) in reference.iter().zip(test) {
        if a.shape() != b.shape() {
            return Err(Error::shape(a.shape(), b.shape()));
        }
        se += (&a.pixels() - &b.pixels()).mapv(|d| d * d).sum();
        n += a.pixels().len();
    }
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholders_are_substituted() {
        let t = Transcoder {
            program: "x".into(),
            config: TranscoderConfig::default(),
        };
        let args = t.render(
            &t.config.abr,
            &Vars {
                input: Some(Path::new("in.hevc")),
                output: Some(Path::new("out.hevc")),
                bitrate: 1234,
                pass: 2,
                stats: Some(Path::new("s.log")),
                ..Default::default()
            },
        );
        assert!(args.contains(&"in.hevc".to_string()));
        assert!(args.contains(&"1234".to_string()));
        assert!(args.iter().any(|a| a.ends_with("pass=2:stats=s.log")));
        assert!(args.iter().all(|a| !a.contains('{')));
    }

    #[test]
    fn missing_program_is_unavailable() {
        let cfg = TranscoderConfig {
            program: Some("/nonexistent/dir/ffmpeg".into()),
            ..Default::default()
        };
        assert!(matches!(Transcoder::discover(&cfg), Err(Error::TranscoderUnavailable(_))));
    }

    #[test]
    fn bitrate_arithmetic() {
        assert_eq!(bitrate_of(3000, 24, 24.0), 24_000.0);
    }
}
