//! Codec augmentation: an external transcoder driven by a command template,
//! a built-in MDCT codec simulator, and a log-spectral distortion measure.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, resample, write_wav, AudioClip};
use crate::dataset::{Manifest, ManifestEntry, Provenance};
use crate::error::{Error, Result};
use crate::seed::derive;

/// Sample rate codec copies are produced at.
pub const CODEC_RATE: u32 = 8000;

/// The three augmentation bitrates, in bits per second.
pub const DEFAULT_BITRATES: [u32; 3] = [4500, 5500, 7700];

/// Encode to Ogg/Opus at `{bitrate}` bps, then decode to 8 kHz WAV.
pub const DEFAULT_TEMPLATE: &str = "ffmpeg -y -loglevel error -i {input} -c:a libopus -b:a {bitrate} {temp} \
     && ffmpeg -y -loglevel error -i {temp} -ar 8000 {output}";

/// Overrides the program of every template step whose program is not an
/// absolute path.
pub const ENCODER_ENV: &str = "MURMUR_ENCODER";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecFormat {
    OpusOgg,
    BuiltinMdct,
}

impl CodecFormat {
    pub fn name(self) -> &'static str {
        match self {
            CodecFormat::OpusOgg => "opus_ogg",
            CodecFormat::BuiltinMdct => "builtin_mdct",
        }
    }
}

impl fmt::Display for CodecFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodecSpec {
    pub format: CodecFormat,
    pub bitrate_bps: u32,
}

impl CodecSpec {
    pub fn new(format: CodecFormat, bitrate_bps: u32) -> Result<Self> {
        if bitrate_bps == 0 {
            return Err(Error::InvalidArgument("bitrate must be positive".into()));
        }
        Ok(Self { format, bitrate_bps })
    }

    /// Suffix identifying this variant in ids and file names.
    pub fn tag(&self) -> String {
        format!("{}{}", self.format, self.bitrate_bps)
    }
}

/// Parses `4500` or `4.5k` (case-insensitive suffix) into bits per second.
pub fn parse_bitrate(text: &str) -> Result<u32> {
    let t = text.trim();
    let bad = || Error::InvalidArgument(format!("invalid bitrate {text:?}; expected e.g. 4500 or 4.5k"));
    let bps = match t.strip_suffix(['k', 'K']) {
        Some(num) => {
            let kilo: f64 = num.parse().map_err(|_| bad())?;
            let bps = kilo * 1000.0;
            if !bps.is_finite() || (bps - bps.round()).abs() > 1e-6 || bps < 0.0 || bps > u32::MAX as f64 {
                return Err(bad());
            }
            bps.round() as u32
        }
        None => t.parse().map_err(|_| bad())?,
    };
    if bps == 0 {
        return Err(bad());
    }
    Ok(bps)
}

/// Parses a comma-separated bitrate list; duplicates are rejected.
pub fn parse_bitrates(text: &str) -> Result<Vec<u32>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let list: Vec<u32> = text.split(',').map(parse_bitrate).collect::<Result<_>>()?;
    check_bitrates(&list)?;
    Ok(list)
}

fn check_bitrates(list: &[u32]) -> Result<()> {
    for (i, b) in list.iter().enumerate() {
        if *b == 0 {
            return Err(Error::InvalidArgument("bitrate must be positive".into()));
        }
        if list[..i].contains(b) {
            return Err(Error::InvalidArgument(format!("bitrate {b} listed twice")));
        }
    }
    Ok(())
}

fn split_template(template: &str) -> Result<Vec<Vec<String>>> {
    let steps: Vec<Vec<String>> = template
        .split("&&")
        .map(|s| s.split_whitespace().map(str::to_string).collect())
        .collect();
    if steps.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!(
            "encoder template has an empty step: {template:?}"
        )));
    }
    for needed in ["{input}", "{output}"] {
        if !template.contains(needed) {
            return Err(Error::InvalidArgument(format!(
                "encoder template lacks {needed}: {template:?}"
            )));
        }
    }
    Ok(steps)
}

/// Runs the transcoder template on `clip` and reads back the decoded audio.
///
/// The template is split into steps on `&&` and each step on whitespace;
/// placeholders `{input}`, `{output}`, `{temp}` (the compressed
/// intermediate) and `{bitrate}` (integer bps) are substituted per token,
/// so paths with spaces survive. Nothing is run through a shell. Scratch
/// files live in a private directory under `work_dir` that is removed on
/// return.
pub fn simulate_codec_external(
    clip: &AudioClip,
    spec: &CodecSpec,
    template: &str,
    work_dir: impl AsRef<Path>,
) -> Result<AudioClip> {
    if spec.format != CodecFormat::OpusOgg {
        return Err(Error::InvalidArgument(format!(
            "external engine cannot produce {}",
            spec.format
        )));
    }
    if clip.sample_rate != CODEC_RATE {
        return Err(Error::InvalidArgument(format!(
            "external codec expects {CODEC_RATE} Hz input, got {} Hz",
            clip.sample_rate
        )));
    }
    let steps = split_template(template)?;
    let work_dir = work_dir.as_ref();
    let scratch = tempfile::Builder::new()
        .prefix(".codec-")
        .tempdir_in(work_dir)
        .map_err(|e| Error::io(work_dir, e))?;
    let input = scratch.path().join("input.wav");
    let temp = scratch.path().join("encoded.ogg");
    let output = scratch.path().join("decoded.wav");
    write_wav(clip, &input)?;

    let bitrate = spec.bitrate_bps.to_string();
    let override_program = std::env::var(ENCODER_ENV).ok().filter(|s| !s.is_empty());
    for step in &steps {
        let tokens: Vec<String> = step
            .iter()
            .map(|t| {
                t.replace("{input}", &input.to_string_lossy())
                    .replace("{output}", &output.to_string_lossy())
                    .replace("{temp}", &temp.to_string_lossy())
                    .replace("{bitrate}", &bitrate)
            })
            .collect();
        let program = match &override_program {
            Some(p) if !Path::new(&tokens[0]).is_absolute() => p.clone(),
            _ => tokens[0].clone(),
        };
        let result = Command::new(&program).args(&tokens[1..]).stdin(Stdio::null()).output();
        let out = match result {
            Ok(out) => out,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::EncoderMissing {
                    program,
                    template: template.to_string(),
                    env_var: ENCODER_ENV,
                })
            }
            Err(e) => return Err(Error::io(&program, e)),
        };
        if !out.status.success() {
            let stderr = String::from_utf8_lossy(&out.stderr);
            let stderr = stderr.trim();
            let tail = &stderr[stderr.len().saturating_sub(2000)..];
            return Err(Error::EncoderFailed {
                command: std::iter::once(program.as_str())
                    .chain(tokens[1..].iter().map(String::as_str))
                    .collect::<Vec<_>>()
                    .join(" "),
                status: out.status.to_string(),
                stderr: tail.to_string(),
            });
        }
    }
    let decoded = read_wav(&output)?;
    if decoded.sample_rate == CODEC_RATE {
        Ok(decoded)
    } else {
        log::warn!(
            "decoder produced {} Hz, resampling to {CODEC_RATE} Hz",
            decoded.sample_rate
        );
        resample(&decoded, CODEC_RATE)
    }
}

/// MDCT frame length in samples.
pub const FRAME: usize = 512;
/// Hop (and coefficient count) per frame.
pub const HOP: usize = FRAME / 2;
/// Bits charged per kept coefficient (position and value).
pub const BITS_PER_COEFFICIENT: u32 = 6;
/// Quantiser levels on each side of zero, relative to the frame peak.
const QUANT_LEVELS: f64 = 64.0;

struct MdctTables {
    window: Vec<f64>,
    /// `cos(pi/M (n + 1/2 + M/2)(k + 1/2))`, row-major over `n`.
    basis: Vec<f64>,
}

fn tables() -> &'static MdctTables {
    static TABLES: OnceLock<MdctTables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let m = HOP as f64;
        let window = (0..FRAME)
            .map(|n| (std::f64::consts::PI * (n as f64 + 0.5) / FRAME as f64).sin())
            .collect();
        let mut basis = Vec::with_capacity(FRAME * HOP);
        for n in 0..FRAME {
            for k in 0..HOP {
                let arg = std::f64::consts::PI / m * (n as f64 + 0.5 + m / 2.0) * (k as f64 + 0.5);
                basis.push(arg.cos());
            }
        }
        MdctTables { window, basis }
    })
}

fn mdct(frame: &[f64], out: &mut [f64]) {
    let t = tables();
    out.fill(0.0);
    for ((x, w), row) in frame.iter().zip(&t.window).zip(t.basis.chunks_exact(HOP)) {
        let v = x * w;
        if v != 0.0 {
            for (o, b) in out.iter_mut().zip(row) {
                *o += v * b;
            }
        }
    }
}

fn imdct_add(coeffs: &[f64], out: &mut [f64]) {
    let t = tables();
    let scale = 2.0 / HOP as f64;
    for ((o, w), row) in out[..FRAME].iter_mut().zip(&t.window).zip(t.basis.chunks_exact(HOP)) {
        let s: f64 = coeffs.iter().zip(row).map(|(c, b)| c * b).sum();
        *o += scale * w * s;
    }
}

/// Coefficients affordable per frame at this bitrate.
pub fn coefficients_per_frame(bitrate_bps: u32, sample_rate: u32) -> usize {
    let bits = u64::from(bitrate_bps) * HOP as u64 / u64::from(sample_rate.max(1));
    ((bits / u64::from(BITS_PER_COEFFICIENT)) as usize).min(HOP)
}

fn codec_frames(samples: &[f32], keep: usize, mut quantise: impl FnMut(usize, &mut [f64])) -> Vec<f32> {
    let len = samples.len();
    // M zeros in front, and enough behind that every sample sits in two frames
    let frames = len.div_ceil(HOP) + 1;
    let padded_len = (frames + 1) * HOP;
    let mut padded = vec![0.0; padded_len];
    for (p, &s) in padded[HOP..HOP + len].iter_mut().zip(samples) {
        *p = s as f64;
    }
    let mut out = vec![0.0; padded_len];
    let mut coeffs = vec![0.0; HOP];
    let mut order: Vec<usize> = Vec::with_capacity(HOP);
    for f in 0..frames {
        let start = f * HOP;
        mdct(&padded[start..start + FRAME], &mut coeffs);
        if keep < HOP {
            order.clear();
            order.extend(0..HOP);
            order.sort_by(|&a, &b| coeffs[b].abs().total_cmp(&coeffs[a].abs()).then(a.cmp(&b)));
            for &i in &order[keep..] {
                coeffs[i] = 0.0;
            }
        }
        quantise(f, &mut coeffs);
        imdct_add(&coeffs, &mut out[start..start + FRAME]);
    }
    out[HOP..HOP + len].iter().map(|&v| v as f32).collect()
}

/// In-process lossy codec model.
///
/// The signal is cut into 512-sample sine-windowed MDCT frames with 50%
/// overlap. Each frame may spend `bitrate * 256 / rate` bits; at 6 bits per
/// coefficient the largest-magnitude coefficients that fit are kept (ties
/// to the lower index) and the rest zeroed. Kept coefficients are
/// quantised with step `peak / 64` using subtractive dither drawn from
/// `seed`; those under half a step are zeroed. Overlap-add restores the input length exactly.
pub fn simulate_codec_builtin(clip: &AudioClip, spec: &CodecSpec, seed: u64) -> Result<AudioClip> {
    if spec.format != CodecFormat::BuiltinMdct {
        return Err(Error::InvalidArgument(format!(
            "builtin engine cannot produce {}",
            spec.format
        )));
    }
    let keep = coefficients_per_frame(spec.bitrate_bps, clip.sample_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, "mdct-dither"));
    let mut dither = vec![0.0f64; HOP];
    let samples = codec_frames(&clip.samples, keep, |frame, coeffs| {
        // The dither of a coefficient depends only on (seed, frame, index),
        // and the kept sets are nested, so a higher bitrate only adds
        // coefficients, each with error at most min(|c|, step / 2).
        rng.set_stream(frame as u64);
        rng.set_word_pos(0);
        for d in dither.iter_mut() {
            *d = rng.gen_range(-0.5..0.5);
        }
        let peak = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        if peak == 0.0 {
            return;
        }
        let step = peak / QUANT_LEVELS;
        for (c, d) in coeffs.iter_mut().zip(&dither).filter(|(c, _)| **c != 0.0) {
            // dead zone: a coefficient under half a step costs less dropped
            *c = if c.abs() < step / 2.0 {
                0.0
            } else {
                step * ((*c / step + d).round() - d)
            };
        }
    });
    Ok(AudioClip::new(samples, clip.sample_rate))
}

const STFT_WINDOW: usize = 256;
const STFT_HOP: usize = 128;
const DISTORTION_EPS: f64 = 1e-8;

fn stft_magnitudes(x: &[f32], fft: &Arc<dyn rustfft::Fft<f64>>, window: &[f64]) -> Vec<f64> {
    let frames = if x.len() <= STFT_WINDOW {
        1
    } else {
        (x.len() - STFT_WINDOW).div_ceil(STFT_HOP) + 1
    };
    let bins = STFT_WINDOW / 2 + 1;
    let mut mags = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); STFT_WINDOW];
    for f in 0..frames {
        let start = f * STFT_HOP;
        for (i, b) in buf.iter_mut().enumerate() {
            let s = x.get(start + i).map_or(0.0, |&v| v as f64);
            *b = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        mags.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    mags
}

/// Mean over STFT frames and bins of `|20 log10((|X|+eps)/(|Y|+eps))|`,
/// Hann window 256, hop 128, eps 1e-8. The last frame is zero-padded.
pub fn spectral_distortion(original: &AudioClip, distorted: &AudioClip) -> Result<f64> {
    if original.sample_rate != distorted.sample_rate || original.len() != distorted.len() {
        return Err(Error::InvalidArgument(format!(
            "spectral_distortion needs equal clips, got {} samples @ {} Hz vs {} samples @ {} Hz",
            original.len(),
            original.sample_rate,
            distorted.len(),
            distorted.sample_rate
        )));
    }
    if original.is_empty() {
        return Err(Error::InvalidArgument("spectral_distortion of empty clips".into()));
    }
    let fft = FftPlanner::new().plan_fft_forward(STFT_WINDOW);
    // periodic Hann
    let window: Vec<f64> = (0..STFT_WINDOW)
        .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / STFT_WINDOW as f64).cos())
        .collect();
    let a = stft_magnitudes(&original.samples, &fft, &window);
    let b = stft_magnitudes(&distorted.samples, &fft, &window);
    let total: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (20.0 * ((x + DISTORTION_EPS) / (y + DISTORTION_EPS)).log10()).abs())
        .sum();
    Ok(total / a.len() as f64)
}

/// Which engine produces codec copies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Engine {
    External { template: String },
    Builtin { seed: u64 },
}

impl Engine {
    pub fn format(&self) -> CodecFormat {
        match self {
            Engine::External { .. } => CodecFormat::OpusOgg,
            Engine::Builtin { .. } => CodecFormat::BuiltinMdct,
        }
    }

    fn run(&self, clip: &AudioClip, spec: &CodecSpec, id: &str, work_dir: &Path) -> Result<AudioClip> {
        match self {
            Engine::External { template } => simulate_codec_external(clip, spec, template, work_dir),
            Engine::Builtin { seed } => {
                simulate_codec_builtin(clip, spec, derive(*seed, &format!("{id}/{}", spec.bitrate_bps)))
            }
        }
    }
}

fn usable(path: &Path) -> bool {
    path.is_file() && read_wav(path).is_ok_and(|c| !c.is_empty() && c.sample_rate == CODEC_RATE)
}

/// Writes one codec copy per original and bitrate under `work_dir`,
/// mirroring the id layout (`AS/001` becomes `AS/001__opus_ogg4500.wav`),
/// and returns the originals followed by the new entries.
///
/// Copies already present and readable are reused, so an interrupted run
/// can be resumed. Files are written under a temporary name and renamed
/// into place. Work is spread over the current rayon pool.
pub fn augment_manifest(
    manifest: &Manifest,
    bitrates: &[u32],
    engine: &Engine,
    work_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let work_dir = work_dir.as_ref();
    if let Some(e) = manifest.codec_entries().next() {
        return Err(Error::InvalidArgument(format!(
            "augment expects a manifest of originals, found codec entry {}",
            e.id
        )));
    }
    check_bitrates(bitrates)?;
    if bitrates.is_empty() {
        return Ok(manifest.clone());
    }
    std::fs::create_dir_all(work_dir).map_err(|e| Error::io(work_dir, e))?;
    let format = engine.format();
    let specs: Vec<CodecSpec> = bitrates
        .iter()
        .map(|&b| CodecSpec::new(format, b))
        .collect::<Result<_>>()?;

    let jobs: Vec<(&ManifestEntry, CodecSpec)> = manifest
        .entries()
        .iter()
        .flat_map(|e| specs.iter().map(move |s| (e, *s)))
        .collect();
    let produced: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|(parent, spec)| {
            let id = format!("{}__{}", parent.id, spec.tag());
            let path = work_dir.join(format!("{id}.wav"));
            let wrap = |source: Error| Error::Augment {
                id: parent.id.clone(),
                path: parent.path.clone(),
                source: Box::new(source),
            };
            if !usable(&path) {
                let clip = read_wav(&parent.path).map_err(wrap)?;
                let clip = if clip.sample_rate == CODEC_RATE {
                    clip
                } else {
                    resample(&clip, CODEC_RATE).map_err(wrap)?
                };
                let dir = path.parent().unwrap_or(work_dir);
                std::fs::create_dir_all(dir).map_err(|e| wrap(Error::io(dir, e)))?;
                let coded = engine.run(&clip, spec, &parent.id, dir).map_err(wrap)?;
                let partial = partial_path(&path);
                write_wav(&coded, &partial).map_err(wrap)?;
                std::fs::rename(&partial, &path).map_err(|e| wrap(Error::io(&path, e)))?;
            }
            Ok(ManifestEntry {
                id,
                path,
                label: parent.label,
                provenance: Provenance::Codec,
                parent_id: Some(parent.id.clone()),
                codec_format: Some(spec.format),
                bitrate_bps: Some(spec.bitrate_bps),
            })
        })
        .collect::<Result<_>>()?;

    let mut entries = manifest.entries().to_vec();
    entries.extend(produced);
    Manifest::new(entries)
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}
