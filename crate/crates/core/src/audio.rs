//! Mono waveform I/O and the resampling / length standardisation applied
//! before anything reaches the model.
//!
//! On disk the canonical format is 16-bit PCM mono. Reading also accepts
//! stereo (averaged to mono) and 32-bit float data.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};

/// A mono waveform with amplitudes nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let energy: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (energy / self.samples.len() as f64).sqrt()
    }
}

/// Reads a RIFF/WAVE file as a mono clip.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = match hound::WavReader::open(path) {
        Ok(r) => r,
        Err(hound::Error::IoError(e)) => return Err(Error::io(path, e)),
        Err(hound::Error::Unsupported) => return Err(unsupported_from_header(path)),
        Err(e) => {
            return Err(Error::Wav {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        }
    };
    let spec = reader.spec();
    let format_code = match spec.sample_format {
        hound::SampleFormat::Int => 1,
        hound::SampleFormat::Float => 3,
    };
    let supported = matches!(
        (spec.sample_format, spec.bits_per_sample),
        (hound::SampleFormat::Int, 16) | (hound::SampleFormat::Float, 32)
    );
    if !supported || !(1..=2).contains(&spec.channels) {
        return Err(Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            format_code,
            bits: spec.bits_per_sample,
            channels: spec.channels,
        });
    }
    if reader.len() == 0 {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }

    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>().map_err(wav_err)?,
    };

    let samples = if spec.channels == 2 {
        interleaved
            .chunks_exact(2)
            .map(|pair| 0.5 * (pair[0] + pair[1]))
            .collect()
    } else {
        interleaved
    };
    if samples.is_empty() {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }
    Ok(AudioClip::new(samples, spec.sample_rate))
}

// hound refuses unknown fmt codes without saying which one; peek at the
// header so the message can name it.
fn unsupported_from_header(path: &Path) -> Error {
    let mut header = Vec::with_capacity(256);
    let probe = File::open(path).and_then(|f| BufReader::new(f).take(4096).read_to_end(&mut header));
    if let Err(e) = probe {
        return Error::io(path, e);
    }
    let mut pos = 12;
    while pos + 8 <= header.len() {
        let id = &header[pos..pos + 4];
        let size = u32::from_le_bytes(header[pos + 4..pos + 8].try_into().unwrap()) as usize;
        if id == b"fmt " && pos + 24 <= header.len() {
            let field = |o: usize| u16::from_le_bytes([header[pos + 8 + o], header[pos + 9 + o]]);
            return Error::UnsupportedEncoding {
                path: path.to_path_buf(),
                format_code: field(0),
                channels: field(2),
                bits: field(14),
            };
        }
        pos += 8 + size + (size & 1);
    }
    Error::Wav {
        path: path.to_path_buf(),
        reason: "unsupported format and no readable fmt chunk".into(),
    }
}

/// Writes `clip` as mono 16-bit PCM. Amplitudes are clipped to `[-1, 1]`
/// and rounded to the nearest integer code (full scale maps to 32767).
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &clip.samples {
        writer.write_sample(sample_to_code(s)).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

pub(crate) fn sample_to_code(s: f32) -> i16 {
    let s = if s.is_nan() { 0.0 } else { s.clamp(-1.0, 1.0) };
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Zero-pads at the end or truncates at the end to exactly `target_len`.
pub fn pad_or_crop(clip: &AudioClip, target_len: usize) -> Result<AudioClip> {
    if target_len == 0 {
        return Err(Error::InvalidArgument("pad_or_crop target length must be > 0".into()));
    }
    let mut samples = clip.samples.clone();
    samples.resize(target_len, 0.0);
    Ok(AudioClip::new(samples, clip.sample_rate))
}

const ZERO_CROSSINGS: f64 = 16.0;
const KAISER_BETA: f64 = 8.0;
const CUTOFF_FRACTION: f64 = 0.45;

/// Windowed-sinc polyphase sample-rate converter.
///
/// The kernel is a Kaiser-windowed sinc with cutoff at `0.45 * min(rates)`.
/// One tap table is built per output phase; each table is normalised to
/// unit sum so constant signals pass unchanged away from the edges.
#[derive(Debug, Clone)]
pub struct Resampler {
    source_rate: u32,
    target_rate: u32,
    up: usize,
    down: usize,
    half_width: usize,
    phases: Vec<Vec<f64>>,
}

impl Resampler {
    pub fn new(source_rate: u32, target_rate: u32) -> Result<Self> {
        if source_rate == 0 || target_rate == 0 {
            return Err(Error::InvalidArgument(format!(
                "sample rates must be positive (got {source_rate} -> {target_rate})"
            )));
        }
        let g = gcd(source_rate as u64, target_rate as u64);
        let up = (target_rate as u64 / g) as usize;
        let down = (source_rate as u64 / g) as usize;

        // cycles per source sample
        let cutoff = CUTOFF_FRACTION * source_rate.min(target_rate) as f64 / source_rate as f64;
        let half_width = (ZERO_CROSSINGS / (2.0 * cutoff)).ceil() as usize;
        let i0_beta = bessel_i0(KAISER_BETA);

        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                let mut taps: Vec<f64> = (0..2 * half_width)
                    .map(|j| {
                        // tap j covers source index base - half_width + 1 + j
                        let offset = j as f64 - half_width as f64 + 1.0;
                        let tau = frac - offset;
                        let u = tau / half_width as f64;
                        if u.abs() > 1.0 {
                            return 0.0;
                        }
                        let window = bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / i0_beta;
                        2.0 * cutoff * sinc(2.0 * cutoff * tau) * window
                    })
                    .collect();
                let sum: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|t| *t /= sum);
                taps
            })
            .collect();

        Ok(Self {
            source_rate,
            target_rate,
            up,
            down,
            half_width,
            phases,
        })
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        let num = input_len as u128 * self.target_rate as u128;
        let den = self.source_rate as u128;
        ((num + den / 2) / den) as usize
    }

    pub fn process(&self, input: &[f32]) -> Vec<f32> {
        if self.up == self.down {
            return input.to_vec();
        }
        let n_out = self.output_len(input.len());
        let hw = self.half_width as isize;
        let len = input.len() as isize;
        (0..n_out)
            .map(|n| {
                let pos = n * self.down;
                let base = (pos / self.up) as isize;
                let taps = &self.phases[pos % self.up];
                let start = base - hw + 1;
                let lo = (-start).max(0) as usize;
                let hi = ((len - start).min(taps.len() as isize)).max(0) as usize;
                let mut acc = 0.0f64;
                for (j, &t) in taps.iter().enumerate().take(hi).skip(lo) {
                    acc += t * input[(start + j as isize) as usize] as f64;
                }
                acc as f32
            })
            .collect()
    }
}

/// Resamples `clip` to `target_rate`; output length is
/// `round(len * target_rate / source_rate)`.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    let resampler = Resampler::new(clip.sample_rate, target_rate)?;
    Ok(AudioClip::new(resampler.process(&clip.samples), target_rate))
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}
