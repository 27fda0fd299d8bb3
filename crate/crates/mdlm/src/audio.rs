//! Waveform handling and log-mel feature extraction.
//!
//! The model consumes 16 kHz mono audio only; anything else is resampled
//! (linear interpolation) on the way in. Features are 64-dimensional
//! log-mel frames at exactly 100 frames per second: 512-sample (32 ms)
//! windows with a 160-sample (10 ms) hop, center padding by reflection,
//! so a clip of N samples yields ceil(N/160) frames.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const TARGET_SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 512;
pub const HOP: usize = 160;
pub const N_MELS: usize = 64;
pub const FRAME_RATE: usize = 100;

const LOG_FLOOR: f32 = 1e-10;
const SILENCE_VAR: f64 = 1e-12;

/// Mono audio samples in [-1, 1] at a stated rate.
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Waveform> {
        if samples.is_empty() {
            return Err(Error::Audio("waveform has no samples".to_string()));
        }
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".to_string()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// T x 64 log-mel frames at 100 Hz.
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    pub frames: Tensor<f32>,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

/// Frames produced for `n_samples` of 16 kHz audio: ceil(n/160).
pub fn frame_count(n_samples: usize) -> Result<usize> {
    if n_samples == 0 {
        return Err(Error::Audio("frame_count needs at least one sample".to_string()));
    }
    Ok(n_samples.div_ceil(HOP))
}

/// Resample to 16 kHz by linear interpolation. 16 kHz input is returned
/// unchanged; output length is round(len * 16000 / rate).
pub fn resample(w: &Waveform) -> Result<Waveform> {
    if w.samples.is_empty() {
        return Err(Error::Audio("cannot resample empty waveform".to_string()));
    }
    if w.sample_rate == TARGET_SAMPLE_RATE {
        return Ok(w.clone());
    }
    let in_len = w.samples.len();
    let out_len = ((in_len as f64) * (TARGET_SAMPLE_RATE as f64) / (w.sample_rate as f64))
        .round()
        .max(1.0) as usize;
    let step = w.sample_rate as f64 / TARGET_SAMPLE_RATE as f64;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * step;
        let lo = pos.floor() as usize;
        if lo >= in_len - 1 {
            out.push(w.samples[in_len - 1]);
        } else {
            let frac = (pos - lo as f64) as f32;
            let a = w.samples[lo];
            let b = w.samples[lo + 1];
            out.push(a + frac * (b - a));
        }
    }
    Waveform::new(out, TARGET_SAMPLE_RATE)
}

/// Reflected index for center padding; degenerates to clamping for
/// single-sample signals.
fn reflect(idx: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut i = idx.rem_euclid(period);
    if i >= len as isize {
        i = period - i;
    }
    i as usize
}

struct MelFilterbank {
    // For each filter: first FFT bin and triangle weights over following bins.
    filters: Vec<(usize, Vec<f32>)>,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelFilterbank {
    /// Triangular HTK-style filters over 0..8000 Hz, peak height 1.
    fn build() -> MelFilterbank {
        let n_bins = WINDOW / 2 + 1;
        let f_max = TARGET_SAMPLE_RATE as f64 / 2.0;
        let mel_max = hz_to_mel(f_max);
        let points: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let to_bin = |hz: f64| hz / f_max * (n_bins - 1) as f64;
        let mut filters = Vec::with_capacity(N_MELS);
        for m in 0..N_MELS {
            let (lo, center, hi) = (to_bin(points[m]), to_bin(points[m + 1]), to_bin(points[m + 2]));
            let start = lo.ceil() as usize;
            let end = (hi.floor() as usize).min(n_bins - 1);
            let mut weights = Vec::new();
            for bin in start..=end {
                let b = bin as f64;
                let w = if b <= center {
                    if center > lo { (b - lo) / (center - lo) } else { 0.0 }
                } else if hi > center {
                    (hi - b) / (hi - center)
                } else {
                    0.0
                };
                weights.push(w.max(0.0) as f32);
            }
            filters.push((start, weights));
        }
        MelFilterbank { filters }
    }

    fn apply(&self, power: &[f32]) -> [f32; N_MELS] {
        let mut out = [0.0f32; N_MELS];
        for (m, (start, weights)) in self.filters.iter().enumerate() {
            let mut acc = 0.0f32;
            for (i, &w) in weights.iter().enumerate() {
                acc += w * power[start + i];
            }
            out[m] = acc;
        }
        out
    }
}

/// Reusable frontend state: FFT plan, Hann window, mel filterbank.
pub struct MelExtractor {
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    bank: MelFilterbank,
}

impl Default for MelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl MelExtractor {
    pub fn new() -> MelExtractor {
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(WINDOW);
        let window = (0..WINDOW)
            .map(|i| {
                let phase = std::f64::consts::TAU * i as f64 / WINDOW as f64;
                (0.5 - 0.5 * phase.cos()) as f32
            })
            .collect();
        MelExtractor {
            fft,
            window,
            bank: MelFilterbank::build(),
        }
    }

    /// Log-mel frames with per-utterance mean/variance normalization.
    /// Input must already be at 16 kHz.
    pub fn log_mel(&self, w: &Waveform) -> Result<MelSpectrogram> {
        if w.sample_rate != TARGET_SAMPLE_RATE {
            return Err(Error::Audio(format!(
                "log_mel expects {} Hz input, got {}",
                TARGET_SAMPLE_RATE, w.sample_rate
            )));
        }
        let n = w.samples.len();
        let t = frame_count(n)?;
        let pad = WINDOW / 2;

        let mut frames = vec![0.0f32; t * N_MELS];
        let mut buf = vec![Complex::new(0.0f32, 0.0); WINDOW];
        let mut power = vec![0.0f32; WINDOW / 2 + 1];
        for fi in 0..t {
            let start = fi as isize * HOP as isize - pad as isize;
            for (j, b) in buf.iter_mut().enumerate() {
                let idx = reflect(start + j as isize, n);
                *b = Complex::new(w.samples[idx] * self.window[j], 0.0);
            }
            self.fft.process(&mut buf);
            for (k, p) in power.iter_mut().enumerate() {
                *p = buf[k].norm_sqr();
            }
            let mel = self.bank.apply(&power);
            for (m, &v) in mel.iter().enumerate() {
                frames[fi * N_MELS + m] = (v + LOG_FLOOR).ln();
            }
        }

        // Per-utterance normalization; variance step skipped on silence.
        let count = (t * N_MELS) as f64;
        let mean = frames.iter().map(|&v| v as f64).sum::<f64>() / count;
        let var = frames
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / count;
        if var < SILENCE_VAR {
            for v in &mut frames {
                *v -= mean as f32;
            }
        } else {
            let inv_std = 1.0 / var.sqrt();
            for v in &mut frames {
                *v = ((*v as f64 - mean) * inv_std) as f32;
            }
        }

        let frames = Tensor::from_vec(&[t, N_MELS], frames)?;
        frames.check_finite("log_mel")?;
        Ok(MelSpectrogram { frames })
    }
}

// ── WAV file I/O ───────────────────────────────────────────────────────

/// Read a RIFF/WAVE file: PCM 16-bit signed little-endian; stereo is
/// averaged to mono; samples are scaled by 1/32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Audio(format!("{}: {}", path.display(), e)))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Audio(format!(
            "{}: only 16-bit signed PCM is supported",
            path.display()
        )));
    }
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Audio(format!("{}: zero channels", path.display())));
    }
    let raw: std::result::Result<Vec<i16>, _> = reader.into_samples::<i16>().collect();
    let raw = raw.map_err(|e| Error::Audio(format!("{}: {}", path.display(), e)))?;
    if raw.is_empty() {
        return Err(Error::Audio(format!("{}: no samples", path.display())));
    }
    let frames = raw.len() / channels;
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut acc = 0.0f32;
        for c in 0..channels {
            acc += raw[f * channels + c] as f32;
        }
        samples.push(acc / channels as f32 / 32768.0);
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Write mono 16-bit PCM (used by tests and examples to synthesize inputs).
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Audio(format!("{}: {}", path.display(), e)))?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::Audio(format!("{}: {}", path.display(), e)))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Audio(format!("{}: {}", path.display(), e)))?;
    Ok(())
}

/// Pure sine tone, handy for synthetic datasets.
pub fn sine(freq_hz: f64, duration_s: f64, amplitude: f32, sample_rate: u32) -> Vec<f32> {
    let n = (duration_s * sample_rate as f64).round() as usize;
    (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            amplitude * (std::f64::consts::TAU * freq_hz * t).sin() as f32
        })
        .collect()
}
