//! Waveforms, log-mel analysis and a Griffin-Lim vocoder.
//!
//! Frames are laid out so that an `L`-sample signal yields `ceil(L / hop)`
//! frames: the signal is reflect-padded by `(window - hop) / 2` on the left
//! and by whatever the last frame needs on the right.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Natural-log floor applied to mel energies.
pub const MEL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            win_length: 800,
            hop_length: 200,
            n_fft: 1024,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8_000.0,
        }
    }
}

impl AudioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.hop_length == 0 || self.n_mels == 0 {
            return Err(Error::invalid("sample rate, hop and mel count must be positive"));
        }
        if self.win_length > self.n_fft || self.win_length < self.hop_length {
            return Err(Error::invalid(format!(
                "window {} must lie in [hop {}, n_fft {}]",
                self.win_length, self.hop_length, self.n_fft
            )));
        }
        if !(self.f_min >= 0.0 && self.f_max > self.f_min) {
            return Err(Error::invalid("mel band edges must satisfy 0 <= f_min < f_max"));
        }
        Ok(())
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop_length)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("waveform contains non-finite samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
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

    pub fn read_wav(path: &Path) -> Result<Self> {
        let audio_err = |message: String| Error::Audio {
            path: path.to_path_buf(),
            message,
        };
        let mut reader = hound::WavReader::open(path).map_err(|e| audio_err(e.to_string()))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(audio_err(format!("expected mono, found {} channels", spec.channels)));
        }
        let samples = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f32 / 32768.0))
                .collect::<std::result::Result<Vec<_>, _>>(),
            (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect(),
            (fmt, bits) => return Err(audio_err(format!("unsupported sample format {fmt:?}/{bits}"))),
        }
        .map_err(|e| audio_err(e.to_string()))?;
        Waveform::new(samples, spec.sample_rate)
    }

    /// Writes 16-bit mono PCM. Samples are clipped to [-1, 1].
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let audio_err = |e: hound::Error| Error::Audio {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(audio_err)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v).map_err(audio_err)?;
        }
        writer.finalize().map_err(audio_err)
    }
}

/// Row-major `frames x n_mels` log-mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub data: Vec<f32>,
    pub n_mels: usize,
    pub hop_length: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn new(data: Vec<f32>, n_mels: usize, hop_length: usize, sample_rate: u32) -> Result<Self> {
        if n_mels == 0 || data.is_empty() || data.len() % n_mels != 0 {
            return Err(Error::invalid(format!(
                "mel data of length {} is not a non-empty multiple of {n_mels} bins",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mel spectrogram contains non-finite values"));
        }
        Ok(Self {
            data,
            n_mels,
            hop_length,
            sample_rate,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.data.len() / self.n_mels
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.n_mels)
    }

    pub fn get(&self, t: usize, bin: usize) -> f32 {
        self.data[t * self.n_mels + bin]
    }

    pub fn duration_secs(&self) -> f64 {
        (self.n_frames() * self.hop_length) as f64 / self.sample_rate as f64
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, peak weight 1.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels x (n_fft / 2 + 1)`, row-major.
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
    n_bins: usize,
    n_mels: usize,
}

impl MelFilterbank {
    pub fn new(cfg: &AudioConfig) -> Self {
        let n_bins = cfg.n_fft / 2 + 1;
        let lo = hz_to_mel(cfg.f_min);
        let hi = hz_to_mel(cfg.f_max);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for j in 0..cfg.n_mels {
            let (left, center, right) = (edges[j], edges[j + 1], edges[j + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                weights[j * n_bins + k] = w;
            }
        }
        Self {
            weights,
            centers_hz: edges[1..=cfg.n_mels].to_vec(),
            n_bins,
            n_mels: cfg.n_mels,
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.n_bins..(j + 1) * self.n_bins]
    }

    fn apply(&self, magnitude: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate().take(self.n_mels) {
            *o = self.row(j).iter().zip(magnitude).map(|(w, m)| w * m).sum();
        }
    }

    /// Approximate inverse: spread each band's mean magnitude back over its
    /// triangle, normalised by total triangle weight per bin.
    fn invert(&self, mel_mag: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut norm = vec![0.0; self.n_bins];
        for j in 0..self.n_mels {
            let row = self.row(j);
            let area: f64 = row.iter().sum();
            if area <= 0.0 {
                continue;
            }
            let level = mel_mag[j] / area;
            for k in 0..self.n_bins {
                out[k] += row[k] * level;
                norm[k] += row[k];
            }
        }
        for (o, n) in out.iter_mut().zip(norm) {
            *o = if n > 0.0 { *o / n } else { 0.0 };
        }
    }
}

fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}

/// numpy-style "reflect" index folding (edge sample not repeated).
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let j = i.rem_euclid(period);
    if j >= len as isize {
        (period - j) as usize
    } else {
        j as usize
    }
}

struct Stft {
    cfg: AudioConfig,
    window: Vec<f64>,
    offset: usize,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl Stft {
    fn new(cfg: &AudioConfig) -> Self {
        let mut planner = RealFftPlanner::<f64>::new();
        Self {
            cfg: cfg.clone(),
            window: hann(cfg.win_length),
            offset: (cfg.n_fft - cfg.win_length) / 2,
            forward: planner.plan_fft_forward(cfg.n_fft),
            inverse: planner.plan_fft_inverse(cfg.n_fft),
        }
    }

    fn left_pad(&self) -> usize {
        (self.cfg.win_length - self.cfg.hop_length) / 2
    }

    /// Complex spectra of every frame of `samples`.
    fn analyze(&self, samples: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let n_frames = self.cfg.frames_for(samples.len());
        let left = self.left_pad() as isize;
        let mut buf = self.forward.make_input_vec();
        let mut scratch = self.forward.make_scratch_vec();
        (0..n_frames)
            .map(|t| {
                buf.iter_mut().for_each(|v| *v = 0.0);
                let start = (t * self.cfg.hop_length) as isize - left;
                for (i, w) in self.window.iter().enumerate() {
                    let src = reflect_index(start + i as isize, samples.len());
                    buf[self.offset + i] = samples[src] * w;
                }
                let mut spec = self.forward.make_output_vec();
                self.forward
                    .process_with_scratch(&mut buf, &mut spec, &mut scratch)
                    .expect("fft buffer sizes are fixed by the plan");
                spec
            })
            .collect()
    }

    /// Weighted overlap-add inverse; returns `n_frames * hop` samples.
    fn synthesize(&self, spectra: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let hop = self.cfg.hop_length;
        let left = self.left_pad();
        let total = (spectra.len() - 1) * hop + self.cfg.win_length;
        let mut acc = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut scratch = self.inverse.make_scratch_vec();
        let mut frame = self.inverse.make_output_vec();
        let scale = 1.0 / self.cfg.n_fft as f64;
        for (t, spec) in spectra.iter().enumerate() {
            let mut input = spec.clone();
            // DC and Nyquist bins must be real for the inverse real FFT.
            input[0].im = 0.0;
            let last = input.len() - 1;
            input[last].im = 0.0;
            self.inverse
                .process_with_scratch(&mut input, &mut frame, &mut scratch)
                .expect("fft buffer sizes are fixed by the plan");
            for (i, w) in self.window.iter().enumerate() {
                let pos = t * hop + i;
                acc[pos] += frame[self.offset + i] * scale * w;
                norm[pos] += w * w;
            }
        }
        let out_len = spectra.len() * hop;
        (0..out_len)
            .map(|i| {
                let pos = i + left;
                if pos < total && norm[pos] > 1e-8 {
                    acc[pos] / norm[pos]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Log-mel spectrogram of `w`.
pub fn compute_mel(w: &Waveform, cfg: &AudioConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(Error::invalid("cannot analyse an empty waveform"));
    }
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::invalid(format!(
            "waveform sample rate {} does not match configured {}",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let fb = MelFilterbank::new(cfg);
    let stft = Stft::new(cfg);
    let samples: Vec<f64> = w.samples.iter().map(|&s| s as f64).collect();
    let spectra = stft.analyze(&samples);
    let mut magnitude = vec![0.0; cfg.n_fft / 2 + 1];
    let mut mel = vec![0.0; cfg.n_mels];
    let mut data = Vec::with_capacity(spectra.len() * cfg.n_mels);
    for spec in &spectra {
        for (m, c) in magnitude.iter_mut().zip(spec) {
            *m = c.norm();
        }
        fb.apply(&magnitude, &mut mel);
        data.extend(mel.iter().map(|&e| e.max(MEL_FLOOR).ln() as f32));
    }
    MelSpectrogram::new(data, cfg.n_mels, cfg.hop_length, cfg.sample_rate)
}

/// Keeps the first `n_low` mel bins of every frame.
pub fn lowpass_mel(y: &MelSpectrogram, n_low: usize) -> Result<MelSpectrogram> {
    if n_low == 0 || n_low > y.n_mels {
        return Err(Error::invalid(format!(
            "n_low {n_low} outside [1, {}]",
            y.n_mels
        )));
    }
    let data = y
        .frames()
        .flat_map(|f| f[..n_low].iter().copied())
        .collect();
    MelSpectrogram::new(data, n_low, y.hop_length, y.sample_rate)
}

/// Iterative phase reconstruction from a log-mel spectrogram.
#[derive(Debug, Clone)]
pub struct GriffinLim {
    pub iterations: usize,
    pub seed: u64,
}

impl Default for GriffinLim {
    fn default() -> Self {
        Self {
            iterations: 64,
            seed: 0,
        }
    }
}

impl GriffinLim {
    pub fn render(&self, mel: &MelSpectrogram, cfg: &AudioConfig) -> Result<Waveform> {
        cfg.validate()?;
        if mel.n_mels != cfg.n_mels {
            return Err(Error::invalid(format!(
                "mel has {} bins, config expects {}",
                mel.n_mels, cfg.n_mels
            )));
        }
        let fb = MelFilterbank::new(cfg);
        let stft = Stft::new(cfg);
        let n_bins = cfg.n_fft / 2 + 1;
        let mut mel_mag = vec![0.0; cfg.n_mels];
        let target: Vec<Vec<f64>> = mel
            .frames()
            .map(|f| {
                for (m, &v) in mel_mag.iter_mut().zip(f) {
                    let e = (v as f64).exp();
                    *m = if e <= MEL_FLOOR * 1.0001 { 0.0 } else { e };
                }
                let mut lin = vec![0.0; n_bins];
                fb.invert(&mel_mag, &mut lin);
                lin
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut spectra: Vec<Vec<Complex<f64>>> = target
            .iter()
            .map(|mag| {
                mag.iter()
                    .map(|&a| Complex::from_polar(a, rng.random_range(0.0..std::f64::consts::TAU)))
                    .collect()
            })
            .collect();
        let mut signal = stft.synthesize(&spectra);
        for _ in 0..self.iterations {
            let estimate = stft.analyze(&signal);
            for ((spec, est), mag) in spectra.iter_mut().zip(&estimate).zip(&target) {
                for ((s, e), &a) in spec.iter_mut().zip(est).zip(mag) {
                    let n = e.norm();
                    *s = if n > 1e-12 { e * (a / n) } else { Complex::new(a, 0.0) };
                }
            }
            signal = stft.synthesize(&spectra);
        }
        let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let gain = if peak > 0.99 { 0.99 / peak } else { 1.0 };
        Waveform::new(
            signal.iter().map(|v| (v * gain) as f32).collect(),
            cfg.sample_rate,
        )
    }
}
