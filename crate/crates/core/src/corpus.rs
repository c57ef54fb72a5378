//! Corpus types, the JSON-lines manifest, and the seeded synthetic
//! audiovisual corpus.
//!
//! Every synthetic speaker is described by two identity factors, a base
//! pitch and a vocal-tract scale. The same two numbers drive both the voice
//! renderer and the geometric layout of the speaker's face, so face and voice
//! share ground truth.

use std::f64::consts::TAU;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::phoneme::{self, Manner, PhonemeSequence, VOCAB_SIZE};

pub const FACE_SIZE: usize = 224;
pub const FACE_LEN: usize = 3 * FACE_SIZE * FACE_SIZE;

pub const F0_RANGE: (f64, f64) = (90.0, 280.0);
pub const FORMANT_SHIFT_RANGE: (f64, f64) = (0.8, 1.25);

/// Maximum per-frame translation (pixels) of a rendered face.
pub const JITTER_OFFSET: f64 = 2.0;

/// `3 x 224 x 224`, channel-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    pixels: Vec<f32>,
}

impl FaceImage {
    /// Values are clipped to [0, 1].
    pub fn new(mut pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != FACE_LEN {
            return Err(Error::invalid(format!(
                "face image must have 3x{FACE_SIZE}x{FACE_SIZE} = {FACE_LEN} values, got {}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("face image contains NaN"));
        }
        pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Loads an image, centre-crops it to a square and resizes to 224x224.
    pub fn read_png(path: &Path) -> Result<Self> {
        let err = |message: String| Error::Image {
            path: path.to_path_buf(),
            message,
        };
        let img = image::open(path).map_err(|e| err(e.to_string()))?.to_rgb8();
        let (w, h) = img.dimensions();
        let side = w.min(h);
        let cropped =
            image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
        let resized = if side as usize == FACE_SIZE {
            cropped
        } else {
            image::imageops::resize(
                &cropped,
                FACE_SIZE as u32,
                FACE_SIZE as u32,
                image::imageops::FilterType::Triangle,
            )
        };
        let mut pixels = vec![0.0f32; FACE_LEN];
        for (x, y, p) in resized.enumerate_pixels() {
            for c in 0..3 {
                pixels[c * FACE_SIZE * FACE_SIZE + y as usize * FACE_SIZE + x as usize] =
                    p[c] as f32 / 255.0;
            }
        }
        FaceImage::new(pixels)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(FACE_SIZE as u32, FACE_SIZE as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = self.pixels[c * FACE_SIZE * FACE_SIZE + y as usize * FACE_SIZE + x as usize];
                p[c] = (v * 255.0).round() as u8;
            }
        }
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }
}

#[derive(Debug, Clone)]
pub struct CorpusExample {
    pub utt_id: String,
    pub waveform: Waveform,
    pub transcript: PhonemeSequence,
    pub speaker_id: String,
    pub face: Option<Arc<FaceImage>>,
    pub frame_index: Option<u32>,
    /// Frames per phoneme used by the renderer; only known for synthetic data.
    pub true_durations: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityFactors {
    pub f0_base: f64,
    pub formant_shift: f64,
}

impl IdentityFactors {
    /// Both factors rescaled to [0, 1].
    pub fn normalized(&self) -> (f64, f64) {
        (
            (self.f0_base - F0_RANGE.0) / (F0_RANGE.1 - F0_RANGE.0),
            (self.formant_shift - FORMANT_SHIFT_RANGE.0)
                / (FORMANT_SHIFT_RANGE.1 - FORMANT_SHIFT_RANGE.0),
        )
    }
}

/// Geometric parameters of a rendered face, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceLayout {
    pub center_x: f64,
    pub center_y: f64,
    pub face_rx: f64,
    pub face_ry: f64,
    pub eye_radius: f64,
    pub eye_sep: f64,
    pub mouth_w: f64,
    pub mouth_h: f64,
    pub nose_len: f64,
}

impl FaceLayout {
    /// The un-jittered layout: a fixed affine function of the identity factors.
    pub fn nominal(f: &IdentityFactors) -> Self {
        let (u, w) = f.normalized();
        Self {
            center_x: 112.0,
            center_y: 112.0,
            face_rx: 50.0 + 50.0 * u,
            face_ry: 60.0 + 44.0 * w,
            eye_radius: 4.0 + 14.0 * u,
            eye_sep: 44.0 + 30.0 * w,
            mouth_w: 20.0 + 60.0 * w,
            mouth_h: 4.0 + 16.0 * u,
            nose_len: 10.0 + 30.0 * (1.0 - w),
        }
    }

    fn sizes(&self) -> [f64; 7] {
        [
            self.face_rx,
            self.face_ry,
            self.eye_radius,
            self.eye_sep,
            self.mouth_w,
            self.mouth_h,
            self.nose_len,
        ]
    }

    fn jittered(&self, rng: &mut impl Rng) -> Self {
        let dx = rng.random_range(-JITTER_OFFSET..=JITTER_OFFSET);
        let dy = rng.random_range(-JITTER_OFFSET..=JITTER_OFFSET);
        Self {
            center_x: self.center_x + dx,
            center_y: self.center_y + dy,
            ..*self
        }
    }

    /// Whether `self` is a jitter of `nominal` within the renderer's bounds.
    pub fn within_jitter_of(&self, nominal: &FaceLayout) -> bool {
        let tol = 1e-9;
        let offset_ok = (self.center_x - nominal.center_x).abs() <= JITTER_OFFSET + tol
            && (self.center_y - nominal.center_y).abs() <= JITTER_OFFSET + tol;
        offset_ok && self.sizes() == nominal.sizes()
    }
}

const BACKGROUND: [f32; 3] = [0.82, 0.86, 0.9];
const SKIN: [f32; 3] = [0.93, 0.76, 0.6];
const EYE: [f32; 3] = [0.12, 0.16, 0.4];
const NOSE: [f32; 3] = [0.62, 0.4, 0.3];
const MOUTH: [f32; 3] = [0.8, 0.15, 0.2];

/// Flat-shaded render with 2x2 supersampling.
pub fn render_face(layout: &FaceLayout) -> FaceImage {
    let l = layout;
    let colour_at = |x: f64, y: f64| -> [f32; 3] {
        let (cx, cy) = (l.center_x, l.center_y);
        let eye_y = cy - 0.3 * l.face_ry;
        for side in [-0.5, 0.5] {
            let ex = cx + side * l.eye_sep;
            if (x - ex).powi(2) + (y - eye_y).powi(2) <= l.eye_radius.powi(2) {
                return EYE;
            }
        }
        let mouth_y = cy + 0.45 * l.face_ry;
        if (x - cx).abs() <= l.mouth_w / 2.0 && (y - mouth_y).abs() <= l.mouth_h / 2.0 {
            return MOUTH;
        }
        let nose_top = cy - 0.1 * l.face_ry;
        if (x - cx).abs() <= 3.0 && y >= nose_top && y <= nose_top + l.nose_len {
            return NOSE;
        }
        if ((x - cx) / l.face_rx).powi(2) + ((y - cy) / l.face_ry).powi(2) <= 1.0 {
            return SKIN;
        }
        BACKGROUND
    };
    let plane = FACE_SIZE * FACE_SIZE;
    let mut pixels = vec![0.0f32; FACE_LEN];
    for py in 0..FACE_SIZE {
        for px in 0..FACE_SIZE {
            let mut acc = [0.0f32; 3];
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let c = colour_at(px as f64 + sx, py as f64 + sy);
                for k in 0..3 {
                    acc[k] += c[k] * 0.25;
                }
            }
            for k in 0..3 {
                pixels[k * plane + py * FACE_SIZE + px] = acc[k];
            }
        }
    }
    FaceImage { pixels }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeakerRecord {
    pub id: String,
    pub factors: IdentityFactors,
    /// Layout of each rendered frame.
    pub frames: Vec<FaceLayout>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub speakers: Vec<SpeakerRecord>,
    /// Rendered frames, indexed like `speakers`.
    pub faces: Vec<Vec<Arc<FaceImage>>>,
    pub examples: Vec<CorpusExample>,
}

impl SyntheticCorpus {
    pub fn speaker_index(&self, id: &str) -> Option<usize> {
        self.speakers.iter().position(|s| s.id == id)
    }

    pub fn examples_of<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a CorpusExample> + 'a {
        self.examples.iter().filter(move |e| e.speaker_id == id)
    }
}

const SAMPLE_RATE: u32 = 16_000;
const HOP: usize = 200;
/// Scales rendered speech so that peaks stay inside [-1, 1].
const OUTPUT_LEVEL: f64 = 0.3;

/// Parameters are held constant over blocks of this many samples.
const BLOCK: usize = 40;

struct PhonemeTarget {
    id: u32,
    frames: u32,
    semitones: f64,
    gain: f64,
}

fn random_utterance(rng: &mut impl Rng) -> Vec<PhonemeTarget> {
    let n = rng.random_range(10..=16usize);
    let mut ids: Vec<u32> = Vec::with_capacity(n);
    while ids.len() < n {
        let id = rng.random_range(0..VOCAB_SIZE as u32);
        if ids.last() != Some(&id) {
            ids.push(id);
        }
    }
    let rate = rng.random_range(0.85..1.2);
    ids.iter()
        .enumerate()
        .map(|(i, &id)| {
            let p = phoneme::phoneme(id).expect("ids drawn from the inventory");
            let base = match p.manner {
                Manner::Vowel => rng.random_range(7..=12),
                _ => rng.random_range(4..=8),
            };
            let frames = ((base as f64 * rate).round() as u32).max(3);
            let declination = 1.0 - 3.0 * i as f64 / n as f64;
            let accent = rng.random_range(-2.0..4.0);
            PhonemeTarget {
                id,
                frames,
                semitones: declination + accent,
                gain: rng.random_range(0.8..1.0),
            }
        })
        .collect()
}

/// Second-order resonator (constant 0 dB peak gain band-pass).
struct Bandpass {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl Bandpass {
    fn new() -> Self {
        Self {
            b0: 0.0,
            b2: 0.0,
            a1: 0.0,
            a2: 0.0,
            x1: 0.0,
            x2: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tune(&mut self, center: f64, bandwidth: f64) {
        let nyq = SAMPLE_RATE as f64 / 2.0;
        let f = center.clamp(50.0, nyq * 0.95);
        let w0 = TAU * f / SAMPLE_RATE as f64;
        let q = (f / bandwidth.max(1.0)).max(0.3);
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        self.b0 = alpha / a0;
        self.b2 = -alpha / a0;
        self.a1 = -2.0 * w0.cos() / a0;
        self.a2 = (1.0 - alpha) / a0;
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b2 * self.x2 - self.a1 * self.y1 - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Harmonic-plus-noise rendering of a phoneme string for one speaker.
fn render_voice(targets: &[PhonemeTarget], factors: &IdentityFactors, rng: &mut impl Rng) -> Vec<f32> {
    let total: usize = targets.iter().map(|t| t.frames as usize * HOP).sum();
    let mut out = Vec::with_capacity(total);
    let sr = SAMPLE_RATE as f64;
    let mut phase = 0.0f64;
    let mut noise_filter = Bandpass::new();
    let mut prev: Option<(f64, [f64; 3], f64, f64, f64)> = None;
    let formant_bw = [90.0, 120.0, 180.0];
    let mut amps: Vec<f64> = Vec::new();

    for target in targets {
        let p = phoneme::phoneme(target.id).expect("valid id");
        let f0 = factors.f0_base * 2f64.powf(target.semitones / 12.0);
        let formants = p.formants.map(|f| f * factors.formant_shift);
        let (voice_gain, noise_gain) = match p.manner {
            Manner::Fricative => (0.0, p.gain),
            Manner::VoicedFricative => (0.35 * p.gain, p.gain),
            _ => (p.gain, 0.0),
        };
        let cur = (f0, formants, voice_gain * target.gain, noise_gain * target.gain, p.noise.0 * factors.formant_shift);
        let (pf0, pformants, pvoice, pnoise, _) = prev.unwrap_or(cur);
        let len = target.frames as usize * HOP;
        let glide = (len as f64 * 0.3).max(1.0);
        noise_filter.tune(cur.4, p.noise.1.max(200.0) * factors.formant_shift);

        let mut i = 0;
        while i < len {
            let t = ((i as f64) / glide).min(1.0);
            let f0_now = lerp(pf0, f0, t);
            let fm = [0, 1, 2].map(|k| lerp(pformants[k], formants[k], t));
            let vg = lerp(pvoice, cur.2, t);
            let ng = lerp(pnoise, cur.3, t);

            let n_harm = ((7_000.0 / f0_now).floor() as usize).max(1);
            amps.clear();
            amps.extend((1..=n_harm).map(|h| {
                let f = h as f64 * f0_now;
                let env: f64 = fm
                    .iter()
                    .zip(formant_bw)
                    .map(|(&fc, bw)| 1.0 / (1.0 + ((f - fc) / (bw * factors.formant_shift)).powi(2)))
                    .sum();
                env * (h as f64).powf(-0.6)
            }));
            let norm = 0.12 / amps.iter().sum::<f64>().sqrt().max(1e-6);

            let end = (i + BLOCK).min(len);
            for _ in i..end {
                phase = (phase + TAU * f0_now / sr) % TAU;
                let mut v = 0.0;
                if vg > 0.0 {
                    for (h, a) in amps.iter().enumerate() {
                        v += a * ((h + 1) as f64 * phase).sin();
                    }
                    v *= vg * norm;
                }
                let white: f64 = rng.random_range(-1.0..1.0);
                let noise = noise_filter.process(white) * ng * 0.6;
                let breath = white * 2e-3;
                out.push((OUTPUT_LEVEL * (v + noise + breath)) as f32);
            }
            i = end;
        }
        prev = Some(cur);
    }
    out
}

/// Deterministic synthetic audiovisual corpus.
///
/// Speaker `k` renders from its own substream of the seeded generator, so the
/// output does not depend on generation order.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_speakers: usize,
    utts_per_speaker: usize,
    frames_per_face: usize,
) -> Result<SyntheticCorpus> {
    if n_speakers == 0 || utts_per_speaker == 0 || frames_per_face == 0 {
        return Err(Error::invalid("speaker, utterance and frame counts must be >= 1"));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let factors: Vec<IdentityFactors> = (0..n_speakers)
        .map(|_| IdentityFactors {
            f0_base: master.random_range(F0_RANGE.0..=F0_RANGE.1),
            formant_shift: master.random_range(FORMANT_SHIFT_RANGE.0..=FORMANT_SHIFT_RANGE.1),
        })
        .collect();

    let mut speakers = Vec::with_capacity(n_speakers);
    let mut faces = Vec::with_capacity(n_speakers);
    let mut examples = Vec::with_capacity(n_speakers * utts_per_speaker);
    for (k, f) in factors.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        let id = format!("spk{k:03}");
        let nominal = FaceLayout::nominal(f);
        let layouts: Vec<FaceLayout> = (0..frames_per_face).map(|_| nominal.jittered(&mut rng)).collect();
        let rendered: Vec<Arc<FaceImage>> = layouts.iter().map(|l| Arc::new(render_face(l))).collect();
        for u in 0..utts_per_speaker {
            let targets = random_utterance(&mut rng);
            let samples = render_voice(&targets, f, &mut rng);
            let frame = u % frames_per_face;
            examples.push(CorpusExample {
                utt_id: format!("{id}_u{u:03}"),
                waveform: Waveform::new(samples, SAMPLE_RATE)?,
                transcript: PhonemeSequence::new(targets.iter().map(|t| t.id).collect(), VOCAB_SIZE)?,
                speaker_id: id.clone(),
                face: Some(rendered[frame].clone()),
                frame_index: Some(frame as u32),
                true_durations: Some(targets.iter().map(|t| t.frames).collect()),
            });
        }
        speakers.push(SpeakerRecord {
            id,
            factors: *f,
            frames: layouts,
        });
        faces.push(rendered);
    }
    Ok(SyntheticCorpus {
        speakers,
        faces,
        examples,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub audio: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phonemes: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub speaker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<u32>,
}

/// Reads a JSON-lines manifest. Relative paths resolve against the
/// manifest's directory; blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<CorpusExample>> {
    let at = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let file = fs::File::open(path).map_err(|e| at(0, e.to_string()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut faces: Vec<(PathBuf, Arc<FaceImage>)> = Vec::new();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| at(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| at(lineno, e.to_string()))?;
        let transcript = match (&rec.phonemes, &rec.text) {
            (Some(ids), _) => PhonemeSequence::new(ids.clone(), VOCAB_SIZE),
            (None, Some(text)) => phoneme::text_to_phonemes(text),
            (None, None) => Err(Error::invalid("record needs \"phonemes\" or \"text\"")),
        }
        .map_err(|e| at(lineno, e.to_string()))?;
        let audio_path = resolve(&rec.audio);
        let waveform = Waveform::read_wav(&audio_path).map_err(|e| at(lineno, e.to_string()))?;
        let face = match &rec.face {
            None => None,
            Some(p) => {
                let fp = resolve(p);
                let cached = faces.iter().find(|(q, _)| *q == fp).map(|(_, f)| f.clone());
                Some(match cached {
                    Some(f) => f,
                    None => {
                        let f = Arc::new(FaceImage::read_png(&fp).map_err(|e| at(lineno, e.to_string()))?);
                        faces.push((fp, f.clone()));
                        f
                    }
                })
            }
        };
        let utt_id = audio_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("line{lineno}"));
        out.push(CorpusExample {
            utt_id,
            waveform,
            transcript,
            speaker_id: rec.speaker,
            face,
            frame_index: rec.frame,
            true_durations: None,
        });
    }
    Ok(out)
}

/// Writes WAVs, PNGs, `manifest.jsonl` and `speakers.json` under `dir`.
/// Returns the manifest path.
pub fn write_synthetic_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<PathBuf> {
    let audio_dir = dir.join("audio");
    let face_dir = dir.join("faces");
    for d in [dir, &audio_dir, &face_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (spk, frames) in corpus.speakers.iter().zip(&corpus.faces) {
        for (k, face) in frames.iter().enumerate() {
            face.write_png(&face_dir.join(format!("{}_f{k}.png", spk.id)))?;
        }
    }
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = Vec::new();
    for ex in &corpus.examples {
        let audio = format!("audio/{}.wav", ex.utt_id);
        ex.waveform.write_wav(&dir.join(&audio))?;
        let rec = ManifestRecord {
            audio,
            phonemes: Some(ex.transcript.ids.clone()),
            text: None,
            speaker: ex.speaker_id.clone(),
            face: ex
                .frame_index
                .map(|k| format!("faces/{}_f{k}.png", ex.speaker_id)),
            frame: ex.frame_index,
        };
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.push(b'\n');
    }
    fs::File::create(&manifest_path)
        .and_then(|mut f| f.write_all(&manifest))
        .map_err(|e| Error::io(&manifest_path, e))?;
    let speakers_path = dir.join("speakers.json");
    let speakers = serde_json::to_vec_pretty(&corpus.speakers)?;
    fs::write(&speakers_path, speakers).map_err(|e| Error::io(&speakers_path, e))?;
    Ok(manifest_path)
}

/// Groups example indices by speaker id, in order of first appearance.
pub fn group_by_speaker(examples: &[CorpusExample]) -> Vec<(String, Vec<usize>)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        match groups.iter_mut().find(|(id, _)| *id == ex.speaker_id) {
            Some((_, v)) => v.push(i),
            None => groups.push((ex.speaker_id.clone(), vec![i])),
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_synthetic_corpus(7, 2, 2, 2).unwrap();
        let b = generate_synthetic_corpus(7, 2, 2, 2).unwrap();
        assert_eq!(a.examples.len(), 4);
        for (x, y) in a.examples.iter().zip(&b.examples) {
            assert_eq!(x.waveform, y.waveform);
            assert_eq!(x.transcript, y.transcript);
            assert_eq!(x.face, y.face);
        }
        let c = generate_synthetic_corpus(8, 2, 2, 2).unwrap();
        assert_ne!(a.examples[0].waveform, c.examples[0].waveform);
    }

    #[test]
    fn speakers_have_distinct_factors_in_range() {
        for seed in [0, 1, 2, 3] {
            let c = generate_synthetic_corpus(seed, 2, 1, 1).unwrap();
            let f: Vec<_> = c.speakers.iter().map(|s| s.factors).collect();
            assert_ne!(f[0], f[1]);
            for x in &f {
                assert!((F0_RANGE.0..=F0_RANGE.1).contains(&x.f0_base));
                assert!((FORMANT_SHIFT_RANGE.0..=FORMANT_SHIFT_RANGE.1).contains(&x.formant_shift));
            }
        }
    }

    #[test]
    fn frames_share_layout_up_to_jitter() {
        let c = generate_synthetic_corpus(11, 3, 1, 3).unwrap();
        for (spk, faces) in c.speakers.iter().zip(&c.faces) {
            // Oracle: rebuild the nominal layout from the stored identity factors.
            let nominal = FaceLayout::nominal(&spk.factors);
            for layout in &spk.frames {
                assert!(layout.within_jitter_of(&nominal), "{layout:?} vs {nominal:?}");
            }
            assert_ne!(faces[0].pixels(), faces[1].pixels());
            assert_eq!(*faces[0], render_face(&spk.frames[0]));
        }
    }

    #[test]
    fn durations_cover_the_waveform() {
        let c = generate_synthetic_corpus(5, 1, 3, 1).unwrap();
        for ex in &c.examples {
            let d = ex.true_durations.as_ref().unwrap();
            assert!(ex.waveform.samples.iter().all(|s| s.abs() < 1.0));
            let frames: usize = d.iter().map(|&x| x as usize).sum();
            assert_eq!(ex.waveform.len(), frames * HOP);
            let peak = ex.waveform.samples.iter().fold(0f32, |m, s| m.max(s.abs())); assert!(peak < 1.0, "{peak}");
        }
    }

    #[test]
    fn manifest_edge_cases() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(load_manifest(&empty).unwrap().is_empty());

        Waveform::new(vec![0.0; 400], 16_000)
            .unwrap()
            .write_wav(&dir.path().join("a.wav"))
            .unwrap();
        let m = dir.path().join("m.jsonl");
        fs::write(
            &m,
            "{\"audio\": \"a.wav\", \"text\": \"sa ma\", \"speaker\": \"x\"}\n\
             {\"audio\": \"a.wav\", \"phonemes\": [1, 2], \"speaker\": \"x\"}\n",
        )
        .unwrap();
        let ex = load_manifest(&m).unwrap();
        assert_eq!(ex.len(), 2);
        assert!(ex[0].face.is_none());
        assert_eq!(ex[0].transcript.render(), "sama");
        assert_eq!(group_by_speaker(&ex), vec![("x".to_string(), vec![0, 1])]);

        fs::write(&m, "{\"audio\": \"a.wav\", \"phonemes\": [1], \"speaker\": \"x\"}\n{\"audio\": 3}\n").unwrap();
        match load_manifest(&m) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected manifest error, got {other:?}"),
        }
        fs::write(&m, "{\"audio\": \"missing.wav\", \"phonemes\": [1], \"speaker\": \"x\"}\n").unwrap();
        assert!(matches!(load_manifest(&m), Err(Error::Manifest { line: 1, .. })));
    }

    #[test]
    fn written_corpus_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_synthetic_corpus(3, 2, 2, 2).unwrap();
        let manifest = write_synthetic_corpus(&c, dir.path()).unwrap();
        let loaded = load_manifest(&manifest).unwrap();
        assert_eq!(loaded.len(), 4);
        assert_eq!(loaded[1].frame_index, Some(1));
        let face = loaded[1].face.as_ref().unwrap();
        let orig = c.examples[1].face.as_ref().unwrap();
        let max_err = face
            .pixels()
            .iter()
            .zip(orig.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-6);
    }
}
