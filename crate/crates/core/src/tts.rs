//! Zero-shot TTS backbone.
//!
//! Text encoder, speech encoder (utterance-level speaker vector), aligner,
//! duration predictor, prosody codec and a decoder whose every block is
//! conditioned on the speaker vector through conditional layer norm.

use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::{Linear, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::align::monotonic_alignment;
use crate::audio::{compute_mel, AudioConfig, MelSpectrogram};
use crate::checkpoint::Archive;
use crate::corpus::CorpusExample;
use crate::error::{Error, Result};
use crate::nn::{self, Block, CondLayerNorm, Init, LayerNorm, ParamStore, SeqConv};
use crate::phoneme::PhonemeSequence;
use crate::prosody::{self, CodecConfig, Codebook, ProsodyCodes, ProsodyEncoder};

pub const TTS_KIND: &str = "tts";
pub const TTS_VERSION: &str = "face2voice-tts/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecoderMode {
    /// Single deterministic pass.
    Refiner,
    /// Starts from seeded noise and refines for a fixed number of steps.
    Denoising { steps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtsConfig {
    pub vocab_size: usize,
    pub n_mels: usize,
    pub text_dim: usize,
    pub speech_dim: usize,
    pub decoder_dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub text_blocks: usize,
    pub speech_blocks: usize,
    pub decoder_blocks: usize,
    pub duration_kernel: usize,
    pub use_prosody: bool,
    pub codec: CodecConfig,
    pub decoder_mode: DecoderMode,
    /// Global log-mel normalisation, fixed from the training corpus.
    pub mel_mean: f64,
    pub mel_std: f64,
}

impl Default for TtsConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::phoneme::VOCAB_SIZE,
            n_mels: 80,
            text_dim: 128,
            speech_dim: 128,
            decoder_dim: 128,
            heads: 2,
            ff_mult: 2,
            text_blocks: 2,
            speech_blocks: 2,
            decoder_blocks: 4,
            duration_kernel: 3,
            use_prosody: true,
            codec: CodecConfig::default(),
            decoder_mode: DecoderMode::Refiner,
            mel_mean: 0.0,
            mel_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtsTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TtsTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            learning_rate: 1e-3,
            warmup_steps: 50,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// Per-phoneme frame counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationVector(pub Vec<u32>);

impl DurationVector {
    pub fn total(&self) -> usize {
        self.0.iter().map(|&d| d as usize).sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `exp`, round half up, clamp to at least one frame.
    pub fn from_log(preds: &[f64]) -> Self {
        Self(
            preds
                .iter()
                .map(|p| {
                    let d = (p.exp() + 0.5).floor();
                    if d.is_finite() {
                        d.clamp(1.0, u32::MAX as f64) as u32
                    } else if *p > 0.0 {
                        u32::MAX
                    } else {
                        1
                    }
                })
                .collect(),
        )
    }
}

/// Repeats row `i` of `h` `d[i]` times.
pub fn expand(h: &Tensor, d: &DurationVector) -> Result<Tensor> {
    nn::expand_rows(h, &d.0)
}

#[derive(Debug, Clone)]
struct TextEncoder {
    embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    dim: usize,
}

impl TextEncoder {
    fn new(ps: &mut ParamStore, cfg: &TtsConfig) -> Result<Self> {
        Ok(Self {
            embed: ps.var("text.embed", &[cfg.vocab_size, cfg.text_dim], Init::Normal(1.0))?,
            blocks: nn::blocks(ps, "text.block", cfg.text_blocks, cfg.text_dim, cfg.heads, cfg.ff_mult, None)?,
            norm: LayerNorm::new(ps, "text.norm", cfg.text_dim)?,
            dim: cfg.text_dim,
        })
    }

    fn forward(&self, ids: &[u32]) -> Result<Tensor> {
        let idx = Tensor::from_slice(ids, ids.len(), self.embed.device())?;
        let pos = nn::sinusoidal_positions(ids.len(), self.dim, self.embed.dtype(), self.embed.device())?;
        let mut x = (self.embed.index_select(&idx, 0)? + pos)?;
        for b in &self.blocks {
            x = b.forward(&x, None, None)?;
        }
        self.norm.forward(&x)
    }
}

/// Frame projection, transformer blocks without positions, mean over time.
#[derive(Debug, Clone)]
struct SpeechEncoder {
    input: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
    out: Linear,
}

impl SpeechEncoder {
    fn new(ps: &mut ParamStore, cfg: &TtsConfig) -> Result<Self> {
        Ok(Self {
            input: nn::linear(ps, "speech.input", cfg.n_mels, cfg.text_dim, true)?,
            blocks: nn::blocks(ps, "speech.block", cfg.speech_blocks, cfg.text_dim, cfg.heads, cfg.ff_mult, None)?,
            norm: LayerNorm::new(ps, "speech.norm", cfg.text_dim)?,
            out: nn::linear(ps, "speech.out", cfg.text_dim, cfg.speech_dim, true)?,
        })
    }

    fn forward(&self, mel: &Tensor) -> Result<Tensor> {
        let mut x = self.input.forward(mel)?.relu()?;
        for b in &self.blocks {
            x = b.forward(&x, None, None)?;
        }
        let pooled = self.norm.forward(&x)?.mean_keepdim(0)?;
        Ok(self.out.forward(&pooled)?.squeeze(0)?)
    }
}

#[derive(Debug, Clone)]
struct DurationPredictor {
    conv1: SeqConv,
    norm1: CondLayerNorm,
    conv2: SeqConv,
    norm2: CondLayerNorm,
    out: Linear,
}

impl DurationPredictor {
    fn new(ps: &mut ParamStore, cfg: &TtsConfig) -> Result<Self> {
        let (d, k) = (cfg.text_dim, cfg.duration_kernel);
        Ok(Self {
            conv1: SeqConv::new(ps, "duration.conv1", d, d, k)?,
            norm1: CondLayerNorm::new(ps, "duration.norm1", d, cfg.speech_dim)?,
            conv2: SeqConv::new(ps, "duration.conv2", d, d, k)?,
            norm2: CondLayerNorm::new(ps, "duration.norm2", d, cfg.speech_dim)?,
            out: nn::linear(ps, "duration.out", d, 1, true)?,
        })
    }

    /// Log-durations, shape `(n,)`.
    fn forward(&self, h: &Tensor, s: &Tensor) -> Result<Tensor> {
        let x = self.norm1.forward(&self.conv1.forward(h)?.relu()?, s)?;
        let x = self.norm2.forward(&self.conv2.forward(&x)?.relu()?, s)?;
        Ok(self.out.forward(&x)?.squeeze(1)?)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    text_in: Linear,
    prosody_in: Option<Linear>,
    mel_in: Option<Linear>,
    time_in: Option<Linear>,
    blocks: Vec<Block>,
    norm: CondLayerNorm,
    out: Linear,
    dim: usize,
}

impl Decoder {
    fn new(ps: &mut ParamStore, cfg: &TtsConfig) -> Result<Self> {
        let d = cfg.decoder_dim;
        let denoise = matches!(cfg.decoder_mode, DecoderMode::Denoising { .. });
        Ok(Self {
            text_in: nn::linear(ps, "decoder.text_in", cfg.text_dim, d, true)?,
            prosody_in: if cfg.use_prosody {
                Some(nn::linear(ps, "decoder.prosody_in", cfg.codec.dim, d, true)?)
            } else {
                None
            },
            mel_in: if denoise {
                Some(nn::linear(ps, "decoder.mel_in", cfg.n_mels, d, true)?)
            } else {
                None
            },
            time_in: if denoise {
                Some(nn::linear(ps, "decoder.time_in", d, d, true)?)
            } else {
                None
            },
            blocks: nn::blocks(ps, "decoder.block", cfg.decoder_blocks, d, cfg.heads, cfg.ff_mult, Some(cfg.speech_dim))?,
            norm: CondLayerNorm::new(ps, "decoder.norm", d, cfg.speech_dim)?,
            out: nn::linear(ps, "decoder.out", d, cfg.n_mels, true)?,
            dim: d,
        })
    }

    /// Normalised mel prediction `(m, n_mels)`. `noisy` carries the current
    /// estimate and its noise level in denoising mode.
    fn forward(
        &self,
        text: &Tensor,
        prosody: Option<&Tensor>,
        s: &Tensor,
        noisy: Option<(&Tensor, f64)>,
    ) -> Result<Tensor> {
        let m = text.dim(0)?;
        let mut x = self.text_in.forward(text)?;
        match (&self.prosody_in, prosody) {
            (Some(p), Some(h)) => {
                if h.dim(0)? != m {
                    return Err(Error::invalid(format!(
                        "text has {m} frames but prosody has {}",
                        h.dim(0)?
                    )));
                }
                x = (x + p.forward(h)?)?;
            }
            (None, None) => {}
            (Some(_), None) => return Err(Error::invalid("decoder expects prosody representations")),
            (None, Some(_)) => return Err(Error::invalid("decoder was built without a prosody input")),
        }
        if let (Some(mel_in), Some(time_in), Some((y, level))) = (&self.mel_in, &self.time_in, noisy) {
            let t = nn::sinusoidal_positions(1001, self.dim, x.dtype(), x.device())?
                .get((level.clamp(0.0, 1.0) * 1000.0).round() as usize)?
                .unsqueeze(0)?;
            x = (x + mel_in.forward(y)?)?.broadcast_add(&time_in.forward(&t)?)?;
        }
        let pos = nn::sinusoidal_positions(m, self.dim, x.dtype(), x.device())?;
        x = (x + pos)?;
        for b in &self.blocks {
            x = b.forward(&x, None, Some(s))?;
        }
        Ok(self.out.forward(&self.norm.forward(&x, s)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsLogRecord {
    pub step: usize,
    pub loss_mel: f64,
    pub loss_dur: f64,
    pub loss_vq: f64,
    pub loss_align: f64,
}

/// Output of face- or reference-conditioned synthesis.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub mel: MelSpectrogram,
    pub durations: DurationVector,
}

pub struct TtsModel {
    config: TtsConfig,
    params: ParamStore,
    text: TextEncoder,
    speech: SpeechEncoder,
    aligner: Linear,
    duration: DurationPredictor,
    prosody: Option<ProsodyEncoder>,
    codebook: Codebook,
    decoder: Decoder,
}

/// Training-ready view of one utterance.
pub struct PreparedUtterance {
    pub ids: Vec<u32>,
    /// Normalised log-mel, `(m, n_mels)`.
    pub mel: Tensor,
}

struct UtteranceLosses {
    mel: Tensor,
    dur: Tensor,
    commitment: Tensor,
    codebook: Tensor,
    align: Tensor,
    assigned: Vec<Vec<f64>>,
    codes: Vec<u32>,
}

impl TtsModel {
    pub fn new(config: TtsConfig, dtype: DType, seed: u64) -> Result<Self> {
        if config.mel_std <= 0.0 || !config.mel_std.is_finite() {
            return Err(Error::invalid("mel_std must be positive"));
        }
        if config.codec.n_low == 0 || config.codec.n_low > config.n_mels {
            return Err(Error::invalid("codec n_low must lie in [1, n_mels]"));
        }
        let mut ps = ParamStore::new(dtype, seed);
        let text = TextEncoder::new(&mut ps, &config)?;
        let speech = SpeechEncoder::new(&mut ps, &config)?;
        let aligner = nn::linear(&mut ps, "aligner.proj", config.text_dim, config.n_mels, true)?;
        let duration = DurationPredictor::new(&mut ps, &config)?;
        let prosody = if config.use_prosody {
            Some(ProsodyEncoder::new(&mut ps, "prosody", &config.codec)?)
        } else {
            None
        };
        let decoder = Decoder::new(&mut ps, &config)?;
        let codebook = Codebook::zeros(config.codec.codebook_size, config.codec.dim)?;
        Ok(Self {
            config,
            params: ps,
            text,
            speech,
            aligner,
            duration,
            prosody,
            codebook,
            decoder,
        })
    }

    pub fn config(&self) -> &TtsConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn codebook_tensor(&self) -> Result<Tensor> {
        self.codebook.tensor(self.params.dtype(), self.params.device())
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn device(&self) -> &Device {
        self.params.device()
    }

    fn check_ids(&self, x: &PhonemeSequence) -> Result<()> {
        if x.is_empty() {
            return Err(Error::invalid("empty phoneme sequence"));
        }
        if let Some(bad) = x.ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "phoneme id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// `H_x`, shape `(n, text_dim)`.
    pub fn encode_text(&self, x: &PhonemeSequence) -> Result<Tensor> {
        self.check_ids(x)?;
        self.text.forward(&x.ids)
    }

    pub fn normalize_mel(&self, mel: &MelSpectrogram) -> Result<Tensor> {
        if mel.n_mels != self.config.n_mels {
            return Err(Error::invalid(format!(
                "mel has {} bins, model expects {}",
                mel.n_mels, self.config.n_mels
            )));
        }
        let t = Tensor::from_slice(&mel.data, (mel.n_frames(), mel.n_mels), self.device())?
            .to_dtype(self.dtype())?;
        Ok(((t - self.config.mel_mean)? / self.config.mel_std)?)
    }

    fn denormalize(&self, y: &Tensor, like: (usize, u32)) -> Result<MelSpectrogram> {
        let raw = ((y * self.config.mel_std)? + self.config.mel_mean)?;
        let data: Vec<f32> = raw.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        MelSpectrogram::new(data, self.config.n_mels, like.0, like.1)
    }

    /// Speaker vector `s` from normalised mel `(m, n_mels)`.
    pub fn speech_vector_tensor(&self, mel: &Tensor) -> Result<Tensor> {
        if mel.dim(0)? == 0 {
            return Err(Error::invalid("speech encoder needs at least one frame"));
        }
        self.speech.forward(mel)
    }

    /// `s = S(Y)`, dimension `speech_dim` for any frame count.
    pub fn encode_speech(&self, mel: &MelSpectrogram) -> Result<Vec<f64>> {
        nn::to_vec1(&self.speech_vector_tensor(&self.normalize_mel(mel)?)?)
    }

    /// `n x m` aligner log-similarities: `-0.5 |y_t - mu_i|^2` with
    /// `mu = proj(H_x)` in normalised mel space.
    fn alignment_scores(&self, h_x: &Tensor, mel: &Tensor) -> Result<(Tensor, Vec<Vec<f64>>)> {
        let mu = self.aligner.forward(h_x)?;
        let mu2 = mu.sqr()?.sum_keepdim(1)?;
        let y2 = mel.sqr()?.sum_keepdim(1)?.t()?;
        let cross = mu.matmul(&mel.t()?)?;
        let dist = ((cross * 2.0)?.broadcast_sub(&mu2)?.broadcast_sub(&y2)? * 0.5)?;
        Ok((mu, nn::to_vec2(&dist)?))
    }

    /// Hard monotonic alignment of `x` against `mel` (training-time aligner).
    pub fn align(&self, x: &PhonemeSequence, mel: &MelSpectrogram) -> Result<DurationVector> {
        let h_x = self.encode_text(x)?;
        let y = self.normalize_mel(mel)?;
        let (_, sim) = self.alignment_scores(&h_x, &y)?;
        Ok(DurationVector(monotonic_alignment(&sim)?))
    }

    pub fn predict_log_durations(&self, h_x: &Tensor, s: &Tensor) -> Result<Tensor> {
        self.duration.forward(h_x, s)
    }

    pub fn predict_durations(&self, h_x: &Tensor, s: &Tensor) -> Result<DurationVector> {
        Ok(DurationVector::from_log(&nn::to_vec1(&self.predict_log_durations(h_x, s)?)?))
    }

    fn prosody_encoder(&self) -> Result<&ProsodyEncoder> {
        self.prosody
            .as_ref()
            .ok_or_else(|| Error::invalid("model was trained without the prosody codec"))
    }

    fn low_bins(&self, mel: &Tensor) -> Result<Tensor> {
        Ok(mel.narrow(1, 0, self.config.codec.n_low)?)
    }

    /// `H_y = G(Y_low, d)`, one row per phoneme.
    pub fn encode_prosody(&self, mel: &MelSpectrogram, d: &DurationVector) -> Result<Tensor> {
        if d.total() != mel.n_frames() {
            return Err(Error::invalid(format!(
                "durations cover {} frames, mel has {}",
                d.total(),
                mel.n_frames()
            )));
        }
        let y = self.normalize_mel(mel)?;
        self.prosody_encoder()?.encode(&self.low_bins(&y)?, &d.0)
    }

    pub fn prosody_codes(&self, mel: &MelSpectrogram, d: &DurationVector) -> Result<ProsodyCodes> {
        let h = self.encode_prosody(mel, d)?;
        Ok(prosody::quantize(&h, &self.codebook_tensor()?, self.config.codec.commitment)?.codes)
    }

    /// Decoder pass over already expanded inputs. `seed` drives the noise of
    /// the denoising mode and is ignored by the refiner.
    pub fn decode(
        &self,
        text: &Tensor,
        prosody: Option<&Tensor>,
        s: &Tensor,
        seed: u64,
    ) -> Result<Tensor> {
        match self.config.decoder_mode {
            DecoderMode::Refiner => self.decoder.forward(text, prosody, s, None),
            DecoderMode::Denoising { steps } => {
                let steps = steps.max(1);
                let m = text.dim(0)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let noise = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
                    let v: Vec<f64> = (0..m * self.config.n_mels)
                        .map(|_| StandardNormal.sample(rng))
                        .collect();
                    Ok(Tensor::from_vec(v, (m, self.config.n_mels), self.device())?.to_dtype(self.dtype())?)
                };
                let mut current = noise(&mut rng)?;
                let mut pred = current.clone();
                for k in 0..steps {
                    let level = 1.0 - k as f64 / steps as f64;
                    pred = self.decoder.forward(text, prosody, s, Some((&current, level)))?;
                    let next = 1.0 - (k + 1) as f64 / steps as f64;
                    current = ((&pred * (1.0 - next))? + (noise(&mut rng)? * next)?)?;
                }
                Ok(pred)
            }
        }
    }

    /// Text plus conditioning vector plus optional codes to mel.
    pub fn synthesize(
        &self,
        x: &PhonemeSequence,
        s: &Tensor,
        codes: Option<&ProsodyCodes>,
        seed: u64,
    ) -> Result<Synthesis> {
        let h_x = self.encode_text(x)?;
        let d = self.predict_durations(&h_x, s)?;
        self.synthesize_with_durations(&h_x, &d, s, codes, seed)
    }

    pub fn synthesize_with_durations(
        &self,
        h_x: &Tensor,
        d: &DurationVector,
        s: &Tensor,
        codes: Option<&ProsodyCodes>,
        seed: u64,
    ) -> Result<Synthesis> {
        let text = expand(h_x, d)?;
        let prosody = match (self.config.use_prosody, codes) {
            (true, Some(c)) => {
                if c.indices.len() != d.len() {
                    return Err(Error::invalid(format!(
                        "{} prosody codes for {} phonemes",
                        c.indices.len(),
                        d.len()
                    )));
                }
                Some(expand(&prosody::dequantize(c, &self.codebook_tensor()?)?, d)?)
            }
            (true, None) => return Err(Error::invalid("this model needs prosody codes")),
            (false, _) => None,
        };
        let y = self.decode(&text, prosody.as_ref(), s, seed)?;
        Ok(Synthesis {
            mel: self.denormalize(&y, (AudioConfig::default().hop_length, AudioConfig::default().sample_rate))?,
            durations: d.clone(),
        })
    }

    pub fn prepare(&self, ex: &CorpusExample, audio: &AudioConfig) -> Result<PreparedUtterance> {
        self.check_ids(&ex.transcript)?;
        let mel = compute_mel(&ex.waveform, audio)?;
        Ok(PreparedUtterance {
            ids: ex.transcript.ids.clone(),
            mel: self.normalize_mel(&mel)?,
        })
    }

    fn utterance_losses(
        &self,
        utt: &PreparedUtterance,
        codebook: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<UtteranceLosses> {
        let h_x = self.text.forward(&utt.ids)?;
        let s = self.speech.forward(&utt.mel)?;
        let (mu, sim) = self.alignment_scores(&h_x, &utt.mel)?;
        let d = monotonic_alignment(&sim)?;
        let align = (expand_raw(&mu, &d)? - &utt.mel)?.sqr()?.mean_all()?.affine(0.5, 0.0)?;

        let log_d = self.duration.forward(&h_x.detach(), &s)?;
        let target: Vec<f64> = d.iter().map(|&v| (v as f64).ln()).collect();
        let target = Tensor::from_vec(target, d.len(), self.device())?.to_dtype(self.dtype())?;
        let dur = (log_d - target)?.sqr()?.mean_all()?;

        let zero = Tensor::zeros((), self.dtype(), self.device())?;
        let (prosody, commitment, codebook_loss, assigned, codes) = match &self.prosody {
            Some(enc) => {
                let h_y = enc.encode(&self.low_bins(&utt.mel)?, &d)?;
                let q = prosody::quantize(&h_y, codebook, self.config.codec.commitment)?;
                let assigned = nn::to_vec2(&h_y)?;
                (
                    Some(nn::expand_rows(&q.pass_through, &d)?),
                    q.commitment_loss,
                    q.codebook_loss,
                    assigned,
                    q.codes.indices,
                )
            }
            None => (None, zero.clone(), zero, Vec::new(), Vec::new()),
        };

        let text = nn::expand_rows(&h_x, &d)?;
        let pred = match self.config.decoder_mode {
            DecoderMode::Refiner => self.decoder.forward(&text, prosody.as_ref(), &s, None)?,
            DecoderMode::Denoising { .. } => {
                let level: f64 = rng.random_range(0.0..1.0);
                let n = utt.mel.elem_count();
                let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
                let eps = Tensor::from_vec(eps, utt.mel.dims(), self.device())?.to_dtype(self.dtype())?;
                let noisy = ((&utt.mel * (1.0 - level))? + (eps * level)?)?;
                self.decoder.forward(&text, prosody.as_ref(), &s, Some((&noisy, level)))?
            }
        };
        let mel = ((pred - &utt.mel)?.abs()?.mean_all()? * self.config.mel_std)?;
        Ok(UtteranceLosses {
            mel,
            dur,
            commitment,
            codebook: codebook_loss,
            align,
            assigned,
            codes,
        })
    }

    /// Prosody rows of `batch` under the current encoder and aligner.
    fn collect_prosody_rows(&self, batch: &[&PreparedUtterance]) -> Result<Vec<Vec<f64>>> {
        let enc = self.prosody_encoder()?;
        let mut rows = Vec::new();
        for utt in batch {
            let h_x = self.text.forward(&utt.ids)?;
            let (_, sim) = self.alignment_scores(&h_x, &utt.mel)?;
            let d = monotonic_alignment(&sim)?;
            rows.extend(nn::to_vec2(&enc.encode(&self.low_bins(&utt.mel)?, &d)?)?);
        }
        Ok(rows)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let config = serde_json::json!({ "version": TTS_VERSION, "model": self.config });
        let mut a = Archive::new(TTS_KIND, config);
        a.entries = self.params.export()?;
        let (t, d) = (self.codebook.size(), self.codebook.dim());
        a.insert("codebook.entries", vec![t, d], self.codebook.entries().to_vec());
        a.insert("codebook.counts", vec![t], self.codebook.counts().to_vec());
        Ok(a)
    }

    pub fn from_archive(a: &Archive, dtype: DType) -> Result<Self> {
        if a.kind != TTS_KIND {
            return Err(Error::Checkpoint(format!("expected a {TTS_KIND} archive, found {}", a.kind)));
        }
        if a.config.get("version").and_then(|v| v.as_str()) != Some(TTS_VERSION) {
            return Err(Error::Checkpoint("unsupported tts checkpoint version".into()));
        }
        let config: TtsConfig = serde_json::from_value(a.config["model"].clone())?;
        let mut model = TtsModel::new(config, dtype, 0)?;
        model.params.import(&a.entries)?;
        let (shape, entries) = a.get("codebook.entries")?;
        if shape.as_slice() != [model.config.codec.codebook_size, model.config.codec.dim] {
            return Err(Error::Checkpoint(format!("codebook shape {shape:?} does not match config")));
        }
        model.codebook = Codebook::new(entries.clone(), shape[0], shape[1])?;
        model.codebook.set_counts(a.get("codebook.counts")?.1.clone())?;
        Ok(model)
    }
}

fn expand_raw(h: &Tensor, d: &[u32]) -> Result<Tensor> {
    nn::expand_rows(h, d)
}

/// Mean and standard deviation of every log-mel value in `mels`.
pub fn mel_statistics(mels: &[MelSpectrogram]) -> Result<(f64, f64)> {
    let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
    for m in mels {
        for &v in &m.data {
            n += 1;
            sum += v as f64;
            sq += (v as f64) * (v as f64);
        }
    }
    if n == 0 {
        return Err(Error::invalid("no mel frames to normalise with"));
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(1e-12);
    Ok((mean, var.sqrt()))
}

/// Seeded epoch-shuffled minibatch order.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub(crate) fn new(len: usize, rng: ChaCha8Rng) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            pos: len,
            rng,
        };
        s.pos = s.order.len();
        s
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

pub(crate) fn adam(vars: Vec<Var>, lr: f64) -> Result<candle_nn::AdamW> {
    Ok(candle_nn::AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
        },
    )?)
}

pub(crate) fn warmup_lr(base: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

/// Trains the full TTS model on `corpus`.
///
/// Loss per utterance: mel L1 (in log-mel units) + log-duration MSE + VQ
/// commitment + aligner likelihood term. The codebook follows the EMA rule
/// of [`prosody::update_codebook`]. `on_step` sees every log record as it is
/// produced.
pub fn train_tts(
    corpus: &[CorpusExample],
    config: &TtsConfig,
    train: &TtsTrainConfig,
    audio: &AudioConfig,
    dtype: DType,
    mut on_step: impl FnMut(&TtsLogRecord),
) -> Result<(TtsModel, Vec<TtsLogRecord>)> {
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if train.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mels = corpus
        .iter()
        .map(|ex| compute_mel(&ex.waveform, audio))
        .collect::<Result<Vec<_>>>()?;
    let (mel_mean, mel_std) = mel_statistics(&mels)?;
    let config = TtsConfig {
        mel_mean,
        mel_std,
        n_mels: audio.n_mels,
        ..config.clone()
    };
    let mut model = TtsModel::new(config, dtype, train.seed)?;
    let data = corpus
        .iter()
        .zip(&mels)
        .map(|(ex, mel)| {
            model.check_ids(&ex.transcript)?;
            if mel.n_frames() < ex.transcript.len() {
                return Err(Error::AlignmentInfeasible {
                    phonemes: ex.transcript.len(),
                    frames: mel.n_frames(),
                });
            }
            Ok(PreparedUtterance {
                ids: ex.transcript.ids.clone(),
                mel: model.normalize_mel(mel)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(1);
    let mut sampler = BatchSampler::new(data.len(), rng);
    let vars = model.params.all_vars();
    let mut opt = adam(vars.clone(), train.learning_rate)?;
    let mut log = Vec::with_capacity(train.steps);

    for step in 0..train.steps {
        let batch_idx = sampler.next_batch(train.batch_size);
        let batch: Vec<&PreparedUtterance> = batch_idx.iter().map(|&i| &data[i]).collect();
        if step == 0 && model.prosody.is_some() {
            let rows = model.collect_prosody_rows(&batch)?;
            let mut init_rng = ChaCha8Rng::seed_from_u64(train.seed);
            init_rng.set_stream(2);
            model.codebook.init_from(&rows, &mut init_rng);
        }
        let codebook = model.codebook_tensor()?;
        let b = batch.len() as f64;
        let mut totals = [0.0f64; 4];
        let mut loss_sum: Option<Tensor> = None;
        let mut assigned = Vec::new();
        let mut codes = Vec::new();
        for utt in &batch {
            let l = model.utterance_losses(utt, &codebook, sampler.rng())?;
            totals[0] += nn::scalar(&l.mel)?;
            totals[1] += nn::scalar(&l.dur)?;
            totals[2] += nn::scalar(&l.codebook)? + nn::scalar(&l.commitment)?;
            totals[3] += nn::scalar(&l.align)?;
            let total = (((l.mel + l.dur)? + l.commitment)? + l.align)?;
            loss_sum = Some(match loss_sum {
                Some(acc) => (acc + total)?,
                None => total,
            });
            assigned.extend(l.assigned);
            codes.extend(l.codes);
        }
        let record = TtsLogRecord {
            step,
            loss_mel: totals[0] / b,
            loss_dur: totals[1] / b,
            loss_vq: totals[2] / b,
            loss_align: totals[3] / b,
        };
        for (what, v) in [
            ("mel loss", record.loss_mel),
            ("duration loss", record.loss_dur),
            ("vq loss", record.loss_vq),
            ("alignment loss", record.loss_align),
        ] {
            if !v.is_finite() {
                return Err(Error::TrainingDiverged { step, what });
            }
        }
        let loss = (loss_sum.expect("non-empty batch") / b)?;
        let mut grads = loss.backward()?;
        let norm = nn::clip_grad_norm(&mut grads, &vars, train.grad_clip)?;
        if !norm.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                what: "gradient norm",
            });
        }
        opt.set_learning_rate(warmup_lr(train.learning_rate, train.warmup_steps, step));
        opt.step(&grads)?;
        if model.prosody.is_some() {
            prosody::update_codebook(
                &mut model.codebook,
                &assigned,
                &codes,
                model.config.codec.ema_decay,
                model.config.codec.dead_after,
                sampler.rng(),
            )?;
        }
        on_step(&record);
        log.push(record);
    }
    Ok((model, log))
}

/// Test-only access to individual loss terms.
#[doc(hidden)]
pub mod probe {
    use super::*;

    /// Mel L1 and duration MSE of one utterance given fixed durations, so
    /// that the loss is a smooth function of the parameters.
    pub fn fixed_alignment_losses(
        model: &TtsModel,
        utt: &PreparedUtterance,
        d: &[u32],
    ) -> Result<(Tensor, Tensor)> {
        let h_x = model.text.forward(&utt.ids)?;
        let s = model.speech.forward(&utt.mel)?;
        let log_d = model.duration.forward(&h_x.detach(), &s)?;
        let target: Vec<f64> = d.iter().map(|&v| (v as f64).ln()).collect();
        let target = Tensor::from_vec(target, d.len(), model.device())?.to_dtype(model.dtype())?;
        let dur = (log_d - target)?.sqr()?.mean_all()?;
        let prosody = match &model.prosody {
            Some(enc) => {
                let h_y = enc.encode(&model.low_bins(&utt.mel)?, d)?;
                let q = prosody::quantize(&h_y, &model.codebook_tensor()?, model.config.codec.commitment)?;
                Some(nn::expand_rows(&q.pass_through, d)?)
            }
            None => None,
        };
        let text = nn::expand_rows(&h_x, d)?;
        let pred = model.decoder.forward(&text, prosody.as_ref(), &s, None)?;
        let mel = ((pred - &utt.mel)?.abs()?.mean_all()? * model.config.mel_std)?;
        Ok((mel, dur))
    }

    pub fn set_codebook(model: &mut TtsModel, book: Codebook) {
        model.codebook = book;
    }

    pub fn prosody_frames(model: &TtsModel, mel: &Tensor) -> Result<Tensor> {
        model.prosody_encoder()?.frames(&model.low_bins(mel)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TtsConfig {
        TtsConfig {
            text_dim: 16,
            speech_dim: 8,
            decoder_dim: 16,
            text_blocks: 1,
            speech_blocks: 1,
            decoder_blocks: 1,
            codec: CodecConfig {
                codebook_size: 4,
                dim: 8,
                ..CodecConfig::default()
            },
            ..TtsConfig::default()
        }
    }

    fn ids(v: &[u32]) -> PhonemeSequence {
        PhonemeSequence::new(v.to_vec(), crate::phoneme::VOCAB_SIZE).unwrap()
    }

    fn mel(frames: usize) -> MelSpectrogram {
        let data = (0..frames * 80).map(|i| ((i * 37 % 101) as f32 / 10.0) - 8.0).collect();
        MelSpectrogram::new(data, 80, 200, 16_000).unwrap()
    }

    #[test]
    fn durations_round_half_up_and_clamp() {
        let d = DurationVector::from_log(&[0.0, 2f64.ln(), 2f64.ln() + 0.01, -5.0, 1.5f64.ln()]);
        assert_eq!(d.0, vec![1, 2, 2, 1, 2]);
    }

    #[test]
    fn text_encoding_shapes_and_order() {
        let m = TtsModel::new(tiny_config(), DType::F64, 1).unwrap();
        let a = m.encode_text(&ids(&[1, 2, 3])).unwrap();
        assert_eq!(a.dims(), &[3, 16]);
        assert_eq!(nn::to_vec2(&a).unwrap(), nn::to_vec2(&m.encode_text(&ids(&[1, 2, 3])).unwrap()).unwrap());
        let r = m.encode_text(&ids(&[3, 2, 1])).unwrap();
        assert_ne!(nn::to_vec2(&a).unwrap(), nn::to_vec2(&r).unwrap());
        let bad = PhonemeSequence { ids: vec![99] };
        assert!(matches!(m.encode_text(&bad), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn speech_vector_dimension_is_length_invariant() {
        let m = TtsModel::new(tiny_config(), DType::F64, 1).unwrap();
        assert_eq!(m.encode_speech(&mel(40)).unwrap().len(), 8);
        assert_eq!(m.encode_speech(&mel(400)).unwrap().len(), 8);
        assert_eq!(m.encode_speech(&mel(40)).unwrap(), m.encode_speech(&mel(40)).unwrap());
    }

    #[test]
    fn align_covers_all_frames() {
        let m = TtsModel::new(tiny_config(), DType::F64, 1).unwrap();
        assert_eq!(m.align(&ids(&[4]), &mel(9)).unwrap().0, vec![9]);
        let d = m.align(&ids(&[1, 5, 7]), &mel(11)).unwrap();
        assert_eq!(d.total(), 11);
        assert!(d.0.iter().all(|&v| v >= 1));
        assert!(matches!(
            m.align(&ids(&[1, 5, 7]), &mel(2)),
            Err(Error::AlignmentInfeasible { .. })
        ));
    }

    #[test]
    fn synthesis_length_follows_durations() {
        let m = TtsModel::new(tiny_config(), DType::F64, 1).unwrap();
        let x = ids(&[1, 2, 3, 4]);
        let s = m.speech_vector_tensor(&m.normalize_mel(&mel(20)).unwrap()).unwrap();
        let codes = ProsodyCodes { indices: vec![0, 1, 2, 3] };
        let out = m.synthesize(&x, &s, Some(&codes), 0).unwrap();
        assert_eq!(out.mel.n_frames(), out.durations.total());
        assert!(out.durations.0.iter().all(|&d| d >= 1));
        assert!(m.synthesize(&x, &s, None, 0).is_err());
    }

    #[test]
    fn denoising_decoder_is_seeded() {
        let cfg = TtsConfig {
            decoder_mode: DecoderMode::Denoising { steps: 3 },
            ..tiny_config()
        };
        let m = TtsModel::new(cfg, DType::F64, 1).unwrap();
        let h = Tensor::ones((5, 16), DType::F64, &Device::Cpu).unwrap();
        let p = Tensor::ones((5, 8), DType::F64, &Device::Cpu).unwrap();
        let s = Tensor::ones(8, DType::F64, &Device::Cpu).unwrap();
        let a = nn::to_vec2(&m.decode(&h, Some(&p), &s, 9).unwrap()).unwrap();
        let b = nn::to_vec2(&m.decode(&h, Some(&p), &s, 9).unwrap()).unwrap();
        let c = nn::to_vec2(&m.decode(&h, Some(&p), &s, 10).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn decoder_rejects_mismatched_rows() {
        let m = TtsModel::new(tiny_config(), DType::F64, 1).unwrap();
        let h = Tensor::ones((5, 16), DType::F64, &Device::Cpu).unwrap();
        let p = Tensor::ones((4, 8), DType::F64, &Device::Cpu).unwrap();
        let s = Tensor::ones(8, DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(m.decode(&h, Some(&p), &s, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn archive_round_trip_preserves_outputs() {
        let m = TtsModel::new(tiny_config(), DType::F64, 3).unwrap();
        let a = m.to_archive().unwrap();
        let back = TtsModel::from_archive(&Archive::from_bytes(&a.to_bytes().unwrap()).unwrap(), DType::F64).unwrap();
        let y = mel(12);
        assert_eq!(m.encode_speech(&y).unwrap(), back.encode_speech(&y).unwrap());
        assert_eq!(back.to_archive().unwrap().to_bytes().unwrap(), a.to_bytes().unwrap());
    }
}
