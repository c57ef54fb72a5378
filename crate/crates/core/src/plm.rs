//! Prosody language model: an autoregressive predictor of per-phoneme prosody
//! codes, conditioned on a prompt (text and codes) and the target text.
//!
//! The input sequence is a prefix of prompt rows (code embedding plus prompt
//! text) and target-text rows, followed by one row per target phoneme
//! carrying the previous target code (or the begin marker) plus that
//! phoneme's text. Prefix rows attend to the whole prefix; target rows attend
//! to the prefix and causally to earlier target rows.

use std::io::{BufRead, Write};
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Linear, Optimizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::nn::{self, Block, Init, LayerNorm, ParamStore};
use crate::phoneme::PhonemeSequence;
use crate::prosody::ProsodyCodes;
use crate::tts::{adam, warmup_lr, BatchSampler, DurationVector, TtsModel};

pub const PLM_KIND: &str = "plm";
pub const PLM_VERSION: &str = "face2voice-plm/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlmConfig {
    /// Codebook size `T`; the input vocabulary adds begin and separator markers.
    pub codebook_size: usize,
    /// Width of the text representations fed in.
    pub text_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_mult: usize,
    pub max_positions: usize,
}

impl Default for PlmConfig {
    fn default() -> Self {
        Self {
            codebook_size: 128,
            text_dim: 128,
            width: 128,
            heads: 2,
            blocks: 2,
            ff_mult: 2,
            max_positions: 512,
        }
    }
}

impl PlmConfig {
    pub fn vocab_size(&self) -> usize {
        self.codebook_size + 2
    }

    pub fn begin_token(&self) -> u32 {
        self.codebook_size as u32
    }

    pub fn separator_token(&self) -> u32 {
        self.codebook_size as u32 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PlmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            learning_rate: 1e-3,
            warmup_steps: 20,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub top_k: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            top_k: 8,
            temperature: 0.8,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        Self {
            top_k: 1,
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// Prompt codes and text (one row per prompt phoneme) plus the target text.
#[derive(Debug, Clone)]
pub struct PlmContext {
    pub prompt_codes: ProsodyCodes,
    pub prompt_text: Tensor,
    pub target_text: Tensor,
}

impl PlmContext {
    pub fn new(prompt_codes: ProsodyCodes, prompt_text: Tensor, target_text: Tensor) -> Result<Self> {
        let rows = if prompt_text.dims().is_empty() { 0 } else { prompt_text.dim(0)? };
        if prompt_codes.indices.len() != rows {
            return Err(Error::invalid(format!(
                "{} prompt codes for {rows} prompt text rows",
                prompt_codes.indices.len()
            )));
        }
        if target_text.dim(0)? == 0 {
            return Err(Error::invalid("target text is empty"));
        }
        Ok(Self {
            prompt_codes,
            prompt_text,
            target_text,
        })
    }

    pub fn target_len(&self) -> usize {
        self.target_text.dim(0).unwrap_or(0)
    }
}

/// Prompt half of a [`PlmContext`].
#[derive(Debug, Clone)]
pub struct Prompt {
    pub codes: ProsodyCodes,
    pub text: Tensor,
}

impl Prompt {
    pub fn with_target(&self, target_text: Tensor) -> Result<PlmContext> {
        PlmContext::new(self.codes.clone(), self.text.clone(), target_text)
    }
}

/// Rescales `d` to sum to `total` by largest remainders, keeping every entry
/// at least one. Requires `total >= d.len()`.
pub fn fit_durations(d: &DurationVector, total: usize) -> Result<DurationVector> {
    let n = d.len();
    if n == 0 || total < n {
        return Err(Error::AlignmentInfeasible {
            phonemes: n,
            frames: total,
        });
    }
    let spare = (total - n) as f64;
    let weights: Vec<f64> = d.0.iter().map(|&v| (v.max(1) - 1) as f64 + 1e-9).collect();
    let sum: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| spare * w / sum).collect();
    let mut out: Vec<u32> = raw.iter().map(|r| 1 + r.floor() as u32).collect();
    let assigned: usize = out.iter().map(|&v| v as usize).sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        out[i] += 1;
    }
    Ok(DurationVector(out))
}

/// Prompt codes from any utterance: `H_x^p = F(x_p)`, durations predicted
/// from `x_p` and the prompt's own speech vector, fitted to the prompt's
/// frame count, then encoded and quantised.
pub fn make_prompt(mel: &MelSpectrogram, x: &PhonemeSequence, tts: &TtsModel) -> Result<Prompt> {
    let h_x = tts.encode_text(x)?;
    let s = tts.speech_vector_tensor(&tts.normalize_mel(mel)?)?;
    let d_hat = tts.predict_durations(&h_x, &s)?;
    let d = fit_durations(&d_hat, mel.n_frames())?;
    Ok(Prompt {
        codes: tts.prosody_codes(mel, &d)?,
        text: h_x,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRecord {
    pub utt: String,
    pub codes: Vec<u32>,
}

pub fn write_code_records(path: &Path, records: &[CodeRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_code_records(path: &Path) -> Result<Vec<CodeRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlmLogRecord {
    pub step: usize,
    pub loss: f64,
}

pub struct PlmModel {
    config: PlmConfig,
    params: ParamStore,
    code_embed: Tensor,
    segment_embed: Tensor,
    pos_embed: Tensor,
    text_proj: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

const SEG_PROMPT: u32 = 0;
const SEG_TARGET_TEXT: u32 = 1;
const SEG_TARGET: u32 = 2;

impl PlmModel {
    pub fn new(config: PlmConfig, dtype: DType, seed: u64) -> Result<Self> {
        if config.codebook_size < 2 {
            return Err(Error::invalid("codebook size must be at least 2"));
        }
        let mut ps = ParamStore::new(dtype, seed);
        let w = config.width;
        let code_embed = ps.var("plm.code_embed", &[config.vocab_size(), w], Init::Normal(0.5))?;
        let segment_embed = ps.var("plm.segment_embed", &[3, w], Init::Normal(0.5))?;
        let pos_embed = ps.var("plm.pos_embed", &[config.max_positions, w], Init::Normal(0.1))?;
        let text_proj = nn::linear(&mut ps, "plm.text_proj", config.text_dim, w, true)?;
        let blocks = nn::blocks(&mut ps, "plm.block", config.blocks, w, config.heads, config.ff_mult, None)?;
        let norm = LayerNorm::new(&mut ps, "plm.norm", w)?;
        let head = nn::linear_init(&mut ps, "plm.head", w, config.codebook_size, Init::Normal(1e-3))?;
        Ok(Self {
            config,
            params: ps,
            code_embed,
            segment_embed,
            pos_embed,
            text_proj,
            blocks,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &PlmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn device(&self) -> &Device {
        self.params.device()
    }

    fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn lookup(&self, table: &Tensor, ids: &[u32]) -> Result<Tensor> {
        let idx = Tensor::from_slice(ids, ids.len(), self.device())?;
        Ok(table.index_select(&idx, 0)?)
    }

    fn check_codes(&self, codes: &[u32]) -> Result<()> {
        if let Some(bad) = codes.iter().find(|&&c| c as usize >= self.config.codebook_size) {
            return Err(Error::invalid(format!(
                "code {bad} outside codebook of size {}",
                self.config.codebook_size
            )));
        }
        Ok(())
    }

    /// Logits for the first `len` target positions, `(len, T)`. Target
    /// position `j` sees `prev[j - 1]` (begin marker for `j = 0`).
    pub fn logits(&self, ctx: &PlmContext, prev: &[u32], len: usize) -> Result<Tensor> {
        let n = ctx.target_len();
        if len == 0 || len > n {
            return Err(Error::invalid(format!("cannot score {len} of {n} target positions")));
        }
        if prev.len() + 1 < len {
            return Err(Error::invalid("not enough previous codes for the requested positions"));
        }
        self.check_codes(&ctx.prompt_codes.indices)?;
        self.check_codes(&prev[..len - 1])?;
        let n_p = ctx.prompt_codes.indices.len();
        let prefix = n_p + n;
        let total = prefix + len;
        if total > self.config.max_positions {
            return Err(Error::invalid(format!(
                "sequence of {total} positions exceeds the limit of {}",
                self.config.max_positions
            )));
        }
        let dt = self.dtype();
        let target_text = ctx.target_text.to_dtype(dt)?;

        let mut parts = Vec::with_capacity(3);
        let mut segments = Vec::with_capacity(total);
        if n_p > 0 {
            let codes = self.lookup(&self.code_embed, &ctx.prompt_codes.indices)?;
            parts.push((codes + self.text_proj.forward(&ctx.prompt_text.to_dtype(dt)?)?)?);
            segments.extend(std::iter::repeat_n(SEG_PROMPT, n_p));
        }
        let mut text_rows = self.text_proj.forward(&target_text)?;
        let sep = self.lookup(&self.code_embed, &[self.config.separator_token()])?;
        text_rows = text_rows.broadcast_add(&sep)?;
        parts.push(text_rows);
        segments.extend(std::iter::repeat_n(SEG_TARGET_TEXT, n));
        let mut inputs = vec![self.config.begin_token()];
        inputs.extend_from_slice(&prev[..len - 1]);
        let tgt = (self.lookup(&self.code_embed, &inputs)? + self.text_proj.forward(&target_text.narrow(0, 0, len)?)?)?;
        parts.push(tgt);
        segments.extend(std::iter::repeat_n(SEG_TARGET, len));

        let x = Tensor::cat(&parts, 0)?;
        let x = ((x + self.lookup(&self.segment_embed, &segments)?)? + self.pos_embed.narrow(0, 0, total)?)?;
        let mask = prefix_causal_mask(prefix, len, dt, self.device())?;
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(&h, Some(&mask), None)?;
        }
        let h = self.norm.forward(&h.narrow(0, prefix, len)?)?;
        Ok(self.head.forward(&h)?)
    }

    /// Mean next-code cross-entropy over all target positions.
    pub fn teacher_forced_loss(&self, ctx: &PlmContext, target: &[u32]) -> Result<Tensor> {
        let n = ctx.target_len();
        if target.len() != n {
            return Err(Error::invalid(format!(
                "{} target codes for {n} target phonemes",
                target.len()
            )));
        }
        self.check_codes(target)?;
        let logits = self.logits(ctx, target, n)?;
        let logp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
        let idx = Tensor::from_slice(target, (n, 1), self.device())?;
        Ok((logp.gather(&idx, 1)?.mean_all()? * -1.0)?)
    }

    /// Left-to-right sampling, exactly one code per target phoneme.
    pub fn generate(&self, ctx: &PlmContext, sampling: &SamplingConfig) -> Result<ProsodyCodes> {
        if sampling.top_k == 0 || !(sampling.temperature > 0.0) {
            return Err(Error::invalid("top_k must be >= 1 and temperature > 0"));
        }
        let n = ctx.target_len();
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        let mut out: Vec<u32> = Vec::with_capacity(n);
        for j in 0..n {
            let logits = self.logits(ctx, &out, j + 1)?;
            let row = nn::to_vec1(&logits.get(j)?)?;
            out.push(sample_top_k(&row, sampling.top_k, sampling.temperature, &mut rng));
        }
        Ok(ProsodyCodes { indices: out })
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let config = serde_json::json!({ "version": PLM_VERSION, "model": self.config });
        let mut a = Archive::new(PLM_KIND, config);
        a.entries = self.params.export()?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive, dtype: DType) -> Result<Self> {
        if a.kind != PLM_KIND {
            return Err(Error::Checkpoint(format!("expected a {PLM_KIND} archive, found {}", a.kind)));
        }
        if a.config.get("version").and_then(|v| v.as_str()) != Some(PLM_VERSION) {
            return Err(Error::Checkpoint("unsupported plm checkpoint version".into()));
        }
        let config: PlmConfig = serde_json::from_value(a.config["model"].clone())?;
        let model = PlmModel::new(config, dtype, 0)?;
        model.params.import(&a.entries)?;
        Ok(model)
    }

    /// Fails unless this model's vocabulary matches `tts`'s codebook and text width.
    pub fn check_compatible(&self, tts: &TtsModel) -> Result<()> {
        let c = tts.config();
        if c.codec.codebook_size != self.config.codebook_size || c.text_dim != self.config.text_dim {
            return Err(Error::Checkpoint(format!(
                "plm expects T = {} and text width {}, tts has T = {} and text width {}",
                self.config.codebook_size, self.config.text_dim, c.codec.codebook_size, c.text_dim
            )));
        }
        Ok(())
    }
}

/// Additive mask: prefix rows see the prefix; target row `j` sees the prefix
/// and target rows `0..=j`.
fn prefix_causal_mask(prefix: usize, len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let total = prefix + len;
    let mut m = vec![0.0f64; total * total];
    for r in 0..total {
        for c in 0..total {
            let visible = if r < prefix { c < prefix } else { c <= r };
            if !visible {
                m[r * total + c] = -1e9;
            }
        }
    }
    Ok(Tensor::from_vec(m, (total, total), device)?.to_dtype(dtype)?)
}

/// Samples from the `k` highest logits (ties by lower index) after dividing
/// by `temperature`. `k = 1` is greedy and consumes no randomness.
pub fn sample_top_k(logits: &[f64], k: usize, temperature: f64, rng: &mut impl Rng) -> u32 {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let k = k.min(order.len());
    if k == 1 {
        return order[0] as u32;
    }
    let top = &order[..k];
    let max = logits[top[0]] / temperature;
    let weights: Vec<f64> = top.iter().map(|&i| (logits[i] / temperature - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (&i, w) in top.iter().zip(&weights) {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    top[k - 1] as u32
}

/// One utterance of PLM training data.
#[derive(Debug, Clone)]
pub struct PlmExample {
    pub utt: String,
    pub phonemes: PhonemeSequence,
    pub codes: Vec<u32>,
}

/// Ground-truth codes of every example: aligner durations, prosody encoder,
/// quantisation against the trained codebook.
pub fn extract_codes(
    tts: &TtsModel,
    corpus: &[crate::corpus::CorpusExample],
    audio: &crate::audio::AudioConfig,
) -> Result<Vec<CodeRecord>> {
    corpus
        .iter()
        .map(|ex| {
            let mel = crate::audio::compute_mel(&ex.waveform, audio)?;
            let d = tts.align(&ex.transcript, &mel)?;
            Ok(CodeRecord {
                utt: ex.utt_id.clone(),
                codes: tts.prosody_codes(&mel, &d)?.indices,
            })
        })
        .collect()
}

/// Splits the utterance after phoneme `k`: prompt is `0..k`, target `k..n`.
pub fn split_context(tts: &TtsModel, ex: &PlmExample, k: usize) -> Result<(PlmContext, Vec<u32>)> {
    let n = ex.phonemes.len();
    if k >= n || ex.codes.len() != n {
        return Err(Error::invalid("split point must leave a non-empty target"));
    }
    let target_ids = PhonemeSequence { ids: ex.phonemes.ids[k..].to_vec() };
    let target_text = tts.encode_text(&target_ids)?.detach();
    let (prompt_text, prompt_codes) = if k == 0 {
        (Tensor::zeros((0, tts.config().text_dim), tts.dtype(), &Device::Cpu)?, Vec::new())
    } else {
        let prompt_ids = PhonemeSequence { ids: ex.phonemes.ids[..k].to_vec() };
        (tts.encode_text(&prompt_ids)?.detach(), ex.codes[..k].to_vec())
    };
    Ok((
        PlmContext::new(ProsodyCodes { indices: prompt_codes }, prompt_text, target_text)?,
        ex.codes[k..].to_vec(),
    ))
}

/// Teacher-forced training; each step splits every sampled utterance at a
/// random phoneme boundary into prompt and target.
pub fn train_plm(
    tts: &TtsModel,
    data: &[PlmExample],
    config: &PlmConfig,
    train: &PlmTrainConfig,
    dtype: DType,
    mut on_step: impl FnMut(&PlmLogRecord),
) -> Result<(PlmModel, Vec<PlmLogRecord>)> {
    if data.is_empty() || train.batch_size == 0 {
        return Err(Error::invalid("plm training needs a non-empty batch"));
    }
    let config = PlmConfig {
        codebook_size: tts.config().codec.codebook_size,
        text_dim: tts.config().text_dim,
        ..config.clone()
    };
    let model = PlmModel::new(config, dtype, train.seed)?;
    for ex in data {
        if ex.codes.len() != ex.phonemes.len() {
            return Err(Error::invalid(format!("{}: one code per phoneme required", ex.utt)));
        }
        model.check_codes(&ex.codes)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(1);
    let mut sampler = BatchSampler::new(data.len(), rng);
    let vars = model.params.all_vars();
    let mut opt = adam(vars.clone(), train.learning_rate)?;
    let mut log = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let batch = sampler.next_batch(train.batch_size);
        let mut sum: Option<Tensor> = None;
        for &i in &batch {
            let ex = &data[i];
            let n = ex.phonemes.len();
            let k = if n >= 2 { sampler.rng().random_range(1..n) } else { 0 };
            let (ctx, target) = split_context(tts, ex, k)?;
            let l = model.teacher_forced_loss(&ctx, &target)?;
            sum = Some(match sum {
                Some(acc) => (acc + l)?,
                None => l,
            });
        }
        let loss = (sum.expect("non-empty batch") / batch.len() as f64)?;
        let value = nn::scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::TrainingDiverged { step, what: "plm loss" });
        }
        let mut grads = loss.backward()?;
        nn::clip_grad_norm(&mut grads, &vars, train.grad_clip)?;
        opt.set_learning_rate(warmup_lr(train.learning_rate, train.warmup_steps, step));
        opt.step(&grads)?;
        let rec = PlmLogRecord { step, loss: value };
        on_step(&rec);
        log.push(rec);
    }
    Ok((model, log))
}
