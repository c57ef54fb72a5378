//! Prosody codec: a convolutional encoder over the low mel bins, pooling to
//! one vector per phoneme, and a vector-quantisation bottleneck.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ParamStore, SeqConv};

/// Mean of the frames inside each duration segment: `(m, d) -> (n, d)`.
pub fn pool_by_phoneme(frames: &Tensor, durations: &[u32]) -> Result<Tensor> {
    let m = frames.dim(0)?;
    let total: usize = durations.iter().map(|&d| d as usize).sum();
    if total != m {
        return Err(Error::invalid(format!(
            "durations sum to {total} but there are {m} frames"
        )));
    }
    if durations.iter().any(|&d| d == 0) {
        return Err(Error::invalid("every duration must be at least one frame"));
    }
    let n = durations.len();
    let mut weights = vec![0.0f64; n * m];
    let mut t = 0;
    for (i, &d) in durations.iter().enumerate() {
        let w = 1.0 / d as f64;
        for _ in 0..d {
            weights[i * m + t] = w;
            t += 1;
        }
    }
    let p = Tensor::from_vec(weights, (n, m), frames.device())?.to_dtype(frames.dtype())?;
    Ok(p.matmul(frames)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub codebook_size: usize,
    pub dim: usize,
    pub n_low: usize,
    pub kernel: usize,
    pub commitment: f64,
    pub ema_decay: f64,
    /// Entries unused for this many consecutive updates are reseeded.
    pub dead_after: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            codebook_size: 128,
            dim: 128,
            n_low: 20,
            kernel: 3,
            commitment: 0.25,
            ema_decay: 0.99,
            dead_after: 100,
        }
    }
}

/// Two convolutions over the low-frequency mel bins, then per-phoneme means.
#[derive(Debug, Clone)]
pub struct ProsodyEncoder {
    conv1: SeqConv,
    conv2: SeqConv,
}

impl ProsodyEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &CodecConfig) -> Result<Self> {
        Ok(Self {
            conv1: SeqConv::new(ps, &format!("{name}.conv1"), cfg.n_low, cfg.dim, cfg.kernel)?,
            conv2: SeqConv::new(ps, &format!("{name}.conv2"), cfg.dim, cfg.dim, cfg.kernel)?,
        })
    }

    /// `(m, n_low) -> (m, dim)`.
    pub fn frames(&self, low_mel: &Tensor) -> Result<Tensor> {
        self.conv2.forward(&self.conv1.forward(low_mel)?.relu()?)
    }

    /// `H_y`: one row per phoneme.
    pub fn encode(&self, low_mel: &Tensor, durations: &[u32]) -> Result<Tensor> {
        pool_by_phoneme(&self.frames(low_mel)?, durations)
    }
}

/// `T x dim` code vectors with the EMA bookkeeping used during training.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    entries: Vec<f64>,
    counts: Vec<f64>,
    last_used: Vec<u64>,
    updates: u64,
}

impl Codebook {
    pub fn new(entries: Vec<f64>, size: usize, dim: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid("a codebook needs at least two entries"));
        }
        if entries.len() != size * dim {
            return Err(Error::invalid(format!(
                "codebook data has {} values, expected {size}x{dim}",
                entries.len()
            )));
        }
        if entries.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("codebook contains NaN"));
        }
        Ok(Self {
            size,
            dim,
            entries,
            counts: vec![1.0; size],
            last_used: vec![0; size],
            updates: 0,
        })
    }

    pub fn zeros(size: usize, dim: usize) -> Result<Self> {
        Self::new(vec![0.0; size * dim], size, dim)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, t: usize) -> &[f64] {
        &self.entries[t * self.dim..(t + 1) * self.dim]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn set_counts(&mut self, counts: Vec<f64>) -> Result<()> {
        if counts.len() != self.size {
            return Err(Error::invalid("count vector length differs from codebook size"));
        }
        self.counts = counts;
        Ok(())
    }

    pub fn tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.entries, (self.size, self.dim), device)?.to_dtype(dtype)?)
    }

    /// Index of the nearest entry by squared L2 distance; ties go to the
    /// lowest index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for t in 0..self.size {
            let d: f64 = self.entry(t).iter().zip(v).map(|(c, x)| (x - c) * (x - c)).sum();
            if d < best.1 {
                best = (t, d);
            }
        }
        best.0
    }

    /// Fills every entry with a randomly chosen row of `vectors`.
    pub fn init_from(&mut self, vectors: &[Vec<f64>], rng: &mut impl Rng) {
        if vectors.is_empty() {
            return;
        }
        for t in 0..self.size {
            let v = &vectors[rng.random_range(0..vectors.len())];
            self.entries[t * self.dim..(t + 1) * self.dim].copy_from_slice(v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProsodyCodes {
    pub indices: Vec<u32>,
}

#[derive(Debug)]
pub struct Quantized {
    pub codes: ProsodyCodes,
    /// Codebook rows selected by `codes`.
    pub quantized: Tensor,
    /// `h + sg(q - h)`: forward value equals `quantized`, gradient is the
    /// identity onto `h`.
    pub pass_through: Tensor,
    /// `||sg(h) - q||^2`, averaged over elements.
    pub codebook_loss: Tensor,
    /// `beta * ||h - sg(q)||^2`, averaged over elements.
    pub commitment_loss: Tensor,
}

/// Vector quantisation of `h` `(n, dim)` against `codebook` `(T, dim)`.
/// `codebook` may be a variable, in which case the codebook loss carries
/// gradient to it.
pub fn quantize(h: &Tensor, codebook: &Tensor, beta: f64) -> Result<Quantized> {
    let (n, dim) = h.dims2()?;
    let (size, cdim) = codebook.dims2()?;
    if dim != cdim {
        return Err(Error::invalid(format!(
            "prosody width {dim} does not match codebook width {cdim}"
        )));
    }
    let rows = nn::to_vec2(h)?;
    let book = Codebook::new(nn::to_vec1(codebook)?, size, dim)?;
    let indices: Vec<u32> = rows.iter().map(|r| book.nearest(r) as u32).collect();
    let idx = Tensor::from_slice(&indices, n, h.device())?;
    let quantized = codebook.index_select(&idx, 0)?;
    let pass_through = (h + (&quantized - h)?.detach())?;
    let codebook_loss = (h.detach() - &quantized)?.sqr()?.mean_all()?;
    let commitment_loss = ((h - quantized.detach())?.sqr()?.mean_all()? * beta)?;
    Ok(Quantized {
        codes: ProsodyCodes { indices },
        quantized,
        pass_through,
        codebook_loss,
        commitment_loss,
    })
}

/// Codebook rows for `codes`.
pub fn dequantize(codes: &ProsodyCodes, codebook: &Tensor) -> Result<Tensor> {
    let size = codebook.dim(0)?;
    if let Some(bad) = codes.indices.iter().find(|&&c| c as usize >= size) {
        return Err(Error::invalid(format!("code {bad} outside codebook of size {size}")));
    }
    if codes.indices.is_empty() {
        return Err(Error::invalid("cannot dequantize an empty code sequence"));
    }
    let idx = Tensor::from_slice(&codes.indices, codes.indices.len(), codebook.device())?;
    Ok(codebook.index_select(&idx, 0)?)
}

/// Exponential-moving-average codebook update.
///
/// For each entry with `k > 0` assigned vectors of mean `mu`:
/// `count <- decay * count + (1 - decay) * k` and
/// `entry <- entry + (1 - decay) * k / count * (mu - entry)`, which is the
/// running ratio of decayed sums. Entries without assignments keep their
/// value while their count decays. Entries that have gone `dead_after`
/// updates without an assignment are reseeded to a random assigned vector.
pub fn update_codebook(
    book: &mut Codebook,
    vectors: &[Vec<f64>],
    codes: &[u32],
    decay: f64,
    dead_after: u64,
    rng: &mut impl Rng,
) -> Result<()> {
    if vectors.len() != codes.len() {
        return Err(Error::invalid("one code per assigned vector required"));
    }
    let dim = book.dim;
    let mut sums = vec![0.0f64; book.size * dim];
    let mut hits = vec![0usize; book.size];
    for (v, &c) in vectors.iter().zip(codes) {
        let c = c as usize;
        if c >= book.size || v.len() != dim {
            return Err(Error::invalid("assignment outside codebook or wrong width"));
        }
        hits[c] += 1;
        for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(v) {
            *s += x;
        }
    }
    book.updates += 1;
    for t in 0..book.size {
        let k = hits[t] as f64;
        book.counts[t] = decay * book.counts[t] + (1.0 - decay) * k;
        if hits[t] == 0 {
            continue;
        }
        book.last_used[t] = book.updates;
        let rate = (1.0 - decay) * k / book.counts[t];
        for (e, s) in book.entries[t * dim..(t + 1) * dim]
            .iter_mut()
            .zip(&sums[t * dim..(t + 1) * dim])
        {
            let mean = s / k;
            *e += rate * (mean - *e);
        }
    }
    if !vectors.is_empty() {
        for t in 0..book.size {
            if book.updates - book.last_used[t] >= dead_after {
                let v = &vectors[rng.random_range(0..vectors.len())];
                book.entries[t * dim..(t + 1) * dim].copy_from_slice(v);
                book.counts[t] = 1.0;
                book.last_used[t] = book.updates;
            }
        }
    }
    Ok(())
}
