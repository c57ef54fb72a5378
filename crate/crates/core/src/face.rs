//! Face encoder, the face-to-speech-vector mapping objective and its
//! ablation variants, and face-encoder training against a frozen speech
//! encoder.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv2d, Linear, Optimizer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{compute_mel, AudioConfig};
use crate::checkpoint::Archive;
use crate::corpus::{CorpusExample, FaceImage, FACE_SIZE};
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};
use crate::tts::{adam, BatchSampler, TtsModel};

pub const FACE_KIND: &str = "face";
pub const FACE_VERSION: &str = "face2voice-face/1";
pub const CACHE_KIND: &str = "speech-vectors";
pub const CACHE_ENV: &str = "FACE2VOICE_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    MseCos,
    MseCosTriplet,
    MseCosContrastive,
}

impl LossVariant {
    pub const ALL: [LossVariant; 3] = [LossVariant::MseCos, LossVariant::MseCosTriplet, LossVariant::MseCosContrastive];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::MseCos => "mse_cos",
            LossVariant::MseCosTriplet => "mse_cos_triplet",
            LossVariant::MseCosContrastive => "mse_cos_contrastive",
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown loss variant {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MappingLossConfig {
    pub temperature: f64,
    pub variant: LossVariant,
    pub margin: f64,
}

impl Default for MappingLossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            variant: LossVariant::MseCosContrastive,
            margin: 0.2,
        }
    }
}

/// Individual terms of the mapping loss, each averaged over the batch.
#[derive(Debug, Clone)]
pub struct MapLoss {
    pub total: Tensor,
    pub cosine: Tensor,
    pub mse: Tensor,
    /// Contrastive or triplet term; zero for `MseCos`.
    pub extra: Tensor,
}

const MASKED: f64 = -1e30;

/// Mean squared coordinate error over all entries of `v - s`.
pub fn mse_term(v: &Tensor, s: &Tensor) -> Result<Tensor> {
    Ok((v - s)?.sqr()?.mean_all()?)
}

/// Mapping loss between face vectors `v` and speech vectors `s`, both
/// `(M, d)`. Negatives for row `i` are the other rows of `s`, excluding rows
/// whose label equals `labels[i]` when labels are given.
pub fn map_loss(v: &Tensor, s: &Tensor, labels: Option<&[usize]>, cfg: &MappingLossConfig) -> Result<MapLoss> {
    let (m, d) = v.dims2()?;
    if s.dims2()? != (m, d) {
        return Err(Error::invalid(format!("face batch {:?} vs speech batch {:?}", v.dims(), s.dims())));
    }
    if m == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    if let Some(l) = labels {
        if l.len() != m {
            return Err(Error::invalid("one label per batch row required"));
        }
    }
    let v_norm = v.sqr()?.sum_keepdim(1)?.sqrt()?;
    let s_norm = s.sqr()?.sum_keepdim(1)?.sqrt()?;
    for (what, norms) in [("face", &v_norm), ("speech", &s_norm)] {
        if let Some(i) = nn::to_vec1(norms)?.iter().position(|&x| x == 0.0 || !x.is_finite()) {
            return Err(Error::DegenerateVector(format!("{what} vector {i} has zero or non-finite norm")));
        }
    }
    let vu = v.broadcast_div(&v_norm)?;
    let su = s.broadcast_div(&s_norm)?;
    let cos = vu.matmul(&su.t()?)?;
    let diag = (&vu * &su)?.sum(1)?;
    let cosine = diag.mean_all()?.affine(-1.0, 1.0)?;
    let mse = mse_term(v, s)?;

    let dt = v.dtype();
    let negative = |i: usize, k: usize| i != k && labels.is_none_or(|l| l[i] != l[k]);
    let mask = |keep_diag: bool| -> Result<Tensor> {
        let m_: Vec<f64> = (0..m * m)
            .map(|ik| {
                let (i, k) = (ik / m, ik % m);
                if negative(i, k) || (keep_diag && i == k) {
                    0.0
                } else {
                    MASKED
                }
            })
            .collect();
        Ok(Tensor::from_vec(m_, (m, m), v.device())?.to_dtype(dt)?)
    };
    let extra = match cfg.variant {
        LossVariant::MseCos => Tensor::zeros((), dt, v.device())?,
        LossVariant::MseCosContrastive => {
            let logits = (&cos / cfg.temperature)?.broadcast_add(&mask(true)?)?;
            let logp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
            let idx = Tensor::from_vec((0..m as u32).collect::<Vec<_>>(), (m, 1), v.device())?;
            (logp.gather(&idx, 1)?.mean_all()? * -1.0)?
        }
        LossVariant::MseCosTriplet => {
            let hardest = cos.broadcast_add(&mask(false)?)?.max(D::Minus1)?;
            ((hardest - &diag)? + cfg.margin)?.relu()?.mean_all()?
        }
    };
    let total = ((&cosine + &mse)? + &extra)?;
    Ok(MapLoss {
        total,
        cosine,
        mse,
        extra,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaceEncoderConfig {
    /// Non-overlapping average-pooling factor applied to the input image.
    pub stem_pool: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub speech_dim: usize,
}

impl Default for FaceEncoderConfig {
    fn default() -> Self {
        Self {
            stem_pool: 4,
            channels: vec![16, 32, 64, 64],
            kernel: 3,
            speech_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaceTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub loss: MappingLossConfig,
}

impl Default for FaceTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 32,
            learning_rate: 1e-4,
            grad_clip: 5.0,
            seed: 0,
            loss: MappingLossConfig::default(),
        }
    }
}

/// Strided convolution stack, global average pool, linear head to `d_S`.
pub struct FaceEncoder {
    config: FaceEncoderConfig,
    params: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl FaceEncoder {
    pub fn new(config: FaceEncoderConfig, dtype: DType, seed: u64) -> Result<Self> {
        if config.channels.is_empty() || config.stem_pool == 0 || FACE_SIZE % config.stem_pool != 0 {
            return Err(Error::invalid("face encoder needs channels and a pool factor dividing 224"));
        }
        let mut ps = ParamStore::new(dtype, seed);
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            convs.push(nn::conv2d(&mut ps, &format!("face.conv{i}"), c_in, c, config.kernel, 2)?);
            c_in = c;
        }
        let head = nn::linear(&mut ps, "face.head", c_in, config.speech_dim, true)?;
        Ok(Self {
            config,
            params: ps,
            convs,
            head,
        })
    }

    pub fn config(&self) -> &FaceEncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `(B, 3, 224, 224)` pixels to the pooled stem input.
    pub fn stem(&self, images: &[&FaceImage]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::invalid("no face images given"));
        }
        let mut data = Vec::with_capacity(images.len() * crate::corpus::FACE_LEN);
        for im in images {
            data.extend_from_slice(im.pixels());
        }
        let x = Tensor::from_vec(data, (images.len(), 3, FACE_SIZE, FACE_SIZE), self.params.device())?
            .to_dtype(self.params.dtype())?;
        let p = self.config.stem_pool;
        Ok(if p > 1 { x.avg_pool2d(p)? } else { x })
    }

    /// Face vectors `(B, d_S)` from pooled stem inputs.
    pub fn forward_pooled(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h)?.relu()?;
        }
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(self.head.forward(&pooled)?)
    }

    pub fn encode_batch(&self, images: &[&FaceImage]) -> Result<Tensor> {
        self.forward_pooled(&self.stem(images)?)
    }

    /// `v = E(I)`.
    pub fn encode(&self, image: &FaceImage) -> Result<Vec<f64>> {
        nn::to_vec1(&self.encode_batch(&[image])?)
    }

    pub fn encode_tensor(&self, image: &FaceImage) -> Result<Tensor> {
        Ok(self.encode_batch(&[image])?.squeeze(0)?)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let config = serde_json::json!({ "version": FACE_VERSION, "model": self.config });
        let mut a = Archive::new(FACE_KIND, config);
        a.entries = self.params.export()?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive, dtype: DType) -> Result<Self> {
        if a.kind != FACE_KIND {
            return Err(Error::Checkpoint(format!("expected a {FACE_KIND} archive, found {}", a.kind)));
        }
        if a.config.get("version").and_then(|v| v.as_str()) != Some(FACE_VERSION) {
            return Err(Error::Checkpoint("unsupported face checkpoint version".into()));
        }
        let config: FaceEncoderConfig = serde_json::from_value(a.config["model"].clone())?;
        let model = FaceEncoder::new(config, dtype, 0)?;
        model.params.import(&a.entries)?;
        Ok(model)
    }

    /// Fails unless the output dimension equals `tts`'s speech dimension.
    pub fn check_compatible(&self, tts: &TtsModel) -> Result<()> {
        if self.config.speech_dim != tts.config().speech_dim {
            return Err(Error::Checkpoint(format!(
                "face encoder emits {} dimensions, tts speech vectors have {}",
                self.config.speech_dim,
                tts.config().speech_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceLogRecord {
    pub step: usize,
    pub loss: f64,
    pub loss_cos: f64,
    pub loss_mse: f64,
    pub loss_extra: f64,
    /// Running minimum of `loss`.
    pub best: f64,
}

/// Speech vectors of each example under the frozen speech encoder.
pub fn compute_speech_vectors(tts: &TtsModel, corpus: &[CorpusExample], audio: &AudioConfig) -> Result<Vec<Vec<f64>>> {
    corpus
        .iter()
        .map(|ex| tts.encode_speech(&compute_mel(&ex.waveform, audio)?))
        .collect()
}

/// On-disk cache of speech vectors keyed by the TTS checkpoint and the
/// utterance list.
pub struct SpeechVectorCache {
    dir: PathBuf,
}

impl SpeechVectorCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// `FACE2VOICE_CACHE` if set, otherwise `default`.
    pub fn from_env(default: &Path) -> Self {
        match std::env::var_os(CACHE_ENV) {
            Some(d) if !d.is_empty() => Self::new(PathBuf::from(d)),
            _ => Self::new(default),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn key(tts: &TtsModel, corpus: &[CorpusExample]) -> Result<String> {
        let mut h = crc32fast::Hasher::new();
        h.update(&tts.to_archive()?.to_bytes()?);
        for ex in corpus {
            h.update(ex.utt_id.as_bytes());
            h.update(&[0]);
        }
        Ok(format!("{:08x}", h.finalize()))
    }

    pub fn load_or_compute(
        &self,
        tts: &TtsModel,
        corpus: &[CorpusExample],
        audio: &AudioConfig,
    ) -> Result<Vec<Vec<f64>>> {
        let path = self.dir.join(format!("speech_vectors_{}.f2va", Self::key(tts, corpus)?));
        if path.exists() {
            let a = Archive::load_kind(&path, CACHE_KIND)?;
            let (shape, data) = a.get("s")?;
            let d = tts.config().speech_dim;
            if shape.as_slice() == [corpus.len(), d] {
                return Ok(data.chunks(d).map(|c| c.to_vec()).collect());
            }
        }
        let vectors = compute_speech_vectors(tts, corpus, audio)?;
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut a = Archive::new(CACHE_KIND, serde_json::json!({ "utterances": corpus.len() }));
        a.insert(
            "s",
            vec![corpus.len(), tts.config().speech_dim],
            vectors.iter().flatten().copied().collect(),
        );
        a.save(&path)?;
        Ok(vectors)
    }
}

/// One face-speech training pair.
#[derive(Debug, Clone)]
pub struct FacePair<'a> {
    pub face: &'a FaceImage,
    pub speech: &'a [f64],
    pub identity: usize,
}

/// Builds face-speech pairs; every example must carry a face.
pub fn make_pairs<'a>(corpus: &'a [CorpusExample], speech: &'a [Vec<f64>]) -> Result<Vec<FacePair<'a>>> {
    if corpus.len() != speech.len() {
        return Err(Error::invalid("one speech vector per example required"));
    }
    let mut ids: Vec<&str> = Vec::new();
    corpus
        .iter()
        .zip(speech)
        .map(|(ex, s)| {
            let face = ex
                .face
                .as_deref()
                .ok_or_else(|| Error::invalid(format!("{} has no face image", ex.utt_id)))?;
            let identity = match ids.iter().position(|&i| i == ex.speaker_id) {
                Some(p) => p,
                None => {
                    ids.push(&ex.speaker_id);
                    ids.len() - 1
                }
            };
            Ok(FacePair {
                face,
                speech: s,
                identity,
            })
        })
        .collect()
}

/// Cosine decay from `base` at step 0 towards zero at `total`.
fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Optimises the mapping loss over `pairs`; the speech vectors are fixed.
/// The learning rate follows a cosine decay over `train.steps`.
pub fn train_face_encoder(
    pairs: &[FacePair<'_>],
    config: &FaceEncoderConfig,
    train: &FaceTrainConfig,
    dtype: DType,
    mut on_step: impl FnMut(&FaceLogRecord),
) -> Result<(FaceEncoder, Vec<FaceLogRecord>)> {
    if pairs.is_empty() || train.batch_size == 0 {
        return Err(Error::invalid("face training needs pairs and a positive batch size"));
    }
    let d = pairs[0].speech.len();
    if pairs.iter().any(|p| p.speech.len() != d) {
        return Err(Error::invalid("speech vectors have unequal dimensions"));
    }
    let identities = pairs.iter().map(|p| p.identity).collect::<std::collections::BTreeSet<_>>();
    if train.loss.variant != LossVariant::MseCos && identities.len() < 2 {
        return Err(Error::invalid("negatives need at least two identities"));
    }
    let config = FaceEncoderConfig {
        speech_dim: d,
        ..config.clone()
    };
    let model = FaceEncoder::new(config, dtype, train.seed)?;

    let mut pooled_cache: std::collections::HashMap<*const FaceImage, Tensor> = Default::default();
    for p in pairs {
        let key = p.face as *const FaceImage;
        if let std::collections::hash_map::Entry::Vacant(e) = pooled_cache.entry(key) {
            e.insert(model.stem(&[p.face])?);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(1);
    let mut sampler = BatchSampler::new(pairs.len(), rng);
    let vars = model.params.all_vars();
    let mut opt = adam(vars.clone(), train.learning_rate)?;
    let mut log = Vec::with_capacity(train.steps);
    let mut best = f64::INFINITY;
    for step in 0..train.steps {
        let batch = sampler.next_batch(train.batch_size);
        let x = Tensor::cat(
            &batch
                .iter()
                .map(|&i| pooled_cache[&(pairs[i].face as *const FaceImage)].clone())
                .collect::<Vec<_>>(),
            0,
        )?;
        let s: Vec<f64> = batch.iter().flat_map(|&i| pairs[i].speech.iter().copied()).collect();
        let s = Tensor::from_vec(s, (batch.len(), d), &Device::Cpu)?.to_dtype(dtype)?;
        let labels: Vec<usize> = batch.iter().map(|&i| pairs[i].identity).collect();
        let v = model.forward_pooled(&x)?;
        let l = map_loss(&v, &s, Some(&labels), &train.loss)?;
        let value = nn::scalar(&l.total)?;
        if !value.is_finite() {
            return Err(Error::TrainingDiverged { step, what: "mapping loss" });
        }
        let mut grads = l.total.backward()?;
        nn::clip_grad_norm(&mut grads, &vars, train.grad_clip)?;
        opt.set_learning_rate(cosine_lr(train.learning_rate, step, train.steps));
        opt.step(&grads)?;
        best = best.min(value);
        let rec = FaceLogRecord {
            step,
            loss: value,
            loss_cos: nn::scalar(&l.cosine)?,
            loss_mse: nn::scalar(&l.mse)?,
            loss_extra: nn::scalar(&l.extra)?,
            best,
        };
        on_step(&rec);
        log.push(rec);
    }
    Ok((model, log))
}

/// Cosine similarity of two vectors; errors on zero norms.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("cosine of vectors with different lengths"));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector("zero-norm vector in cosine".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Fraction of queries whose cosine-nearest gallery entry has the query's
/// own index. `queries[i]` belongs to `gallery[i]`; ties go to the lower index.
pub fn recall_at_1(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<f64> {
    if queries.is_empty() || queries.len() != gallery.len() {
        return Err(Error::invalid("retrieval needs one query per gallery entry"));
    }
    let mut hits = 0;
    for (i, q) in queries.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (j, g) in gallery.iter().enumerate() {
            let c = cosine(q, g)?;
            if c > best.0 {
                best = (c, j);
            }
        }
        if best.1 == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}
