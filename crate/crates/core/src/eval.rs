//! Objective metrics (CER, SECS, SED), the frame-consistency test and the
//! loss-variant ablation runner.

use serde::{Deserialize, Serialize};

use crate::align::monotonic_alignment;
use crate::audio::{compute_mel, AudioConfig, MelSpectrogram, Waveform};
use crate::corpus::{CorpusExample, FaceImage};
use crate::error::{Error, Result};
use crate::face::{self, FaceEncoder, FaceEncoderConfig, FacePair, FaceTrainConfig, LossVariant};
use crate::phoneme::{self, PhonemeSequence, VOCAB_SIZE};
use crate::pipeline::Voice;
use crate::plm::{Prompt, SamplingConfig};
use crate::tts::TtsModel;

/// Speech input to an embedder or transcriber.
#[derive(Debug, Clone, Copy)]
pub enum Audio<'a> {
    Wave(&'a Waveform),
    Mel(&'a MelSpectrogram),
}

impl Audio<'_> {
    pub fn to_mel(&self, cfg: &AudioConfig) -> Result<MelSpectrogram> {
        match self {
            Audio::Wave(w) => compute_mel(w, cfg),
            Audio::Mel(m) => Ok((*m).clone()),
        }
    }
}

/// Maps speech to a unit-norm vector of fixed dimension.
pub trait SpeakerEmbedder {
    fn embed(&self, audio: Audio<'_>) -> Result<Vec<f64>>;
}

/// Maps speech to text. `expected` carries the known content for
/// forced-decoding backends and may be ignored by free-running ones.
pub trait Transcriber {
    fn transcribe(&self, audio: Audio<'_>, expected: Option<&PhonemeSequence>) -> Result<String>;
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateVector("cannot normalise a zero or non-finite embedding".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// The trained speech encoder followed by L2 normalisation.
pub struct SpeechEncoderEmbedder<'a> {
    pub tts: &'a TtsModel,
    pub audio: AudioConfig,
}

impl SpeakerEmbedder for SpeechEncoderEmbedder<'_> {
    fn embed(&self, audio: Audio<'_>) -> Result<Vec<f64>> {
        l2_normalize(&self.tts.encode_speech(&audio.to_mel(&self.audio)?)?)
    }
}

/// Transcriber for synthetic speech with known content: force-aligns the
/// expected phonemes against per-phoneme mel templates, classifies each
/// aligned segment by its nearest template and renders the graphemes.
pub struct OracleTranscriber {
    templates: Vec<Option<Vec<f64>>>,
    audio: AudioConfig,
}

impl OracleTranscriber {
    /// Templates are the mean log-mel frame of each phoneme. Segments come
    /// from the renderer's true durations when known, otherwise from
    /// `aligner`; examples with neither are skipped.
    pub fn from_corpus(corpus: &[CorpusExample], audio: &AudioConfig, aligner: Option<&TtsModel>) -> Result<Self> {
        let b = audio.n_mels;
        let mut sums = vec![vec![0.0f64; b]; VOCAB_SIZE];
        let mut counts = vec![0usize; VOCAB_SIZE];
        for ex in corpus {
            let mel = compute_mel(&ex.waveform, audio)?;
            let d = match (&ex.true_durations, aligner) {
                (Some(d), _) => d.clone(),
                (None, Some(tts)) => tts.align(&ex.transcript, &mel)?.0,
                (None, None) => continue,
            };
            let mut t = 0;
            for (&p, &len) in ex.transcript.ids.iter().zip(&d) {
                for _ in 0..len {
                    if t >= mel.n_frames() {
                        break;
                    }
                    for (s, &v) in sums[p as usize].iter_mut().zip(mel.frame(t)) {
                        *s += v as f64;
                    }
                    counts[p as usize] += 1;
                    t += 1;
                }
            }
        }
        let templates = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
            .collect();
        Ok(Self {
            templates,
            audio: audio.clone(),
        })
    }

    fn distance(&self, frame: &[f64], p: usize) -> f64 {
        match &self.templates[p] {
            Some(t) => t.iter().zip(frame).map(|(a, b)| (a - b) * (a - b)).sum(),
            None => f64::INFINITY,
        }
    }

    /// Phoneme ids recognised in `mel` given the expected content.
    pub fn decode(&self, mel: &MelSpectrogram, expected: &PhonemeSequence) -> Result<Vec<u32>> {
        let frames: Vec<Vec<f64>> = mel.frames().map(|f| f.iter().map(|&v| v as f64).collect()).collect();
        let sim: Vec<Vec<f64>> = expected
            .ids
            .iter()
            .map(|&p| {
                frames
                    .iter()
                    .map(|f| {
                        let d = self.distance(f, p as usize);
                        if d.is_finite() { -d } else { -1e12 }
                    })
                    .collect()
            })
            .collect();
        let durations = monotonic_alignment(&sim)?;
        let mut t = 0;
        let mut out = Vec::with_capacity(durations.len());
        for &d in &durations {
            let mut mean = vec![0.0f64; mel.n_mels];
            for f in &frames[t..t + d as usize] {
                for (m, v) in mean.iter_mut().zip(f) {
                    *m += v / d as f64;
                }
            }
            t += d as usize;
            let best = (0..VOCAB_SIZE)
                .map(|p| (self.distance(&mean, p), p))
                .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a });
            out.push(best.1 as u32);
        }
        Ok(out)
    }
}

impl Transcriber for OracleTranscriber {
    fn transcribe(&self, audio: Audio<'_>, expected: Option<&PhonemeSequence>) -> Result<String> {
        let expected = expected.ok_or_else(|| Error::invalid("the oracle transcriber needs the expected content"))?;
        let mel = audio.to_mel(&self.audio)?;
        Ok(phoneme::render(&self.decode(&mel, expected)?))
    }
}

fn normalize_text(s: &str) -> Vec<char> {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ").chars().collect()
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate in percent, after lowercasing and whitespace
/// normalisation.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r = normalize_text(reference);
    if r.is_empty() {
        return Err(Error::invalid("reference text is empty"));
    }
    let h = normalize_text(hypothesis);
    Ok(100.0 * edit_distance(&r, &h) as f64 / r.len() as f64)
}

/// `100 * cos` of two embeddings.
pub fn secs_embeddings(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(100.0 * face::cosine(a, b)?)
}

/// Speaker embedding cosine similarity on the x100 scale.
pub fn secs(a: Audio<'_>, b: Audio<'_>, emb: &dyn SpeakerEmbedder) -> Result<f64> {
    secs_embeddings(&emb.embed(a)?, &emb.embed(b)?)
}

/// Mean SECS over all unordered pairs of embeddings.
pub fn sed_embeddings(embeddings: &[Vec<f64>]) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::invalid("speaker diversity needs at least two utterances"));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            total += secs_embeddings(&embeddings[i], &embeddings[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Speaker embedding diversity: mean pairwise SECS.
pub fn sed(audios: &[Audio<'_>], emb: &dyn SpeakerEmbedder) -> Result<f64> {
    if audios.len() < 2 {
        return Err(Error::invalid("speaker diversity needs at least two utterances"));
    }
    let e = audios.iter().map(|a| emb.embed(*a)).collect::<Result<Vec<_>>>()?;
    sed_embeddings(&e)
}

/// Fixed synthesis inputs shared by every evaluated face.
pub struct SynthesisSetup<'a> {
    pub voice: Voice<'a>,
    pub text: PhonemeSequence,
    pub prompt: Option<Prompt>,
    pub sampling: SamplingConfig,
    pub seed: u64,
}

impl SynthesisSetup<'_> {
    pub fn from_face(&self, face: &FaceImage, encoder: &FaceEncoder) -> Result<MelSpectrogram> {
        Ok(self
            .voice
            .synthesize_from_face(face, encoder, &self.text, self.prompt.as_ref(), &self.sampling, self.seed)?
            .mel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyResult {
    pub matrix: Vec<Vec<f64>>,
    pub off_diagonal_mean: f64,
}

/// Pairwise SECS among syntheses from several frames of one identity, with
/// identical text, prompt and seed.
pub fn consistency_test(
    frames: &[&FaceImage],
    setup: &SynthesisSetup<'_>,
    encoder: &FaceEncoder,
    emb: &dyn SpeakerEmbedder,
) -> Result<ConsistencyResult> {
    if frames.len() < 2 {
        return Err(Error::invalid("consistency needs at least two frames"));
    }
    let e = frames
        .iter()
        .map(|f| emb.embed(Audio::Mel(&setup.from_face(f, encoder)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(similarity_matrix(&e)?)
}

/// Symmetric SECS matrix with a diagonal of exactly 100.
pub fn similarity_matrix(e: &[Vec<f64>]) -> Result<ConsistencyResult> {
    let n = e.len();
    let mut matrix = vec![vec![100.0; n]; n];
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let s = secs_embeddings(&e[i], &e[j])?;
            matrix[i][j] = s;
            matrix[j][i] = s;
            total += 2.0 * s;
        }
    }
    let off = if n > 1 { total / (n * (n - 1)) as f64 } else { f64::NAN };
    Ok(ConsistencyResult {
        matrix,
        off_diagonal_mean: off,
    })
}

/// One held-out identity for evaluation.
pub struct EvalIdentity<'a> {
    pub id: String,
    pub faces: Vec<&'a FaceImage>,
    /// Ground-truth utterance compared against for SECS.
    pub reference: MelSpectrogram,
    /// Mean speech vector over the identity's utterances (retrieval gallery).
    pub speech_mean: Vec<f64>,
}

/// Builds evaluation identities from a corpus. The SECS reference is one
/// utterance per identity chosen by `seed`.
pub fn eval_identities<'a>(
    corpus: &'a [CorpusExample],
    speech: &[Vec<f64>],
    audio: &AudioConfig,
    seed: u64,
) -> Result<Vec<EvalIdentity<'a>>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (id, idx) in crate::corpus::group_by_speaker(corpus) {
        let mut faces: Vec<&FaceImage> = Vec::new();
        let mut frame_ids: Vec<u32> = Vec::new();
        for &i in &idx {
            if let (Some(f), fi) = (&corpus[i].face, corpus[i].frame_index.unwrap_or(0)) {
                if !frame_ids.contains(&fi) {
                    frame_ids.push(fi);
                    faces.push(f);
                }
            }
        }
        let mut order: Vec<usize> = (0..faces.len()).collect();
        order.sort_by_key(|&k| frame_ids[k]);
        let faces = order.into_iter().map(|k| faces[k]).collect::<Vec<_>>();
        if faces.is_empty() {
            return Err(Error::invalid(format!("identity {id} has no face images")));
        }
        let d = speech[idx[0]].len();
        let mut mean = vec![0.0; d];
        for &i in &idx {
            for (m, v) in mean.iter_mut().zip(&speech[i]) {
                *m += v / idx.len() as f64;
            }
        }
        let r = idx[rng.random_range(0..idx.len())];
        out.push(EvalIdentity {
            id,
            faces,
            reference: compute_mel(&corpus[r].waveform, audio)?,
            speech_mean: mean,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub cer: f64,
    pub secs: f64,
    pub sed: f64,
    pub n: usize,
    pub recall_at_1: f64,
    /// Reserved for externally collected mean opinion scores.
    pub mos: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.rows)?)
    }

    pub fn render_table(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
        let mut out = format!(
            "{:<name_w$}  {:>6}  {:>7}  {:>7}  {:>7}  {:>9}  {:>4}\n",
            "Variant", "MOS", "CER", "SECS", "SED", "Recall@1", "n"
        );
        for r in &self.rows {
            let mos = r.mos.map(|m| format!("{m:.2}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:<name_w$}  {:>6}  {:>7.2}  {:>7.2}  {:>7.2}  {:>9.3}  {:>4}\n",
                r.variant, mos, r.cer, r.secs, r.sed, r.recall_at_1, r.n
            ));
        }
        out
    }
}

/// Objective metrics of one face encoder over held-out identities: CER of
/// the synthesis, SECS against each identity's reference utterance, SED
/// across identities and v-to-s retrieval recall@1.
pub fn evaluate_face_encoder(
    name: &str,
    encoder: &FaceEncoder,
    identities: &[EvalIdentity<'_>],
    setup: &SynthesisSetup<'_>,
    emb: &dyn SpeakerEmbedder,
    asr: &dyn Transcriber,
) -> Result<ReportRow> {
    if identities.len() < 2 {
        return Err(Error::invalid("evaluation needs at least two identities"));
    }
    let reference_text = phoneme::render(&setup.text.ids);
    let mut cers = 0.0;
    let mut secs_total = 0.0;
    let mut synth_emb = Vec::with_capacity(identities.len());
    let mut queries = Vec::with_capacity(identities.len());
    for ident in identities {
        let face = ident.faces[0];
        queries.push(encoder.encode(face)?);
        let mel = setup.from_face(face, encoder)?;
        let hyp = asr.transcribe(Audio::Mel(&mel), Some(&setup.text))?;
        cers += cer(&reference_text, &hyp)?;
        let e = emb.embed(Audio::Mel(&mel))?;
        secs_total += secs_embeddings(&e, &emb.embed(Audio::Mel(&ident.reference))?)?;
        synth_emb.push(e);
    }
    let gallery: Vec<Vec<f64>> = identities.iter().map(|i| i.speech_mean.clone()).collect();
    let n = identities.len();
    Ok(ReportRow {
        variant: name.to_string(),
        cer: cers / n as f64,
        secs: secs_total / n as f64,
        sed: sed_embeddings(&synth_emb)?,
        n,
        recall_at_1: face::recall_at_1(&queries, &gallery)?,
        mos: None,
    })
}

/// Trains one face encoder per loss variant with identical seeds and
/// budgets, and evaluates each. Returns the report and the trained encoders.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    pairs: &[FacePair<'_>],
    variants: &[LossVariant],
    encoder_config: &FaceEncoderConfig,
    train: &FaceTrainConfig,
    identities: &[EvalIdentity<'_>],
    setup: &SynthesisSetup<'_>,
    emb: &dyn SpeakerEmbedder,
    asr: &dyn Transcriber,
) -> Result<(Report, Vec<FaceEncoder>)> {
    let mut report = Report::default();
    let mut encoders = Vec::new();
    for &variant in variants {
        let cfg = FaceTrainConfig {
            loss: crate::face::MappingLossConfig { variant, ..train.loss },
            ..train.clone()
        };
        let (enc, _) = face::train_face_encoder(pairs, encoder_config, &cfg, setup.voice.tts.dtype(), |_| {})?;
        report
            .rows
            .push(evaluate_face_encoder(variant.name(), &enc, identities, setup, emb, asr)?);
        encoders.push(enc);
    }
    Ok((report, encoders))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cer_hand_examples() {
        assert_eq!(cer("hello", "hello").unwrap(), 0.0);
        assert_eq!(cer("hello", "helo").unwrap(), 20.0);
        assert_eq!(cer("abc", "xyz").unwrap(), 100.0);
        assert_eq!(cer("Hello  World", "hello world").unwrap(), 0.0);
        assert!(matches!(cer("  ", "x"), Err(Error::InvalidInput(_))));
    }

    struct Stub(Vec<Vec<f64>>);

    impl SpeakerEmbedder for Stub {
        fn embed(&self, audio: Audio<'_>) -> Result<Vec<f64>> {
            match audio {
                Audio::Wave(w) => l2_normalize(&self.0[w.samples[0] as usize]),
                Audio::Mel(_) => Err(Error::invalid("stub")),
            }
        }
    }

    fn wave(i: usize) -> Waveform {
        Waveform::new(vec![i as f32; 4], 16_000).unwrap()
    }

    #[test]
    fn secs_and_sed_with_orthogonal_stub() {
        let stub = Stub(vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]]);
        let w: Vec<Waveform> = (0..3).map(wave).collect();
        assert_eq!(secs(Audio::Wave(&w[0]), Audio::Wave(&w[1]), &stub).unwrap(), 0.0);
        let all: Vec<Audio> = w.iter().map(Audio::Wave).collect();
        assert_eq!(sed(&all, &stub).unwrap(), 0.0);
        assert!(sed(&all[..1], &stub).is_err());
    }

    #[test]
    fn sed_of_copies_is_100() {
        let stub = Stub(vec![vec![0.3, -0.7, 0.2]]);
        let w = wave(0);
        for n in 2..6 {
            let all = vec![Audio::Wave(&w); n];
            assert!((sed(&all, &stub).unwrap() - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn similarity_matrix_shape() {
        let r = similarity_matrix(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        for i in 0..3 {
            assert_eq!(r.matrix[i][i], 100.0);
            for j in 0..3 {
                assert_eq!(r.matrix[i][j], r.matrix[j][i]);
            }
        }
    }

    #[test]
    fn report_renders_one_line_per_row() {
        let row = ReportRow {
            variant: "mse_cos".into(),
            cer: 1.0,
            secs: 50.0,
            sed: 60.0,
            n: 4,
            recall_at_1: 0.5,
            mos: None,
        };
        let r = Report { rows: vec![row.clone(), ReportRow { variant: "x".into(), ..row }] };
        assert_eq!(r.render_table().lines().count(), 3);
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 2);
        for key in ["variant", "cer", "secs", "sed", "n"] {
            assert!(v[0].get(key).is_some());
        }
    }
}
