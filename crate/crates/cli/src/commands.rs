//! Command implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use face2voice::audio::{GriffinLim, Waveform};
use face2voice::checkpoint::Archive;
use face2voice::corpus::{self, CorpusExample, FaceImage};
use face2voice::eval::{self, EvalIdentity, OracleTranscriber, Report, SpeakerEmbedder, SpeechEncoderEmbedder, SynthesisSetup};
use face2voice::face::{self, FaceEncoder, LossVariant, SpeechVectorCache};
use face2voice::phoneme::{self, PhonemeSequence};
use face2voice::pipeline::Voice;
use face2voice::plm::{self, PlmExample, PlmModel, Prompt};
use face2voice::tts::{self, TtsModel};
use face2voice::{DType, Error};
use serde::Serialize;
use tracing::info;

use crate::config::RunConfig;
use crate::CliError;

type CliResult<T> = Result<T, CliError>;

fn out_dir(cfg: &RunConfig) -> CliResult<&Path> {
    let d = cfg.paths.out_dir.as_path();
    std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    Ok(d)
}

/// JSON-lines writer for per-step training records.
struct JsonLines {
    path: PathBuf,
    out: std::io::BufWriter<std::fs::File>,
    error: Option<std::io::Error>,
}

impl JsonLines {
    fn create(path: PathBuf) -> CliResult<Self> {
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: std::io::BufWriter::new(f),
            error: None,
        })
    }

    fn push(&mut self, rec: &impl Serialize) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(rec).expect("log records serialise");
        if let Err(e) = writeln!(self.out, "{line}") {
            self.error = Some(e);
        }
    }

    fn finish(mut self) -> CliResult<()> {
        if let Some(e) = self.error.take() {
            return Err(Error::io(&self.path, e).into());
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(())
    }
}

fn load_corpus(cfg: &RunConfig) -> CliResult<Vec<CorpusExample>> {
    let path = cfg
        .paths
        .corpus
        .as_ref()
        .ok_or_else(|| CliError::Usage("no corpus manifest given: pass --corpus or set paths.corpus".into()))?;
    let corpus = corpus::load_manifest(path)?;
    if corpus.is_empty() {
        return Err(Error::invalid(format!("corpus {} is empty", path.display())).into());
    }
    Ok(corpus)
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("missing {what} checkpoint {} (train that stage first)", path.display())).into())
    }
}

fn load_tts(cfg: &RunConfig) -> CliResult<TtsModel> {
    let p = cfg.paths.tts();
    require(&p, "tts")?;
    Ok(TtsModel::from_archive(&Archive::load(&p)?, DType::F32)?)
}

fn load_plm(cfg: &RunConfig, tts: &TtsModel) -> CliResult<Option<PlmModel>> {
    if !tts.config().use_prosody {
        return Ok(None);
    }
    let p = cfg.paths.plm();
    require(&p, "plm")?;
    let m = PlmModel::from_archive(&Archive::load(&p)?, DType::F32)?;
    m.check_compatible(tts)?;
    Ok(Some(m))
}

fn load_face(cfg: &RunConfig, tts: &TtsModel) -> CliResult<FaceEncoder> {
    let p = cfg.paths.face();
    require(&p, "face")?;
    let e = FaceEncoder::from_archive(&Archive::load(&p)?, DType::F32)?;
    e.check_compatible(tts)?;
    Ok(e)
}

/// Splits the corpus into face-training and evaluation identities.
fn split_identities(cfg: &RunConfig, corpus: &[CorpusExample]) -> (Vec<CorpusExample>, Vec<CorpusExample>) {
    let groups = corpus::group_by_speaker(corpus);
    let held = cfg.eval.held_out.min(groups.len());
    if held == 0 {
        return (corpus.to_vec(), corpus.to_vec());
    }
    let held_ids: Vec<&str> = groups[groups.len() - held..].iter().map(|(id, _)| id.as_str()).collect();
    corpus.iter().cloned().partition(|e| !held_ids.contains(&e.speaker_id.as_str()))
}

fn speech_cache(cfg: &RunConfig) -> SpeechVectorCache {
    SpeechVectorCache::from_env(&cfg.paths.cache_dir())
}

pub fn gen_corpus(cfg: &RunConfig) -> CliResult<()> {
    let c = &cfg.corpus;
    let corpus = corpus::generate_synthetic_corpus(cfg.seed.unwrap_or(0), c.speakers, c.utts, c.frames)?;
    let dir = out_dir(cfg)?;
    let manifest = corpus::write_synthetic_corpus(&corpus, dir)?;
    cfg.write_resolved(dir)?;
    println!(
        "wrote {} records for {} speakers ({} face frames each) to {}",
        corpus.examples.len(),
        corpus.speakers.len(),
        c.frames,
        manifest.display()
    );
    Ok(())
}

pub fn train_tts(cfg: &RunConfig) -> CliResult<()> {
    let corpus = load_corpus(cfg)?;
    let dir = out_dir(cfg)?;
    cfg.write_resolved(dir)?;
    let mut log = JsonLines::create(dir.join("tts_log.jsonl"))?;
    let every = (cfg.tts_train.steps / 10).max(1);
    let (model, records) = tts::train_tts(&corpus, &cfg.tts, &cfg.tts_train, &cfg.audio, DType::F32, |r| {
        log.push(r);
        if r.step % every == 0 {
            info!(step = r.step, loss_mel = r.loss_mel, loss_dur = r.loss_dur, loss_vq = r.loss_vq, "tts");
        }
    })?;
    log.finish()?;
    let path = cfg.paths.tts();
    model.to_archive()?.save(&path)?;
    println!("trained tts for {} steps; checkpoint {}", records.len(), path.display());
    Ok(())
}

pub fn train_plm(cfg: &RunConfig) -> CliResult<()> {
    let tts = load_tts(cfg)?;
    let corpus = load_corpus(cfg)?;
    let dir = out_dir(cfg)?;
    cfg.write_resolved(dir)?;
    let codes = plm::extract_codes(&tts, &corpus, &cfg.audio)?;
    plm::write_code_records(&dir.join("prosody_codes.jsonl"), &codes)?;
    let data: Vec<PlmExample> = corpus
        .iter()
        .zip(codes)
        .map(|(ex, c)| PlmExample {
            utt: ex.utt_id.clone(),
            phonemes: ex.transcript.clone(),
            codes: c.codes,
        })
        .collect();
    let mut log = JsonLines::create(dir.join("plm_log.jsonl"))?;
    let every = (cfg.plm_train.steps / 10).max(1);
    let (model, records) = plm::train_plm(&tts, &data, &cfg.plm, &cfg.plm_train, DType::F32, |r| {
        log.push(r);
        if r.step % every == 0 {
            info!(step = r.step, loss = r.loss, "plm");
        }
    })?;
    log.finish()?;
    let path = cfg.paths.plm();
    model.to_archive()?.save(&path)?;
    println!("trained plm for {} steps; checkpoint {}", records.len(), path.display());
    Ok(())
}

pub fn train_face(cfg: &RunConfig) -> CliResult<()> {
    let tts = load_tts(cfg)?;
    let corpus = load_corpus(cfg)?;
    let dir = out_dir(cfg)?;
    cfg.write_resolved(dir)?;
    let (train, _) = split_identities(cfg, &corpus);
    let speech = speech_cache(cfg).load_or_compute(&tts, &train, &cfg.audio)?;
    let pairs = face::make_pairs(&train, &speech)?;
    let mut log = JsonLines::create(dir.join("face_log.jsonl"))?;
    let every = (cfg.face_train.steps / 10).max(1);
    let (enc, records) = face::train_face_encoder(&pairs, &cfg.face, &cfg.face_train, DType::F32, |r| {
        log.push(r);
        if r.step % every == 0 {
            info!(step = r.step, loss = r.loss, "face");
        }
    })?;
    log.finish()?;
    let path = cfg.paths.face();
    enc.to_archive()?.save(&path)?;
    println!(
        "trained face encoder ({}) for {} steps; checkpoint {}",
        cfg.face_train.loss.variant.name(),
        records.len(),
        path.display()
    );
    Ok(())
}

/// Prosody prompt from the utterance `id`, or from the first corpus
/// utterance when no id is given.
fn prompt_from(cfg: &RunConfig, tts: &TtsModel, id: Option<&str>) -> CliResult<Option<Prompt>> {
    if !tts.config().use_prosody {
        return Ok(None);
    }
    let corpus = load_corpus(cfg)?;
    let ex = match id {
        Some(id) => corpus
            .iter()
            .find(|e| e.utt_id == id)
            .ok_or_else(|| CliError::Usage(format!("prompt utterance {id} is not in the corpus")))?,
        None => {
            info!("no --prompt given; using the first training utterance {}", corpus[0].utt_id);
            &corpus[0]
        }
    };
    let mel = face2voice::audio::compute_mel(&ex.waveform, &cfg.audio)?;
    Ok(Some(plm::make_prompt(&mel, &ex.transcript, tts)?))
}

pub fn synthesize(cfg: &RunConfig, face_path: &Path, text: &str, prompt: Option<&str>, out: &Path) -> CliResult<()> {
    let tts = load_tts(cfg)?;
    let plm = load_plm(cfg, &tts)?;
    let enc = load_face(cfg, &tts)?;
    let face = FaceImage::read_png(face_path)?;
    let x = phoneme::text_to_phonemes(text)?;
    let prompt = prompt_from(cfg, &tts, prompt)?;
    let voice = Voice { tts: &tts, plm: plm.as_ref() };
    let seed = cfg.seed.unwrap_or(0);
    let syn = voice.synthesize_from_face(&face, &enc, &x, prompt.as_ref(), &cfg.sampling, seed)?;
    let wave: Waveform = GriffinLim { iterations: 64, seed }.render(&syn.mel, &cfg.audio)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    wave.write_wav(out)?;
    cfg.write_resolved(out_dir(cfg)?)?;
    println!(
        "wrote {} ({} frames, {:.3} s)",
        out.display(),
        syn.durations.total(),
        wave.duration_secs()
    );
    Ok(())
}

/// Shared state for the evaluation suites.
struct EvalContext {
    tts: TtsModel,
    plm: Option<PlmModel>,
    train: Vec<CorpusExample>,
    held: Vec<CorpusExample>,
    held_speech: Vec<Vec<f64>>,
    text: PhonemeSequence,
    prompt: Option<Prompt>,
}

impl EvalContext {
    fn new(cfg: &RunConfig) -> CliResult<Self> {
        let tts = load_tts(cfg)?;
        let plm = load_plm(cfg, &tts)?;
        let corpus = load_corpus(cfg)?;
        let (train, held) = split_identities(cfg, &corpus);
        let held_speech = speech_cache(cfg).load_or_compute(&tts, &held, &cfg.audio)?;
        let text = match &cfg.eval.text {
            Some(t) => phoneme::text_to_phonemes(t)?,
            None => corpus[0].transcript.clone(),
        };
        let prompt = prompt_from(cfg, &tts, Some(&train[0].utt_id))?;
        Ok(Self {
            tts,
            plm,
            train,
            held,
            held_speech,
            text,
            prompt,
        })
    }

    fn setup(&self, cfg: &RunConfig) -> SynthesisSetup<'_> {
        SynthesisSetup {
            voice: Voice {
                tts: &self.tts,
                plm: self.plm.as_ref(),
            },
            text: self.text.clone(),
            prompt: self.prompt.clone(),
            sampling: cfg.sampling,
            seed: cfg.seed.unwrap_or(0),
        }
    }

    fn identities(&self, cfg: &RunConfig) -> CliResult<Vec<EvalIdentity<'_>>> {
        Ok(eval::eval_identities(&self.held, &self.held_speech, &cfg.audio, cfg.seed.unwrap_or(0))?)
    }
}

fn write_report(dir: &Path, name: &str, report: &Report) -> CliResult<()> {
    let json = dir.join(format!("{name}.json"));
    std::fs::write(&json, report.to_json()? + "\n").map_err(|e| Error::io(&json, e))?;
    let txt = dir.join(format!("{name}.txt"));
    let table = report.render_table();
    std::fs::write(&txt, &table).map_err(|e| Error::io(&txt, e))?;
    print!("{table}");
    Ok(())
}

pub fn evaluate_metrics(cfg: &RunConfig) -> CliResult<()> {
    let ctx = EvalContext::new(cfg)?;
    let enc = load_face(cfg, &ctx.tts)?;
    let dir = out_dir(cfg)?;
    cfg.write_resolved(dir)?;
    let emb = SpeechEncoderEmbedder {
        tts: &ctx.tts,
        audio: cfg.audio.clone(),
    };
    let asr = OracleTranscriber::from_corpus(&ctx.train, &cfg.audio, Some(&ctx.tts))?;
    let name = cfg
        .paths
        .face()
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "face".into());
    let row = eval::evaluate_face_encoder(&name, &enc, &ctx.identities(cfg)?, &ctx.setup(cfg), &emb, &asr)?;
    write_report(dir, "report_metrics", &Report { rows: vec![row] })
}

#[derive(Serialize)]
struct IdentityConsistency {
    id: String,
    matrix: Vec<Vec<f64>>,
    off_diagonal_mean: f64,
}

#[derive(Serialize)]
struct ConsistencyReport {
    identities: Vec<IdentityConsistency>,
    cross_identity_mean: f64,
    fraction_above_cross: f64,
}

pub fn evaluate_consistency(cfg: &RunConfig) -> CliResult<()> {
    let ctx = EvalContext::new(cfg)?;
    let enc = load_face(cfg, &ctx.tts)?;
    let dir = out_dir(cfg)?;
    cfg.write_resolved(dir)?;
    let emb = SpeechEncoderEmbedder {
        tts: &ctx.tts,
        audio: cfg.audio.clone(),
    };
    let setup = ctx.setup(cfg);
    let identities = ctx.identities(cfg)?;
    let mut rows = Vec::new();
    let mut firsts = Vec::new();
    for ident in &identities {
        if ident.faces.len() < 2 {
            return Err(Error::invalid(format!("identity {} has a single face frame", ident.id)).into());
        }
        let r = eval::consistency_test(&ident.faces, &setup, &enc, &emb)?;
        firsts.push(emb.embed(eval::Audio::Mel(&setup.from_face(&ident.faces[0], &enc)?))?);
        rows.push(IdentityConsistency {
            id: ident.id.clone(),
            matrix: r.matrix,
            off_diagonal_mean: r.off_diagonal_mean,
        });
    }
    let cross = if firsts.len() >= 2 { eval::sed_embeddings(&firsts)? } else { f64::NAN };
    let above = rows.iter().filter(|r| r.off_diagonal_mean > cross).count();
    let report = ConsistencyReport {
        fraction_above_cross: above as f64 / rows.len().max(1) as f64,
        identities: rows,
        cross_identity_mean: cross,
    };
    let path = dir.join("consistency.json");
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    for r in &report.identities {
        println!("{:<12} same-identity SECS {:>7.2}", r.id, r.off_diagonal_mean);
    }
    println!(
        "cross-identity SECS {:.2}; {:.0}% of identities above it",
        report.cross_identity_mean,
        100.0 * report.fraction_above_cross
    );
    Ok(())
}

pub fn evaluate_ablation(cfg: &RunConfig) -> CliResult<()> {
    let ctx = EvalContext::new(cfg)?;
    let dir = out_dir(cfg)?;
    cfg.write_resolved(dir)?;
    let emb = SpeechEncoderEmbedder {
        tts: &ctx.tts,
        audio: cfg.audio.clone(),
    };
    let asr = OracleTranscriber::from_corpus(&ctx.train, &cfg.audio, Some(&ctx.tts))?;
    let speech = speech_cache(cfg).load_or_compute(&ctx.tts, &ctx.train, &cfg.audio)?;
    let pairs = face::make_pairs(&ctx.train, &speech)?;
    let (report, _) = eval::run_ablation(
        &pairs,
        &LossVariant::ALL,
        &cfg.face,
        &cfg.face_train,
        &ctx.identities(cfg)?,
        &ctx.setup(cfg),
        &emb,
        &asr,
    )?;
    write_report(dir, "report_ablation", &report)
}
