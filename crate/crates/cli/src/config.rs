//! Run configuration: built-in defaults, overridden by a JSON file, overridden
//! by command-line flags.

use std::path::{Path, PathBuf};

use face2voice::audio::AudioConfig;
use face2voice::face::{FaceEncoderConfig, FaceTrainConfig};
use face2voice::plm::{PlmConfig, PlmTrainConfig, SamplingConfig};
use face2voice::tts::{TtsConfig, TtsTrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RESOLVED_NAME: &str = "run_config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Output directory for checkpoints, logs, reports and generated corpora.
    pub out_dir: PathBuf,
    /// Corpus manifest (JSON lines).
    pub corpus: Option<PathBuf>,
    pub tts: Option<PathBuf>,
    pub plm: Option<PathBuf>,
    pub face: Option<PathBuf>,
    /// Speech-vector cache; `FACE2VOICE_CACHE` takes precedence.
    pub cache_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("face2voice-run"),
            corpus: None,
            tts: None,
            plm: None,
            face: None,
            cache_dir: None,
        }
    }
}

impl Paths {
    pub fn tts(&self) -> PathBuf {
        self.tts.clone().unwrap_or_else(|| self.out_dir.join("tts.f2va"))
    }

    pub fn plm(&self) -> PathBuf {
        self.plm.clone().unwrap_or_else(|| self.out_dir.join("plm.f2va"))
    }

    pub fn face(&self) -> PathBuf {
        self.face.clone().unwrap_or_else(|| self.out_dir.join("face.f2va"))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSettings {
    pub speakers: usize,
    pub utts: usize,
    pub frames: usize,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            speakers: 4,
            utts: 20,
            frames: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// The last `held_out` identities of the corpus are excluded from face
    /// training and used for evaluation; 0 evaluates on every identity.
    pub held_out: usize,
    /// Evaluation text; defaults to the first corpus transcript.
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed, copied into every stage. Required for training.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub audio: AudioConfig,
    pub corpus: CorpusSettings,
    pub tts: TtsConfig,
    pub tts_train: TtsTrainConfig,
    pub plm: PlmConfig,
    pub plm_train: PlmTrainConfig,
    pub face: FaceEncoderConfig,
    pub face_train: FaceTrainConfig,
    pub sampling: SamplingConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Copies the master seed into each stage's seed.
    pub fn propagate_seed(&mut self) {
        if let Some(s) = self.seed {
            self.tts_train.seed = s;
            self.plm_train.seed = s;
            self.face_train.seed = s;
            self.sampling.seed = s;
        }
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Usage("a seed is required for training: pass --seed or set \"seed\" in the config".into()))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(face2voice::Error::io(dir, e)))?;
        let path = dir.join(RESOLVED_NAME);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.into()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::Runtime(face2voice::Error::io(&path, e)))?;
        Ok(path)
    }
}
