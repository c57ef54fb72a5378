//! End-to-end synthesis: reference-speech conditioning and face conditioning.

use candle_core::Tensor;

use crate::audio::MelSpectrogram;
use crate::corpus::FaceImage;
use crate::error::Result;
use crate::face::FaceEncoder;
use crate::phoneme::PhonemeSequence;
use crate::plm::{PlmModel, Prompt, SamplingConfig};
use crate::tts::{Synthesis, TtsModel};

/// Trained TTS model with its optional prosody language model.
pub struct Voice<'a> {
    pub tts: &'a TtsModel,
    pub plm: Option<&'a PlmModel>,
}

impl Voice<'_> {
    /// Synthesis conditioned on an arbitrary vector `s` in speech-vector space.
    /// Durations are predicted with `s`; prosody codes come from the PLM
    /// when the model uses the prosody codec.
    pub fn synthesize_conditioned(
        &self,
        s: &Tensor,
        x: &PhonemeSequence,
        prompt: Option<&Prompt>,
        sampling: &SamplingConfig,
        seed: u64,
    ) -> Result<Synthesis> {
        let h_x = self.tts.encode_text(x)?;
        let d = self.tts.predict_durations(&h_x, s)?;
        let codes = if self.tts.config().use_prosody {
            let plm = self
                .plm
                .ok_or_else(|| crate::Error::invalid("a prosody language model is required"))?;
            plm.check_compatible(self.tts)?;
            let prompt = prompt.ok_or_else(|| crate::Error::invalid("prosody prompt required"))?;
            Some(plm.generate(&prompt.with_target(h_x.clone())?, sampling)?)
        } else {
            None
        };
        self.tts.synthesize_with_durations(&h_x, &d, s, codes.as_ref(), seed)
    }

    /// Reference-speech inference: `s = S(Y_r)`.
    pub fn infer(
        &self,
        x: &PhonemeSequence,
        reference: &MelSpectrogram,
        prompt: Option<&Prompt>,
        sampling: &SamplingConfig,
        seed: u64,
    ) -> Result<Synthesis> {
        let s = self.tts.speech_vector_tensor(&self.tts.normalize_mel(reference)?)?;
        self.synthesize_conditioned(&s, x, prompt, sampling, seed)
    }

    /// Face-conditioned synthesis: the face vector `v = E(I)` replaces `s`.
    pub fn synthesize_from_face(
        &self,
        face: &FaceImage,
        encoder: &FaceEncoder,
        x: &PhonemeSequence,
        prompt: Option<&Prompt>,
        sampling: &SamplingConfig,
        seed: u64,
    ) -> Result<Synthesis> {
        encoder.check_compatible(self.tts)?;
        let v = encoder.encode_tensor(face)?.to_dtype(self.tts.dtype())?;
        self.synthesize_conditioned(&v, x, prompt, sampling, seed)
    }
}
