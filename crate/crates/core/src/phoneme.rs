//! The closed phoneme inventory used by the synthetic corpus, its acoustic
//! descriptors, and the bundled grapheme-to-phoneme table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Manner {
    Vowel,
    Nasal,
    Approximant,
    Fricative,
    VoicedFricative,
}

#[derive(Debug, Clone, Copy)]
pub struct Phoneme {
    pub grapheme: &'static str,
    pub manner: Manner,
    /// Formant centres (Hz) for a neutral vocal tract.
    pub formants: [f64; 3],
    /// Centre and bandwidth (Hz) of the frication noise band.
    pub noise: (f64, f64),
    pub gain: f64,
}

const fn voiced(grapheme: &'static str, manner: Manner, formants: [f64; 3], gain: f64) -> Phoneme {
    Phoneme {
        grapheme,
        manner,
        formants,
        noise: (0.0, 0.0),
        gain,
    }
}

const fn fricative(grapheme: &'static str, manner: Manner, noise: (f64, f64), gain: f64) -> Phoneme {
    Phoneme {
        grapheme,
        manner,
        formants: [300.0, 1200.0, 2500.0],
        noise,
        gain,
    }
}

pub const INVENTORY: [Phoneme; 20] = [
    voiced("a", Manner::Vowel, [730.0, 1090.0, 2440.0], 1.0),
    voiced("e", Manner::Vowel, [530.0, 1840.0, 2480.0], 0.95),
    voiced("i", Manner::Vowel, [270.0, 2290.0, 3010.0], 0.85),
    voiced("o", Manner::Vowel, [570.0, 840.0, 2410.0], 0.95),
    voiced("u", Manner::Vowel, [300.0, 870.0, 2240.0], 0.8),
    voiced("ae", Manner::Vowel, [660.0, 1720.0, 2410.0], 1.0),
    voiced("m", Manner::Nasal, [280.0, 900.0, 2200.0], 0.45),
    voiced("n", Manner::Nasal, [280.0, 1700.0, 2600.0], 0.45),
    voiced("ng", Manner::Nasal, [280.0, 2300.0, 2750.0], 0.4),
    voiced("l", Manner::Approximant, [360.0, 1300.0, 2700.0], 0.6),
    voiced("r", Manner::Approximant, [420.0, 1300.0, 1600.0], 0.6),
    voiced("w", Manner::Approximant, [300.0, 610.0, 2200.0], 0.55),
    voiced("y", Manner::Approximant, [260.0, 2070.0, 3020.0], 0.55),
    fricative("s", Manner::Fricative, (6000.0, 1500.0), 0.35),
    fricative("sh", Manner::Fricative, (3200.0, 1000.0), 0.4),
    fricative("f", Manner::Fricative, (4500.0, 3000.0), 0.2),
    fricative("h", Manner::Fricative, (1500.0, 1500.0), 0.2),
    fricative("th", Manner::Fricative, (5000.0, 2500.0), 0.15),
    fricative("z", Manner::VoicedFricative, (6000.0, 1500.0), 0.35),
    fricative("v", Manner::VoicedFricative, (4500.0, 3000.0), 0.3),
];

pub const VOCAB_SIZE: usize = INVENTORY.len();

pub fn phoneme(id: u32) -> Option<&'static Phoneme> {
    INVENTORY.get(id as usize)
}

/// Phoneme ids over a vocabulary of size `vocab`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhonemeSequence {
    pub ids: Vec<u32>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<u32>, vocab: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("phoneme sequence must be non-empty"));
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::invalid(format!(
                "phoneme id {bad} outside vocabulary of size {vocab}"
            )));
        }
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Character rendering through the bundled inventory.
    pub fn render(&self) -> String {
        render(&self.ids)
    }
}

pub fn render(ids: &[u32]) -> String {
    ids.iter()
        .map(|&id| phoneme(id).map_or("?", |p| p.grapheme))
        .collect()
}

/// Greedy longest-match lookup of lowercase text against the grapheme table.
/// Whitespace separates words and carries no phoneme.
pub fn text_to_phonemes(text: &str) -> Result<PhonemeSequence> {
    let lower = text.to_lowercase();
    let mut ids = Vec::new();
    for word in lower.split_whitespace() {
        let mut rest = word;
        while !rest.is_empty() {
            let (id, len) = INVENTORY
                .iter()
                .enumerate()
                .filter(|(_, p)| rest.starts_with(p.grapheme))
                .map(|(i, p)| (i as u32, p.grapheme.len()))
                .max_by_key(|&(_, len)| len)
                .ok_or_else(|| {
                    Error::invalid(format!("no phoneme for {:?} in {word:?}", rest.chars().next().unwrap()))
                })?;
            ids.push(id);
            rest = &rest[len..];
        }
    }
    PhonemeSequence::new(ids, VOCAB_SIZE)
}
