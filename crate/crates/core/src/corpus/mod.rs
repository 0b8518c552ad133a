//! Synthetic speech-like corpus with exact phone/word alignments.
//!
//! Utterances are concatenations of per-phone signals (a sinusoid mixture
//! per phone with an amplitude envelope) separated by optional silence, plus
//! white Gaussian noise at a configured SNR. Span bookkeeping is sample-exact,
//! which is what makes the alignment-based analyses downstream trustworthy.

mod manifest;
mod synth;
mod wav;

pub use manifest::{load_corpus, save_corpus, ManifestEntry};
pub use synth::{generate_corpus, CorpusConfig};
pub use wav::{load_wav, write_wav_f32, write_wav_i16};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use rand::Rng;

/// Half-open labelled span `[start, end)` in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub id: u32,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn contains(&self, sample: usize) -> bool {
        sample >= self.start && sample < self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Spectral signature of one phone: sinusoid partials plus a linear
/// attack/release amplitude envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhoneSignature {
    /// Partial frequencies in Hz.
    pub freqs_hz: Vec<f64>,
    /// Per-partial amplitudes; their sum bounds the peak amplitude.
    pub amps: Vec<f64>,
    pub attack_ms: f64,
    pub release_ms: f64,
}

/// The phone set with per-phone signatures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhoneInventory {
    pub phones: Vec<PhoneSignature>,
}

impl PhoneInventory {
    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    /// Label id used for frames outside every phone span.
    pub fn silence_id(&self) -> u32 {
        self.phones.len() as u32
    }

    /// Seed-deterministic inventory of `p` phones with pairwise distinct
    /// fundamentals spread over the 300..3600 Hz band.
    pub fn random(p: usize, seed: u64) -> Result<Self> {
        if p < 2 {
            return Err(Error::config(format!("phone inventory needs P >= 2, got {p}")));
        }
        let mut rng = rng_for(seed, "phone-inventory", 0);
        let lo = 300.0;
        let hi = 3600.0;
        let step = (hi - lo) / p as f64;
        let phones = (0..p)
            .map(|i| {
                // one slot per phone, jittered inside it, keeps fundamentals distinct
                let f0 = lo + step * (i as f64 + 0.15 + 0.7 * rng.random::<f64>());
                let second = (f0 * (1.8 + 0.4 * rng.random::<f64>())).min(7600.0);
                PhoneSignature {
                    freqs_hz: vec![f0, second],
                    amps: vec![0.6, 0.3],
                    attack_ms: 8.0,
                    release_ms: 8.0,
                }
            })
            .collect();
        Ok(PhoneInventory { phones })
    }
}

/// Word id -> phone id sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub words: Vec<Vec<u32>>,
}

impl Lexicon {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Label id used for frames outside every word span.
    pub fn silence_id(&self) -> u32 {
        self.words.len() as u32
    }

    /// Seed-deterministic lexicon of `v` words of 1..=5 phones each.
    pub fn random(v: usize, inventory: &PhoneInventory, seed: u64) -> Result<Self> {
        if v < 2 {
            return Err(Error::config(format!("lexicon needs V >= 2, got {v}")));
        }
        if inventory.is_empty() {
            return Err(Error::config("cannot build a lexicon over an empty phone inventory"));
        }
        let p = inventory.len() as u32;
        let mut rng = rng_for(seed, "lexicon", 0);
        let words = (0..v)
            .map(|_| {
                let n = rng.random_range(1..=5usize);
                (0..n).map(|_| rng.random_range(0..p)).collect()
            })
            .collect();
        Ok(Lexicon { words })
    }

    pub fn validate(&self) -> Result<()> {
        if self.words.is_empty() {
            return Err(Error::config("lexicon is empty"));
        }
        for (i, w) in self.words.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::config(format!("word {i} has no phones")));
            }
        }
        Ok(())
    }
}

/// One waveform with ground-truth alignments and an utterance-class label.
///
/// Immutable after creation; safe to share across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub word_spans: Vec<Span>,
    pub phone_spans: Vec<Span>,
    pub label: Option<u32>,
}

impl Utterance {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sorted, non-overlapping, in-range spans; word spans must be exact
    /// unions of their phone spans.
    pub fn validate(&self) -> Result<()> {
        let n = self.samples.len();
        for (name, spans) in [("word", &self.word_spans), ("phone", &self.phone_spans)] {
            let mut prev_end = 0usize;
            for s in spans.iter() {
                if s.is_empty() || s.end > n || s.start < prev_end {
                    return Err(Error::config(format!(
                        "{name} span {s:?} out of order or out of range in utterance {}",
                        self.id
                    )));
                }
                prev_end = s.end;
            }
        }
        // each word span is exactly covered by consecutive phone spans
        for w in &self.word_spans {
            let inside: Vec<&Span> = self
                .phone_spans
                .iter()
                .filter(|p| p.start >= w.start && p.end <= w.end)
                .collect();
            if inside.is_empty()
                || inside.first().unwrap().start != w.start
                || inside.last().unwrap().end != w.end
                || inside.windows(2).any(|ab| ab[0].end != ab[1].start)
            {
                return Err(Error::config(format!(
                    "word span {w:?} is not the union of its phone spans in utterance {}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}
