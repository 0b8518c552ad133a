//! Deterministic corpus synthesis.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

use super::{Lexicon, PhoneInventory, Span, Utterance};

/// Knobs for corpus generation. Defaults give 3-8 word utterances at 16 kHz
/// with 80-200 ms phones and 20 dB SNR, enough MFCC frames per phone for the
/// clustering teacher to be learnable without being trivial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub sample_rate: u32,
    /// Utterance length in words, inclusive range.
    pub words_per_utterance: (usize, usize),
    /// Per-phone duration in ms, inclusive uniform range.
    pub phone_duration_ms: (f64, f64),
    /// Silence between words in ms, uniform range.
    pub inter_word_silence_ms: (f64, f64),
    /// Silence before the first and after the last word in ms, uniform range.
    pub edge_silence_ms: (f64, f64),
    /// White-noise SNR in dB; `None` means no noise.
    pub snr_db: Option<f64>,
    /// Number of utterance classes C; label = (sum of word ids) mod C.
    pub n_classes: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            sample_rate: 16_000,
            words_per_utterance: (3, 8),
            phone_duration_ms: (80.0, 200.0),
            inter_word_silence_ms: (0.0, 40.0),
            edge_silence_ms: (0.0, 50.0),
            snr_db: Some(20.0),
            n_classes: 8,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate must be positive"));
        }
        if self.words_per_utterance.0 == 0 || self.words_per_utterance.0 > self.words_per_utterance.1 {
            return Err(Error::config("words_per_utterance range is empty"));
        }
        if self.phone_duration_ms.0 <= 0.0 || self.phone_duration_ms.0 > self.phone_duration_ms.1 {
            return Err(Error::config("phone_duration_ms range is empty"));
        }
        if self.n_classes == 0 {
            return Err(Error::config("n_classes must be >= 1"));
        }
        Ok(())
    }
}

fn synth_phone(sig: &super::PhoneSignature, n: usize, sample_rate: u32, out: &mut Vec<f64>) {
    let sr = sample_rate as f64;
    let attack = (sig.attack_ms / 1000.0 * sr).round() as usize;
    let release = (sig.release_ms / 1000.0 * sr).round() as usize;
    for t in 0..n {
        let mut v = 0.0;
        for (f, a) in sig.freqs_hz.iter().zip(sig.amps.iter()) {
            v += a * (2.0 * std::f64::consts::PI * f * t as f64 / sr).sin();
        }
        let mut env = 1.0;
        if attack > 0 && t < attack {
            env = t as f64 / attack as f64;
        }
        if release > 0 && n > release && t >= n - release {
            env = env.min((n - t) as f64 / release as f64);
        }
        out.push(v * env);
    }
}

/// Generate a deterministic corpus. Pure function of `(seed, config,
/// inventory, lexicon)`: the same inputs yield bit-identical waveforms
/// and spans.
pub fn generate_corpus(
    seed: u64,
    n_utterances: usize,
    inventory: &PhoneInventory,
    lexicon: &Lexicon,
    config: &CorpusConfig,
) -> Result<Vec<Utterance>> {
    config.validate()?;
    lexicon.validate()?;
    if inventory.is_empty() {
        return Err(Error::config("phone inventory is empty"));
    }
    if n_utterances == 0 {
        return Err(Error::config("n_utterances must be >= 1"));
    }
    for (w, phones) in lexicon.words.iter().enumerate() {
        for p in phones {
            if *p as usize >= inventory.len() {
                return Err(Error::config(format!(
                    "word {w} references phone {p} outside the inventory of {}",
                    inventory.len()
                )));
            }
        }
    }

    let sr = config.sample_rate;
    let ms_to_samples = |ms: f64| (ms / 1000.0 * sr as f64).round() as usize;

    (0..n_utterances)
        .map(|u| {
            let mut rng = rng_for(seed, "utterance", u as u64);
            let n_words =
                rng.random_range(config.words_per_utterance.0..=config.words_per_utterance.1);
            let word_ids: Vec<u32> =
                (0..n_words).map(|_| rng.random_range(0..lexicon.len() as u32)).collect();

            let mut samples: Vec<f64> = Vec::new();
            let mut word_spans = Vec::with_capacity(n_words);
            let mut phone_spans = Vec::new();

            let lead = ms_to_samples(
                rng.random_range(config.edge_silence_ms.0..=config.edge_silence_ms.1),
            );
            samples.resize(lead, 0.0);

            for (wi, &w) in word_ids.iter().enumerate() {
                if wi > 0 {
                    let gap = ms_to_samples(rng.random_range(
                        config.inter_word_silence_ms.0..=config.inter_word_silence_ms.1,
                    ));
                    samples.extend(std::iter::repeat(0.0).take(gap));
                }
                let word_start = samples.len();
                for &p in &lexicon.words[w as usize] {
                    let dur_ms = rng
                        .random_range(config.phone_duration_ms.0..=config.phone_duration_ms.1);
                    let n = ms_to_samples(dur_ms).max(1);
                    let start = samples.len();
                    synth_phone(&inventory.phones[p as usize], n, sr, &mut samples);
                    phone_spans.push(Span { id: p, start, end: samples.len() });
                }
                word_spans.push(Span { id: w, start: word_start, end: samples.len() });
            }

            let trail = ms_to_samples(
                rng.random_range(config.edge_silence_ms.0..=config.edge_silence_ms.1),
            );
            samples.extend(std::iter::repeat(0.0).take(trail));

            if let Some(snr_db) = config.snr_db {
                let power = samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64;
                let sigma = power.sqrt() * 10f64.powf(-snr_db / 20.0);
                if sigma > 0.0 {
                    let normal = Normal::new(0.0, sigma)
                        .map_err(|e| Error::config(format!("bad SNR: {e}")))?;
                    let mut noise_rng = rng_for(seed, "noise", u as u64);
                    for s in samples.iter_mut() {
                        *s += normal.sample(&mut noise_rng);
                    }
                }
            }
            for s in samples.iter_mut() {
                *s = s.clamp(-1.0, 1.0);
            }

            let label = word_ids.iter().map(|&w| u64::from(w)).sum::<u64>()
                % u64::from(config.n_classes);
            let utt = Utterance {
                id: format!("utt_{u:05}"),
                samples,
                sample_rate: sr,
                word_spans,
                phone_spans,
                label: Some(label as u32),
            };
            utt.validate()?;
            Ok(utt)
        })
        .collect()
}
