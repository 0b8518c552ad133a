//! MFCC front end and frame-level alignment labels.
//!
//! The 39-dim pipeline (13 cepstra + deltas + delta-deltas) is the teacher
//! for the first clustering pass; later passes cluster encoder layers
//! instead, so [`FeatureSequence`] carries a [`FeatureKind`] tag.

use ndarray::Array2;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::corpus::{Span, Utterance};
use crate::error::{Error, Result};

/// Where a feature matrix came from: the MFCC front end or hidden layer `l`
/// of a trained encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    Mfcc,
    LayerEmbedding(usize),
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureKind::Mfcc => write!(f, "mfcc"),
            FeatureKind::LayerEmbedding(l) => write!(f, "layer:{l}"),
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "mfcc" {
            return Ok(FeatureKind::Mfcc);
        }
        if let Some(l) = s.strip_prefix("layer:") {
            let l = l
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad feature kind `{s}`")))?;
            return Ok(FeatureKind::LayerEmbedding(l));
        }
        Err(Error::config(format!("bad feature kind `{s}`")))
    }
}

impl Serialize for FeatureKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for FeatureKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One utterance's feature matrix: `frames` is T×D, row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub utterance_id: String,
    pub frames: Array2<f64>,
    /// Hop between frame starts, seconds.
    pub frame_hop: f64,
    /// Analysis window length, seconds.
    pub frame_len: f64,
    pub kind: FeatureKind,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfccConfig {
    pub frame_len_ms: f64,
    pub frame_hop_ms: f64,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub pre_emphasis: f64,
    /// Energies are floored to this before the log.
    pub log_floor: f64,
    /// Delta regression half-window (standard: 2).
    pub delta_window: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            frame_len_ms: 25.0,
            frame_hop_ms: 10.0,
            n_mels: 23,
            n_coeffs: 13,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
            delta_window: 2,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len_ms <= 0.0 || self.frame_hop_ms <= 0.0 {
            return Err(Error::config("frame length and hop must be positive"));
        }
        if self.n_mels < self.n_coeffs {
            return Err(Error::config("n_mels must be >= n_coeffs"));
        }
        if self.n_coeffs == 0 || self.delta_window == 0 {
            return Err(Error::config("n_coeffs and delta_window must be >= 1"));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::config("log_floor must be positive"));
        }
        Ok(())
    }

    /// Output dimension: cepstra + deltas + delta-deltas.
    pub fn dim(&self) -> usize {
        3 * self.n_coeffs
    }

    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (self.frame_len_ms / 1000.0 * sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.frame_hop_ms / 1000.0 * sample_rate as f64).round() as usize
    }
}

fn mel_of(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn hz_of(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Unit-peak triangular filters evaluated at the DFT bin centre frequencies,
/// with edges equally spaced on the mel scale between 0 and Nyquist.
/// Returns an `n_mels × (n_fft/2 + 1)` matrix.
fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Array2<f64> {
    let nyquist = sample_rate as f64 / 2.0;
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| hz_of(mel_of(nyquist) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[(m, k)] = w;
        }
    }
    fb
}

/// Orthonormal DCT-II matrix taking `n_in` values to `n_out` coefficients.
fn dct_matrix(n_out: usize, n_in: usize) -> Array2<f64> {
    let mut d = Array2::zeros((n_out, n_in));
    for j in 0..n_out {
        let scale = if j == 0 {
            (1.0 / n_in as f64).sqrt()
        } else {
            (2.0 / n_in as f64).sqrt()
        };
        for m in 0..n_in {
            d[(j, m)] = scale
                * (std::f64::consts::PI * j as f64 * (2 * m + 1) as f64 / (2 * n_in) as f64).cos();
        }
    }
    d
}

/// ±w linear-regression deltas with replicated edge padding.
fn deltas(x: &Array2<f64>, w: usize) -> Array2<f64> {
    let (t_len, d) = x.dim();
    let denom: f64 = 2.0 * (1..=w).map(|k| (k * k) as f64).sum::<f64>();
    let mut out = Array2::zeros((t_len, d));
    let clamp = |i: isize| -> usize { i.clamp(0, t_len as isize - 1) as usize };
    for t in 0..t_len {
        for k in 1..=w {
            let fwd = clamp(t as isize + k as isize);
            let bwd = clamp(t as isize - k as isize);
            for j in 0..d {
                out[(t, j)] += k as f64 * (x[(fwd, j)] - x[(bwd, j)]) / denom;
            }
        }
    }
    out
}

/// Compute 39-dim MFCC frames: pre-emphasis, 25 ms Hamming / 10 ms hop,
/// magnitude DFT, 23 mel filters, floored log, orthonormal DCT-II keeping
/// 13 coefficients, then appended deltas and delta-deltas.
pub fn mfcc(utterance: &Utterance, config: &MfccConfig) -> Result<FeatureSequence> {
    config.validate()?;
    let sr = utterance.sample_rate;
    let win = config.win_samples(sr);
    let hop = config.hop_samples(sr);
    let n = utterance.samples.len();
    if n < win {
        return Err(Error::EmptyFeatures { samples: n, window: win });
    }
    for &s in &utterance.samples {
        if !s.is_finite() {
            return Err(Error::config("waveform contains non-finite samples"));
        }
    }
    let t_len = 1 + (n - win) / hop;

    let mut emph = Vec::with_capacity(n);
    emph.push(utterance.samples[0]);
    for t in 1..n {
        emph.push(utterance.samples[t] - config.pre_emphasis * utterance.samples[t - 1]);
    }

    let hamming: Vec<f64> = (0..win)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (win - 1) as f64).cos())
        .collect();
    let n_fft = win.next_power_of_two();
    let n_bins = n_fft / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let fb = mel_filterbank(config.n_mels, n_fft, sr);
    let dct = dct_matrix(config.n_coeffs, config.n_mels);

    let mut cepstra = Array2::zeros((t_len, config.n_coeffs));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..t_len {
        let start = t * hop;
        for i in 0..n_fft {
            let v = if i < win { emph[start + i] * hamming[i] } else { 0.0 };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        let mag: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm()).collect();
        for j in 0..config.n_coeffs {
            let mut c = 0.0;
            for m in 0..config.n_mels {
                let mut e = 0.0;
                for k in 0..n_bins {
                    e += fb[(m, k)] * mag[k];
                }
                c += dct[(j, m)] * e.max(config.log_floor).ln();
            }
            cepstra[(t, j)] = c;
        }
    }

    let d1 = deltas(&cepstra, config.delta_window);
    let d2 = deltas(&d1, config.delta_window);
    let mut frames = Array2::zeros((t_len, 3 * config.n_coeffs));
    for t in 0..t_len {
        for j in 0..config.n_coeffs {
            frames[(t, j)] = cepstra[(t, j)];
            frames[(t, config.n_coeffs + j)] = d1[(t, j)];
            frames[(t, 2 * config.n_coeffs + j)] = d2[(t, j)];
        }
    }
    debug_assert!(frames.iter().all(|v| v.is_finite()));

    Ok(FeatureSequence {
        utterance_id: utterance.id.clone(),
        frames,
        frame_hop: hop as f64 / sr as f64,
        frame_len: win as f64 / sr as f64,
        kind: FeatureKind::Mfcc,
    })
}

/// MFCC over a whole corpus, in corpus order. Pure per-utterance work, so
/// the parallel map cannot change results.
pub fn mfcc_corpus(corpus: &[Utterance], config: &MfccConfig) -> Result<Vec<FeatureSequence>> {
    corpus.par_iter().map(|u| mfcc(u, config)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Phone,
    Word,
}

/// Label each frame by the span containing its centre sample; frames whose
/// centre falls outside every span get `silence_id`. Half-open spans give
/// the boundary tie-break: a centre exactly on a boundary belongs to the
/// later span.
pub fn frame_labels(
    utterance: &Utterance,
    feature: &FeatureSequence,
    granularity: Granularity,
    silence_id: u32,
) -> Vec<u32> {
    let sr = utterance.sample_rate as f64;
    let hop = (feature.frame_hop * sr).round() as usize;
    let win = (feature.frame_len * sr).round() as usize;
    let spans: &[Span] = match granularity {
        Granularity::Phone => &utterance.phone_spans,
        Granularity::Word => &utterance.word_spans,
    };
    (0..feature.len())
        .map(|t| {
            let center = t * hop + win / 2;
            spans
                .iter()
                .find(|s| s.start <= center && center < s.end)
                .map(|s| s.id)
                .unwrap_or(silence_id)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig, Lexicon, PhoneInventory};

    fn utt_from(samples: Vec<f64>, sr: u32) -> Utterance {
        Utterance {
            id: "t".into(),
            samples,
            sample_rate: sr,
            word_spans: vec![],
            phone_spans: vec![],
            label: None,
        }
    }

    #[test]
    fn zero_waveform_gives_floor_constant_frames_and_zero_deltas() {
        let cfg = MfccConfig::default();
        let u = utt_from(vec![0.0; 16000], 16000);
        let fs = mfcc(&u, &cfg).unwrap();
        assert_eq!(fs.dim(), 39);
        // all filter energies hit the floor -> log is constant across filters,
        // so only c0 survives the DCT and every frame is identical
        let c0 = (cfg.n_mels as f64).sqrt() * cfg.log_floor.ln();
        for t in 0..fs.len() {
            assert!((fs.frames[(t, 0)] - c0).abs() < 1e-9);
            for j in 1..39 {
                assert!(fs.frames[(t, j)].abs() < 1e-9, "frame {t} dim {j}");
            }
        }
    }

    #[test]
    fn dct_of_constant_has_only_c0() {
        let d = dct_matrix(13, 23);
        let constant = vec![3.7; 23];
        for j in 0..13 {
            let c: f64 = (0..23).map(|m| d[(j, m)] * constant[m]).sum();
            if j == 0 {
                assert!((c - 3.7 * (23f64).sqrt()).abs() < 1e-12);
            } else {
                assert!(c.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dct_matrix_rows_are_orthonormal() {
        let d = dct_matrix(13, 23);
        for a in 0..13 {
            for b in 0..13 {
                let dot: f64 = (0..23).map(|m| d[(a, m)] * d[(b, m)]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_short_waveform_is_an_empty_feature_error() {
        let u = utt_from(vec![0.0; 100], 16000);
        match mfcc(&u, &MfccConfig::default()) {
            Err(Error::EmptyFeatures { samples: 100, window: 400 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    /// Independent pipeline: direct O(n^2) DFT, textbook mel formula, naive
    /// DCT sum. Shares no code with `mfcc`.
    fn mfcc_oracle(samples: &[f64], sr: u32, cfg: &MfccConfig) -> Vec<Vec<f64>> {
        let win = (cfg.frame_len_ms * sr as f64 / 1000.0).round() as usize;
        let hop = (cfg.frame_hop_ms * sr as f64 / 1000.0).round() as usize;
        let mut pre = vec![samples[0]];
        for t in 1..samples.len() {
            pre.push(samples[t] - cfg.pre_emphasis * samples[t - 1]);
        }
        let n_fft = win.next_power_of_two();
        let n_bins = n_fft / 2 + 1;
        let t_len = 1 + (samples.len() - win) / hop;
        let mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
        let imel = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let top = mel(sr as f64 / 2.0);
        let edges: Vec<f64> =
            (0..cfg.n_mels + 2).map(|i| imel(top * i as f64 / (cfg.n_mels + 1) as f64)).collect();
        let mut out = Vec::new();
        for t in 0..t_len {
            let mut mag = vec![0.0; n_bins];
            for (k, m) in mag.iter_mut().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for i in 0..win {
                    let ham = 0.54
                        - 0.46
                            * (2.0 * std::f64::consts::PI * i as f64 / (win - 1) as f64).cos();
                    let v = pre[t * hop + i] * ham;
                    let ang = -2.0 * std::f64::consts::PI * k as f64 * i as f64 / n_fft as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                *m = (re * re + im * im).sqrt();
            }
            let mut loge = vec![0.0; cfg.n_mels];
            for m in 0..cfg.n_mels {
                let mut e = 0.0;
                for (k, &mg) in mag.iter().enumerate() {
                    let f = k as f64 * sr as f64 / n_fft as f64;
                    let w = if f >= edges[m] && f <= edges[m + 1] {
                        (f - edges[m]) / (edges[m + 1] - edges[m])
                    } else if f > edges[m + 1] && f <= edges[m + 2] {
                        (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1])
                    } else {
                        0.0
                    };
                    e += w * mg;
                }
                loge[m] = e.max(cfg.log_floor).ln();
            }
            let mut ceps = vec![0.0; cfg.n_coeffs];
            for (j, c) in ceps.iter_mut().enumerate() {
                let s = if j == 0 {
                    (1.0 / cfg.n_mels as f64).sqrt()
                } else {
                    (2.0 / cfg.n_mels as f64).sqrt()
                };
                for (m, &le) in loge.iter().enumerate() {
                    *c += s
                        * le
                        * (std::f64::consts::PI * j as f64 * (2 * m + 1) as f64
                            / (2 * cfg.n_mels) as f64)
                            .cos();
                }
            }
            out.push(ceps);
        }
        out
    }

    #[test]
    fn sinusoid_matches_independent_dsp_oracle() {
        let sr = 16000u32;
        let samples: Vec<f64> = (0..sr as usize)
            .map(|t| (2.0 * std::f64::consts::PI * 440.0 * t as f64 / sr as f64).sin())
            .collect();
        let cfg = MfccConfig::default();
        let u = utt_from(samples.clone(), sr);
        let fs = mfcc(&u, &cfg).unwrap();
        let oracle = mfcc_oracle(&samples, sr, &cfg);
        assert_eq!(fs.len(), oracle.len());
        for t in 0..fs.len() {
            for j in 0..cfg.n_coeffs {
                let (a, b) = (fs.frames[(t, j)], oracle[t][j]);
                assert!(
                    (a - b).abs() <= 1e-4 * (1.0 + a.abs()),
                    "frame {t} coeff {j}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn frame_count_matches_formula() {
        let sr = 16000u32;
        let cfg = MfccConfig::default();
        for n in [400usize, 401, 559, 560, 561, 16000] {
            let u = utt_from(vec![0.01; n], sr);
            let fs = mfcc(&u, &cfg).unwrap();
            assert_eq!(fs.len(), 1 + (n - 400) / 160, "n = {n}");
        }
    }

    #[test]
    fn hop_shift_shifts_frames_by_one_row() {
        let sr = 16000u32;
        let cfg = MfccConfig::default();
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let samples: Vec<f64> = (0..8000)
            .map(|_| {
                rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
                ((rng_state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
            })
            .collect();
        let full = mfcc(&utt_from(samples.clone(), sr), &cfg).unwrap();
        let shifted = mfcc(&utt_from(samples[160..].to_vec(), sr), &cfg).unwrap();
        assert_eq!(shifted.len() + 1, full.len());
        // frame 0 of the shifted signal sees a different pre-emphasis start,
        // so cepstra line up from frame 1 on
        for t in 1..shifted.len() {
            for j in 0..13 {
                let (a, b) = (shifted.frames[(t, j)], full.frames[(t + 1, j)]);
                assert!((a - b).abs() < 1e-6, "frame {t} coeff {j}: {a} vs {b}");
            }
        }
        // the differing frame 0 bleeds into deltas up to t=2 and delta-deltas
        // up to t=4; the tails align because both sequences end together
        for t in 5..shifted.len() {
            for j in 0..39 {
                let (a, b) = (shifted.frames[(t, j)], full.frames[(t + 1, j)]);
                assert!((a - b).abs() < 1e-6, "frame {t} dim {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn deltas_of_linear_ramp_are_constant() {
        let mut x = Array2::zeros((10, 1));
        for t in 0..10 {
            x[(t, 0)] = 2.0 * t as f64;
        }
        let d = deltas(&x, 2);
        // interior: slope exactly 2; edges shrink due to replication
        for t in 2..8 {
            assert!((d[(t, 0)] - 2.0).abs() < 1e-12);
        }
        assert!(d[(0, 0)] < 2.0 && d[(9, 0)] < 2.0);
    }

    #[test]
    fn frame_labels_single_phone_covers_all_frames() {
        let inventory = PhoneInventory::random(3, 1).unwrap();
        let lexicon = Lexicon { words: vec![vec![2]] };
        let cfg = CorpusConfig {
            words_per_utterance: (1, 1),
            phone_duration_ms: (300.0, 300.0),
            inter_word_silence_ms: (0.0, 0.0),
            edge_silence_ms: (0.0, 0.0),
            snr_db: None,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(3, 1, &inventory, &lexicon, &cfg).unwrap();
        let fs = mfcc(&corpus[0], &MfccConfig::default()).unwrap();
        let labels = frame_labels(&corpus[0], &fs, Granularity::Phone, inventory.silence_id());
        assert!(labels.iter().all(|&l| l == 2));
    }

    #[test]
    fn frame_center_on_boundary_goes_to_later_span() {
        // hop 160, win 400 -> centre of frame t is 160t + 200
        let mut u = utt_from(vec![0.1; 2000], 16000);
        u.phone_spans = vec![
            Span { id: 5, start: 0, end: 360 },
            Span { id: 7, start: 360, end: 2000 },
        ];
        u.word_spans = vec![Span { id: 0, start: 0, end: 2000 }];
        let fs = mfcc(&u, &MfccConfig::default()).unwrap();
        let labels = frame_labels(&u, &fs, Granularity::Phone, 99);
        // frame 1 centre = 360 exactly: later span wins
        assert_eq!(labels[0], 5);
        assert_eq!(labels[1], 7);
    }

    #[test]
    fn frame_labels_match_sample_paint_oracle() {
        let inventory = PhoneInventory::random(8, 4).unwrap();
        let lexicon = Lexicon::random(15, &inventory, 4).unwrap();
        let corpus =
            generate_corpus(10, 5, &inventory, &lexicon, &CorpusConfig::default()).unwrap();
        let silence = inventory.silence_id();
        for u in &corpus {
            let fs = mfcc(u, &MfccConfig::default()).unwrap();
            let labels = frame_labels(u, &fs, Granularity::Phone, silence);
            // paint every sample, then read the centre sample per frame
            let mut paint = vec![silence; u.samples.len()];
            for s in &u.phone_spans {
                for p in paint.iter_mut().take(s.end).skip(s.start) {
                    *p = s.id;
                }
            }
            for (t, &l) in labels.iter().enumerate() {
                let center = t * 160 + 200;
                assert_eq!(l, paint[center], "utt {} frame {t}", u.id);
            }
        }
    }

    #[test]
    fn feature_kind_round_trips_through_strings() {
        for kind in [FeatureKind::Mfcc, FeatureKind::LayerEmbedding(6)] {
            let s = kind.to_string();
            assert_eq!(s.parse::<FeatureKind>().unwrap(), kind);
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(serde_json::from_str::<FeatureKind>(&json).unwrap(), kind);
        }
        assert!("layer".parse::<FeatureKind>().is_err());
    }
}
