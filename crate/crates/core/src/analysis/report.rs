//! Word-token pooling, reference views, and the layerwise similarity
//! report that scores every encoder layer against every reference.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::corpus::{Lexicon, Utterance};
use crate::encoder::{forward, Mode};
use crate::encoder::MaskSpec;
use crate::error::{Error, Result};
use crate::features::{frame_labels, mfcc_corpus, Granularity, MfccConfig};
use crate::rng::rng_for;
use crate::runio::write_atomic_str;

use super::{pwcca, ItemKind, RepresentationMatrix};

/// Dimension of the stand-in word-embedding table.
pub const GLOVE_DIM: usize = 16;

/// Fixed seed for the stand-in tables: they model *external* embeddings,
/// so they must not move with the report seed.
const STANDIN_SEED: u64 = 0x7461_626c_65;

/// Reference views a model layer can be scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReferenceKind {
    /// Indicator of the word identity, one row per word token.
    WordOnehot,
    /// Indicator of the aligned phone, one row per frame; silence frames
    /// are all-zero.
    PhoneOnehot,
    /// Fixed random Gaussian vector per word id: a word embedding with no
    /// acoustic grounding.
    GloveStandin,
    /// Normalized bag-of-phones per word id: an embedding grounded in
    /// pronunciation.
    AgweStandin,
    /// The model's own layer-0 rows (projection + positions), word-pooled.
    Layer0,
}

impl ReferenceKind {
    pub const ALL: [ReferenceKind; 5] = [
        ReferenceKind::WordOnehot,
        ReferenceKind::PhoneOnehot,
        ReferenceKind::GloveStandin,
        ReferenceKind::AgweStandin,
        ReferenceKind::Layer0,
    ];
}

impl std::fmt::Display for ReferenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ReferenceKind::WordOnehot => "word_onehot",
            ReferenceKind::PhoneOnehot => "phone_onehot",
            ReferenceKind::GloveStandin => "glove_standin",
            ReferenceKind::AgweStandin => "agwe_standin",
            ReferenceKind::Layer0 => "layer0",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for ReferenceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ReferenceKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown reference kind `{s}`")))
    }
}

impl Serialize for ReferenceKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ReferenceKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Word-token rows pooled from one utterance's frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledWords {
    pub rows: Array2<f64>,
    /// Word id per kept row, span order.
    pub word_ids: Vec<u32>,
    /// Word spans that contained no frame center.
    pub dropped: usize,
}

/// Mean-pool frames into word-token rows: a frame belongs to the word
/// span containing its center sample, the same convention as
/// [`frame_labels`]. Spans catching no frame center are dropped.
pub fn pool_words(
    frames: ArrayView2<f64>,
    utterance: &Utterance,
    frame_hop: f64,
    frame_len: f64,
) -> PooledWords {
    let sr = utterance.sample_rate as f64;
    let hop = (frame_hop * sr).round() as usize;
    let win = (frame_len * sr).round() as usize;
    let d = frames.ncols();
    let mut rows = Vec::new();
    let mut word_ids = Vec::new();
    let mut dropped = 0usize;
    for span in &utterance.word_spans {
        let members: Vec<usize> = (0..frames.nrows())
            .filter(|&t| span.contains(t * hop + win / 2))
            .collect();
        if members.is_empty() {
            dropped += 1;
            continue;
        }
        let mut mean = vec![0.0; d];
        for &t in &members {
            for (m, v) in mean.iter_mut().zip(frames.row(t)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= members.len() as f64;
        }
        rows.extend(mean);
        word_ids.push(span.id);
    }
    let n = word_ids.len();
    PooledWords {
        rows: Array2::from_shape_vec((n, d), rows).expect("n*d values pushed"),
        word_ids,
        dropped,
    }
}

/// The label streams a reference view is built from, aligned with the
/// pooled rows they will be correlated against.
#[derive(Debug, Clone)]
pub struct AlignedItems<'a> {
    /// Word id per word-token row.
    pub word_ids: &'a [u32],
    /// Phone id per frame row; `n_phones` itself means silence.
    pub phone_labels: &'a [u32],
    pub n_phones: usize,
}

pub fn reference_matrix(
    kind: ReferenceKind,
    items: &AlignedItems<'_>,
    lexicon: &Lexicon,
) -> Result<RepresentationMatrix> {
    let v = lexicon.len();
    match kind {
        ReferenceKind::WordOnehot => {
            let rows = onehot(items.word_ids, v, "word")?;
            Ok(RepresentationMatrix { rows, items: ItemKind::WordToken })
        }
        ReferenceKind::GloveStandin => {
            let mut rows = Array2::zeros((items.word_ids.len(), GLOVE_DIM));
            for (mut row, &id) in rows.rows_mut().into_iter().zip(items.word_ids) {
                if id as usize >= v {
                    return Err(Error::config(format!("word id {id} outside lexicon of {v}")));
                }
                for (slot, value) in row.iter_mut().zip(glove_standin(id)) {
                    *slot = value;
                }
            }
            Ok(RepresentationMatrix { rows, items: ItemKind::WordToken })
        }
        ReferenceKind::AgweStandin => {
            let mut rows = Array2::zeros((items.word_ids.len(), items.n_phones));
            for (mut row, &id) in rows.rows_mut().into_iter().zip(items.word_ids) {
                if id as usize >= v {
                    return Err(Error::config(format!("word id {id} outside lexicon of {v}")));
                }
                let bag = agwe_standin(&lexicon.words[id as usize], items.n_phones)?;
                for (slot, value) in row.iter_mut().zip(bag) {
                    *slot = value;
                }
            }
            Ok(RepresentationMatrix { rows, items: ItemKind::WordToken })
        }
        ReferenceKind::PhoneOnehot => {
            // silence (id == n_phones) stays an all-zero row
            let mut rows = Array2::zeros((items.phone_labels.len(), items.n_phones));
            for (mut row, &id) in rows.rows_mut().into_iter().zip(items.phone_labels) {
                if (id as usize) < items.n_phones {
                    row[id as usize] = 1.0;
                } else if id as usize > items.n_phones {
                    return Err(Error::config(format!(
                        "phone label {id} outside inventory of {}",
                        items.n_phones
                    )));
                }
            }
            Ok(RepresentationMatrix { rows, items: ItemKind::Frame })
        }
        ReferenceKind::Layer0 => Err(Error::config(
            "layer0 reference is the pooled layer-0 view itself; the report builds it",
        )),
    }
}

/// The fixed embedding-table row for one word id.
pub fn glove_standin(word_id: u32) -> [f64; GLOVE_DIM] {
    let mut rng = rng_for(STANDIN_SEED, "glove", word_id as u64);
    let mut row = [0.0; GLOVE_DIM];
    for v in row.iter_mut() {
        *v = rand_distr::StandardNormal.sample(&mut rng);
    }
    row
}

/// L2-normalized phone-count vector for one pronunciation.
pub fn agwe_standin(phones: &[u32], n_phones: usize) -> Result<Vec<f64>> {
    let mut bag = vec![0.0; n_phones];
    for &p in phones {
        *bag.get_mut(p as usize).ok_or_else(|| {
            Error::config(format!("phone id {p} outside inventory of {n_phones}"))
        })? += 1.0;
    }
    let norm = bag.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in bag.iter_mut() {
            *v /= norm;
        }
    }
    Ok(bag)
}

fn onehot(ids: &[u32], dim: usize, what: &str) -> Result<Array2<f64>> {
    let mut rows = Array2::zeros((ids.len(), dim));
    for (mut row, &id) in rows.rows_mut().into_iter().zip(ids) {
        if id as usize >= dim {
            return Err(Error::config(format!("{what} id {id} outside dimension {dim}")));
        }
        row[id as usize] = 1.0;
    }
    Ok(rows)
}

use rand_distr::Distribution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub kinds: Vec<ReferenceKind>,
    /// Cap on word tokens and on frames entering any single CCA; items
    /// beyond it are subsampled with `seed`.
    pub cap: usize,
    pub seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { kinds: ReferenceKind::ALL.to_vec(), cap: 5000, seed: 0 }
    }
}

impl ReportConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::config("similarity report needs at least one reference kind"));
        }
        if self.cap < 2 {
            return Err(Error::config("cap must allow at least two items"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointTag {
    pub name: String,
    pub iteration: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCell {
    pub layer: usize,
    pub reference: ReferenceKind,
    /// Absent when PWCCA failed for this cell (e.g. too few rows).
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub tag: CheckpointTag,
    /// Layer-major, reference order as requested.
    pub cells: Vec<SimilarityCell>,
}

impl SimilarityReport {
    /// Plot-ready rows; absent cells are skipped.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("checkpoint,iteration,step,layer,reference,score\n");
        for cell in &self.cells {
            if let Some(score) = cell.score {
                out.push_str(&format!(
                    "{},{},{},{},{},{score:.6}\n",
                    self.tag.name, self.tag.iteration, self.tag.step, cell.layer, cell.reference
                ));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic_str(path, &self.to_csv())
    }
}

/// Score every layer of a checkpoint against the requested references.
/// Deterministic given (checkpoint, corpus, config).
pub fn layerwise_report(
    checkpoint: &Path,
    utterances: &[Utterance],
    mfcc_cfg: &MfccConfig,
    lexicon: &Lexicon,
    n_phones: usize,
    cfg: &ReportConfig,
) -> Result<SimilarityReport> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint)?;
    let feats = mfcc_corpus(utterances, mfcc_cfg)?;

    // one forward per utterance yields every layer at once
    let hidden: Vec<Vec<Array2<f64>>> = feats
        .par_iter()
        .map(|f| {
            forward(&ck.params, &ck.config, f, &MaskSpec::empty(), Mode::Eval)
                .map(|t| t.hidden_states)
        })
        .collect::<Result<_>>()?;
    let n_layers = ck.config.layers + 1;

    // word membership is layer-independent; pool layer 0 to fix the token
    // order, then reuse it everywhere
    let pooled0: Vec<PooledWords> = feats
        .iter()
        .zip(utterances)
        .zip(&hidden)
        .map(|((f, u), h)| pool_words(h[0].view(), u, f.frame_hop, f.frame_len))
        .collect();
    let word_ids: Vec<u32> = pooled0.iter().flat_map(|p| p.word_ids.iter().copied()).collect();
    let phone_ids: Vec<u32> = feats
        .iter()
        .zip(utterances)
        .flat_map(|(f, u)| frame_labels(u, f, Granularity::Phone, n_phones as u32))
        .collect();

    let word_keep = sample_indices(word_ids.len(), cfg.cap, cfg.seed, "words");
    let frame_keep = sample_indices(phone_ids.len(), cfg.cap, cfg.seed, "frames");
    let kept_word_ids: Vec<u32> = word_keep.iter().map(|&i| word_ids[i]).collect();
    let kept_phone_ids: Vec<u32> = frame_keep.iter().map(|&i| phone_ids[i]).collect();
    let items = AlignedItems {
        word_ids: &kept_word_ids,
        phone_labels: &kept_phone_ids,
        n_phones,
    };

    let pool_layer = |layer: usize| -> RepresentationMatrix {
        let mut rows = Vec::new();
        for ((f, u), h) in feats.iter().zip(utterances).zip(&hidden) {
            let pooled = pool_words(h[layer].view(), u, f.frame_hop, f.frame_len);
            rows.extend(pooled.rows.into_iter());
        }
        let d = ck.config.dim;
        let all = Array2::from_shape_vec((word_ids.len(), d), rows).expect("pool count fixed");
        let rows = select_rows(all.view(), &word_keep);
        RepresentationMatrix { rows, items: ItemKind::WordToken }
    };
    let frames_layer = |layer: usize| -> RepresentationMatrix {
        let mut rows = Vec::new();
        for h in &hidden {
            rows.extend(h[layer].iter().copied());
        }
        let d = ck.config.dim;
        let all = Array2::from_shape_vec((phone_ids.len(), d), rows).expect("frame count fixed");
        let rows = select_rows(all.view(), &frame_keep);
        RepresentationMatrix { rows, items: ItemKind::Frame }
    };

    let layer0_reference = pool_layer(0);
    let mut cells = Vec::new();
    for layer in 0..n_layers {
        let pooled = pool_layer(layer);
        for &kind in &cfg.kinds {
            let score = match kind {
                ReferenceKind::Layer0 => pwcca(&pooled, &layer0_reference),
                ReferenceKind::PhoneOnehot => reference_matrix(kind, &items, lexicon)
                    .and_then(|y| pwcca(&frames_layer(layer), &y)),
                _ => reference_matrix(kind, &items, lexicon).and_then(|y| pwcca(&pooled, &y)),
            };
            cells.push(SimilarityCell { layer, reference: kind, score: score.ok() });
        }
    }

    Ok(SimilarityReport {
        tag: CheckpointTag {
            name: checkpoint.display().to_string(),
            iteration: ck.iteration,
            step: ck.step,
        },
        cells,
    })
}

/// Sorted sample of `cap` indices out of `n`, or all of them.
fn sample_indices(n: usize, cap: usize, seed: u64, tag: &str) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut rng = rng_for(seed, tag, 0);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..cap {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    let mut keep = pool[..cap].to_vec();
    keep.sort_unstable();
    keep
}

fn select_rows(all: ArrayView2<f64>, keep: &[usize]) -> Array2<f64> {
    let d = all.ncols();
    let mut out = Array2::zeros((keep.len(), d));
    for (mut row, &i) in out.rows_mut().into_iter().zip(keep) {
        row.assign(&all.row(i));
    }
    out
}
