//! Linear probes: how much of a label is linearly readable from a layer.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::corpus::Utterance;
use crate::encoder::{forward, MaskSpec, Mode};
use crate::error::{Error, Result};
use crate::features::{mfcc_corpus, MfccConfig};
use crate::rng::rng_for;
use crate::runio::write_atomic_str;

use super::{ItemKind, RepresentationMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 300, lr: 0.5 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("probe epochs must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("probe lr must be finite and positive"));
        }
        Ok(())
    }
}

/// Fit a softmax regression on `train` by full-batch gradient descent and
/// report accuracy on `test`. The probe starts at zero, so the result is a
/// deterministic function of the inputs.
pub fn linear_probe(
    train: &RepresentationMatrix,
    train_labels: &[u32],
    test: &RepresentationMatrix,
    test_labels: &[u32],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    cfg.validate()?;
    if classes < 2 {
        return Err(Error::config("probe needs at least two classes"));
    }
    train.validate()?;
    test.validate()?;
    if train.dim() != test.dim() {
        return Err(Error::DimMismatch(format!(
            "train dim {} vs test dim {}",
            train.dim(),
            test.dim()
        )));
    }
    if train.n() != train_labels.len() || test.n() != test_labels.len() {
        return Err(Error::Misaligned("label count must match row count".into()));
    }
    for &l in train_labels.iter().chain(test_labels) {
        if l as usize >= classes {
            return Err(Error::config(format!("label {l} outside {classes} classes")));
        }
    }
    let distinct = {
        let mut seen = vec![false; classes];
        for &l in train_labels {
            seen[l as usize] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::config("training labels collapse to a single class"));
    }

    let n = train.n();
    let d = train.dim();
    let x = &train.rows;
    let mut w = Array2::<f64>::zeros((d, classes));
    let mut b = Array1::<f64>::zeros(classes);

    for _ in 0..cfg.epochs {
        // dlogits = (softmax(XW + b) - onehot) / n
        let mut dlogits = x.dot(&w);
        for (mut row, &label) in dlogits.rows_mut().into_iter().zip(train_labels) {
            row += &b;
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
            row[label as usize] -= 1.0;
            row.mapv_inplace(|v| v / n as f64);
        }
        w -= &(x.t().dot(&dlogits) * cfg.lr);
        b -= &(dlogits.sum_axis(ndarray::Axis(0)) * cfg.lr);
    }

    let logits = test.rows.dot(&w) + &b;
    let hits = logits
        .rows()
        .into_iter()
        .zip(test_labels)
        .filter(|(row, &label)| argmax(row.iter().copied()) == label as usize)
        .count();
    Ok(hits as f64 / test.n() as f64)
}

/// First index of the maximum: deterministic under ties.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub layer: usize,
    pub task: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,task,accuracy\n");
        for row in &self.rows {
            out.push_str(&format!("{},{},{:.6}\n", row.layer, row.task, row.accuracy));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic_str(path, &self.to_csv())
    }
}

/// Probe every layer of a checkpoint for the utterance class: mean-pool
/// each utterance's frames per layer, split 80/20 by `seed`, fit, score.
pub fn probe_report(
    checkpoint: &Path,
    utterances: &[Utterance],
    mfcc_cfg: &MfccConfig,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    cfg.validate()?;
    let labels: Vec<u32> = utterances
        .iter()
        .map(|u| u.label.ok_or_else(|| Error::config(format!("utterance {} has no label", u.id))))
        .collect::<Result<_>>()?;
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);

    let ck = load_checkpoint(checkpoint)?;
    let feats = mfcc_corpus(utterances, mfcc_cfg)?;
    let hidden: Vec<Vec<Array2<f64>>> = feats
        .par_iter()
        .map(|f| {
            forward(&ck.params, &ck.config, f, &MaskSpec::empty(), Mode::Eval)
                .map(|t| t.hidden_states)
        })
        .collect::<Result<_>>()?;

    let n = utterances.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, "probe_split", 0);
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let n_test = (n / 5).max(1);
    if n_test >= n {
        return Err(Error::config("too few utterances for an 80/20 split"));
    }
    let (test_idx, train_idx) = order.split_at(n_test);

    let mut rows = Vec::with_capacity(ck.config.layers + 1);
    for layer in 0..=ck.config.layers {
        let embed = |idx: &[usize]| -> RepresentationMatrix {
            let mut rows = Array2::zeros((idx.len(), ck.config.dim));
            for (mut row, &i) in rows.rows_mut().into_iter().zip(idx) {
                row.assign(&hidden[i][layer].mean_axis(ndarray::Axis(0)).expect("frames > 0"));
            }
            RepresentationMatrix { rows, items: ItemKind::Utterance }
        };
        let pick = |idx: &[usize]| -> Vec<u32> { idx.iter().map(|&i| labels[i]).collect() };
        let accuracy = linear_probe(
            &embed(train_idx),
            &pick(train_idx),
            &embed(test_idx),
            &pick(test_idx),
            classes,
            cfg,
        )?;
        rows.push(ProbeRow { layer, task: "utterance_class".into(), accuracy });
    }
    Ok(ProbeReport { rows })
}
