//! Phone recognition as the downstream yardstick: bolt a CTC readout onto
//! a checkpoint, finetune it, greedy-decode, and report token error rates.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::CheckpointTag;
use crate::checkpoint::load_checkpoint;
use crate::corpus::Utterance;
use crate::encoder::{backward_from_hidden, forward, MaskSpec, Mode, ParamVec, TensorLayout};
use crate::error::{Error, Result};
use crate::features::{mfcc_corpus, MfccConfig};
use crate::rng::rng_for;
use crate::training::{adam_step, AdamState, TrainConfig};

/// Frame-wise readout from hidden states to P+1 classes: class 0 is the
/// blank, phone p sits at class p+1. Starts at zero, i.e. uniform
/// posteriors.
#[derive(Debug, Clone)]
pub struct CtcHead {
    pub params: ParamVec,
    pub input_dim: usize,
    pub n_phones: usize,
}

impl CtcHead {
    pub fn new(input_dim: usize, n_phones: usize) -> Result<CtcHead> {
        if input_dim == 0 || n_phones == 0 {
            return Err(Error::config("ctc head needs input_dim >= 1 and n_phones >= 1"));
        }
        let layout = TensorLayout::builder()
            .tensor("w", &[input_dim, n_phones + 1])
            .tensor("b", &[n_phones + 1])
            .build();
        Ok(CtcHead { params: ParamVec::zeros(layout), input_dim, n_phones })
    }

    /// Output classes: the phone inventory plus the blank.
    pub fn width(&self) -> usize {
        self.n_phones + 1
    }

    pub fn logits(&self, hidden: ArrayView2<f64>) -> Result<Array2<f64>> {
        if hidden.ncols() != self.input_dim {
            return Err(Error::DimMismatch(format!(
                "hidden dim {} vs head input {}",
                hidden.ncols(),
                self.input_dim
            )));
        }
        Ok(hidden.dot(&self.params.t2("w")) + &self.params.t1("b"))
    }
}

#[derive(Debug, Clone)]
pub struct CtcOutput {
    pub loss: f64,
    /// ∂loss/∂logits; zero when no alignment exists.
    pub d_logits: Array2<f64>,
    /// No alignment exists — the target, with blanks separating repeats,
    /// needs more frames than there are. Infinite loss, zero gradient.
    pub too_short: bool,
}

/// Alignment-marginalized negative log-likelihood of `target` given
/// per-frame logits, with the exact gradient. Log-space forward–backward
/// over the blank-interleaved label expansion.
pub fn ctc_loss_and_grad(logits: ArrayView2<f64>, target: &[u32]) -> Result<CtcOutput> {
    let t_len = logits.nrows();
    let width = logits.ncols();
    if width < 2 {
        return Err(Error::config("logits need a blank plus at least one phone class"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("non-finite logits"));
    }
    for &p in target {
        if p as usize + 1 >= width {
            return Err(Error::config(format!("phone {p} outside {} classes", width - 1)));
        }
    }
    let s_len = 2 * target.len() + 1;
    if t_len == 0 {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            d_logits: Array2::zeros((0, width)),
            too_short: true,
        });
    }

    // blank, t_1, blank, t_2, ..., blank
    let expanded: Vec<usize> =
        (0..s_len).map(|s| if s % 2 == 0 { 0 } else { target[s / 2] as usize + 1 }).collect();

    let mut logp = logits.to_owned();
    for mut row in logp.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }

    let neg = f64::NEG_INFINITY;
    // alpha[t][s]: log-prob of prefix paths ending in expanded state s at
    // frame t, emission included
    let mut alpha = Array2::from_elem((t_len, s_len), neg);
    alpha[(0, 0)] = logp[(0, expanded[0])];
    if s_len > 1 {
        alpha[(0, 1)] = logp[(0, expanded[1])];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut from = alpha[(t - 1, s)];
            if s >= 1 {
                from = lse2(from, alpha[(t - 1, s - 1)]);
            }
            // the skip transition exists only into a phone that differs
            // from the phone two states back
            if s >= 2 && expanded[s] != 0 && expanded[s] != expanded[s - 2] {
                from = lse2(from, alpha[(t - 1, s - 2)]);
            }
            alpha[(t, s)] = from + logp[(t, expanded[s])];
        }
    }
    let mut log_z = alpha[(t_len - 1, s_len - 1)];
    if s_len > 1 {
        log_z = lse2(log_z, alpha[(t_len - 1, s_len - 2)]);
    }
    // Z = 0 exactly when no path exists: the target, with blanks
    // separating its repeats, needs more frames than there are
    if log_z == f64::NEG_INFINITY {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            d_logits: Array2::zeros((t_len, width)),
            too_short: true,
        });
    }

    // beta[t][s]: suffix paths starting at s, emission included
    let mut beta = Array2::from_elem((t_len, s_len), neg);
    beta[(t_len - 1, s_len - 1)] = logp[(t_len - 1, expanded[s_len - 1])];
    if s_len > 1 {
        beta[(t_len - 1, s_len - 2)] = logp[(t_len - 1, expanded[s_len - 2])];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut to = beta[(t + 1, s)];
            if s + 1 < s_len {
                to = lse2(to, beta[(t + 1, s + 1)]);
            }
            if s + 2 < s_len && expanded[s + 2] != 0 && expanded[s + 2] != expanded[s] {
                to = lse2(to, beta[(t + 1, s + 2)]);
            }
            beta[(t, s)] = to + logp[(t, expanded[s])];
        }
    }

    // dL/dlogit = softmax − state-occupancy marginal; alpha+beta double-
    // counts the emission, so it is divided back out
    let mut d_logits = Array2::zeros((t_len, width));
    for t in 0..t_len {
        for k in 0..width {
            d_logits[(t, k)] = logp[(t, k)].exp();
        }
        for s in 0..s_len {
            let occupancy = alpha[(t, s)] + beta[(t, s)] - logp[(t, expanded[s])] - log_z;
            d_logits[(t, expanded[s])] -= occupancy.exp();
        }
    }

    Ok(CtcOutput { loss: -log_z, d_logits, too_short: false })
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        b
    } else if b == f64::NEG_INFINITY {
        a
    } else {
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

/// Frame-wise argmax, collapse consecutive repeats, drop blanks. Returns
/// phone ids; a blank between equal phones keeps both, so repeats in the
/// output are legitimate.
pub fn greedy_decode(logits: ArrayView2<f64>) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for row in logits.rows() {
        let class = argmax(row.iter().copied());
        if class != prev && class != 0 {
            out.push((class - 1) as u32);
        }
        prev = class;
    }
    out
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

/// Counts from a minimum-cost alignment transforming `hyp` into
/// `reference`: insertions add reference tokens the hypothesis missed,
/// deletions drop spurious hypothesis tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub distance: usize,
}

/// Unit-cost Levenshtein alignment. Backtrace ties resolve substitution,
/// then deletion, then insertion, so the counts are deterministic.
pub fn edit_distance(hyp: &[u32], reference: &[u32]) -> EditCounts {
    let m = hyp.len();
    let n = reference.len();
    let mut d = vec![vec![0usize; n + 1]; m + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=n {
        d[0][j] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let sub = d[i - 1][j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            let del = d[i - 1][j] + 1;
            let ins = d[i][j - 1] + 1;
            d[i][j] = sub.min(del).min(ins);
        }
    }

    let mut counts =
        EditCounts { substitutions: 0, insertions: 0, deletions: 0, distance: d[m][n] };
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let step = usize::from(hyp[i - 1] != reference[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + step {
                counts.substitutions += step;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
            continue;
        }
        counts.insertions += 1;
        j -= 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    /// Freeze the encoder, fit only the readout.
    #[default]
    HeadOnly,
    /// Update the encoder end to end as well.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub scope: FinetuneScope,
    /// Optimizer steps; one utterance per step.
    pub steps: usize,
    /// Flat Adam learning rate.
    pub lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { scope: FinetuneScope::HeadOnly, steps: 400, lr: 0.05 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("finetune steps must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("finetune lr must be positive and finite"));
        }
        Ok(())
    }
}

/// Error rates from one finetune-then-decode run. When finetuning
/// diverged, the rate pins to 1.0 and the edit counts are zeroed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRateReport {
    pub tag: CheckpointTag,
    pub strategy: String,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    /// Reference phones scored; rate = (S+I+D) / this.
    pub reference_tokens: usize,
    pub token_error_rate: f64,
    pub diverged: bool,
    /// Training utterances skipped because no alignment fits.
    pub infeasible_train: usize,
}

impl ErrorRateReport {
    pub fn csv_header() -> &'static str {
        "checkpoint,step,strategy,token_error_rate,S,I,D"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{},{},{}",
            self.tag.name,
            self.tag.step,
            self.strategy,
            self.token_error_rate,
            self.substitutions,
            self.insertions,
            self.deletions
        )
    }
}

/// One curve-ready CSV over many scored checkpoints.
pub fn error_rate_csv(reports: &[ErrorRateReport]) -> String {
    let mut out = String::from(ErrorRateReport::csv_header());
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Attach a fresh CTC head to a checkpoint, finetune on `train`, decode
/// `test`, and aggregate error rates. Split hygiene is the caller's
/// contract: passing overlapping splits turns the score into a
/// training-set sanity check, not an evaluation.
#[allow(clippy::too_many_arguments)]
pub fn finetune_and_score(
    checkpoint: &Path,
    strategy: &str,
    train: &[Utterance],
    test: &[Utterance],
    n_phones: usize,
    mfcc_cfg: &MfccConfig,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<ErrorRateReport> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::config("finetune needs nonempty train and test splits"));
    }
    let ck = load_checkpoint(checkpoint)?;
    let mut params = ck.params;
    let enc = ck.config;
    let mut head = CtcHead::new(enc.dim, n_phones)?;

    let phone_targets = |utts: &[Utterance]| -> Result<Vec<Vec<u32>>> {
        utts.iter()
            .map(|u| {
                let seq: Vec<u32> = u.phone_spans.iter().map(|s| s.id).collect();
                if let Some(&p) = seq.iter().find(|&&p| p as usize >= n_phones) {
                    return Err(Error::config(format!(
                        "utterance {}: phone {p} outside inventory of {n_phones}",
                        u.id
                    )));
                }
                Ok(seq)
            })
            .collect()
    };
    let train_targets = phone_targets(train)?;
    let test_targets = phone_targets(test)?;
    let train_feats = mfcc_corpus(train, mfcc_cfg)?;

    // frozen encoder: hidden states never move, compute them once
    let frozen: Option<Vec<Array2<f64>>> = match cfg.scope {
        FinetuneScope::HeadOnly => Some(
            train_feats
                .par_iter()
                .map(|f| {
                    let mut trace = forward(&params, &enc, f, &MaskSpec::empty(), Mode::Eval)?;
                    Ok(trace.hidden_states.pop().expect("layers + 1 states"))
                })
                .collect::<Result<_>>()?,
        ),
        FinetuneScope::Full => None,
    };

    let opt = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
    let mut head_state = AdamState::new(&head.params);
    let mut enc_state = AdamState::new(&params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = rng_for(seed, "ctc_order", 0);
    let mut diverged = false;
    let mut infeasible = vec![false; train.len()];
    let mut applied = 0usize;

    for step in 0..cfg.steps {
        let slot = step % train.len();
        if slot == 0 {
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
        }
        let u = order[slot];
        let target = &train_targets[u];

        let (hidden, trace) = match &frozen {
            Some(states) => (states[u].clone(), None),
            None => {
                let trace = forward(&params, &enc, &train_feats[u], &MaskSpec::empty(), Mode::Eval)?;
                (trace.hidden_states[enc.layers].clone(), Some(trace))
            }
        };
        let logits = match head.logits(hidden.view()) {
            Ok(l) if l.iter().all(|v| v.is_finite()) => l,
            Ok(_) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let out = ctc_loss_and_grad(logits.view(), target)?;
        if out.too_short {
            infeasible[u] = true;
            continue;
        }
        if !out.loss.is_finite() {
            diverged = true;
            break;
        }

        let mut head_grads = ParamVec::zeros(head.params.layout.clone());
        head_grads.t2_mut("w").assign(&hidden.t().dot(&out.d_logits));
        head_grads.t1_mut("b").assign(&out.d_logits.sum_axis(Axis(0)));
        let d_hidden = out.d_logits.dot(&head.params.t2("w").t());
        adam_step(&mut head.params, &head_grads, &mut head_state, cfg.lr, &opt)?;
        if let Some(trace) = &trace {
            let mut enc_grads = ParamVec::zeros(params.layout.clone());
            backward_from_hidden(&params, &enc, trace, d_hidden, &mut enc_grads)?;
            adam_step(&mut params, &enc_grads, &mut enc_state, cfg.lr, &opt)?;
        }
        applied += 1;
        if !head.params.all_finite() || !params.all_finite() {
            diverged = true;
            break;
        }
    }
    if applied == 0 && !diverged {
        return Err(Error::config(
            "no training utterance produced an update: every target is too long for its frames",
        ));
    }

    let infeasible_train = infeasible.iter().filter(|&&b| b).count();
    let tag = CheckpointTag {
        name: checkpoint.display().to_string(),
        iteration: ck.iteration,
        step: ck.step,
    };
    if diverged {
        return Ok(ErrorRateReport {
            tag,
            strategy: strategy.to_string(),
            substitutions: 0,
            insertions: 0,
            deletions: 0,
            reference_tokens: 0,
            token_error_rate: 1.0,
            diverged: true,
            infeasible_train,
        });
    }

    let test_feats = mfcc_corpus(test, mfcc_cfg)?;
    let per_utterance: Vec<EditCounts> = test_feats
        .par_iter()
        .zip(&test_targets)
        .map(|(f, target)| {
            let trace = forward(&params, &enc, f, &MaskSpec::empty(), Mode::Eval)?;
            let logits = head.logits(trace.hidden_states[enc.layers].view())?;
            Ok(edit_distance(&greedy_decode(logits.view()), target))
        })
        .collect::<Result<_>>()?;
    let reference_tokens: usize = test_targets.iter().map(Vec::len).sum();
    if reference_tokens == 0 {
        return Err(Error::config("test split has no reference phones"));
    }
    let substitutions = per_utterance.iter().map(|c| c.substitutions).sum();
    let insertions = per_utterance.iter().map(|c| c.insertions).sum();
    let deletions = per_utterance.iter().map(|c| c.deletions).sum();
    let distance: usize = per_utterance.iter().map(|c| c.distance).sum();

    Ok(ErrorRateReport {
        tag,
        strategy: strategy.to_string(),
        substitutions,
        insertions,
        deletions,
        reference_tokens,
        token_error_rate: distance as f64 / reference_tokens as f64,
        diverged: false,
        infeasible_train,
    })
}
