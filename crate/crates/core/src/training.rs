//! One pretraining run: AdamW, linear warmup/decay, gradient accumulation,
//! divergence detection, checkpointing, and CSV metric logging.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::clustering::LabelSequence;
use crate::encoder::{
    forward, loss_and_grad, sample_mask, EncoderConfig, Mode, ParamVec,
};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::rng::{derive_seed, rng_for};
use crate::runio::write_atomic_str;

/// Steps the divergence detector averages over.
const DIVERGENCE_WINDOW: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    /// Utterances per minibatch.
    pub batch_size: usize,
    /// Minibatches whose gradients are averaged into one optimizer step;
    /// virtual batch = batch_size · accumulation_factor.
    pub accumulation_factor: usize,
    pub peak_lr: f64,
    /// Fraction of total_steps spent ramping 0 → peak_lr.
    pub warmup_fraction: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f64,
    /// Steps between checkpoints; 0 = final checkpoint only.
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Utterances longer than this many frames are truncated.
    pub max_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2000,
            batch_size: 8,
            accumulation_factor: 1,
            peak_lr: 5e-4,
            warmup_fraction: 0.1,
            betas: (0.9, 0.98),
            epsilon: 1e-8,
            weight_decay: 0.01,
            checkpoint_every: 500,
            seed: 0,
            max_frames: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be >= 1"));
        }
        if self.batch_size == 0 || self.accumulation_factor == 0 {
            return Err(Error::config("batch_size and accumulation_factor must be >= 1"));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::config("peak_lr must be positive and finite"));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::config("warmup_fraction must lie in (0, 1)"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        if self.epsilon <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("epsilon must be > 0 and weight_decay >= 0"));
        }
        if self.max_frames == 0 {
            return Err(Error::config("max_frames must be >= 1"));
        }
        Ok(())
    }

    /// Warmup length in steps, clamped inside [1, total_steps].
    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.total_steps as f64).round() as usize)
            .clamp(1, self.total_steps)
    }
}

/// Linear warmup 0 → peak over the warmup segment, then linear decay to 0
/// at `total_steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let total = config.total_steps;
    let w = config.warmup_steps();
    if step >= total {
        0.0
    } else if step <= w {
        config.peak_lr * step as f64 / w as f64
    } else {
        config.peak_lr * (total - step) as f64 / (total - w) as f64
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ParamVec,
    pub v: ParamVec,
    /// Applied (non-skipped) steps, for bias correction.
    pub t: u64,
    pub skipped: u64,
}

impl AdamState {
    pub fn new(params: &ParamVec) -> Self {
        AdamState {
            m: ParamVec::zeros(params.layout.clone()),
            v: ParamVec::zeros(params.layout.clone()),
            t: 0,
            skipped: 0,
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay. Non-finite gradients
/// skip the whole update atomically (params, moments and t untouched);
/// returns whether the step was applied.
pub fn adam_step(
    params: &mut ParamVec,
    grads: &ParamVec,
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<bool> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::DimMismatch("adam_step: layouts differ".into()));
    }
    if !grads.all_finite() {
        state.skipped += 1;
        return Ok(false);
    }
    state.t += 1;
    let (b1, b2) = config.betas;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.data.len() {
        let g = grads.data[i];
        let m = b1 * state.m.data[i] + (1.0 - b1) * g;
        let v = b2 * state.v.data[i] + (1.0 - b2) * g * g;
        state.m.data[i] = m;
        state.v.data[i] = v;
        let update = (m / bc1) / ((v / bc2).sqrt() + config.epsilon);
        params.data[i] -= lr * (update + config.weight_decay * params.data[i]);
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub masked_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub step: usize,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Steps whose update was skipped because of non-finite loss or grads.
    pub skipped_steps: Vec<usize>,
    /// Utterance visits whose sampled mask was empty.
    pub empty_mask_visits: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,masked_acc,lr\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.8}\n",
                r.step, r.loss, r.masked_acc, r.lr
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic_str(path, &self.to_csv())
    }
}

#[derive(Debug)]
pub struct PretrainOutput {
    pub params: ParamVec,
    pub log: TrainLog,
}

/// Where a training run lands on disk. With no sinks set, nothing is
/// written and results come back in [`PretrainOutput`] only.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainSinks<'a> {
    /// Iteration index recorded in checkpoint manifests and divergence
    /// reports (1-based within a plan; 0 for standalone runs).
    pub iteration: usize,
    /// Step checkpoints are written below this directory as `step{N}/`.
    pub checkpoint_root: Option<&'a Path>,
    /// Metric CSV destination; on divergence the partial log is still
    /// written here before the error returns.
    pub log_csv: Option<&'a Path>,
}

fn shuffled_epoch(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = rng_for(seed, "order", epoch);
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    v
}

/// Shuffled round-robin over utterances, addressed by a global visit index
/// so the schedule is independent of how visits are grouped into steps.
struct VisitStream {
    n: u64,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
}

impl VisitStream {
    fn new(n: usize, seed: u64) -> Self {
        VisitStream { n: n as u64, seed, epoch: 0, perm: shuffled_epoch(n, seed, 0) }
    }

    fn utterance(&mut self, visit: u64) -> usize {
        let epoch = visit / self.n;
        if epoch != self.epoch {
            self.epoch = epoch;
            self.perm = shuffled_epoch(self.n as usize, self.seed, epoch);
        }
        self.perm[(visit % self.n) as usize]
    }
}

/// Align, length-check, and truncate the corpus to `max_frames`.
fn prepare(
    features: &[FeatureSequence],
    labels: &[LabelSequence],
    vocab: usize,
    max_frames: usize,
) -> Result<Vec<(FeatureSequence, LabelSequence)>> {
    if features.is_empty() {
        return Err(Error::config("cannot pretrain on an empty corpus"));
    }
    if features.len() != labels.len() {
        return Err(Error::Misaligned(format!(
            "{} feature sequences vs {} label sequences",
            features.len(),
            labels.len()
        )));
    }
    features
        .iter()
        .zip(labels)
        .map(|(f, l)| {
            if f.utterance_id != l.utterance_id {
                return Err(Error::Misaligned(format!(
                    "feature utterance `{}` paired with labels for `{}`",
                    f.utterance_id, l.utterance_id
                )));
            }
            if f.len() != l.labels.len() {
                return Err(Error::Misaligned(format!(
                    "utterance `{}`: {} frames vs {} labels",
                    f.utterance_id,
                    f.len(),
                    l.labels.len()
                )));
            }
            if let Some(&z) = l.labels.iter().max() {
                if z as usize >= vocab {
                    return Err(Error::config(format!(
                        "utterance `{}`: label {z} >= vocab {vocab}",
                        f.utterance_id
                    )));
                }
            }
            let t = f.len().min(max_frames);
            let mut f = f.clone();
            let mut l = l.clone();
            if t < f.len() {
                f.frames = f.frames.slice(ndarray::s![..t, ..]).to_owned();
                l.labels.truncate(t);
            }
            Ok((f, l))
        })
        .collect()
}

/// Run `total_steps` optimizer steps of masked prediction against the given
/// frame labels. Each step averages gradients over the virtual batch in
/// 64-bit, so accumulation regroupings produce identical updates. Mask and
/// dropout randomness derive from the global visit index: the schedule seen
/// by the model depends only on (seed, corpus), never on batching.
pub fn pretrain_iteration(
    init: ParamVec,
    encoder: &EncoderConfig,
    features: &[FeatureSequence],
    labels: &[LabelSequence],
    train: &TrainConfig,
    sinks: &TrainSinks,
) -> Result<PretrainOutput> {
    encoder.validate()?;
    train.validate()?;
    let corpus = prepare(features, labels, encoder.vocab, train.max_frames)?;
    let mut params = init;
    params.round_to_f32_grid();
    let mut state = AdamState::new(&params);
    let mut stream = VisitStream::new(corpus.len(), train.seed);
    let mut log = TrainLog::default();

    let per_step = (train.batch_size * train.accumulation_factor) as u64;
    let threshold = (encoder.vocab as f64).ln() + 1.0;
    let allowed_bad = ((0.2 * train.total_steps as f64).ceil() as usize).max(1);
    let warmup = train.warmup_steps();
    let mut window: VecDeque<f64> = VecDeque::with_capacity(DIVERGENCE_WINDOW);
    let mut bad_steps = 0usize;

    for step in 1..=train.total_steps {
        let first_visit = (step as u64 - 1) * per_step;
        let visit_plan: Vec<(u64, usize)> =
            (first_visit..first_visit + per_step).map(|v| (v, stream.utterance(v))).collect();

        let results: Vec<_> = visit_plan
            .par_iter()
            .map(|&(visit, u)| {
                let (f, l) = &corpus[u];
                let mask = sample_mask(f.len(), encoder, derive_seed(train.seed, "mask", visit));
                let mode = Mode::Train {
                    dropout_seed: derive_seed(train.seed, "dropout", visit),
                };
                let trace = forward(&params, encoder, f, &mask, mode)?;
                loss_and_grad(&params, encoder, &trace, l, &mask)
            })
            .collect::<Result<Vec<_>>>()?;

        // fixed-order 64-bit reduction over the virtual batch
        let mut grad_sum = ParamVec::zeros(params.layout.clone());
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        let mut masked = 0usize;
        let mut correct = 0usize;
        for out in &results {
            if out.empty_mask {
                log.empty_mask_visits += 1;
                continue;
            }
            for (acc, g) in grad_sum.data.iter_mut().zip(&out.grads.data) {
                *acc += g;
            }
            loss_sum += out.loss;
            loss_n += 1;
            masked += out.masked_count;
            correct += out.masked_correct;
        }
        let inv = 1.0 / per_step as f64;
        for g in &mut grad_sum.data {
            *g *= inv;
        }
        let loss = if loss_n > 0 { loss_sum / loss_n as f64 } else { 0.0 };
        let acc = if masked > 0 { correct as f64 / masked as f64 } else { 0.0 };
        let lr = lr_at(step, train);

        let healthy = loss.is_finite() && grad_sum.all_finite();
        if healthy {
            adam_step(&mut params, &grad_sum, &mut state, lr, train)?;
            params.round_to_f32_grid();
        } else {
            state.skipped += 1;
            log.skipped_steps.push(step);
        }
        log.steps.push(StepRecord { step, loss, masked_acc: acc, lr });

        // divergence detector: running-mean loss stuck above ln K + 1
        if window.len() == DIVERGENCE_WINDOW {
            window.pop_front();
        }
        window.push_back(if loss.is_finite() { loss } else { f64::INFINITY });
        if step > warmup {
            let mean: f64 = window.iter().sum::<f64>() / window.len() as f64;
            if mean > threshold {
                bad_steps += 1;
                if bad_steps >= allowed_bad {
                    if let Some(path) = sinks.log_csv {
                        log.write_csv(path)?;
                    }
                    return Err(Error::Divergence {
                        iteration: sinks.iteration,
                        step,
                        running_mean: mean,
                        threshold,
                    });
                }
            }
        }

        if let Some(root) = sinks.checkpoint_root {
            let due = train.checkpoint_every > 0 && step % train.checkpoint_every == 0;
            if due || step == train.total_steps {
                let dir = root.join(format!("step{step}"));
                save_checkpoint(&dir, encoder, &params, step, sinks.iteration)?;
                log.checkpoints.push(CheckpointRecord { step, path: dir });
            }
        }
    }

    if let Some(path) = sinks.log_csv {
        log.write_csv(path)?;
    }
    Ok(PretrainOutput { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, HeadKind};
    use crate::features::FeatureKind;
    use crate::rng::rng_from;
    use ndarray::Array2;

    fn scalar_layout() -> std::sync::Arc<crate::encoder::TensorLayout> {
        crate::encoder::TensorLayout::builder().tensor("p", &[1]).build()
    }

    #[test]
    fn constant_grad_trajectory_matches_closed_form() {
        // with m_0 = v_0 = 0 and constant grad g: mhat_t = g, vhat_t = g²,
        // so every step moves by exactly lr·g/(|g|+ε)
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = ParamVec::zeros(scalar_layout());
        p.data[0] = 1.0;
        let mut g = ParamVec::zeros(p.layout.clone());
        g.data[0] = 0.3;
        let mut state = AdamState::new(&p);
        let lr = 0.01;
        for t in 1..=10 {
            assert!(adam_step(&mut p, &g, &mut state, lr, &cfg).unwrap());
            let expected = 1.0 - t as f64 * lr * 0.3 / (0.3 + cfg.epsilon);
            assert!(
                (p.data[0] - expected).abs() < 1e-10,
                "step {t}: {} vs {expected}",
                p.data[0]
            );
        }
        assert_eq!(state.t, 10);
    }

    #[test]
    fn zero_grads_fresh_state_leave_params_unchanged() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = ParamVec::zeros(scalar_layout());
        p.data[0] = 2.5;
        let g = ParamVec::zeros(p.layout.clone());
        let mut state = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut state, 0.1, &cfg).unwrap();
        }
        assert_eq!(p.data[0], 2.5);
        assert_eq!(state.t, 5);
    }

    #[test]
    fn pure_weight_decay_is_geometric() {
        let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        let mut p = ParamVec::zeros(scalar_layout());
        p.data[0] = 1.0;
        let g = ParamVec::zeros(p.layout.clone());
        let mut state = AdamState::new(&p);
        let lr = 0.5;
        for _ in 0..4 {
            adam_step(&mut p, &g, &mut state, lr, &cfg).unwrap();
        }
        let expected = (1.0f64 - 0.5 * 0.1).powi(4);
        assert!((p.data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn nan_grad_skips_atomically() {
        let cfg = TrainConfig::default();
        let mut p = ParamVec::zeros(scalar_layout());
        p.data[0] = 1.0;
        let mut g = ParamVec::zeros(p.layout.clone());
        g.data[0] = f64::NAN;
        let mut state = AdamState::new(&p);
        assert!(!adam_step(&mut p, &g, &mut state, 0.1, &cfg).unwrap());
        assert_eq!(p.data[0], 1.0);
        assert_eq!(state.t, 0);
        assert_eq!(state.skipped, 1);
        assert_eq!(state.m.data[0], 0.0);
    }

    #[test]
    fn lr_schedule_hits_its_three_pinned_points() {
        let cfg = TrainConfig {
            total_steps: 1000,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(100, &cfg), 1e-3);
        assert_eq!(lr_at(1000, &cfg), 0.0);
        // linear in both segments
        assert!((lr_at(50, &cfg) - 5e-4).abs() < 1e-15);
        assert!((lr_at(550, &cfg) - 5e-4).abs() < 1e-15);
        // monotone up then down
        for s in 0..100 {
            assert!(lr_at(s, &cfg) < lr_at(s + 1, &cfg));
        }
        for s in 100..1000 {
            assert!(lr_at(s, &cfg) > lr_at(s + 1, &cfg));
        }
    }

    fn tiny_encoder(k: usize) -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            dim: 16,
            heads: 2,
            ff_dim: 32,
            input_dim: 6,
            vocab: k,
            mask_span: 2,
            mask_prob: 0.2,
            dropout: 0.0,
            head: HeadKind::Linear,
        }
    }

    /// Utterances whose frames all carry the utterance's label, embedded as
    /// a noisy one-hot; context reveals every masked frame's label.
    fn constant_label_corpus(
        n: usize,
        t_len: usize,
        k: usize,
        seed: u64,
    ) -> (Vec<FeatureSequence>, Vec<LabelSequence>) {
        let mut feats = Vec::new();
        let mut labs = Vec::new();
        for u in 0..n {
            let z = (u % k) as u32;
            let mut rng = rng_from(seed + u as u64);
            let frames = Array2::from_shape_fn((t_len, 6), |(_, j)| {
                let base = if j == z as usize { 2.0 } else { 0.0 };
                base + 0.1 * (rng.random::<f64>() - 0.5)
            });
            feats.push(FeatureSequence {
                utterance_id: format!("u{u}"),
                frames,
                frame_hop: 0.01,
                frame_len: 0.025,
                kind: FeatureKind::Mfcc,
            });
            labs.push(LabelSequence {
                utterance_id: format!("u{u}"),
                labels: vec![z; t_len],
            });
        }
        (feats, labs)
    }

    fn sinks(iteration: usize) -> TrainSinks<'static> {
        TrainSinks { iteration, ..TrainSinks::default() }
    }

    #[test]
    fn single_step_run_logs_one_record() {
        let enc = tiny_encoder(5);
        let (f, l) = constant_label_corpus(4, 6, 5, 1);
        let train = TrainConfig {
            total_steps: 1,
            batch_size: 2,
            accumulation_factor: 1,
            warmup_fraction: 0.5,
            ..TrainConfig::default()
        };
        let init = init_params(&enc, 7).unwrap();
        let out = pretrain_iteration(init, &enc, &f, &l, &train, &sinks(1)).unwrap();
        assert_eq!(out.log.steps.len(), 1);
        assert_eq!(out.log.steps[0].step, 1);
        assert!(out.log.steps[0].loss.is_finite());
    }

    #[test]
    fn accumulation_regrouping_gives_identical_updates() {
        let enc = tiny_encoder(5);
        let (f, l) = constant_label_corpus(8, 6, 5, 2);
        let base = TrainConfig {
            total_steps: 5,
            peak_lr: 1e-3,
            warmup_fraction: 0.2,
            seed: 42,
            ..TrainConfig::default()
        };
        let a = TrainConfig { batch_size: 2, accumulation_factor: 4, ..base.clone() };
        let b = TrainConfig { batch_size: 8, accumulation_factor: 1, ..base };
        let init = init_params(&enc, 3).unwrap();
        let out_a = pretrain_iteration(init.clone(), &enc, &f, &l, &a, &sinks(1)).unwrap();
        let out_b = pretrain_iteration(init, &enc, &f, &l, &b, &sinks(1)).unwrap();
        // same visit schedule, same per-visit seeds, same reduction order:
        // bit-identical, which is stronger than the 1e-6 contract
        assert_eq!(out_a.params.data, out_b.params.data);
        for (ra, rb) in out_a.log.steps.iter().zip(&out_b.log.steps) {
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn training_learns_and_is_seed_deterministic() {
        let enc = tiny_encoder(5);
        let (f, l) = constant_label_corpus(16, 8, 5, 3);
        let train = TrainConfig {
            total_steps: 300,
            batch_size: 8,
            peak_lr: 3e-3,
            warmup_fraction: 0.1,
            weight_decay: 0.0,
            seed: 9,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let init = init_params(&enc, 11).unwrap();
        let out = pretrain_iteration(init.clone(), &enc, &f, &l, &train, &sinks(1)).unwrap();

        // loss trends down: last decile mean < first post-warmup decile mean
        let warm = train.warmup_steps();
        let post: Vec<f64> = out.log.steps[warm..].iter().map(|r| r.loss).collect();
        let decile = post.len() / 10;
        let first: f64 = post[..decile].iter().sum::<f64>() / decile as f64;
        let last: f64 = post[post.len() - decile..].iter().sum::<f64>() / decile as f64;
        assert!(last < first, "loss did not trend down: first {first:.4}, last {last:.4}");

        // constant-label task is fully learnable from context
        let final_acc = out.log.steps.last().unwrap().masked_acc;
        assert!(final_acc > 0.5, "final masked accuracy {final_acc}");

        let again = pretrain_iteration(init, &enc, &f, &l, &train, &sinks(1)).unwrap();
        assert_eq!(out.params.data, again.params.data);
        assert_eq!(out.log.to_csv(), again.log.to_csv());
    }

    #[test]
    fn runaway_lr_triggers_the_divergence_detector() {
        let enc = tiny_encoder(5);
        let (f, l) = constant_label_corpus(8, 6, 5, 4);
        let train = TrainConfig {
            total_steps: 100,
            batch_size: 4,
            peak_lr: 100.0,
            warmup_fraction: 0.1,
            seed: 5,
            ..TrainConfig::default()
        };
        let init = init_params(&enc, 2).unwrap();
        let err = pretrain_iteration(init, &enc, &f, &l, &train, &sinks(3)).unwrap_err();
        match &err {
            Error::Divergence { iteration, threshold, .. } => {
                assert_eq!(*iteration, 3);
                assert!((threshold - (5f64.ln() + 1.0)).abs() < 1e-12);
            }
            other => panic!("expected divergence, got {other}"),
        }
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn zero_mask_prob_trains_nothing_and_counts_empty_visits() {
        let enc = EncoderConfig { mask_prob: 0.0, ..tiny_encoder(5) };
        let (f, l) = constant_label_corpus(4, 6, 5, 6);
        let train = TrainConfig {
            total_steps: 3,
            batch_size: 2,
            weight_decay: 0.0,
            warmup_fraction: 0.5,
            ..TrainConfig::default()
        };
        let init = init_params(&enc, 8).unwrap();
        let out = pretrain_iteration(init.clone(), &enc, &f, &l, &train, &sinks(1)).unwrap();
        assert_eq!(out.log.empty_mask_visits, 3 * 2);
        assert_eq!(out.params.data, init.data);
        assert!(out.log.steps.iter().all(|r| r.loss == 0.0 && r.masked_acc == 0.0));
    }

    #[test]
    fn checkpoints_land_at_the_configured_cadence() {
        let tmp = tempfile::tempdir().unwrap();
        let enc = tiny_encoder(5);
        let (f, l) = constant_label_corpus(4, 6, 5, 7);
        let train = TrainConfig {
            total_steps: 5,
            batch_size: 2,
            checkpoint_every: 2,
            warmup_fraction: 0.2,
            ..TrainConfig::default()
        };
        let init = init_params(&enc, 1).unwrap();
        let out =
            pretrain_iteration(
                init,
                &enc,
                &f,
                &l,
                &train,
                &TrainSinks {
                    iteration: 2,
                    checkpoint_root: Some(tmp.path()),
                    log_csv: None,
                },
            )
            .unwrap();
        let steps: Vec<usize> = out.log.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![2, 4, 5]);
        let loaded = crate::checkpoint::load_checkpoint(&out.log.checkpoints[2].path).unwrap();
        assert_eq!(loaded.step, 5);
        assert_eq!(loaded.iteration, 2);
        assert_eq!(loaded.params, out.params);
    }

    #[test]
    fn misaligned_or_overrange_labels_are_rejected() {
        let enc = tiny_encoder(5);
        let (f, mut l) = constant_label_corpus(2, 6, 5, 8);
        l[1].labels.pop();
        let train = TrainConfig { total_steps: 1, ..TrainConfig::default() };
        let init = init_params(&enc, 1).unwrap();
        assert!(matches!(
            pretrain_iteration(init.clone(), &enc, &f, &l, &train, &sinks(1)),
            Err(Error::Misaligned(_))
        ));

        let (f, mut l) = constant_label_corpus(2, 6, 5, 8);
        l[0].labels[0] = 99;
        assert!(pretrain_iteration(init, &enc, &f, &l, &train, &sinks(1)).is_err());
    }

    #[test]
    fn visit_stream_covers_every_utterance_each_epoch() {
        let mut s = VisitStream::new(7, 13);
        for epoch in 0..3u64 {
            let mut seen: Vec<usize> = (0..7).map(|i| s.utterance(epoch * 7 + i)).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
        // different epochs get different orders (with overwhelming probability)
        let mut s1 = VisitStream::new(7, 13);
        let e0: Vec<usize> = (0..7).map(|i| s1.utterance(i)).collect();
        let e1: Vec<usize> = (7..14).map(|i| s1.utterance(i)).collect();
        assert_ne!(e0, e1);
    }

    #[test]
    fn truncation_caps_frames_and_labels_together() {
        let enc = tiny_encoder(5);
        let (f, l) = constant_label_corpus(2, 20, 5, 9);
        let train = TrainConfig {
            total_steps: 1,
            batch_size: 2,
            max_frames: 8,
            warmup_fraction: 0.5,
            ..TrainConfig::default()
        };
        let prepared = prepare(&f, &l, enc.vocab, train.max_frames).unwrap();
        assert!(prepared.iter().all(|(f, l)| f.len() == 8 && l.labels.len() == 8));
        let init = init_params(&enc, 1).unwrap();
        assert!(pretrain_iteration(init, &enc, &f, &l, &train, &sinks(1)).is_ok());
    }
}
