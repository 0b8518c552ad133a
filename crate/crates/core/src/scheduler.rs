//! Iteration plans and the multi-iteration pretraining driver.
//!
//! A plan fixes, up front, how a total minibatch-step budget is divided
//! across N teacher-refinement iterations, which encoder layer supervises
//! each iteration, and how many clusters the teacher codebook uses.
//! [`run_plan`] then executes the plan: cluster teacher features, assign
//! pseudo-labels, pretrain, and feed a hidden layer of the result back in
//! as the next teacher.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::clustering::{assign_corpus, fit_codebook, ClusterConfig};
use crate::corpus::Utterance;
use crate::encoder::{extract_embeddings, init_params, EncoderConfig, ParamVec};
use crate::error::{Error, Result};
use crate::features::{mfcc_corpus, FeatureKind, MfccConfig};
use crate::rng::derive_seed;
use crate::runio::{write_atomic_str, RunDir};
use crate::training::{pretrain_iteration, TrainConfig, TrainSinks};

/// How the step budget and cluster counts are spread over iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Two iterations: MFCC teacher, then layer-6 teacher with the larger
    /// share of the budget.
    Original,
    /// N equal step allocations.
    Uniform,
    /// Step allocations grow linearly so the last iteration is longest;
    /// supervision layer climbs from 6 toward `layer_max`.
    Progressive,
    /// Progressive steps plus a cluster count that grows linearly from
    /// `k_start` to `k_end`.
    ProgressiveCluster,
}

/// Whether iteration step budgets grow or shrink over the run. Decreasing
/// reverses only the step allocation; supervision layers and cluster
/// counts keep their forward schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Increasing,
    Decreasing,
}

/// One iteration's slice of the plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSpec {
    /// 1-based position in the run.
    pub index: usize,
    /// Minibatch-step budget for this iteration.
    pub steps: usize,
    /// Teacher features: MFCC for the first iteration, a hidden layer of
    /// the previous iteration's model afterwards.
    pub supervision: FeatureKind,
    /// Codebook size for this iteration's pseudo-labels.
    pub k: usize,
    /// Initialize from the previous iteration's final parameters instead
    /// of a fresh draw. Known to destabilize training; off by default.
    pub warm_start: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationPlan {
    pub strategy: Strategy,
    #[serde(rename = "N")]
    pub n: usize,
    pub total_budget: usize,
    /// Floor on any single iteration's step budget.
    pub min_steps: usize,
    #[serde(default)]
    pub direction: Direction,
    pub specs: Vec<IterationSpec>,
}

/// Planner knobs that don't vary per strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanContext {
    /// Smallest step budget any iteration may receive. The desk-scale
    /// default is 200; at full speech-corpus scale iterations run for
    /// thousands of steps (12000 is a realistic floor), so raise this
    /// together with the budget.
    pub min_steps: usize,
    /// Encoder depth L; supervision layers must not exceed it.
    pub model_layers: usize,
}

impl Default for PlanContext {
    fn default() -> Self {
        PlanContext { min_steps: 200, model_layers: 6 }
    }
}

/// Default ceiling for the progressive layer climb: one below the top,
/// but never under the layer-6 starting rung.
pub fn default_layer_max(model_layers: usize) -> usize {
    model_layers.saturating_sub(1).max(6).min(model_layers)
}

impl IterationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("a plan needs at least one iteration"));
        }
        if self.specs.len() != self.n {
            return Err(Error::config(format!(
                "plan says N = {} but carries {} specs",
                self.n,
                self.specs.len()
            )));
        }
        let sum: usize = self.specs.iter().map(|s| s.steps).sum();
        if sum != self.total_budget {
            return Err(Error::config(format!(
                "iteration steps sum to {sum}, not the stated budget {}",
                self.total_budget
            )));
        }
        for (pos, spec) in self.specs.iter().enumerate() {
            if spec.index != pos + 1 {
                return Err(Error::config(format!(
                    "spec at position {pos} has index {}, expected {}",
                    spec.index,
                    pos + 1
                )));
            }
            if spec.steps < self.min_steps {
                return Err(Error::config(format!(
                    "iteration {} has {} steps, below the floor {}",
                    spec.index, spec.steps, self.min_steps
                )));
            }
            if spec.k < 2 {
                return Err(Error::config(format!("iteration {} needs k >= 2", spec.index)));
            }
            let is_mfcc = spec.supervision == FeatureKind::Mfcc;
            if is_mfcc != (spec.index == 1) {
                return Err(Error::config(format!(
                    "iteration {} supervision is {}; MFCC supervises exactly the first iteration",
                    spec.index, spec.supervision
                )));
            }
            if spec.warm_start {
                if spec.index == 1 {
                    return Err(Error::config("iteration 1 has no previous model to warm-start from"));
                }
                let prev_k = self.specs[pos - 1].k;
                if spec.k != prev_k {
                    return Err(Error::config(format!(
                        "iteration {} warm start requires a matching cluster count (k {} follows k {prev_k})",
                        spec.index, spec.k
                    )));
                }
            }
        }
        if matches!(self.strategy, Strategy::Progressive | Strategy::ProgressiveCluster) {
            let ordered = self.specs.windows(2).all(|w| match self.direction {
                Direction::Increasing => w[0].steps <= w[1].steps,
                Direction::Decreasing => w[0].steps >= w[1].steps,
            });
            if !ordered {
                return Err(Error::config(format!(
                    "{:?} plan steps must be monotone in the {:?} direction",
                    self.strategy, self.direction
                )));
            }
        }
        Ok(())
    }

    /// Turn warm starting on or off for every iteration after the first.
    pub fn with_warm_start(mut self, on: bool) -> Self {
        for spec in self.specs.iter_mut().skip(1) {
            spec.warm_start = on;
        }
        self
    }

    /// Reverse the step allocation (largest iteration first) while keeping
    /// supervision layers and cluster counts on their forward schedule.
    pub fn with_direction(mut self, direction: Direction) -> Self {
        if direction == Direction::Decreasing && self.direction == Direction::Increasing {
            let mut steps: Vec<usize> = self.specs.iter().map(|s| s.steps).collect();
            steps.reverse();
            for (spec, s) in self.specs.iter_mut().zip(steps) {
                spec.steps = s;
            }
        }
        self.direction = direction;
        self
    }
}

fn check_layer_max(layer_max: usize, ctx: &PlanContext) -> Result<()> {
    if layer_max < 6 || layer_max > ctx.model_layers {
        return Err(Error::config(format!(
            "layer_max {layer_max} outside 6..={} (model depth)",
            ctx.model_layers
        )));
    }
    Ok(())
}

/// Supervision for iteration `i` of `n`: MFCC first, layer 6 second, then
/// a straight-line climb from 6 to `layer_max` rounded to the nearest rung.
fn layer_schedule(i: usize, n: usize, layer_max: usize) -> FeatureKind {
    match i {
        1 => FeatureKind::Mfcc,
        2 => FeatureKind::LayerEmbedding(6),
        _ => {
            let span = (layer_max - 6) as f64;
            let l = 6.0 + span * (i - 2) as f64 / (n - 2) as f64;
            FeatureKind::LayerEmbedding(l.round() as usize)
        }
    }
}

/// The two-iteration baseline: a `split_fraction` share of the budget on
/// MFCC pseudo-labels, the (strictly larger-fraction) remainder on layer-6
/// pseudo-labels.
pub fn plan_original(
    total_budget: usize,
    k1: usize,
    k2: usize,
    split_fraction: f64,
    ctx: &PlanContext,
) -> Result<IterationPlan> {
    if !(split_fraction > 0.0 && split_fraction < 0.5) {
        return Err(Error::config(format!(
            "split_fraction {split_fraction} must lie in (0, 0.5) so the second iteration dominates"
        )));
    }
    if total_budget < 2 * ctx.min_steps {
        return Err(Error::config(format!(
            "budget {total_budget} cannot give two iterations {} steps each",
            ctx.min_steps
        )));
    }
    check_layer_max(6, ctx)?;
    let first = ((split_fraction * total_budget as f64).floor() as usize).max(ctx.min_steps);
    let specs = vec![
        IterationSpec {
            index: 1,
            steps: first,
            supervision: FeatureKind::Mfcc,
            k: k1,
            warm_start: false,
        },
        IterationSpec {
            index: 2,
            steps: total_budget - first,
            supervision: FeatureKind::LayerEmbedding(6),
            k: k2,
            warm_start: false,
        },
    ];
    let plan = IterationPlan {
        strategy: Strategy::Original,
        n: 2,
        total_budget,
        min_steps: ctx.min_steps,
        direction: Direction::Increasing,
        specs,
    };
    plan.validate()?;
    Ok(plan)
}

/// N iterations of floor-equal step counts, remainder on the last.
pub fn plan_uniform(
    total_budget: usize,
    n: usize,
    k: usize,
    layer_max: usize,
    ctx: &PlanContext,
) -> Result<IterationPlan> {
    if n == 0 {
        return Err(Error::config("a plan needs at least one iteration"));
    }
    if total_budget < n * ctx.min_steps {
        return Err(Error::config(format!(
            "budget {total_budget} cannot give {n} iterations {} steps each",
            ctx.min_steps
        )));
    }
    check_layer_max(layer_max, ctx)?;
    let base = total_budget / n;
    let rem = total_budget % n;
    let specs = (1..=n)
        .map(|i| IterationSpec {
            index: i,
            steps: base + if i == n { rem } else { 0 },
            supervision: layer_schedule(i, n, layer_max),
            k,
            warm_start: false,
        })
        .collect();
    let plan = IterationPlan {
        strategy: Strategy::Uniform,
        n,
        total_budget,
        min_steps: ctx.min_steps,
        direction: Direction::Increasing,
        specs,
    };
    plan.validate()?;
    Ok(plan)
}

/// Linear step allocation: iteration i's ideal share is budget·i / (1+…+N),
/// rounded half-up, floored at `min_steps`, with the last iteration
/// absorbing the residue. When the floor inflates the early iterations so
/// far that the residue would break monotonicity, the tail is leveled: the
/// longest suffix that can hold a floor-equal block at least as large as
/// its predecessor takes one, keeping the sum exact and the sequence
/// nondecreasing.
fn progressive_steps(total_budget: usize, n: usize, min_steps: usize) -> Vec<usize> {
    let t = (n * (n + 1) / 2) as f64;
    let mut steps: Vec<usize> = (1..n)
        .map(|i| ((total_budget as f64 * i as f64 / t).round() as usize).max(min_steps))
        .collect();
    let head: usize = steps.iter().sum();
    let last = total_budget as i64 - head as i64;
    let prev = steps.last().copied().unwrap_or(0);
    if last >= min_steps.max(prev) as i64 {
        steps.push(last as usize);
        return steps;
    }
    // level the tail: j is the first index (1-based) of the replaced block
    for j in (1..n).rev() {
        let kept: usize = steps[..j - 1].iter().sum();
        let pool = total_budget - kept;
        let len = n - j + 1;
        let block = pool / len;
        let floor = if j > 1 { min_steps.max(steps[j - 2]) } else { min_steps };
        if block >= floor {
            steps.truncate(j - 1);
            let bumped = pool % len; // this many tail entries get +1
            for pos in 0..len {
                steps.push(block + usize::from(pos >= len - bumped));
            }
            return steps;
        }
    }
    unreachable!("budget >= n * min_steps, so leveling the whole plan fits");
}

/// Linearly growing step budgets with a climbing supervision layer and a
/// constant cluster count.
pub fn plan_progressive(
    total_budget: usize,
    n: usize,
    k: usize,
    layer_max: usize,
    ctx: &PlanContext,
) -> Result<IterationPlan> {
    if n == 0 {
        return Err(Error::config("a plan needs at least one iteration"));
    }
    if total_budget < n * ctx.min_steps {
        return Err(Error::config(format!(
            "budget {total_budget} cannot give {n} iterations {} steps each",
            ctx.min_steps
        )));
    }
    check_layer_max(layer_max, ctx)?;
    let steps = progressive_steps(total_budget, n, ctx.min_steps);
    let specs = steps
        .into_iter()
        .enumerate()
        .map(|(pos, s)| IterationSpec {
            index: pos + 1,
            steps: s,
            supervision: layer_schedule(pos + 1, n, layer_max),
            k,
            warm_start: false,
        })
        .collect();
    let plan = IterationPlan {
        strategy: Strategy::Progressive,
        n,
        total_budget,
        min_steps: ctx.min_steps,
        direction: Direction::Increasing,
        specs,
    };
    plan.validate()?;
    Ok(plan)
}

/// Progressive steps plus a cluster count interpolated from `k_start` at
/// iteration 1 to `k_end` at iteration N, rounded half-up.
pub fn plan_progressive_cluster(
    total_budget: usize,
    n: usize,
    k_start: usize,
    k_end: usize,
    layer_max: usize,
    ctx: &PlanContext,
) -> Result<IterationPlan> {
    if k_start > k_end {
        return Err(Error::config(format!("k must not shrink: {k_start} > {k_end}")));
    }
    if n == 1 && k_start != k_end {
        return Err(Error::config("one iteration cannot span two cluster counts"));
    }
    let mut plan = plan_progressive(total_budget, n, k_start, layer_max, ctx)?;
    plan.strategy = Strategy::ProgressiveCluster;
    for spec in plan.specs.iter_mut() {
        let frac = if n == 1 { 0.0 } else { (spec.index - 1) as f64 / (n - 1) as f64 };
        spec.k = (k_start as f64 + (k_end - k_start) as f64 * frac).round() as usize;
    }
    plan.validate()?;
    Ok(plan)
}

/// Everything `run_plan` needs besides the plan itself. The encoder's
/// `vocab` is overwritten per iteration with that iteration's k, and the
/// train config's `total_steps` and `seed` come from the plan and the run
/// seed rather than from here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfigs {
    pub mfcc: MfccConfig,
    pub cluster: ClusterConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

/// Where one completed iteration left its outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationArtifacts {
    pub index: usize,
    pub codebook_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub log_csv: PathBuf,
}

/// A divergence halt, also serialized to `reports/divergence.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub iteration: usize,
    pub step: usize,
    pub running_mean: f64,
    pub threshold: f64,
}

/// What a plan execution produced. On divergence the run halts early:
/// `artifacts` covers the completed iterations, `divergence` says where it
/// stopped, and `final_params` come from the last completed iteration.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub artifacts: Vec<IterationArtifacts>,
    pub divergence: Option<DivergenceReport>,
    pub final_params: Option<ParamVec>,
}

/// Execute a plan end to end. Per iteration: build teacher features (MFCC
/// for iteration 1, else an embedding layer of the previous model), fit a
/// k-means codebook on them, assign frame labels, and pretrain the encoder
/// on masked prediction of those labels. The model input is always MFCC;
/// only the teacher improves across iterations. Divergence halts the plan
/// and is reported, not propagated as an error.
pub fn run_plan(
    plan: &IterationPlan,
    utterances: &[Utterance],
    cfg: &StageConfigs,
    run: &RunDir,
    seed: u64,
) -> Result<PlanOutcome> {
    drive(plan, utterances, cfg, run, seed, false)
}

/// Like [`run_plan`], but skip the leading run of iterations whose final
/// checkpoint is already on disk, reloading the last finished model as the
/// teacher for the first unfinished iteration. An iteration counts as
/// finished only if a checkpoint at exactly its planned step count exists;
/// a diverged or interrupted iteration reruns from scratch.
pub fn resume_plan(
    plan: &IterationPlan,
    utterances: &[Utterance],
    cfg: &StageConfigs,
    run: &RunDir,
    seed: u64,
) -> Result<PlanOutcome> {
    drive(plan, utterances, cfg, run, seed, true)
}

fn finished_checkpoint(run: &RunDir, spec: &IterationSpec) -> Result<Option<PathBuf>> {
    let found = crate::checkpoint::list_step_checkpoints(&run.checkpoint_root(spec.index))?;
    Ok(found.into_iter().find(|(step, _)| *step == spec.steps).map(|(_, path)| path))
}

fn drive(
    plan: &IterationPlan,
    utterances: &[Utterance],
    cfg: &StageConfigs,
    run: &RunDir,
    seed: u64,
    resume: bool,
) -> Result<PlanOutcome> {
    plan.validate()?;
    cfg.encoder.validate()?;
    for spec in &plan.specs {
        // the effective config: the plan owns total_steps, the run owns seed
        TrainConfig { total_steps: spec.steps, ..cfg.train.clone() }.validate()?;
        if let FeatureKind::LayerEmbedding(l) = spec.supervision {
            if l > cfg.encoder.layers {
                return Err(Error::config(format!(
                    "iteration {} wants layer {l} of a {}-layer encoder",
                    spec.index, cfg.encoder.layers
                )));
            }
        }
    }
    write_atomic_str(&run.plan_json(), &serde_json::to_string_pretty(plan)?)?;
    // a divergence report describes the attempt in progress, not an old one
    match std::fs::remove_file(run.report("divergence.json")) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(e.into()),
    }

    let mfcc = mfcc_corpus(utterances, &cfg.mfcc)?;
    let mut artifacts = Vec::new();
    let mut prev: Option<(ParamVec, EncoderConfig)> = None;
    let mut skipping = resume;

    for spec in &plan.specs {
        if skipping {
            if let Some(dir) = finished_checkpoint(run, spec)? {
                let ck = crate::checkpoint::load_checkpoint(&dir)?;
                if ck.config.vocab != spec.k {
                    return Err(Error::config(format!(
                        "iteration {}: checkpoint on disk was trained with vocab {}, the plan wants k = {}; refusing to resume a different plan",
                        spec.index, ck.config.vocab, spec.k
                    )));
                }
                artifacts.push(IterationArtifacts {
                    index: spec.index,
                    codebook_dir: run.codebook_dir(spec.index),
                    final_checkpoint: dir,
                    log_csv: run.log_csv(spec.index),
                });
                prev = Some((ck.params, ck.config));
                continue;
            }
            skipping = false;
        }
        let i = spec.index as u64;
        let extracted;
        let teacher = match spec.supervision {
            FeatureKind::Mfcc => &mfcc,
            FeatureKind::LayerEmbedding(l) => {
                let (params, enc) = prev.as_ref().expect("validate: layer teacher has a predecessor");
                extracted = extract_embeddings(params, enc, &mfcc, l)?;
                &extracted
            }
        };
        let codebook = fit_codebook(
            spec.k,
            teacher,
            spec.supervision,
            &cfg.cluster,
            derive_seed(seed, "cluster", i),
        )?;
        let codebook_dir = run.codebook_dir(spec.index);
        codebook.save(&codebook_dir)?;
        let labels = assign_corpus(&codebook, teacher)?;

        let encoder = EncoderConfig { vocab: spec.k, ..cfg.encoder.clone() };
        let init = if spec.warm_start {
            let (params, prev_enc) = prev.as_ref().expect("validate: no warm start at iteration 1");
            if *prev_enc != encoder {
                return Err(Error::config(format!(
                    "iteration {} warm start requires a matching cluster count (k {} follows k {})",
                    spec.index, spec.k, prev_enc.vocab
                )));
            }
            params.clone()
        } else {
            init_params(&encoder, derive_seed(seed, "init", i))?
        };
        let train = TrainConfig {
            total_steps: spec.steps,
            seed: derive_seed(seed, "train", i),
            ..cfg.train.clone()
        };
        let checkpoint_root = run.checkpoint_root(spec.index);
        let log_csv = run.log_csv(spec.index);
        let sinks = TrainSinks {
            iteration: spec.index,
            checkpoint_root: Some(&checkpoint_root),
            log_csv: Some(&log_csv),
        };
        match pretrain_iteration(init, &encoder, &mfcc, &labels, &train, &sinks) {
            Ok(out) => {
                let last = out.log.checkpoints.last().expect("final step always checkpoints");
                artifacts.push(IterationArtifacts {
                    index: spec.index,
                    codebook_dir,
                    final_checkpoint: last.path.clone(),
                    log_csv,
                });
                prev = Some((out.params, encoder));
            }
            Err(Error::Divergence { iteration, step, running_mean, threshold }) => {
                let report = DivergenceReport { iteration, step, running_mean, threshold };
                write_atomic_str(
                    &run.report("divergence.json"),
                    &serde_json::to_string_pretty(&report)?,
                )?;
                return Ok(PlanOutcome {
                    artifacts,
                    divergence: Some(report),
                    final_params: prev.map(|(p, _)| p),
                });
            }
            Err(e) => return Err(e),
        }
    }

    Ok(PlanOutcome { artifacts, divergence: None, final_params: prev.map(|(p, _)| p) })
}
