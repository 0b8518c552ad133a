//! Experiment config: one JSON file resolving every knob of a run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use hubert_lab::analysis::{ProbeConfig, ReportConfig};
use hubert_lab::clustering::ClusterConfig;
use hubert_lab::corpus::{
    generate_corpus, load_corpus, CorpusConfig, Lexicon, PhoneInventory, Utterance,
};
use hubert_lab::encoder::EncoderConfig;
use hubert_lab::error::{Error, Result};
use hubert_lab::features::MfccConfig;
use hubert_lab::probe_asr::FinetuneConfig;
use hubert_lab::rng::derive_seed;
use hubert_lab::scheduler::{
    default_layer_max, plan_original, plan_progressive, plan_progressive_cluster, plan_uniform,
    IterationPlan, PlanContext, StageConfigs, Strategy,
};
use hubert_lab::training::TrainConfig;

/// Everything one experiment needs, in one file. Unknown keys are
/// rejected at every nesting level so a typo cannot silently fall back
/// to a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Run directory root; `--out` overrides.
    pub out: PathBuf,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub features: MfccConfig,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub plan: PlanSection,
    #[serde(default)]
    pub analysis: ReportConfig,
    #[serde(default)]
    pub probe: ProbeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub n_utterances: usize,
    /// Phone inventory size P.
    pub phones: usize,
    /// Lexicon size V.
    pub words: usize,
    #[serde(default)]
    pub synth: CorpusConfig,
    /// Load this manifest instead of synthesizing. The inventory and
    /// lexicon are still derived from the seed, so analysis references
    /// line up only with corpora saved from the same config.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

/// Plan strategy plus its knobs. Optional fields default per strategy;
/// irrelevant ones (e.g. `split` outside `original`) are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub strategy: Strategy,
    pub budget: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(default)]
    pub min_steps: Option<usize>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub k_start: Option<usize>,
    #[serde(default)]
    pub k_end: Option<usize>,
    /// `original` only: first iteration's budget share in (0, 0.5).
    #[serde(default)]
    pub split: Option<f64>,
    #[serde(default)]
    pub layer_max: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub classifier: ProbeConfig,
    pub finetune: FinetuneConfig,
    /// Finetune split sizes, drawn fresh from the run seed so they never
    /// overlap the pretraining corpus.
    pub train_utterances: usize,
    pub test_utterances: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            classifier: ProbeConfig::default(),
            finetune: FinetuneConfig::default(),
            train_utterances: 16,
            test_utterances: 8,
        }
    }
}

impl PlanSection {
    fn reject(&self, field: &str, set: bool) -> Result<()> {
        if set {
            return Err(Error::config(format!(
                "plan: `{field}` does not apply to strategy `{}`",
                strategy_name(self.strategy)
            )));
        }
        Ok(())
    }

    /// Resolve into a concrete plan against a model of `model_layers`.
    pub fn build(&self, model_layers: usize) -> Result<IterationPlan> {
        let ctx = PlanContext {
            min_steps: self.min_steps.unwrap_or(PlanContext::default().min_steps),
            model_layers,
        };
        let layer_max = self.layer_max.unwrap_or_else(|| default_layer_max(model_layers));
        match self.strategy {
            Strategy::Original => {
                self.reject("k", self.k.is_some())?;
                self.reject("layer_max", self.layer_max.is_some())?;
                if self.n != 2 {
                    return Err(Error::config(format!(
                        "plan: strategy `original` is the two-iteration baseline, got N = {}",
                        self.n
                    )));
                }
                plan_original(
                    self.budget,
                    self.k_start.unwrap_or(100),
                    self.k_end.unwrap_or(500),
                    self.split.unwrap_or(0.4),
                    &ctx,
                )
            }
            Strategy::Uniform | Strategy::Progressive => {
                self.reject("k_start", self.k_start.is_some())?;
                self.reject("k_end", self.k_end.is_some())?;
                self.reject("split", self.split.is_some())?;
                let k = self.k.unwrap_or(100);
                if self.strategy == Strategy::Uniform {
                    plan_uniform(self.budget, self.n, k, layer_max, &ctx)
                } else {
                    plan_progressive(self.budget, self.n, k, layer_max, &ctx)
                }
            }
            Strategy::ProgressiveCluster => {
                self.reject("k", self.k.is_some())?;
                self.reject("split", self.split.is_some())?;
                let k_start = self.k_start.unwrap_or(100);
                let k_end = self.k_end.unwrap_or(if self.n == 1 { k_start } else { 500 });
                plan_progressive_cluster(self.budget, self.n, k_start, k_end, layer_max, &ctx)
            }
        }
    }
}

pub fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Original => "original",
        Strategy::Uniform => "uniform",
        Strategy::Progressive => "progressive",
        Strategy::ProgressiveCluster => "progressive_cluster",
    }
}

/// A corpus plus the generating inventory and lexicon (analysis
/// references need both).
pub struct Materialized {
    pub inventory: PhoneInventory,
    pub lexicon: Lexicon,
    pub utterances: Vec<Utterance>,
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    /// Check every section before any compute, plan construction included.
    pub fn validate(&self) -> Result<()> {
        if self.corpus.n_utterances == 0 {
            return Err(Error::config("corpus needs at least one utterance"));
        }
        if self.corpus.phones == 0 || self.corpus.words == 0 {
            return Err(Error::config("corpus needs a nonempty inventory and lexicon"));
        }
        self.corpus.synth.validate()?;
        self.features.validate()?;
        self.encoder.validate()?;
        self.cluster.validate()?;
        self.train.validate()?;
        self.analysis.validate()?;
        self.probe.classifier.validate()?;
        self.probe.finetune.validate()?;
        if self.probe.train_utterances == 0 || self.probe.test_utterances == 0 {
            return Err(Error::config("probe needs nonempty finetune splits"));
        }
        self.plan.build(self.encoder.layers)?;
        Ok(())
    }

    /// Inventory, lexicon, and utterances for this config. The corpus is
    /// loaded from `corpus.manifest` when set, synthesized otherwise.
    pub fn materialize(&self) -> Result<Materialized> {
        let inventory =
            PhoneInventory::random(self.corpus.phones, derive_seed(self.seed, "inventory", 0))?;
        let lexicon =
            Lexicon::random(self.corpus.words, &inventory, derive_seed(self.seed, "lexicon", 0))?;
        let utterances = match &self.corpus.manifest {
            Some(path) => load_corpus(path)?,
            None => generate_corpus(
                derive_seed(self.seed, "corpus", 0),
                self.corpus.n_utterances,
                &inventory,
                &lexicon,
                &self.corpus.synth,
            )?,
        };
        Ok(Materialized { inventory, lexicon, utterances })
    }

    /// Disjoint-by-construction finetune corpora: fresh utterances from
    /// seeds the pretraining corpus never touches.
    pub fn finetune_split(&self, m: &Materialized) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
        let train = generate_corpus(
            derive_seed(self.seed, "finetune-train", 0),
            self.probe.train_utterances,
            &m.inventory,
            &m.lexicon,
            &self.corpus.synth,
        )?;
        let test = generate_corpus(
            derive_seed(self.seed, "finetune-test", 0),
            self.probe.test_utterances,
            &m.inventory,
            &m.lexicon,
            &self.corpus.synth,
        )?;
        Ok((train, test))
    }

    pub fn stage_configs(&self) -> StageConfigs {
        StageConfigs {
            mfcc: self.features.clone(),
            cluster: self.cluster.clone(),
            encoder: self.encoder.clone(),
            train: self.train.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> serde_json::Value {
        serde_json::json!({
            "seed": 7,
            "out": "/tmp/run",
            "corpus": { "n_utterances": 12, "phones": 6, "words": 8 },
            "encoder": { "layers": 6, "dim": 8, "heads": 2, "ff_dim": 12, "vocab": 16 },
            "plan": { "strategy": "uniform", "budget": 40, "N": 2, "min_steps": 20, "k": 16 }
        })
    }

    #[test]
    fn minimal_config_validates() {
        let cfg: ExperimentConfig = serde_json::from_value(minimal_json()).unwrap();
        cfg.validate().unwrap();
        let plan = cfg.plan.build(cfg.encoder.layers).unwrap();
        assert_eq!(plan.specs.len(), 2);
        assert_eq!(plan.specs.iter().map(|s| s.steps).sum::<usize>(), 40);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for path in [
            "/typo",
            "/corpus/typo",
            "/encoder/typo",
            "/plan/typo",
            "/probe/typo",
        ] {
            let mut v = minimal_json();
            if path == "/probe/typo" {
                v["probe"] = serde_json::json!({ "typo": 1 });
            } else {
                v.pointer_mut(path.rsplit_once('/').unwrap().0)
                    .unwrap()
                    .as_object_mut()
                    .unwrap()
                    .insert("typo".into(), 1.into());
            }
            assert!(
                serde_json::from_value::<ExperimentConfig>(v).is_err(),
                "unknown key at {path} was accepted"
            );
        }
    }

    #[test]
    fn strategy_specific_knobs_are_fenced() {
        let mut v = minimal_json();
        v["plan"]["split"] = serde_json::json!(0.3);
        let cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
        let err = cfg.plan.build(6).unwrap_err().to_string();
        assert!(err.contains("`split` does not apply"), "{err}");

        let mut v = minimal_json();
        v["plan"]["strategy"] = "original".into();
        v["plan"]["k"] = serde_json::Value::Null;
        v["plan"]["budget"] = 100.into();
        let cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
        let plan = cfg.plan.build(6).unwrap();
        assert_eq!(plan.specs[0].k, 100);
        assert_eq!(plan.specs[1].k, 500);
    }

    #[test]
    fn materialize_is_a_pure_function_of_the_config() {
        let cfg: ExperimentConfig = serde_json::from_value(minimal_json()).unwrap();
        let a = cfg.materialize().unwrap();
        let b = cfg.materialize().unwrap();
        assert_eq!(a.utterances.len(), 12);
        assert_eq!(a.lexicon.words, b.lexicon.words);
        assert!(a
            .utterances
            .iter()
            .zip(&b.utterances)
            .all(|(x, y)| x.samples == y.samples && x.word_spans == y.word_spans));
    }

    #[test]
    fn finetune_split_disjoint_from_training_corpus() {
        let cfg: ExperimentConfig = serde_json::from_value(minimal_json()).unwrap();
        let m = cfg.materialize().unwrap();
        let (train, test) = cfg.finetune_split(&m).unwrap();
        assert_eq!(train.len(), 16);
        assert_eq!(test.len(), 8);
        // ids repeat across corpora (utt0000, ...) but the waveforms must not
        let seen: Vec<&[f64]> = m.utterances.iter().map(|u| u.samples.as_slice()).collect();
        assert!(train
            .iter()
            .chain(&test)
            .all(|u| seen.iter().all(|s| *s != u.samples.as_slice())));
    }
}
