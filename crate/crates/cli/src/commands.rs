//! The six subcommands. Each one is a function from resolved config to
//! files on disk, so the integration tests can drive them without a
//! subprocess when convenient.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hubert_lab::analysis::{layerwise_report, probe_report};
use hubert_lab::checkpoint::list_step_checkpoints;
use hubert_lab::corpus::save_corpus;
use hubert_lab::error::{Error, Result};
use hubert_lab::probe_asr::{error_rate_csv, finetune_and_score, ErrorRateReport};
use hubert_lab::rng::derive_seed;
use hubert_lab::runio::{write_atomic_str, RunDir, RunLock};
use hubert_lab::scheduler::{resume_plan, run_plan, IterationPlan, IterationSpec};

use crate::config::{strategy_name, ExperimentConfig};

/// Synthesize the corpus and save it as WAVs plus a manifest under
/// `<out>/corpus`. Prints the manifest path.
pub fn cmd_corpus(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let m = cfg.materialize()?;
    let manifest = save_corpus(&cfg.out.join("corpus"), &m.utterances)?;
    println!("{}", manifest.display());
    Ok(manifest)
}

/// Emit the resolved plan as JSON on stdout without running anything.
pub fn cmd_plan(section: &crate::config::PlanSection, model_layers: usize) -> Result<()> {
    let plan = section.build(model_layers)?;
    println!("{}", serde_json::to_string_pretty(&plan)?);
    Ok(())
}

/// Execute the plan end to end, then print the run directory. A
/// divergence halt still prints the directory (the partial run is
/// intact) but exits through the divergence error.
pub fn cmd_train(cfg: &ExperimentConfig, resume: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let run = RunDir::create(&cfg.out)?;
    let _lock = RunLock::acquire(&run.root)?;
    write_atomic_str(&run.config_json(), &serde_json::to_string_pretty(cfg)?)?;
    let m = cfg.materialize()?;
    let plan = cfg.plan.build(cfg.encoder.layers)?;
    let stages = cfg.stage_configs();
    let outcome = if resume {
        resume_plan(&plan, &m.utterances, &stages, &run, cfg.seed)?
    } else {
        run_plan(&plan, &m.utterances, &stages, &run, cfg.seed)?
    };
    println!("{}", run.root.display());
    if let Some(d) = outcome.divergence {
        return Err(Error::Divergence {
            iteration: d.iteration,
            step: d.step,
            running_mean: d.running_mean,
            threshold: d.threshold,
        });
    }
    Ok(run.root.clone())
}

/// The run's config snapshot, the plan it executed, and each iteration
/// that reached its final checkpoint.
struct OpenedRun {
    run: RunDir,
    cfg: ExperimentConfig,
    plan: IterationPlan,
    /// (spec, final checkpoint dir), plan order.
    finished: Vec<(IterationSpec, PathBuf)>,
}

fn open_run(root: &Path) -> Result<OpenedRun> {
    let run = RunDir::open(root)?;
    let cfg = ExperimentConfig::load(&run.config_json())?;
    let plan: IterationPlan = serde_json::from_str(&fs::read_to_string(run.plan_json())?)?;
    let mut finished = Vec::new();
    for spec in &plan.specs {
        let steps = list_step_checkpoints(&run.checkpoint_root(spec.index))?;
        if let Some((_, dir)) = steps.into_iter().find(|(s, _)| *s == spec.steps) {
            finished.push((spec.clone(), dir));
        }
    }
    if finished.is_empty() {
        return Err(Error::config(format!(
            "{} has no finished iterations to score (train first)",
            root.display()
        )));
    }
    Ok(OpenedRun { run, cfg, plan, finished })
}

/// Layerwise similarity scores for every finished iteration's final
/// checkpoint, combined into `reports/similarity.csv`.
pub fn cmd_analyze(root: &Path, override_cfg: Option<&ExperimentConfig>) -> Result<PathBuf> {
    let mut opened = open_run(root)?;
    let _lock = RunLock::acquire(&opened.run.root)?;
    if let Some(o) = override_cfg {
        opened.cfg.analysis = o.analysis.clone();
    }
    opened.cfg.analysis.validate()?;
    let m = opened.cfg.materialize()?;
    let mut combined = String::new();
    for (_, ck) in &opened.finished {
        let report = layerwise_report(
            ck,
            &m.utterances,
            &opened.cfg.features,
            &m.lexicon,
            opened.cfg.corpus.phones,
            &opened.cfg.analysis,
        )?;
        let csv = report.to_csv();
        if combined.is_empty() {
            combined.push_str(&csv);
        } else if let Some((_, rows)) = csv.split_once('\n') {
            combined.push_str(rows);
        }
    }
    let path = opened.run.report("similarity.csv");
    write_atomic_str(&path, &combined)?;
    println!("{}", path.display());
    Ok(path)
}

/// Per-iteration linear probes (`reports/probe_iterNN.csv`) and CTC
/// finetune scores over all final checkpoints (`reports/asr.csv`).
pub fn cmd_probe(root: &Path, override_cfg: Option<&ExperimentConfig>) -> Result<Vec<PathBuf>> {
    let mut opened = open_run(root)?;
    let _lock = RunLock::acquire(&opened.run.root)?;
    if let Some(o) = override_cfg {
        opened.cfg.probe = o.probe.clone();
    }
    opened.cfg.probe.classifier.validate()?;
    opened.cfg.probe.finetune.validate()?;
    let cfg = &opened.cfg;
    let m = cfg.materialize()?;
    let (ft_train, ft_test) = cfg.finetune_split(&m)?;
    let strategy = strategy_name(opened.plan.strategy);

    let mut written = Vec::new();
    let mut scores: Vec<ErrorRateReport> = Vec::new();
    for (spec, ck) in &opened.finished {
        let probes = probe_report(
            ck,
            &m.utterances,
            &cfg.features,
            &cfg.probe.classifier,
            derive_seed(cfg.seed, "probe", spec.index as u64),
        )?;
        let path = opened.run.report(&format!("probe_iter{:02}.csv", spec.index));
        probes.write_csv(&path)?;
        written.push(path);
        scores.push(finetune_and_score(
            ck,
            strategy,
            &ft_train,
            &ft_test,
            cfg.corpus.phones,
            &cfg.features,
            &cfg.probe.finetune,
            derive_seed(cfg.seed, "finetune", spec.index as u64),
        )?);
    }
    let asr = opened.run.report("asr.csv");
    write_atomic_str(&asr, &error_rate_csv(&scores))?;
    written.push(asr);
    for p in &written {
        println!("{}", p.display());
    }
    Ok(written)
}

struct SummaryRow {
    run: String,
    strategy: String,
    iteration: Option<usize>,
    step: usize,
    token_error_rate: String,
    best_word_layer: Option<(usize, f64)>,
}

/// Split a CSV line from the right into `n` fields, so a checkpoint path
/// in the first column may contain commas.
fn rsplit_fields(line: &str, n: usize) -> Option<Vec<&str>> {
    let mut fields: Vec<&str> = line.rsplitn(n, ',').collect();
    if fields.len() != n {
        return None;
    }
    fields.reverse();
    Some(fields)
}

/// Join `reports/asr.csv` (and `similarity.csv` when present) across runs
/// into `summary.csv` and a `summary.md` table under `out`.
pub fn cmd_compare(roots: &[PathBuf], out: &Path) -> Result<PathBuf> {
    let mut rows = Vec::new();
    for root in roots {
        let run = RunDir::open(root)?;
        let plan: IterationPlan = serde_json::from_str(&fs::read_to_string(run.plan_json())?)?;
        // final-checkpoint path -> iteration, for labeling asr rows
        let iter_of: HashMap<String, usize> = plan
            .specs
            .iter()
            .map(|s| {
                let path = run.checkpoint_root(s.index).join(format!("step{}", s.steps));
                (path.display().to_string(), s.index)
            })
            .collect();

        // best word_onehot layer per checkpoint, when analyze has run
        let mut best: HashMap<String, (usize, f64)> = HashMap::new();
        if let Ok(text) = fs::read_to_string(run.report("similarity.csv")) {
            for line in text.lines().skip(1) {
                let Some(f) = rsplit_fields(line, 6) else { continue };
                if f[4] != "word_onehot" {
                    continue;
                }
                let (Ok(layer), Ok(score)) = (f[3].parse::<usize>(), f[5].parse::<f64>()) else {
                    continue;
                };
                let e = best.entry(f[0].to_string()).or_insert((layer, score));
                if score > e.1 {
                    *e = (layer, score);
                }
            }
        }

        let asr = run.report("asr.csv");
        let text = fs::read_to_string(&asr).map_err(|_| {
            Error::config(format!("{} has no reports/asr.csv (run `probe` first)", root.display()))
        })?;
        for line in text.lines().skip(1) {
            let Some(f) = rsplit_fields(line, 7) else { continue };
            rows.push(SummaryRow {
                run: root.display().to_string(),
                strategy: f[2].to_string(),
                iteration: iter_of.get(f[0]).copied(),
                step: f[1].parse().unwrap_or(0),
                token_error_rate: f[3].to_string(),
                best_word_layer: best.get(f[0]).copied(),
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::config("no scored checkpoints found across the given runs"));
    }

    let mut csv = String::from(
        "run,strategy,iteration,step,token_error_rate,best_word_layer,best_word_score\n",
    );
    let mut md = String::from(
        "| run | strategy | iteration | step | token error rate | best word-CCA layer |\n\
         |---|---|---|---|---|---|\n",
    );
    for r in &rows {
        let iter = r.iteration.map(|i| i.to_string()).unwrap_or_default();
        let (layer, score) = match r.best_word_layer {
            Some((l, s)) => (l.to_string(), format!("{s:.6}")),
            None => (String::new(), String::new()),
        };
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.run, r.strategy, iter, r.step, r.token_error_rate, layer, score
        )
        .expect("write to String");
        let cca = match r.best_word_layer {
            Some((l, s)) => format!("{l} ({s:.3})"),
            None => "—".into(),
        };
        writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            r.run, r.strategy, iter, r.step, r.token_error_rate, cca
        )
        .expect("write to String");
    }

    fs::create_dir_all(out)?;
    let csv_path = out.join("summary.csv");
    write_atomic_str(&csv_path, &csv)?;
    write_atomic_str(&out.join("summary.md"), &md)?;
    print!("{md}");
    println!("{}", csv_path.display());
    Ok(csv_path)
}
