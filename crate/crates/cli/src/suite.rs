//! Multi-pair study: optimize and evaluate one perturbation per randomly
//! drawn trigger–target pair.
//!
//! Pairs are drawn without replacement by shuffling both pool sides with
//! the suite stream and zipping the prefixes. The model is trained once
//! and shared; each pair then runs the full attack-plus-evaluation
//! protocol in its own subdirectory, in parallel. The summary CSV ends
//! with an arithmetic-mean row across pairs.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use anydoor_core::attack::{cache_references, run_attack, Placement, TriggerSpec, TriggerTargetPair};
use anydoor_core::eval::{evaluate, EvalReport};
use anydoor_core::rng::{shuffled_indices, stream_rng, streams};

use crate::config::ExperimentConfig;
use crate::experiment::{Pipeline, Stage};
use crate::pools::TriggerTargetPool;
use crate::{CliError, CliResult};

/// One pair's result.
#[derive(Clone, Debug)]
pub struct PairOutcome {
    pub index: usize,
    pub trigger: String,
    pub target: String,
    pub report: EvalReport,
}

/// Draws `k_pairs` trigger–target pairs from `pool` (without replacement
/// on each side, shuffled by `seed`'s suite stream), runs attack and
/// evaluation per pair on a single shared model, writes per-pair
/// artifacts and `suite.csv` under the config's output directory, and
/// returns the outcomes in pair order.
pub fn random_pairing_suite(
    cfg: &ExperimentConfig,
    pool: &TriggerTargetPool,
    k_pairs: usize,
    seed: u64,
) -> CliResult<Vec<PairOutcome>> {
    pool.validate()?;
    if k_pairs == 0 {
        return Err(CliError::Config("suite needs at least one pair".into()));
    }
    if k_pairs > pool.triggers.len() || k_pairs > pool.targets.len() {
        return Err(CliError::Config(format!(
            "k_pairs {k_pairs} exceeds pool sides ({} triggers, {} targets)",
            pool.triggers.len(),
            pool.targets.len()
        )));
    }

    let mut rng = stream_rng(seed, streams::SUITE);
    let trig_order = shuffled_indices(&mut rng, pool.triggers.len());
    let targ_order = shuffled_indices(&mut rng, pool.targets.len());
    let pairs: Vec<TriggerTargetPair> = (0..k_pairs)
        .map(|i| TriggerTargetPair {
            trigger: TriggerSpec::new(pool.triggers[trig_order[i]].clone(), Placement::Prefix),
            target: pool.targets[targ_order[i]].clone(),
        })
        .collect();

    // Shared preparation: dataset and trained model.
    let mut pipe = Pipeline::new(cfg.clone())?;
    pipe.run(Stage::Train)?;
    let model = pipe.model().expect("train stage populates the model");
    let refs_eval = cache_references(model, pipe.eval_slice())
        .map_err(CliError::run("suite"))?;
    let base = Path::new(&cfg.output_dir);

    let outcomes: Vec<PairOutcome> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| -> CliResult<PairOutcome> {
            let dir = base.join(format!("pairs/pair_{i:02}"));
            fs::create_dir_all(&dir)
                .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
            let (pert, log) = run_attack(
                model,
                pipe.ensemble_slice(),
                pair,
                cfg.perturbation,
                &cfg.attack,
            )
            .map_err(CliError::run("suite-attack"))?;
            pert.save(&dir.join("pert.anydoor")).map_err(CliError::run("suite-attack"))?;
            log.write_csv(&dir.join("attack_log.csv")).map_err(CliError::run("suite-attack"))?;

            let mut eval_rng = stream_rng(cfg.seeds.eval, streams::TRIGGER_PLACEMENT);
            let report = evaluate(
                model,
                &pert,
                pipe.ensemble_slice(),
                pipe.eval_slice(),
                pair,
                &refs_eval,
                &format!("{}/pair{i}", pipe.fingerprint),
                &mut eval_rng,
            )
            .map_err(CliError::run("suite-eval"))?;
            fs::write(dir.join("eval.json"), report.to_json().map_err(CliError::run("suite-eval"))?)
                .map_err(|e| CliError::Config(format!("cannot write eval.json: {e}")))?;
            Ok(PairOutcome {
                index: i,
                trigger: pair.trigger.trigger.clone(),
                target: pair.target.clone(),
                report,
            })
        })
        .collect::<CliResult<_>>()?;

    fs::write(base.join("suite.csv"), suite_csv(&outcomes))
        .map_err(|e| CliError::Config(format!("cannot write suite.csv: {e}")))?;
    Ok(outcomes)
}

/// Quotes one CSV cell if it holds a comma, quote, or newline.
pub fn csv_quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Per-pair rows plus an arithmetic-mean row.
pub fn suite_csv(outcomes: &[PairOutcome]) -> String {
    let mut out = String::from("pair,trigger,target,exact_match,contain,bleu4,rouge_l\n");
    for o in outcomes {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            o.index,
            csv_quote(&o.trigger),
            csv_quote(&o.target),
            o.report.with_trigger.exact_match,
            o.report.with_trigger.contain,
            o.report.without_trigger.bleu4,
            o.report.without_trigger.rouge_l,
        ));
    }
    if !outcomes.is_empty() {
        let n = outcomes.len() as f64;
        let mean = |f: &dyn Fn(&PairOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n;
        out.push_str(&format!(
            "mean,,,{},{},{},{}\n",
            mean(&|o| o.report.with_trigger.exact_match),
            mean(&|o| o.report.with_trigger.contain),
            mean(&|o| o.report.without_trigger.bleu4),
            mean(&|o| o.report.without_trigger.rouge_l),
        ));
    }
    out
}
