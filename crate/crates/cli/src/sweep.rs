//! Parameter sweeps over a single shared model.
//!
//! Two studies: how attack success scales with the ensemble size, and how
//! it scales with the perturbation budget per placement strategy. Both
//! train once, then run the attack-plus-evaluation protocol per member in
//! parallel, writing one summary CSV and per-member artifacts.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use anydoor_core::attack::{cache_references, run_attack};
use anydoor_core::eval::{evaluate, EvalReport};
use anydoor_core::perturb::PerturbationSpec;
use anydoor_core::rng::{stream_rng, streams};

use crate::config::ExperimentConfig;
use crate::experiment::{Pipeline, Stage};
use crate::{CliError, CliResult};

/// Ensemble sizes studied by default.
pub const ENSEMBLE_SIZES: [usize; 5] = [40, 80, 120, 160, 200];

/// Budget grid per strategy, scaled to the 64-pixel canvas: border widths
/// in pixels, corner patch widths in pixels, and pixel-strategy ε in
/// 1/255 units.
pub const BORDER_WIDTHS: [usize; 5] = [6, 7, 8, 9, 10];
pub const CORNER_WIDTHS: [usize; 5] = [8, 12, 16, 20, 24];
pub const PIXEL_EPS_255: [f64; 5] = [16.0, 24.0, 32.0, 40.0, 48.0];

/// One sweep member's result: a label column, a numeric budget or size,
/// and the evaluation report.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub strategy: String,
    pub value: f64,
    pub report: EvalReport,
}

fn write_dir_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Config(format!("cannot write under {}: {e}", path.display()))
}

/// Attack-success scaling with ensemble size. The dataset is laid out for
/// the largest size, so every member shares the identical evaluation
/// split and smaller members use a prefix of the same ensemble region.
pub fn ensemble_sweep(cfg: &ExperimentConfig, sizes: &[usize]) -> CliResult<Vec<SweepRow>> {
    if sizes.is_empty() {
        return Err(CliError::Config("ensemble sweep needs at least one size".into()));
    }
    for &k in sizes {
        if k < cfg.attack.batch_size {
            return Err(CliError::Config(format!(
                "ensemble size {k} is smaller than batch_size {}",
                cfg.attack.batch_size
            )));
        }
    }
    let k_max = *sizes.iter().max().expect("nonempty");
    let mut shared = cfg.clone();
    shared.attack.ensemble_size = k_max;

    let mut pipe = Pipeline::new(shared.clone())?;
    pipe.run(Stage::Train)?;
    let model = pipe.model().expect("train stage populates the model");
    let refs_eval = cache_references(model, pipe.eval_slice()).map_err(CliError::run("sweep"))?;
    let base = Path::new(&cfg.output_dir);

    let rows: Vec<SweepRow> = sizes
        .par_iter()
        .map(|&k| -> CliResult<SweepRow> {
            let dir = base.join(format!("sweep_ensemble/k{k:03}"));
            fs::create_dir_all(&dir).map_err(write_dir_err(&dir))?;
            let mut attack_cfg = cfg.attack;
            attack_cfg.ensemble_size = k;
            let (pert, _log) = run_attack(
                model,
                &pipe.ensemble_slice()[..k],
                &cfg.pair,
                cfg.perturbation,
                &attack_cfg,
            )
            .map_err(CliError::run("sweep-attack"))?;
            let mut rng = stream_rng(cfg.seeds.eval, streams::TRIGGER_PLACEMENT);
            let report = evaluate(
                model,
                &pert,
                &pipe.ensemble_slice()[..k],
                pipe.eval_slice(),
                &cfg.pair,
                &refs_eval,
                &format!("{}/k{k}", pipe.fingerprint),
                &mut rng,
            )
            .map_err(CliError::run("sweep-eval"))?;
            fs::write(
                dir.join("eval.json"),
                report.to_json().map_err(CliError::run("sweep-eval"))?,
            )
            .map_err(write_dir_err(&dir))?;
            Ok(SweepRow {
                strategy: "ensemble".into(),
                value: k as f64,
                report,
            })
        })
        .collect::<CliResult<_>>()?;

    fs::write(base.join("ensemble_sweep.csv"), ensemble_csv(&rows)).map_err(write_dir_err(base))?;
    Ok(rows)
}

/// The default budget grid: five budgets per placement strategy.
pub fn budget_grid() -> Vec<(PerturbationSpec, f64)> {
    let mut grid = Vec::new();
    for b in BORDER_WIDTHS {
        grid.push((PerturbationSpec::Border { border_width: b }, b as f64));
    }
    for p in CORNER_WIDTHS {
        grid.push((PerturbationSpec::Corner { patch_width: p }, p as f64));
    }
    for e in PIXEL_EPS_255 {
        grid.push((PerturbationSpec::Pixel { epsilon: e / 255.0 }, e));
    }
    grid
}

/// Attack-success scaling with the perturbation budget, one attack per
/// grid point, all sharing the model and splits of the base config.
pub fn budget_sweep(cfg: &ExperimentConfig) -> CliResult<Vec<SweepRow>> {
    let grid = budget_grid();
    for (spec, _) in &grid {
        spec.validate(cfg.model.image_hw, cfg.model.image_hw)
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let mut pipe = Pipeline::new(cfg.clone())?;
    pipe.run(Stage::Train)?;
    let model = pipe.model().expect("train stage populates the model");
    let refs_eval = cache_references(model, pipe.eval_slice()).map_err(CliError::run("sweep"))?;
    let base = Path::new(&cfg.output_dir);

    let rows: Vec<SweepRow> = grid
        .par_iter()
        .map(|&(spec, value)| -> CliResult<SweepRow> {
            let label = spec.strategy_name();
            let dir = base.join(format!("sweep_budget/{label}_{value}"));
            fs::create_dir_all(&dir).map_err(write_dir_err(&dir))?;
            let (pert, _log) = run_attack(model, pipe.ensemble_slice(), &cfg.pair, spec, &cfg.attack)
                .map_err(CliError::run("sweep-attack"))?;
            let mut rng = stream_rng(cfg.seeds.eval, streams::TRIGGER_PLACEMENT);
            let report = evaluate(
                model,
                &pert,
                pipe.ensemble_slice(),
                pipe.eval_slice(),
                &cfg.pair,
                &refs_eval,
                &format!("{}/{label}={value}", pipe.fingerprint),
                &mut rng,
            )
            .map_err(CliError::run("sweep-eval"))?;
            fs::write(
                dir.join("eval.json"),
                report.to_json().map_err(CliError::run("sweep-eval"))?,
            )
            .map_err(write_dir_err(&dir))?;
            Ok(SweepRow {
                strategy: label.to_string(),
                value,
                report,
            })
        })
        .collect::<CliResult<_>>()?;

    fs::write(base.join("budget_sweep.csv"), budget_csv(&rows)).map_err(write_dir_err(base))?;
    Ok(rows)
}

/// Summary CSV for the ensemble study.
pub fn ensemble_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("ensemble_size,exact_match,contain,bleu4,rouge_l\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.value,
            r.report.with_trigger.exact_match,
            r.report.with_trigger.contain,
            r.report.without_trigger.bleu4,
            r.report.without_trigger.rouge_l,
        ));
    }
    out
}

/// Summary CSV for the budget study. The budget column is the strategy's
/// natural unit: border/corner width in pixels, pixel ε in 1/255 units.
pub fn budget_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("strategy,budget,exact_match,bleu4\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.strategy, r.value, r.report.with_trigger.exact_match, r.report.without_trigger.bleu4,
        ));
    }
    out
}
