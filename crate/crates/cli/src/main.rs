//! Command-line entry point.
//!
//! Verbs name the deepest pipeline stage to run (`gen-data`, `train`,
//! `attack`, `eval`, `robustness`) or a study (`suite`, `sweep`). Any
//! argument that is not one of the reserved flags below is treated as a
//! dotted-path config override, `--attack.iterations 750` and
//! `pair.target="rm -rf"` both work. Exit codes: 0 success, 2 bad
//! configuration or usage, 3 run failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use anydoor_cli::config::{collect_overrides, resolve_config};
use anydoor_cli::experiment::{run_experiment, Stage};
use anydoor_cli::pools::TriggerTargetPool;
use anydoor_cli::suite::random_pairing_suite;
use anydoor_cli::sweep::{budget_sweep, ensemble_sweep, ENSEMBLE_SIZES};
use anydoor_cli::{CliError, CliResult};

const OVERRIDES_HELP: &str = "Config overrides:\n  Any other argument is a dotted-path \
override into the JSON config, e.g.\n  `--attack.iterations 750`, `--perturbation \
'{\"strategy\":\"corner\",\"patch_width\":12}'`,\n  or `pair.trigger.trigger=TTBA`. \
Values parse as JSON first, then as strings.";

#[derive(Parser)]
#[command(name = "anydoor", version, about = "Universal-perturbation laboratory", after_help = OVERRIDES_HELP)]
struct Cli {
    /// JSON configuration file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the fully resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the dataset and record its content hash in the manifest.
    GenData,
    /// Generate data, then train and checkpoint the model.
    Train,
    /// Train, then optimize the universal perturbation.
    Attack,
    /// Attack, then score the held-out evaluation split.
    Eval,
    /// Full pipeline including corruption and drifting-frame analyses.
    Robustness,
    /// Random trigger–target pairing study over a pool.
    Suite {
        /// How many pairs to draw (without replacement per side).
        #[arg(long, default_value_t = 5)]
        pairs: usize,
        /// Seed for the pair draw.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pool JSON file; the built-in pool is used when omitted.
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Scaling study: ensemble size or perturbation budget.
    Sweep {
        #[arg(long, value_enum, default_value_t = SweepKind::Ensemble)]
        kind: SweepKind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Ensemble,
    Budget,
}

/// Reserved flags that belong to the CLI grammar itself; everything else
/// is a config override. Flags listed with `true` take a value token.
const RESERVED: [(&str, bool); 9] = [
    ("--config", true),
    ("--pairs", true),
    ("--seed", true),
    ("--pool", true),
    ("--kind", true),
    ("--dry-run", false),
    ("--help", false),
    ("-h", false),
    ("--version", false),
];

/// Splits argv into the tokens clap should parse and the raw override
/// stream. The first bare token is the verb; reserved flags (and their
/// values) stay with clap wherever they appear.
fn split_overrides(argv: &[String]) -> (Vec<String>, Vec<String>) {
    let mut clap_tokens = Vec::new();
    let mut overrides = Vec::new();
    let mut i = 0;
    let mut verb_seen = false;
    while i < argv.len() {
        let tok = &argv[i];
        if i == 0 {
            clap_tokens.push(tok.clone());
            i += 1;
            continue;
        }
        if let Some(&(_, takes_value)) = RESERVED
            .iter()
            .find(|(name, _)| tok == name || tok.starts_with(&format!("{name}=")))
        {
            clap_tokens.push(tok.clone());
            if takes_value && !tok.contains('=') && i + 1 < argv.len() {
                clap_tokens.push(argv[i + 1].clone());
                i += 1;
            }
        } else if tok == "-V" {
            clap_tokens.push(tok.clone());
        } else if !tok.starts_with('-') && !verb_seen && !tok.contains('=') {
            verb_seen = true;
            clap_tokens.push(tok.clone());
        } else if tok.contains('=') {
            overrides.push(tok.clone());
        } else {
            overrides.push(tok.clone());
            if i + 1 < argv.len() {
                overrides.push(argv[i + 1].clone());
                i += 1;
            }
        }
        i += 1;
    }
    (clap_tokens, overrides)
}

fn run(cli: Cli, override_tokens: &[String]) -> CliResult<()> {
    let overrides = collect_overrides(override_tokens)?;
    let cfg = resolve_config(cli.config.as_deref(), &overrides)?;
    if cli.dry_run {
        let pretty = serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
        println!("{pretty}");
        return Ok(());
    }
    match cli.cmd {
        Cmd::GenData => {
            run_experiment(cfg, Stage::GenData)?;
        }
        Cmd::Train => {
            run_experiment(cfg, Stage::Train)?;
        }
        Cmd::Attack => {
            run_experiment(cfg, Stage::Attack)?;
        }
        Cmd::Eval => {
            run_experiment(cfg, Stage::Eval)?;
        }
        Cmd::Robustness => {
            run_experiment(cfg, Stage::Robustness)?;
        }
        Cmd::Suite { pairs, seed, pool } => {
            let pool = match pool {
                Some(p) => TriggerTargetPool::from_path(&p)?,
                None => TriggerTargetPool::builtin(),
            };
            let outcomes = random_pairing_suite(&cfg, &pool, pairs, seed)?;
            let mean_em = outcomes
                .iter()
                .map(|o| o.report.with_trigger.exact_match)
                .sum::<f64>()
                / outcomes.len() as f64;
            println!("[suite] {} pairs, mean exact-match {mean_em:.3}", outcomes.len());
        }
        Cmd::Sweep { kind } => match kind {
            SweepKind::Ensemble => {
                let rows = ensemble_sweep(&cfg, &ENSEMBLE_SIZES)?;
                println!("[sweep] {} ensemble sizes finished", rows.len());
            }
            SweepKind::Budget => {
                let rows = budget_sweep(&cfg)?;
                println!("[sweep] {} budget points finished", rows.len());
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let (clap_tokens, override_tokens) = split_overrides(&argv);
    let cli = Cli::parse_from(&clap_tokens);
    match run(cli, &override_tokens) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
