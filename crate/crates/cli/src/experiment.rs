//! The staged experiment pipeline.
//!
//! Stages run in a fixed order — dataset, training, optimization,
//! evaluation, robustness — and requesting a stage always recomputes
//! everything before it from the configured seeds. There is no resume
//! logic: determinism makes recomputation exact, and it keeps a run's
//! artifacts free of hidden state. The manifest is written last and
//! hashes every artifact, so two runs of the same configuration can be
//! compared byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use anydoor_core::attack::{cache_references, run_attack, AttackLog};
use anydoor_core::eval::evaluate;
use anydoor_core::model::dataset::{gen_shapes_dataset, VqaSample};
use anydoor_core::model::{greedy_exact_match_rate, train_toy, ToyMllm};
use anydoor_core::perturb::UniversalPerturbation;
use anydoor_core::ppm::save_ppm;
use anydoor_core::rng::{stream_rng, streams};
use anydoor_core::robustness::{
    eval_frames, frame_exact_match_rate, frames_jsonl, gen_frame_sequence, write_corruption_csv,
};
use anydoor_core::Real;

use crate::config::{hex, ExperimentConfig};
use crate::{CliError, CliResult};

/// How many bytes a decode may grow to during scoring and previews.
const DECODE_CAP: usize = 48;

/// Pipeline stages in execution order. Running one runs all before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    Train,
    Attack,
    Eval,
    Robustness,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::Attack => "attack",
            Stage::Eval => "eval",
            Stage::Robustness => "robustness",
        }
    }
}

/// The record a run leaves behind: configuration identity, what stage it
/// reached, content hashes of every artifact, and the deterministic
/// summary statistics. Deliberately no timestamps or host details — equal
/// configurations must produce byte-identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub fingerprint: String,
    pub stage: String,
    pub config: ExperimentConfig,
    /// Relative artifact path (or pseudo-entry like `dataset`) → hex SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// Deterministic scalar results keyed by name.
    pub stats: BTreeMap<String, f64>,
    /// Stage names that started but did not finish (empty on success).
    pub incomplete: Vec<String>,
}

impl Manifest {
    pub fn to_json(&self) -> CliResult<String> {
        serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Everything the pipeline holds in memory while running. Exposed so
/// integration tests can drive stages and inspect intermediate state.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub fingerprint: String,
    out_dir: PathBuf,
    samples: Vec<VqaSample<Real>>,
    model: Option<ToyMllm<Real>>,
    pert: Option<UniversalPerturbation<Real>>,
    log: Option<AttackLog>,
    preview_files: Vec<String>,
    outputs: BTreeMap<String, String>,
    stats: BTreeMap<String, f64>,
}

fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> CliResult<Self> {
        cfg.validate()?;
        let fingerprint = cfg.fingerprint()?;
        let out_dir = PathBuf::from(&cfg.output_dir);
        Ok(Pipeline {
            fingerprint,
            out_dir,
            cfg,
            samples: Vec::new(),
            model: None,
            pert: None,
            log: None,
            preview_files: Vec::new(),
            outputs: BTreeMap::new(),
            stats: BTreeMap::new(),
        })
    }

    /// Training split: the first `n_train` generated samples.
    pub fn train_slice(&self) -> &[VqaSample<Real>] {
        &self.samples[..self.cfg.data.n_train]
    }

    /// Attack ensemble: the `ensemble_size` samples after the training
    /// split. Disjoint from both other splits by construction.
    pub fn ensemble_slice(&self) -> &[VqaSample<Real>] {
        let a = self.cfg.data.n_train;
        &self.samples[a..a + self.cfg.attack.ensemble_size]
    }

    /// Held-out evaluation split: the `n_eval` samples after the ensemble.
    pub fn eval_slice(&self) -> &[VqaSample<Real>] {
        let a = self.cfg.data.n_train + self.cfg.attack.ensemble_size;
        &self.samples[a..a + self.cfg.data.n_eval]
    }

    /// Registers a file just written: hash it into the manifest outputs.
    fn record(&mut self, rel: &str) -> CliResult<()> {
        let full = self.out_dir.join(rel);
        let digest = sha256_file(&full).map_err(|e| {
            CliError::Config(format!("cannot hash artifact {}: {e}", full.display()))
        })?;
        self.outputs.insert(rel.to_string(), digest);
        Ok(())
    }

    fn stage_gen_data(&mut self) -> anydoor_core::Result<()> {
        let t0 = Instant::now();
        let n = self.cfg.n_total();
        self.samples = gen_shapes_dataset(n, self.cfg.seeds.data, self.cfg.model.image_hw)?;

        // Content hash over ids, text, and raw pixel bits, in order. The
        // dataset never hits the disk, but the manifest still pins it.
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.id.to_le_bytes());
            h.update((s.question.len() as u64).to_le_bytes());
            h.update(&s.question);
            h.update((s.answer.len() as u64).to_le_bytes());
            h.update(&s.answer);
            for v in s.image.data() {
                h.update(v.to_le_bytes());
            }
        }
        self.outputs.insert("dataset".to_string(), hex(&h.finalize()));
        println!(
            "[gen-data] {n} samples at {0}×{0} in {1:.1}s",
            self.cfg.model.image_hw,
            t0.elapsed().as_secs_f64()
        );
        Ok(())
    }

    fn stage_train(&mut self) -> anydoor_core::Result<()> {
        let t0 = Instant::now();
        let mut model = ToyMllm::new(self.cfg.model.clone(), self.cfg.seeds.model)?;
        let log = train_toy(&mut model, self.train_slice(), &self.cfg.train, self.cfg.seeds.train)?;
        if let Some(last) = log.epoch_mean_loss.last() {
            self.stats.insert("train_final_loss".into(), *last);
        }
        let em = greedy_exact_match_rate(&model, self.eval_slice(), DECODE_CAP)?;
        self.stats.insert("clean_held_out_exact_match".into(), em);

        model.save(&self.out_dir.join("model.ckpt"))?;
        self.model = Some(model);
        println!(
            "[train] {} epochs, clean held-out exact-match {em:.3} in {:.1}s",
            self.cfg.train.epochs,
            t0.elapsed().as_secs_f64()
        );
        Ok(())
    }

    fn stage_attack(&mut self) -> anydoor_core::Result<()> {
        let t0 = Instant::now();
        let model = self.model.as_ref().expect("train ran first");
        let (pert, log) = run_attack(
            model,
            self.ensemble_slice(),
            &self.cfg.pair,
            self.cfg.perturbation,
            &self.cfg.attack,
        )?;
        pert.save(&self.out_dir.join("pert.anydoor"))?;
        log.write_csv(&self.out_dir.join("attack_log.csv"))?;
        if let Some(row) = log.rows.last() {
            self.stats.insert("attack_final_trigger_loss".into(), row.loss_trigger);
            self.stats.insert("attack_final_benign_loss".into(), row.loss_benign);
        }

        // Previews: the first few evaluation images with the perturbation
        // burned in, for eyeballing the budget.
        let n_prev = self.cfg.previews.min(self.eval_slice().len());
        if n_prev > 0 {
            fs::create_dir_all(self.out_dir.join("previews"))?;
        }
        let mut preview_paths = Vec::new();
        for s in &self.eval_slice()[..n_prev] {
            let adv = pert.apply(&s.image)?;
            let rel = format!("previews/adv_{:04}.ppm", s.id);
            save_ppm(&self.out_dir.join(&rel), &adv)?;
            preview_paths.push(rel);
        }
        self.pert = Some(pert);
        self.log = Some(log);
        self.preview_files = preview_paths;
        println!(
            "[attack] {} iterations on {} samples in {:.1}s",
            self.cfg.attack.iterations,
            self.cfg.attack.ensemble_size,
            t0.elapsed().as_secs_f64()
        );
        Ok(())
    }

    fn stage_eval(&mut self) -> anydoor_core::Result<()> {
        let t0 = Instant::now();
        let model = self.model.as_ref().expect("train ran first");
        let pert = self.pert.as_ref().expect("attack ran first");
        let refs = cache_references(model, self.eval_slice())?;
        let mut rng = stream_rng(self.cfg.seeds.eval, streams::TRIGGER_PLACEMENT);
        let report = evaluate(
            model,
            pert,
            self.ensemble_slice(),
            self.eval_slice(),
            &self.cfg.pair,
            &refs,
            &self.fingerprint,
            &mut rng,
        )?;
        fs::write(self.out_dir.join("eval.json"), report.to_json()?)?;
        report.write_csv(&self.out_dir.join("eval.csv"))?;
        self.stats.insert("eval_exact_match".into(), report.with_trigger.exact_match);
        self.stats.insert("eval_contain".into(), report.with_trigger.contain);
        self.stats.insert("eval_bleu4".into(), report.without_trigger.bleu4);
        self.stats.insert("eval_rouge_l".into(), report.without_trigger.rouge_l);
        if let Some(em) = report.without_trigger.exact_match {
            self.stats.insert("eval_benign_exact_match".into(), em);
        }
        println!(
            "[eval] exact-match {:.3}, contain {:.3}, bleu4 {:.3}, rouge-l {:.3} in {:.1}s",
            report.with_trigger.exact_match,
            report.with_trigger.contain,
            report.without_trigger.bleu4,
            report.without_trigger.rouge_l,
            t0.elapsed().as_secs_f64()
        );
        Ok(())
    }

    fn stage_robustness(&mut self) -> anydoor_core::Result<()> {
        let t0 = Instant::now();
        let model = self.model.as_ref().expect("train ran first");
        let pert = self.pert.as_ref().expect("attack ran first");

        if self.cfg.robustness.corruptions_enabled {
            let refs = cache_references(model, self.eval_slice())?;
            let outcomes = anydoor_core::robustness::eval_under_corruption(
                model,
                pert,
                self.ensemble_slice(),
                self.eval_slice(),
                &self.cfg.pair,
                &refs,
                &self.cfg.robustness.corruptions,
                &self.fingerprint,
                self.cfg.seeds.eval,
            )?;
            write_corruption_csv(&outcomes, &self.out_dir.join("corruption.csv"))?;
            for o in &outcomes {
                let key = match o.param {
                    Some(p) => format!("corruption_{}_{p}_exact_match", o.kind),
                    None => "corruption_baseline_exact_match".to_string(),
                };
                self.stats.insert(key, o.report.with_trigger.exact_match);
            }
        }

        if self.cfg.robustness.frames_enabled {
            let seq = gen_frame_sequence::<Real>(
                self.cfg.seeds.frames,
                self.cfg.robustness.n_frames,
                self.cfg.model.image_hw,
            )?;
            let mut rng = stream_rng(self.cfg.seeds.frames, streams::TRIGGER_PLACEMENT);
            let outcomes = eval_frames(model, pert, &seq, &self.cfg.pair, &mut rng)?;
            fs::write(self.out_dir.join("frames.jsonl"), frames_jsonl(&outcomes)?)?;
            self.stats
                .insert("frames_exact_match".into(), frame_exact_match_rate(&outcomes));
        }
        println!("[robustness] finished in {:.1}s", t0.elapsed().as_secs_f64());
        Ok(())
    }

    /// Runs every stage up to and including `upto`, then writes the
    /// manifest. On a stage failure the manifest is still written, with
    /// the failed stage listed in `incomplete`, before the error returns.
    pub fn run(&mut self, upto: Stage) -> CliResult<Manifest> {
        fs::create_dir_all(&self.out_dir)
            .map_err(|e| CliError::Config(format!("cannot create output dir: {e}")))?;

        let plan: &[(Stage, fn(&mut Pipeline) -> anydoor_core::Result<()>)] = &[
            (Stage::GenData, Pipeline::stage_gen_data),
            (Stage::Train, Pipeline::stage_train),
            (Stage::Attack, Pipeline::stage_attack),
            (Stage::Eval, Pipeline::stage_eval),
            (Stage::Robustness, Pipeline::stage_robustness),
        ];
        for (stage, step) in plan {
            if *stage > upto {
                break;
            }
            if let Err(source) = step(self) {
                let _ = self.write_manifest(upto, vec![stage.name().to_string()]);
                return Err(CliError::Run {
                    stage: stage.name(),
                    source,
                });
            }
            // Hash the artifacts this stage wrote.
            let produced: &[&str] = match stage {
                Stage::GenData => &[],
                Stage::Train => &["model.ckpt", "model.ckpt.manifest"],
                Stage::Attack => &["pert.anydoor", "attack_log.csv"],
                Stage::Eval => &["eval.json", "eval.csv"],
                Stage::Robustness => &[],
            };
            for rel in produced {
                self.record(rel)?;
            }
            if *stage == Stage::Attack {
                let previews = self.preview_files.clone();
                for rel in &previews {
                    self.record(rel)?;
                }
            }
            if *stage == Stage::Robustness {
                if self.cfg.robustness.corruptions_enabled {
                    self.record("corruption.csv")?;
                }
                if self.cfg.robustness.frames_enabled {
                    self.record("frames.jsonl")?;
                }
            }
        }
        self.write_manifest(upto, Vec::new())
    }

    fn write_manifest(&self, upto: Stage, incomplete: Vec<String>) -> CliResult<Manifest> {
        let manifest = Manifest {
            fingerprint: self.fingerprint.clone(),
            stage: upto.name().to_string(),
            config: self.cfg.clone(),
            outputs: self.outputs.clone(),
            stats: self.stats.clone(),
            incomplete,
        };
        fs::write(self.out_dir.join("manifest.json"), manifest.to_json()?)
            .map_err(|e| CliError::Config(format!("cannot write manifest: {e}")))?;
        Ok(manifest)
    }

    /// The trained model, once the train stage has run.
    pub fn model(&self) -> Option<&ToyMllm<Real>> {
        self.model.as_ref()
    }

    /// The optimized perturbation, once the attack stage has run.
    pub fn perturbation(&self) -> Option<&UniversalPerturbation<Real>> {
        self.pert.as_ref()
    }
}

/// One-call pipeline: build, run to `stage`, return the manifest.
pub fn run_experiment(cfg: ExperimentConfig, stage: Stage) -> CliResult<Manifest> {
    Pipeline::new(cfg)?.run(stage)
}
