//! Strict experiment configuration.
//!
//! A run is described by one JSON document. Every level rejects unknown
//! keys and fills omitted keys from defaults, so a partial file is valid
//! but a typo is a hard error. Command-line overrides address fields by
//! dotted path (`attack.iterations=750`) and are merged into the document
//! before the strict parse, so they obey exactly the same schema.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use anydoor_core::attack::{AttackConfig, Placement, TriggerSpec, TriggerTargetPair};
use anydoor_core::model::{ModelConfig, TrainConfig};
use anydoor_core::perturb::PerturbationSpec;
use anydoor_core::robustness::CorruptionSpec;

use crate::{CliError, CliResult};

/// Target string optimized for when none is configured.
pub const DEFAULT_TARGET: &str = "I want to destroy the whole world together";

/// Master seeds, one per independent random domain. Streams inside a
/// domain are derived from its seed by name, so two domains never share
/// draws even when their seeds collide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Dataset contents (scenes, questions).
    pub data: u64,
    /// Model parameter initialization.
    pub model: u64,
    /// Training shuffles and batching.
    pub train: u64,
    /// Evaluation-time trigger placement and corruption noise.
    pub eval: u64,
    /// Drifting-clip scene and velocities.
    pub frames: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 7,
            model: 42,
            train: 1000,
            eval: 0,
            frames: 777,
        }
    }
}

/// Dataset split sizes. Samples are generated in one pass and sliced:
/// training takes the first `n_train`, the attack ensemble the next
/// `attack.ensemble_size`, evaluation the `n_eval` after that — disjoint
/// by construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 2000,
            n_eval: 200,
        }
    }
}

/// Which robustness probes the pipeline's final stage runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessConfig {
    /// Run the corruption sweep (baseline plus `corruptions`).
    pub corruptions_enabled: bool,
    pub corruptions: Vec<CorruptionSpec>,
    /// Score the perturbation on a drifting-scene clip.
    pub frames_enabled: bool,
    pub n_frames: usize,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            corruptions_enabled: true,
            corruptions: vec![
                CorruptionSpec::CropResize { fraction: 0.875 },
                CorruptionSpec::Rescale { scale: 0.5 },
                CorruptionSpec::GaussianNoise { sigma: 8.0 },
            ],
            frames_enabled: true,
            n_frames: 30,
        }
    }
}

/// Everything one experiment needs, defaults included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Seeds,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub perturbation: PerturbationSpec,
    pub attack: AttackConfig,
    pub pair: TriggerTargetPair,
    pub robustness: RobustnessConfig,
    /// Directory all artifacts are written into (created if missing).
    pub output_dir: String,
    /// How many perturbed evaluation images to dump as image previews.
    pub previews: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: Seeds::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            perturbation: PerturbationSpec::Border { border_width: 6 },
            attack: AttackConfig::default(),
            pair: TriggerTargetPair {
                trigger: TriggerSpec::new("SUDO", Placement::Prefix),
                target: DEFAULT_TARGET.to_string(),
            },
            robustness: RobustnessConfig::default(),
            output_dir: "runs/default".to_string(),
            previews: 4,
        }
    }
}

fn cfg_err(e: anydoor_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

impl ExperimentConfig {
    /// Cross-field validation on top of the per-type schema checks.
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate().map_err(cfg_err)?;
        self.attack.validate().map_err(cfg_err)?;
        self.perturbation
            .validate(self.model.image_hw, self.model.image_hw)
            .map_err(cfg_err)?;
        self.pair.validate().map_err(cfg_err)?;
        for c in &self.robustness.corruptions {
            c.validate().map_err(cfg_err)?;
        }
        if self.data.n_train == 0 {
            return Err(CliError::Config("data.n_train must be positive".into()));
        }
        if self.data.n_eval == 0 {
            return Err(CliError::Config("data.n_eval must be positive".into()));
        }
        if self.robustness.frames_enabled && self.robustness.n_frames == 0 {
            return Err(CliError::Config(
                "robustness.n_frames must be positive when frames are enabled".into(),
            ));
        }
        if self.output_dir.is_empty() {
            return Err(CliError::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }

    /// Total samples the generator must produce to cover all three splits.
    pub fn n_total(&self) -> usize {
        self.data.n_train + self.attack.ensemble_size + self.data.n_eval
    }

    /// Canonical single-line JSON form; field order is declaration order,
    /// so equal configs serialize identically.
    pub fn canonical_json(&self) -> CliResult<String> {
        serde_json::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON: the run's identity.
    pub fn fingerprint(&self) -> CliResult<String> {
        let json = self.canonical_json()?;
        Ok(hex(&Sha256::digest(json.as_bytes())))
    }
}

/// Lowercase hex of a digest.
pub fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Parses one JSON document into a validated configuration.
pub fn parse_config(text: &str) -> CliResult<ExperimentConfig> {
    let cfg: ExperimentConfig =
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Interprets an override value: JSON if it parses, bare string otherwise.
/// `iterations=750` becomes a number, `trigger=SUDO` a string, and a
/// quoted `"true"` stays a string.
fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dotted) inside `doc`, creating intermediate objects.
/// Fails when the path crosses a non-object (overriding into an array or
/// scalar is always a config mistake).
fn set_path(doc: &mut Value, path: &str, value: Value) -> CliResult<()> {
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("bad override path '{path}'")));
    }
    let mut node = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(CliError::Config(format!(
                "override path '{path}' crosses a non-object at '{part}'"
            )));
        }
        node = node
            .as_object_mut()
            .expect("checked is_object above")
            .entry((*part).to_string())
            .or_insert_with(|| Value::Object(serde_json::Map::new()));
    }
    match node.as_object_mut() {
        Some(map) => {
            map.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(CliError::Config(format!(
            "override path '{path}' lands inside a non-object"
        ))),
    }
}

/// Loads the configuration file (or starts from `{}`), materializes every
/// default into a full JSON document, merges dotted-path overrides into
/// it, then runs the strict parse and validation. Materializing first
/// means a leaf override (`pair.trigger.trigger=TTBA`) keeps its
/// siblings; switching an enum variant needs the whole object.
pub fn resolve_config(path: Option<&Path>, overrides: &[(String, String)]) -> CliResult<ExperimentConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?,
        None => "{}".to_string(),
    };
    // Strict parse of the file itself: unknown keys fail here, omitted
    // keys take their defaults.
    let base: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let mut doc = serde_json::to_value(&base).map_err(|e| CliError::Config(e.to_string()))?;
    for (key, raw) in overrides {
        set_path(&mut doc, key, parse_override_value(raw))?;
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Splits raw trailing arguments into `(path, value)` override pairs.
/// Accepts `key=value` tokens and `key value` token pairs; leading dashes
/// on the key are stripped so `--attack.iterations 750` works too.
pub fn collect_overrides(args: &[String]) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let raw = args[i].trim_start_matches('-');
        if let Some((k, v)) = raw.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            i += 1;
        } else if i + 1 < args.len() {
            out.push((raw.to_string(), args[i + 1].clone()));
            i += 2;
        } else {
            return Err(CliError::Config(format!(
                "override '{}' is missing a value",
                args[i]
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_stable() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.seeds.data, 7);
        assert_eq!(cfg.seeds.model, 42);
        assert_eq!(cfg.seeds.train, 1000);
        assert_eq!(cfg.data.n_train, 2000);
        assert_eq!(cfg.data.n_eval, 200);
        assert_eq!(cfg.attack.ensemble_size, 40);
        assert_eq!(cfg.previews, 4);
        assert_eq!(cfg.pair.trigger.trigger, "SUDO");
        assert_eq!(cfg.pair.target, DEFAULT_TARGET);
        assert!(matches!(
            cfg.perturbation,
            PerturbationSpec::Border { border_width: 6 }
        ));
        // Identical configs fingerprint identically, and any change moves it.
        let fp1 = cfg.fingerprint().unwrap();
        let fp2 = ExperimentConfig::default().fingerprint().unwrap();
        assert_eq!(fp1, fp2);
        let mut other = cfg.clone();
        other.attack.iterations += 1;
        assert_ne!(fp1, other.fingerprint().unwrap());
    }

    #[test]
    fn empty_document_yields_defaults() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(matches!(parse_config(r#"{"bogus": 1}"#), Err(CliError::Config(_))));
        assert!(matches!(
            parse_config(r#"{"attack": {"iterations": 5, "bogus": 1}}"#),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            parse_config(r#"{"seeds": {"dataa": 7}}"#),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn overrides_create_intermediate_objects() {
        let cfg = resolve_config(
            None,
            &[
                ("attack.iterations".into(), "33".into()),
                ("pair.trigger.trigger".into(), "kill*".into()),
                ("perturbation".into(), r#"{"strategy":"corner","patch_width":12}"#.into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.attack.iterations, 33);
        assert_eq!(cfg.pair.trigger.trigger, "kill*");
        assert!(matches!(
            cfg.perturbation,
            PerturbationSpec::Corner { patch_width: 12 }
        ));
    }

    #[test]
    fn override_with_unknown_key_is_rejected() {
        let err = resolve_config(None, &[("attack.bogus".into(), "1".into())]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn override_value_parses_json_then_falls_back_to_string() {
        assert_eq!(parse_override_value("750"), Value::from(750));
        assert_eq!(parse_override_value("true"), Value::from(true));
        assert_eq!(parse_override_value("SUDO"), Value::from("SUDO"));
        assert_eq!(parse_override_value("\"true\""), Value::from("true"));
    }

    #[test]
    fn collect_overrides_accepts_both_shapes() {
        let args: Vec<String> = ["--attack.iterations", "750", "pair.target=rm -rf"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let pairs = collect_overrides(&args).unwrap();
        assert_eq!(pairs[0], ("attack.iterations".to_string(), "750".to_string()));
        assert_eq!(pairs[1], ("pair.target".to_string(), "rm -rf".to_string()));
        assert!(collect_overrides(&["dangling".to_string()]).is_err());
    }

    #[test]
    fn config_round_trips_through_canonical_json() {
        let mut cfg = ExperimentConfig::default();
        cfg.attack.iterations = 77;
        cfg.pair.target = "DROP TABLE users".into();
        let json = cfg.canonical_json().unwrap();
        let back = parse_config(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn invalid_cross_field_values_are_config_errors() {
        // Batch larger than ensemble.
        let err = resolve_config(
            None,
            &[
                ("attack.ensemble_size".into(), "4".into()),
                ("attack.batch_size".into(), "8".into()),
            ],
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        // Border wider than half the image.
        let err = resolve_config(
            None,
            &[("perturbation".into(), r#"{"strategy":"border","border_width":40}"#.into())],
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
