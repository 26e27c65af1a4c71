use std::fs;
use std::path::{Path, PathBuf};

use asdformer_core::data::{SynthConfig, DEFAULT_FRACTIONS};
use asdformer_core::gradcheck::GradcheckOptions;
use asdformer_core::interpret::{HeadMode, ReportFormat};
use asdformer_core::model::ModelConfig;
use asdformer_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset manifest, or a directory containing `manifest.json`.
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: DEFAULT_FRACTIONS,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    #[default]
    All,
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub subset: Subset,
    /// Classify as ASD when its probability exceeds this; argmax when unset.
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretConfig {
    /// Subject ids to report on; every subject when empty.
    pub subjects: Vec<String>,
    pub head_mode: HeadMode,
    pub layer: Option<usize>,
    pub format: ReportFormat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Number of consecutive seeds, starting at the run seed.
    pub seeds: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { seeds: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub batch: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        let toy = GradcheckOptions::toy();
        Self {
            model: toy.model,
            batch: toy.batch,
            seed: toy.seed,
            step: toy.step,
            tolerance: toy.tolerance,
            floor: toy.floor,
        }
    }
}

/// Everything a command needs, resolved from defaults, an optional JSON file
/// and command-line flags, in that order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides every component seed when set.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub interpret: InterpretConfig,
    pub ablate: AblateConfig,
    pub gradcheck: GradcheckConfig,
}

/// Recursively overlays `over` onto `base`; objects merge key by key, any
/// other value replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// A config plus which model keys were set explicitly.
pub struct Resolved {
    pub config: RunConfig,
    /// Whether `model.n_rois` came from the file (otherwise it follows the
    /// dataset).
    pub explicit_n_rois: bool,
}

pub fn load(path: Option<&Path>) -> Result<Resolved, CliError> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("defaults serialise");
    let mut explicit_n_rois = false;
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(CliError::Usage(format!(
                "{}: config must be a JSON object",
                path.display()
            )));
        }
        explicit_n_rois = file.pointer("/model/n_rois").is_some();
        merge(&mut value, file);
    }
    let config = serde_json::from_value(value).map_err(|e| match path {
        Some(p) => CliError::Usage(format!("{}: {e}", p.display())),
        None => CliError::Usage(e.to_string()),
    })?;
    Ok(Resolved {
        config,
        explicit_n_rois,
    })
}

impl RunConfig {
    /// Pushes the top-level seed into every component.
    pub fn propagate_seed(&mut self) {
        if let Some(s) = self.seed {
            self.model.seed = s;
            self.train.seed = s;
            self.split.seed = s;
            self.synth.seed = s;
            self.gradcheck.seed = s;
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }
}
