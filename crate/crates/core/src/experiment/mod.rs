//! Config-driven experiment recipes.
//!
//! A config is UTF-8 JSON with a fixed schema; unknown keys are rejected. A
//! top-level `scales` object may hold per-scale patches (`paper`, `desk`)
//! that are merged into the base document before it is parsed.

mod manifest;
mod runners;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{MergeMode, PatternStyle, SplitScheme, Synth2dCase};
use crate::error::{Error, Result};
use crate::models::{Activation, Family, HeadMode};
use crate::train::TrainConfig;

pub use manifest::{Manifest, MANIFEST_FILE};
pub use runners::{
    run, run_gradcheck, run_newclass, run_partition_track, run_sweep, run_train_once, run_viz2d,
    CellMetrics, CellResult, GradcheckRow, NewclassRow, PartitionPoint, RunDetails, RunReport,
    SweepResult, VizRow,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Sweep,
    Viz2d,
    PartitionTrack,
    Newclass,
    Gradcheck,
    TrainOnce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Paper,
    Desk,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            _ => Err(Error::Config(format!("unknown scale '{s}' (expected paper or desk)"))),
        }
    }
}

/// Network settings shared by every cell; the shared depth comes from the
/// depth list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub total_depth: usize,
    pub trunk_width: usize,
    #[serde(default = "default_true")]
    pub use_bias: bool,
    #[serde(default)]
    pub head_mode: HeadMode,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_fc_width")]
    pub fc_width: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
}

fn default_true() -> bool {
    true
}
fn default_fc_width() -> usize {
    128
}
fn default_kernel() -> usize {
    3
}

/// Where a factor's images come from. Each variant yields a train and a
/// test source with the same classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceSpec {
    /// IDX files; relative paths resolve against the data directory.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "default_classes")]
        classes: usize,
    },
    /// CIFAR-10 binary batches.
    Cifar {
        train_files: Vec<PathBuf>,
        test_files: Vec<PathBuf>,
    },
    /// Procedural patterns; train and test items are generated
    /// independently from `data.source_seed`.
    Synthetic {
        style: PatternStyle,
        #[serde(default = "default_classes")]
        classes: usize,
        per_class: usize,
        shape: Vec<usize>,
    },
}

fn default_classes() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// One source per factor (one for `new-classes`).
    #[serde(default)]
    pub sources: Vec<SourceSpec>,
    #[serde(default = "default_scheme")]
    pub scheme: SplitScheme,
    #[serde(default = "default_merge")]
    pub merge: MergeMode,
    /// Sources are rescaled (and gray broadcast to colour) to this shape.
    #[serde(default)]
    pub input_shape: Option<Vec<usize>>,
    /// Size of the fixed training pool, drawn with replacement.
    #[serde(default = "default_train_samples")]
    pub train_samples: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default)]
    pub source_seed: u64,
}

fn default_scheme() -> SplitScheme {
    SplitScheme::Diagonal
}
fn default_merge() -> MergeMode {
    MergeMode::Average
}
fn default_train_samples() -> usize {
    60_000
}
fn default_eval_samples() -> usize {
    10_000
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sources: Vec::new(),
            scheme: default_scheme(),
            merge: default_merge(),
            input_shape: None,
            train_samples: default_train_samples(),
            eval_samples: default_eval_samples(),
            source_seed: 0,
        }
    }
}

/// One network of a 2-D visualization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VizVariant {
    pub name: String,
    pub total_depth: usize,
    pub shared_depth: usize,
    #[serde(default = "default_viz_width")]
    pub width: usize,
    #[serde(default)]
    pub activation: Activation,
}

fn default_viz_width() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VizConfig {
    pub cases: Vec<Synth2dCase>,
    pub variants: Vec<VizVariant>,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Bounds are the training bounding box grown by this fraction per side.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Cases that also get panels after a single training step.
    #[serde(default)]
    pub one_step_cases: Vec<Synth2dCase>,
}

fn default_resolution() -> usize {
    200
}
fn default_margin() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_instances() -> usize {
    20
}
fn default_step() -> f64 {
    1e-5
}
fn default_tolerance() -> f64 {
    1e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub scale: Option<Scale>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Shared depths; defaults to every depth for sweeps and to
    /// `[0, total_depth]` for the two-variant experiments.
    #[serde(default)]
    pub depths: Option<Vec<usize>>,
    #[serde(default)]
    pub viz: Option<VizConfig>,
    #[serde(default)]
    pub gradcheck: Option<GradcheckConfig>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

/// Recursive object merge; non-object values in `patch` replace `base`.
fn merge_json(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

impl ExperimentConfig {
    /// Parses `text`, applying the `scales.<scale>` patch when present.
    pub fn from_json(text: &str, scale: Scale) -> Result<Self> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let scales = doc.as_object_mut().and_then(|o| o.remove("scales"));
        if let Some(scales) = scales {
            let obj = scales
                .as_object()
                .ok_or_else(|| Error::Config("'scales' must be an object".into()))?;
            if let Some(k) = obj.keys().find(|k| k.parse::<Scale>().is_err()) {
                return Err(Error::Config(format!("unknown scale '{k}' in 'scales'")));
            }
            if let Some(patch) = obj.get(scale.as_str()) {
                merge_json(&mut doc, patch);
            }
        }
        let mut cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.scale.get_or_insert(scale);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, scale: Scale) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, scale)
    }

    /// Built-in recipe by name.
    pub fn recipe(name: &str, scale: Scale) -> Result<Self> {
        let text = RECIPES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                let names: Vec<&str> = RECIPES.iter().map(|(n, _)| *n).collect();
                Error::Config(format!("unknown recipe '{name}'; available: {}", names.join(", ")))
            })?;
        Self::from_json(text, scale)
    }

    /// Compact JSON of the resolved config (no `scales` block).
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn model(&self) -> Result<&ModelConfig> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{:?} experiment needs a 'model' block", self.kind)))
    }

    pub fn train_config(&self) -> Result<&TrainConfig> {
        self.train
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{:?} experiment needs a 'train' block", self.kind)))
    }

    /// Shared depths to run, defaulted by kind.
    pub fn resolved_depths(&self) -> Result<Vec<usize>> {
        let l = self.model()?.total_depth;
        Ok(match (&self.depths, self.kind) {
            (Some(d), _) => d.clone(),
            (None, ExperimentKind::Sweep) => (0..=l).collect(),
            (None, ExperimentKind::TrainOnce) => vec![l],
            (None, _) => vec![0, l],
        })
    }

    /// Checks module preconditions before any work starts.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("{}: {m}", self.name)));
        if self.seeds.is_empty() {
            return fail("seeds must be non-empty".into());
        }
        match self.kind {
            ExperimentKind::Gradcheck => {
                let g = self.gradcheck.clone().unwrap_or(GradcheckConfig {
                    instances: default_instances(),
                    step: default_step(),
                    tolerance: default_tolerance(),
                });
                let positive = |v: f64| v > 0.0;
                if g.instances == 0 || !positive(g.step) || !positive(g.tolerance) {
                    return fail(format!("invalid gradcheck settings {g:?}"));
                }
                return Ok(());
            }
            ExperimentKind::Viz2d => {
                let Some(viz) = &self.viz else {
                    return fail("viz2d needs a 'viz' block".into());
                };
                if viz.cases.is_empty() || viz.variants.is_empty() {
                    return fail("viz2d needs at least one case and one variant".into());
                }
                if viz.resolution < 2 || viz.margin.is_nan() || viz.margin < 0.0 {
                    return fail("viz resolution must be >= 2 and margin >= 0".into());
                }
                for v in &viz.variants {
                    if v.total_depth == 0 || v.shared_depth > v.total_depth || v.width == 0 {
                        return fail(format!("invalid viz variant {v:?}"));
                    }
                }
                if self.data.train_samples == 0 {
                    return fail("train_samples must be positive".into());
                }
                let train = self.train_config()?;
                train
                    .validate(HeadMode::Softmax)
                    .map_err(|e| Error::Config(e.to_string()))?;
                return Ok(());
            }
            _ => {}
        }
        let model = self.model()?;
        let train = self.train_config()?;
        train
            .validate(model.head_mode)
            .map_err(|e| Error::Config(e.to_string()))?;
        if model.total_depth == 0 || model.trunk_width == 0 {
            return fail("total_depth and trunk_width must be positive".into());
        }
        for d in self.resolved_depths()? {
            if d > model.total_depth {
                return fail(format!("depth {d} exceeds total_depth {}", model.total_depth));
            }
        }
        if self.data.train_samples == 0 || self.data.eval_samples == 0 {
            return fail("train_samples and eval_samples must be positive".into());
        }
        let want_sources = if self.data.scheme == SplitScheme::NewClasses { 1 } else { 2 };
        if self.data.sources.len() != want_sources {
            return fail(format!(
                "{} split needs {want_sources} source(s), got {}",
                self.data.scheme,
                self.data.sources.len()
            ));
        }
        if self.data.merge == MergeMode::Coords {
            return fail("coords merge is only for 2-D toy data".into());
        }
        if self.kind == ExperimentKind::Newclass {
            if self.data.scheme != SplitScheme::NewClasses {
                return fail("newclass needs the new-classes scheme".into());
            }
            if model.head_mode != HeadMode::Binary || model.use_bias {
                return fail("newclass needs binary heads without biases".into());
            }
        }
        if self.kind == ExperimentKind::PartitionTrack {
            let every = train.eval_every;
            if every == 0 || train.iterations % every != 0 {
                return fail(format!(
                    "eval_every ({every}) must divide iterations ({})",
                    train.iterations
                ));
            }
        }
        Ok(())
    }
}

/// Built-in recipes, embedded from `recipes/*.json`.
pub const RECIPES: &[(&str, &str)] = &[
    ("fig2", include_str!("../../recipes/fig2.json")),
    ("fig4a-dnn", include_str!("../../recipes/fig4a-dnn.json")),
    ("fig4b-cnn-scaled", include_str!("../../recipes/fig4b-cnn-scaled.json")),
    ("d1-track", include_str!("../../recipes/d1-track.json")),
    ("d2-newclass", include_str!("../../recipes/d2-newclass.json")),
    ("d5-spiralxor", include_str!("../../recipes/d5-spiralxor.json")),
    ("d7-tile", include_str!("../../recipes/d7-tile.json")),
    ("d7-onelabel", include_str!("../../recipes/d7-onelabel.json")),
];

/// Where a run writes and how many worker threads it may use.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,
    pub threads: usize,
    /// Label written into the manifest (recipe name or config path).
    pub origin: String,
    /// Source checksums a rerun must reproduce, taken from a manifest.
    pub expected_checksums: Option<BTreeMap<String, String>>,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            data_dir: PathBuf::from("data"),
            threads: 1,
            origin: String::new(),
            expected_checksums: None,
        }
    }
}

/// Independent, reproducible seed per (run seed, stream).
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
