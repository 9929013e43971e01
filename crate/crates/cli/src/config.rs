use std::path::{Path, PathBuf};

use crackgnn_core::graph::GraphConfig;
use crackgnn_core::graphnet::GraphNetConfig;
use crackgnn_core::pca::PcaConfig;
use crackgnn_core::sim::TubeConfig;
use crackgnn_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// Posterior-predictive settings for `predict`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Posterior samples per experiment.
    pub n_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_samples: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Name of the results directory under `<workdir>/eval/`.
    pub run_id: String,
    /// Root of all stage artifacts.
    pub workdir: PathBuf,
    pub tube: TubeConfig,
    pub pca: PcaConfig,
    pub graph: GraphConfig,
    pub model: GraphNetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_id: "run".into(),
            workdir: PathBuf::from("work"),
            tube: TubeConfig::default(),
            pca: PcaConfig::default(),
            graph: GraphConfig::default(),
            model: GraphNetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Keys that exist in the component configs but are owned by the run config.
const RESERVED: [(&str, &str); 2] = [
    ("train.seed", "set the top-level `seed`"),
    ("model.deterministic", "set `train.deterministic`"),
];

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub workdir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if overrides.deterministic {
            config.train.deterministic = true;
        }
        if let Some(dir) = &overrides.workdir {
            config.workdir = dir.clone();
        }
        config.train.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let user = serde_json::to_value(&table).map_err(|e| CliError::Config(e.to_string()))?;
        let known = serde_json::to_value(Self::default()).expect("default config serializes");
        let mut offending = Vec::new();
        unknown_keys(&user, &known, "", &mut offending);
        for (key, hint) in RESERVED {
            if lookup(&user, key).is_some() {
                offending.push(format!("{key} ({hint})"));
            }
        }
        if !offending.is_empty() {
            return Err(CliError::Config(format!("unknown configuration keys: {}", offending.join(", "))));
        }
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.tube.validate()?;
        self.graph.validate()?;
        self.model.validate()?;
        self.train.validate(self.tube.n_timesteps)?;
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return Err(CliError::Config(format!("run_id {:?} is not a plain directory name", self.run_id)));
        }
        if self.eval.n_samples == 0 {
            return Err(CliError::Config("eval.n_samples must be >= 1".into()));
        }
        if self.pca.n_healthy == 0 {
            return Err(CliError::Config("pca.n_healthy must be >= 1".into()));
        }
        Ok(())
    }

    pub fn n_experiments(&self) -> usize {
        self.train.n_train + self.train.n_test
    }

    /// Settings each stage depends on, cumulative along the pipeline, so an
    /// upstream change invalidates everything downstream.
    pub fn stage_config(&self, stage: Stage) -> Value {
        let mut v = serde_json::json!({
            "seed": self.seed,
            "tube": self.tube,
            "n_healthy": self.pca.n_healthy,
            "n_experiments": self.n_experiments(),
        });
        let obj = v.as_object_mut().expect("object");
        if stage >= Stage::FitPca {
            obj.insert("pca".into(), serde_json::to_value(&self.pca).expect("serializable"));
        }
        if stage >= Stage::BuildGraphs {
            obj.insert("graph".into(), serde_json::to_value(&self.graph).expect("serializable"));
        }
        if stage >= Stage::Train {
            obj.insert("model".into(), serde_json::to_value(&self.model).expect("serializable"));
            obj.insert("train".into(), serde_json::to_value(&self.train).expect("serializable"));
        }
        if stage >= Stage::Predict {
            obj.insert("eval".into(), serde_json::to_value(&self.eval).expect("serializable"));
        }
        if stage >= Stage::Eval {
            obj.insert("run_id".into(), Value::String(self.run_id.clone()));
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Simulate,
    FitPca,
    BuildGraphs,
    Train,
    Predict,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Simulate,
        Stage::FitPca,
        Stage::BuildGraphs,
        Stage::Train,
        Stage::Predict,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::FitPca => "fit-pca",
            Stage::BuildGraphs => "build-graphs",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Eval => "eval",
        }
    }

    /// Directory under the workdir holding this stage's artifacts.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Simulate => "dataset",
            Stage::FitPca => "pca",
            Stage::BuildGraphs => "graphs",
            Stage::Train => "model",
            Stage::Predict => "predictions",
            Stage::Eval => "eval",
        }
    }

    /// Human name of the artifacts, for dependency errors.
    pub fn artifacts(self) -> &'static str {
        match self {
            Stage::Simulate => "dataset",
            Stage::FitPca => "PCA basis",
            Stage::BuildGraphs => "sensor graph",
            Stage::Train => "model checkpoint",
            Stage::Predict => "prediction",
            Stage::Eval => "evaluation",
        }
    }

    pub fn upstream(self) -> Option<Stage> {
        let i = Self::ALL.iter().position(|&s| s == self).expect("listed");
        i.checked_sub(1).map(|j| Self::ALL[j])
    }
}

fn unknown_keys(user: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(u), Value::Object(k)) = (user, known) else {
        return;
    };
    for (key, value) in u {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match k.get(key) {
            None => out.push(path),
            Some(kv) => unknown_keys(value, kv, &path, out),
        }
    }
}

fn lookup<'a>(v: &'a Value, dotted: &str) -> Option<&'a Value> {
    dotted.split('.').try_fold(v, |v, key| v.get(key))
}
