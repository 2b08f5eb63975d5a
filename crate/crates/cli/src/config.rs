//! The run configuration file and its command-line overrides.

use std::path::PathBuf;

use clap::Args;
use mlrn::dataset::DatasetManifest;
use mlrn::labels::DecisionRule;
use mlrn::model::ModelConfig;
use mlrn::trainer::TrainConfig;
use mlrn::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a training run needs. Every field has a default; a resolved copy
/// is written next to the outputs so the run can be repeated from it alone.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Whether the file fixed `model.num_classes` rather than leaving it to the data.
    #[serde(skip)]
    explicit_classes: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let explicit_classes = value.pointer("/model/num_classes").is_some();
        let mut run: RunConfig = serde_json::from_value(value)?;
        run.explicit_classes = explicit_classes;
        Ok(run)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// The training data defines the classes: take its count and names, unless
    /// the file pinned a different count.
    pub fn adopt_label_space(&mut self, manifest: &DatasetManifest) -> Result<()> {
        let classes = manifest.num_classes();
        if self.explicit_classes && self.model.num_classes != classes {
            return Err(Error::Validation(format!(
                "config sets num_classes = {} but the training data has {classes} classes",
                self.model.num_classes
            )));
        }
        self.model.num_classes = classes;
        self.model.class_names = manifest.categories.names();
        self.explicit_classes = true;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Command-line values that win over the config file.
#[derive(Debug, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Seeds both weight initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Decision rule for evaluation during training.
    #[arg(long)]
    pub rule: Option<DecisionRule>,
}

impl TrainOverrides {
    pub fn apply(&self, run: &mut RunConfig) {
        let t = &mut run.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.momentum {
            t.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
            run.model.seed = v;
        }
        if let Some(v) = self.eval_every {
            t.eval_every = v;
        }
        if let Some(v) = self.rule {
            t.decision_rule = v;
        }
    }
}
