//! Run configuration: one TOML document with a section per stage.
//!
//! A file only needs to list what differs from its profile's defaults; the
//! file is merged over the profile and the result is parsed strictly, so a
//! misspelled key is an error rather than a silently ignored setting.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use uwadn_core::degrade::{DegradationSpec, Task};
use uwadn_core::selector::{SelectorConfig, SparsityTarget, WsTrainConfig};
use uwadn_core::wab::{TrainConfig, WabConfig};

use crate::error::{IoContext, PipelineError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Full,
}

impl FromStr for Profile {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(PipelineError::Config(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub omega: usize,
    pub ratios: Vec<f64>,
    pub blocks: usize,
    pub c_de: usize,
    pub kernel: usize,
}

/// A task and, optionally, a recipe replacing its default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<DegradationSpec>,
}

impl TaskEntry {
    pub fn resolved_spec(&self, size: usize) -> DegradationSpec {
        self.spec.unwrap_or_else(|| self.task.default_spec(size, size))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub image_size: usize,
    /// Training samples per task.
    pub train_per_task: usize,
    /// Held-out evaluation samples per task.
    pub eval_per_task: usize,
    pub tasks: Vec<TaskEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WabSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WsSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub target_t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub wab: WabSection,
    pub ws: WsSection,
}

impl RunConfig {
    /// Single-machine defaults: 32-wide backbone on 32×32 patches of three
    /// tasks. The backbone epoch count is sized to finish within half an hour
    /// on one CPU core.
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            seed: 7,
            model: ModelSection {
                omega: 32,
                ratios: vec![0.6, 0.7, 0.8, 0.9, 1.0],
                blocks: 4,
                c_de: 8,
                kernel: 3,
            },
            data: DataSection {
                image_size: 32,
                train_per_task: 300,
                eval_per_task: 40,
                tasks: [Task::Noise25, Task::Rain, Task::Haze]
                    .into_iter()
                    .map(|task| TaskEntry { task, spec: None })
                    .collect(),
            },
            wab: WabSection {
                epochs: 60,
                batch_size: 8,
                lr: 1e-3,
            },
            ws: WsSection {
                epochs: 20,
                batch_size: 16,
                lr: 0.01,
                target_t: 0.8,
            },
        }
    }

    /// Paper-sized backbone on all five tasks.
    pub fn full() -> Self {
        Self {
            profile: Profile::Full,
            model: ModelSection {
                omega: 64,
                c_de: 16,
                ..Self::desk().model
            },
            data: DataSection {
                image_size: 64,
                train_per_task: 500,
                eval_per_task: 100,
                tasks: Task::ALL.into_iter().map(|task| TaskEntry { task, spec: None }).collect(),
            },
            wab: WabSection {
                epochs: 2000,
                batch_size: 8,
                lr: 1e-3,
            },
            ..Self::desk()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Full => Self::full(),
        }
    }

    /// Parses a TOML document over the defaults of its `profile` key, or of
    /// `fallback` when the document names none.
    pub fn from_toml(text: &str, fallback: Profile) -> Result<Self> {
        let overrides: toml::Table = toml::from_str(text)?;
        let profile = match overrides.get("profile") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(PipelineError::Config(format!("profile must be a string, got {other}"))),
            None => fallback,
        };
        let mut base = toml::Table::try_from(Self::for_profile(profile))
            .map_err(|e| PipelineError::Config(format!("cannot encode defaults: {e}")))?;
        merge(&mut base, overrides);
        let config: RunConfig = toml::Value::Table(base).try_into()?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, fallback: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml(&text, fallback)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn wab_config(&self) -> WabConfig {
        WabConfig {
            omega: self.model.omega,
            ratios: self.model.ratios.clone(),
            blocks: self.model.blocks,
            c_de: self.model.c_de,
            kernel: self.model.kernel,
            classes: Task::ALL.len(),
        }
    }

    pub fn selector_config(&self) -> SelectorConfig {
        SelectorConfig::for_backbone(&self.wab_config())
    }

    pub fn wab_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.wab.epochs,
            batch_size: self.wab.batch_size,
            lr: self.wab.lr,
            seed: self.seed,
        }
    }

    pub fn ws_train(&self) -> WsTrainConfig {
        WsTrainConfig {
            epochs: self.ws.epochs,
            batch_size: self.ws.batch_size,
            lr: self.ws.lr,
            seed: self.seed,
        }
    }

    pub fn target(&self) -> Result<SparsityTarget> {
        Ok(SparsityTarget::new(self.ws.target_t)?)
    }

    pub fn validate(&self) -> Result<()> {
        let wab = self.wab_config();
        wab.validate()?;
        // the task head doubles as the width head
        self.selector_config().validate()?;
        self.target()?;
        let d = &self.data;
        if d.image_size < 8 {
            return Err(PipelineError::Config(format!("image_size {} below 8", d.image_size)));
        }
        if d.tasks.is_empty() {
            return Err(PipelineError::Config("task list is empty".into()));
        }
        for (i, entry) in d.tasks.iter().enumerate() {
            if d.tasks[..i].iter().any(|e| e.task == entry.task) {
                return Err(PipelineError::Config(format!("task {} listed twice", entry.task.name())));
            }
            entry.resolved_spec(d.image_size).validate()?;
        }
        for (name, v) in [
            ("wab.epochs", self.wab.epochs),
            ("wab.batch_size", self.wab.batch_size),
            ("ws.epochs", self.ws.epochs),
            ("ws.batch_size", self.ws.batch_size),
        ] {
            if v == 0 {
                return Err(PipelineError::Config(format!("{name} must be positive")));
            }
        }
        for (name, lr) in [("wab.lr", self.wab.lr), ("ws.lr", self.ws.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(PipelineError::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        Ok(())
    }
}

/// Recursive table merge; arrays and scalars in `over` replace `base`.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_valid() {
        RunConfig::desk().validate().unwrap();
        RunConfig::full().validate().unwrap();
    }

    #[test]
    fn defaults_survive_a_toml_round_trip() {
        for cfg in [RunConfig::desk(), RunConfig::full()] {
            let text = cfg.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text, Profile::Desk).unwrap(), cfg);
        }
    }

    #[test]
    fn partial_files_override_the_profile() {
        let cfg = RunConfig::from_toml("seed = 3\n[wab]\nepochs = 2\n", Profile::Desk).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.wab.epochs, 2);
        assert_eq!(cfg.wab.lr, RunConfig::desk().wab.lr);
        let full = RunConfig::from_toml("profile = \"full\"\n", Profile::Desk).unwrap();
        assert_eq!(full, RunConfig::full());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3\n", Profile::Desk).is_err());
        assert!(RunConfig::from_toml("[wab]\nepoch = 3\n", Profile::Desk).is_err());
        assert!(RunConfig::from_toml("[extra]\nx = 1\n", Profile::Desk).is_err());
    }

    #[test]
    fn width_count_must_match_task_count() {
        let r = RunConfig::from_toml("[model]\nratios = [0.5, 1.0]\n", Profile::Desk);
        assert!(matches!(r, Err(PipelineError::Core(uwadn_core::Error::Config(_)))));
    }

    #[test]
    fn task_specs_can_be_overridden() {
        let text = r#"
            [data]
            tasks = [
                { task = "noise25" },
                { task = "haze", spec = { noise_sigma = 0.0, kind = { type = "haze", beta = 0.5, airlight = 0.9, mode = "scattering" } } },
            ]
        "#;
        let cfg = RunConfig::from_toml(text, Profile::Desk).unwrap();
        let spec = cfg.data.tasks[1].resolved_spec(32);
        assert_ne!(spec, Task::Haze.default_spec(32, 32));
        assert!(RunConfig::from_toml("[data]\ntasks = [{ task = \"rain\" }, { task = \"rain\" }]\n", Profile::Desk).is_err());
    }
}
