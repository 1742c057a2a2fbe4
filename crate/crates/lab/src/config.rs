//! Run configuration, loaded from TOML. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use freeu_core::freeu::{FieldError, FreeUConfig};
use freeu_core::schedule::{make_schedule, NoiseSchedule, ScheduleKind};
use freeu_core::unet::UNetConfig;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    ShapesTexture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::ShapesTexture,
            count: 2048,
            size: 32,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(make_schedule(self.kind, self.steps, self.beta_start, self.beta_end)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Evaluation loss and checkpoint every this many steps (0 disables).
    pub snapshot_every: u64,
    pub eval_batch: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 2e-4,
            seed: 0,
            snapshot_every: 500,
            eval_batch: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSpec {
    pub seed: u64,
    pub count: usize,
    /// Sampling steps; fewer than the schedule length respaces it.
    pub steps: usize,
    pub record_trajectory: bool,
    pub compare: bool,
    /// Low/high cut radius for trajectory band statistics, in grid cells.
    pub r_cut: f64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 16,
            steps: 200,
            record_trajectory: false,
            compare: false,
            r_cut: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            checkpoint: PathBuf::from("runs/default/model.ckpt"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSpec {
    pub host: String,
    pub port: u16,
    pub queue_depth: usize,
    /// Concurrent sampling jobs; 0 means `max(1, cores − 1)`.
    pub workers: usize,
}

impl Default for ServeSpec {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            queue_depth: 8,
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub unet: UNetConfig,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default = "default_freeu")]
    pub freeu: FreeUConfig,
    #[serde(default)]
    pub sample: SampleSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub serve: ServeSpec,
}

fn default_freeu() -> FreeUConfig {
    let unet = UNetConfig::default();
    FreeUConfig::default_for(&unet.stage_sites(unet.image_size))
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            schedule: ScheduleSpec::default(),
            unet: UNetConfig::default(),
            train: TrainSpec::default(),
            freeu: default_freeu(),
            sample: SampleSpec::default(),
            output: OutputSpec::default(),
            serve: ServeSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| LabError::Parse {
            what: "config".into(),
            message: e.message().to_string(),
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            LabError::Parse { message, .. } => LabError::Parse {
                what: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let mut fail = |field: &str, message: String| {
            errs.push(FieldError {
                field: field.into(),
                message,
            })
        };
        let d = &self.dataset;
        if d.count == 0 {
            fail("dataset.count", "must be at least 1".into());
        }
        if !d.size.is_power_of_two() || d.size < 4 {
            fail("dataset.size", format!("must be a power of two >= 4, got {}", d.size));
        }
        if d.size != self.unet.image_size {
            fail(
                "unet.image_size",
                format!("must equal dataset.size ({}), got {}", d.size, self.unet.image_size),
            );
        }
        let s = &self.schedule;
        if s.steps == 0 {
            fail("schedule.steps", "must be at least 1".into());
        }
        if !(s.beta_start > 0.0 && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            fail(
                "schedule.beta_start",
                format!(
                    "need 0 < beta_start <= beta_end < 1, got {} and {}",
                    s.beta_start, s.beta_end
                ),
            );
        }
        if let Err(e) = self.unet.validate() {
            fail("unet", e.to_string());
        }
        let t = &self.train;
        if t.batch == 0 {
            fail("train.batch", "must be at least 1".into());
        }
        if t.eval_batch == 0 {
            fail("train.eval_batch", "must be at least 1".into());
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            fail("train.lr", format!("must be finite and > 0, got {}", t.lr));
        }
        let sm = &self.sample;
        if sm.count == 0 {
            fail("sample.count", "must be at least 1".into());
        }
        if sm.steps == 0 || sm.steps > s.steps {
            fail(
                "sample.steps",
                format!("must lie in 1..={}, got {}", s.steps, sm.steps),
            );
        }
        if !(sm.r_cut.is_finite() && sm.r_cut >= 0.0) {
            fail("sample.r_cut", format!("must be finite and >= 0, got {}", sm.r_cut));
        }
        if self.serve.queue_depth == 0 {
            fail("serve.queue_depth", "must be at least 1".into());
        }
        for mut e in self.freeu.validate(Some(self.unet.stages())) {
            e.field = format!("freeu.{}", e.field);
            errs.push(e);
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(errs))
        }
    }
}
