//! Sampling jobs: images, spectra and optional trajectories, written as files.

use std::path::{Path, PathBuf};

use freeu_core::diffusion::{sample, RecordLevel, SampleRequest, TrajectoryRecord};
use freeu_core::freeu::{FieldError, FreeUConfig};
use freeu_core::schedule::NoiseSchedule;
use freeu_core::spectral::{
    band_stats_csv, feature_spectrum, fmt_sig9, trajectory_band_stats, BandStatRow,
    SpectrumProfile, DEFAULT_BANDS,
};
use freeu_core::tensor::Tensor;
use freeu_core::unet::UNetModel;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::container::{self, write_atomic};
use crate::error::{LabError, Result};

fn default_r_cut() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleJob {
    pub seed: u64,
    pub count: usize,
    pub steps: usize,
    pub freeu: FreeUConfig,
    #[serde(default)]
    pub record_trajectory: bool,
    /// Run an unmodulated baseline from the same noise as well.
    #[serde(default)]
    pub compare: bool,
    #[serde(default = "default_r_cut")]
    pub r_cut: f64,
}

impl SampleJob {
    pub fn from_config(config: &RunConfig) -> Self {
        let s = &config.sample;
        Self {
            seed: s.seed,
            count: s.count,
            steps: s.steps,
            freeu: config.freeu.clone(),
            record_trajectory: s.record_trajectory,
            compare: s.compare,
            r_cut: s.r_cut,
        }
    }

    pub fn validate(&self, stage_count: usize, max_steps: usize) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if self.count == 0 {
            errs.push(FieldError {
                field: "count".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.steps == 0 || self.steps > max_steps {
            errs.push(FieldError {
                field: "steps".into(),
                message: format!("must lie in 1..={max_steps}, got {}", self.steps),
            });
        }
        if !(self.r_cut.is_finite() && self.r_cut >= 0.0) {
            errs.push(FieldError {
                field: "r_cut".into(),
                message: format!("must be finite and >= 0, got {}", self.r_cut),
            });
        }
        for mut e in self.freeu.validate(Some(stage_count)) {
            e.field = format!("freeu.{}", e.field);
            errs.push(e);
        }
        errs
    }
}

/// Sampling schedule for `steps` steps: the full schedule or a respaced one.
pub fn sampling_schedule(full: &NoiseSchedule, steps: usize) -> Result<NoiseSchedule> {
    if steps == full.len() {
        Ok(full.clone())
    } else {
        Ok(full.respaced(steps)?)
    }
}

/// One set of samples produced under a single modulation setting.
#[derive(Clone, Debug)]
pub struct SampleSet {
    /// `[count, 1, H, W]`.
    pub images: Tensor,
    pub spectra: Vec<SpectrumProfile>,
    pub mean_spectrum: SpectrumProfile,
    pub trajectory: Option<TrajectoryRecord>,
    pub band_stats: Option<Vec<BandStatRow>>,
}

#[derive(Clone, Debug)]
pub struct JobOutput {
    /// Unmodulated run, present in compare mode.
    pub baseline: Option<SampleSet>,
    pub freeu: SampleSet,
}

pub fn image_spectra(images: &Tensor) -> Result<(Vec<SpectrumProfile>, SpectrumProfile)> {
    let n = images.shape()[0];
    let spectra = (0..n)
        .map(|i| feature_spectrum(&images.batch_item(i)?, DEFAULT_BANDS))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = SpectrumProfile::average(&spectra)?;
    Ok((spectra, mean))
}

fn run_set(
    model: &UNetModel,
    schedule: &NoiseSchedule,
    job: &SampleJob,
    modulation: Option<&FreeUConfig>,
) -> Result<SampleSet> {
    let mut req = SampleRequest::new(job.seed, job.count);
    if let Some(m) = modulation.filter(|m| m.enabled) {
        req = req.with_modulator(m);
    }
    if job.record_trajectory {
        req = req.recording(RecordLevel::States);
    }
    let (images, trajectory) = sample(model, schedule, req)?;
    let (spectra, mean_spectrum) = image_spectra(&images)?;
    let band_stats = match &trajectory {
        Some(t) => Some(trajectory_band_stats(t, job.r_cut)?),
        None => None,
    };
    Ok(SampleSet {
        images,
        spectra,
        mean_spectrum,
        trajectory,
        band_stats,
    })
}

/// Runs `job` in memory. `full` is the training schedule.
pub fn execute(model: &UNetModel, full: &NoiseSchedule, job: &SampleJob) -> Result<JobOutput> {
    let errs = job.validate(model.config().stages(), full.len());
    if !errs.is_empty() {
        return Err(LabError::Config(errs));
    }
    let schedule = sampling_schedule(full, job.steps)?;
    let baseline = if job.compare {
        Some(run_set(model, &schedule, job, None)?)
    } else {
        None
    };
    let freeu = run_set(model, &schedule, job, Some(&job.freeu))?;
    Ok(JobOutput { baseline, freeu })
}

/// Binary PGM (P5), 8-bit, `[−1, 1]` mapped linearly onto `0..=255`.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let d = image.shape();
    let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
    if image.numel() != h * w {
        return Err(LabError::Core(freeu_core::Error::InvalidArgument {
            op: "encode_pgm",
            msg: format!("expected a single plane, got {d:?}"),
        }));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

fn to_byte(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    ((v + 1.0) * 127.5).round() as u8
}

pub fn spectra_csv(spectra: &[SpectrumProfile]) -> String {
    let mut out = String::from("sample,band_lo,band_hi,rel_log_amp\n");
    for (i, p) in spectra.iter().enumerate() {
        for (k, v) in p.values.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{}\n",
                fmt_sig9(p.band_edges[k]),
                fmt_sig9(p.band_edges[k + 1]),
                fmt_sig9(*v)
            ));
        }
    }
    out
}

#[derive(Serialize)]
struct ArtifactMeta<'a> {
    kind: &'a str,
    job: &'a SampleJob,
}

fn write_set(set: &SampleSet, job: &SampleJob, dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, bytes)?;
        files.push(p);
        Ok(())
    };
    for i in 0..set.images.shape()[0] {
        put(&format!("sample_{i:03}.pgm"), &encode_pgm(&set.images.batch_item(i)?)?)?;
    }
    put("spectrum.csv", set.mean_spectrum.to_csv().as_bytes())?;
    put("spectra.csv", spectra_csv(&set.spectra).as_bytes())?;
    let meta = ArtifactMeta { kind: "samples", job };
    put(
        "samples.tensors",
        &container::encode(&meta, &[("samples".to_string(), set.images.clone())]),
    )?;
    if let Some(t) = &set.trajectory {
        let meta = ArtifactMeta {
            kind: "trajectory",
            job,
        };
        put("trajectory.tensors", &container::encode(&meta, &t.to_named_tensors()))?;
    }
    if let Some(rows) = &set.band_stats {
        put("band_stats.csv", band_stats_csv(rows).as_bytes())?;
    }
    Ok(())
}

/// Writes the artifacts of `out` under `dir`; compare mode uses `baseline/`
/// and `freeu/` subdirectories. Returns the written paths.
pub fn write_artifacts(out: &JobOutput, job: &SampleJob, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    match &out.baseline {
        Some(base) => {
            write_set(base, job, &dir.join("baseline"), &mut files)?;
            write_set(&out.freeu, job, &dir.join("freeu"), &mut files)?;
        }
        None => write_set(&out.freeu, job, dir, &mut files)?,
    }
    let job_json = serde_json::to_string_pretty(job).expect("job serializes") + "\n";
    let p = dir.join("job.json");
    write_atomic(&p, job_json.as_bytes())?;
    files.push(p);
    Ok(files)
}

/// Loads the checkpoint at `ckpt`, runs `job` and writes its artifacts.
pub fn run_sample_job(ckpt: &Path, job: &SampleJob, dir: &Path) -> Result<(JobOutput, Vec<PathBuf>)> {
    let ckpt = Checkpoint::load(ckpt)?;
    let full = ckpt.config.schedule.build()?;
    let out = execute(&ckpt.model, &full, job)?;
    let files = write_artifacts(&out, job, dir)?;
    Ok((out, files))
}
