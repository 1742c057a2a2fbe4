//! Figure-reproduction pipelines producing CSV bundles.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use freeu_core::diffusion::{sample, RecordLevel, SampleRequest, TrajectoryRecord, TrajectoryStep};
use freeu_core::freeu::{FreeUConfig, FreeUStageConfig};
use freeu_core::schedule::NoiseSchedule;
use freeu_core::spectral::{
    feature_spectrum, fmt_sig9, split_low_high, trajectory_band_stats, BandStatRow,
    SpectrumProfile, DEFAULT_BANDS,
};
use freeu_core::tensor::Tensor;
use freeu_core::unet::{StageTap, UNetModel};
use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::error::{LabError, Result};
use crate::job::{encode_pgm, image_spectra, sampling_schedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FigureName {
    Fig2,
    Fig5,
    Fig6,
    Fig13,
}

impl FromStr for FigureName {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig2" => Ok(FigureName::Fig2),
            "fig5" => Ok(FigureName::Fig5),
            "fig6" => Ok(FigureName::Fig6),
            "fig13" => Ok(FigureName::Fig13),
            other => Err(LabError::field(
                "figure",
                format!("unknown figure {other:?}; expected fig2, fig5, fig6 or fig13"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FigureParams {
    pub seed: u64,
    /// Paired seeds (batch items) per run.
    pub count: usize,
    pub steps: usize,
    pub r_cut: f64,
    /// Backbone factors swept by fig5, applied to every default FreeU stage with `s = 1`.
    pub b_values: Vec<f64>,
    /// Modulation for fig13; fig5 takes its backbone scaling mode.
    pub freeu: FreeUConfig,
    /// Decoder stage observed by fig6.
    pub stage: usize,
}

impl FigureParams {
    pub fn new(model: &UNetModel, steps: usize) -> Self {
        Self {
            seed: 0,
            count: 16,
            steps,
            r_cut: 4.0,
            b_values: vec![1.0, 1.2, 1.4],
            freeu: FreeUConfig::default_for(&model.stage_sites()),
            stage: 2,
        }
    }
}

/// Per-item band statistics of a batched trajectory.
pub fn per_item_band_stats(record: &TrajectoryRecord, r_cut: f64) -> Result<Vec<Vec<BandStatRow>>> {
    let n = record
        .steps
        .first()
        .map(|s| s.x_t.shape()[0])
        .unwrap_or(0);
    (0..n)
        .map(|i| {
            let single = TrajectoryRecord {
                steps: record
                    .steps
                    .iter()
                    .map(|s| {
                        Ok(TrajectoryStep {
                            t: s.t,
                            x_t: s.x_t.batch_item(i)?,
                            x0_pred: s.x0_pred.batch_item(i)?,
                            features: Vec::new(),
                        })
                    })
                    .collect::<Result<_, freeu_core::Error>>()?,
            };
            Ok(trajectory_band_stats(&single, r_cut)?)
        })
        .collect()
}

/// Mean `|Δ|` of the low and high band over the final `fraction` of rows.
pub fn tail_mean_deltas(rows: &[BandStatRow], fraction: f64) -> (f64, f64) {
    let k = ((rows.len() as f64) * fraction).ceil() as usize;
    let tail = &rows[rows.len() - k.clamp(1, rows.len())..];
    let n = tail.len() as f64;
    (
        tail.iter().map(|r| r.delta_low).sum::<f64>() / n,
        tail.iter().map(|r| r.delta_high).sum::<f64>() / n,
    )
}

#[derive(Clone, Debug)]
pub struct Fig2 {
    /// Row-wise mean over items of the per-item statistics.
    pub mean_rows: Vec<BandStatRow>,
    /// Per item: mean `|Δ|` (low, high) over the final 75% of steps.
    pub tail_deltas: Vec<(f64, f64)>,
    /// `(t, x_t, low, high)` of item 0 at a few steps.
    pub decomposed: Vec<(usize, Tensor, Tensor, Tensor)>,
}

pub fn fig2(model: &UNetModel, full: &NoiseSchedule, p: &FigureParams) -> Result<Fig2> {
    let schedule = sampling_schedule(full, p.steps)?;
    let req = SampleRequest::new(p.seed, p.count).recording(RecordLevel::States);
    let (_, record) = sample(model, &schedule, req)?;
    let record = record.expect("states recorded");
    let per_item = per_item_band_stats(&record, p.r_cut)?;
    let steps = record.steps.len();
    let n = per_item.len() as f64;
    let mean_rows = (0..steps)
        .map(|k| {
            let avg = |f: fn(&BandStatRow) -> f64| per_item.iter().map(|r| f(&r[k])).sum::<f64>() / n;
            BandStatRow {
                t: per_item[0][k].t,
                low: avg(|r| r.low),
                high: avg(|r| r.high),
                delta_low: avg(|r| r.delta_low),
                delta_high: avg(|r| r.delta_high),
            }
        })
        .collect();
    let tail_deltas = per_item.iter().map(|r| tail_mean_deltas(r, 0.75)).collect();
    let picks = 5.min(steps);
    let mut decomposed = Vec::with_capacity(picks);
    for j in 0..picks {
        let k = if picks == 1 { 0 } else { j * (steps - 1) / (picks - 1) };
        let s = &record.steps[k];
        let item = s.x_t.batch_item(0)?;
        let [_, _, h, w] = item.dims4()?;
        let plane = item.clone().reshape(vec![h, w])?;
        let (low, high) = split_low_high(&plane, p.r_cut)?;
        decomposed.push((s.t, plane, low, high));
    }
    Ok(Fig2 {
        mean_rows,
        tail_deltas,
        decomposed,
    })
}

/// Copy of `template` with backbone factor `b` and `s = 1` on every stage.
pub fn backbone_sweep_config(template: &FreeUConfig, b: f64) -> FreeUConfig {
    FreeUConfig {
        enabled: true,
        backbone_scaling: template.backbone_scaling,
        stages: template
            .stages
            .iter()
            .map(|s| FreeUStageConfig {
                backbone_factor: b,
                skip_factor: 1.0,
                ..s.clone()
            })
            .collect(),
    }
}

#[derive(Clone, Debug)]
pub struct Fig5 {
    /// `(b, mean profile, per-sample profiles)`.
    pub runs: Vec<(f64, SpectrumProfile, Vec<SpectrumProfile>)>,
}

impl Fig5 {
    /// Per-sample top-quartile means for run `i`.
    pub fn top_quartiles(&self, i: usize) -> Vec<f64> {
        self.runs[i].2.iter().map(SpectrumProfile::top_quartile_mean).collect()
    }
}

pub fn fig5(model: &UNetModel, full: &NoiseSchedule, p: &FigureParams) -> Result<Fig5> {
    let schedule = sampling_schedule(full, p.steps)?;
    let template = FreeUConfig::default_for(&model.stage_sites());
    let mut runs = Vec::with_capacity(p.b_values.len());
    for &b in &p.b_values {
        let cfg = FreeUConfig {
            backbone_scaling: p.freeu.backbone_scaling,
            ..backbone_sweep_config(&template, b)
        };
        cfg.check(Some(model.config().stages()))?;
        let req = SampleRequest::new(p.seed, p.count).with_modulator(&cfg);
        let (images, _) = sample(model, &schedule, req)?;
        let (spectra, mean) = image_spectra(&images)?;
        runs.push((b, mean, spectra));
    }
    Ok(Fig5 { runs })
}

#[derive(Clone, Debug)]
pub struct Fig6 {
    pub backbone: SpectrumProfile,
    pub skip: SpectrumProfile,
    pub fused: SpectrumProfile,
}

/// Stage features observed at every step of an unmodulated run, profiles
/// averaged over steps, channels and items.
pub fn fig6(model: &UNetModel, full: &NoiseSchedule, p: &FigureParams) -> Result<Fig6> {
    let schedule = sampling_schedule(full, p.steps)?;
    if p.stage == 0 || p.stage > model.config().stages() {
        return Err(LabError::field("stage", format!("no decoder stage {}", p.stage)));
    }
    let mut acc: Vec<[SpectrumProfile; 3]> = Vec::new();
    let mut failure = None;
    let mut tap = |_t: usize, tap: &StageTap| {
        if tap.stage != p.stage || failure.is_some() {
            return;
        }
        let profiles = (|| -> freeu_core::Result<[SpectrumProfile; 3]> {
            Ok([
                feature_spectrum(&tap.backbone, DEFAULT_BANDS)?,
                feature_spectrum(&tap.skip, DEFAULT_BANDS)?,
                feature_spectrum(&tap.fused, DEFAULT_BANDS)?,
            ])
        })();
        match profiles {
            Ok(v) => acc.push(v),
            Err(e) => failure = Some(e),
        }
    };
    let mut req = SampleRequest::new(p.seed, p.count);
    req.tap = Some(&mut tap);
    sample(model, &schedule, req)?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let avg = |i: usize| SpectrumProfile::average(&acc.iter().map(|a| a[i].clone()).collect::<Vec<_>>());
    Ok(Fig6 {
        backbone: avg(0)?,
        skip: avg(1)?,
        fused: avg(2)?,
    })
}

#[derive(Clone, Debug)]
pub struct Fig13 {
    /// `(t, baseline x_t profile, FreeU x_t profile)`, averaged over items.
    pub steps: Vec<(usize, SpectrumProfile, SpectrumProfile)>,
}

impl Fig13 {
    /// Steps at which the FreeU top-quartile amplitude is at most the baseline's.
    pub fn fraction_not_above(&self) -> f64 {
        let hits = self
            .steps
            .iter()
            .filter(|(_, b, f)| f.top_quartile_mean() <= b.top_quartile_mean())
            .count();
        hits as f64 / self.steps.len() as f64
    }
}

fn step_profiles(record: &TrajectoryRecord) -> Result<Vec<(usize, SpectrumProfile)>> {
    record
        .steps
        .iter()
        .map(|s| Ok((s.t, feature_spectrum(&s.x_t, DEFAULT_BANDS)?)))
        .collect()
}

pub fn fig13(model: &UNetModel, full: &NoiseSchedule, p: &FigureParams) -> Result<Fig13> {
    let schedule = sampling_schedule(full, p.steps)?;
    p.freeu.check(Some(model.config().stages()))?;
    let run = |m: Option<&FreeUConfig>| -> Result<Vec<(usize, SpectrumProfile)>> {
        let mut req = SampleRequest::new(p.seed, p.count).recording(RecordLevel::States);
        if let Some(m) = m.filter(|m| m.enabled) {
            req = req.with_modulator(m);
        }
        let (_, rec) = sample(model, &schedule, req)?;
        step_profiles(&rec.expect("states recorded"))
    };
    let base = run(None)?;
    let freeu = run(Some(&p.freeu))?;
    Ok(Fig13 {
        steps: base
            .into_iter()
            .zip(freeu)
            .map(|((t, b), (_, f))| (t, b, f))
            .collect(),
    })
}

fn profile_rows(out: &mut String, label: &str, p: &SpectrumProfile) {
    for (k, v) in p.values.iter().enumerate() {
        out.push_str(&format!(
            "{label},{},{},{}\n",
            fmt_sig9(p.band_edges[k]),
            fmt_sig9(p.band_edges[k + 1]),
            fmt_sig9(*v)
        ));
    }
}

/// Runs a pipeline and writes its bundle under `dir/<name>/`.
pub fn run_figure(
    name: FigureName,
    model: &UNetModel,
    full: &NoiseSchedule,
    p: &FigureParams,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let base = dir.join(match name {
        FigureName::Fig2 => "fig2",
        FigureName::Fig5 => "fig5",
        FigureName::Fig6 => "fig6",
        FigureName::Fig13 => "fig13",
    });
    let mut put = |file: &str, bytes: &[u8]| -> Result<()> {
        let path = base.join(file);
        write_atomic(&path, bytes)?;
        files.push(path);
        Ok(())
    };
    match name {
        FigureName::Fig2 => {
            let f = fig2(model, full, p)?;
            put("band_stats.csv", freeu_core::spectral::band_stats_csv(&f.mean_rows).as_bytes())?;
            let mut s = String::from("item,mean_delta_low,mean_delta_high\n");
            for (i, (l, h)) in f.tail_deltas.iter().enumerate() {
                s.push_str(&format!("{i},{},{}\n", fmt_sig9(*l), fmt_sig9(*h)));
            }
            put("tail_deltas.csv", s.as_bytes())?;
            for (t, x, low, high) in &f.decomposed {
                put(&format!("step{t:04}_x.pgm"), &encode_pgm(x)?)?;
                put(&format!("step{t:04}_low.pgm"), &encode_pgm(low)?)?;
                put(&format!("step{t:04}_high.pgm"), &encode_pgm(high)?)?;
            }
        }
        FigureName::Fig5 => {
            let f = fig5(model, full, p)?;
            let mut s = String::from("b,band_lo,band_hi,rel_log_amp\n");
            for (b, mean, _) in &f.runs {
                profile_rows(&mut s, &fmt_sig9(*b), mean);
            }
            put("profiles.csv", s.as_bytes())?;
            let mut s = String::from("b,item,top_quartile\n");
            for (i, (b, _, _)) in f.runs.iter().enumerate() {
                for (j, v) in f.top_quartiles(i).iter().enumerate() {
                    s.push_str(&format!("{},{j},{}\n", fmt_sig9(*b), fmt_sig9(*v)));
                }
            }
            put("top_quartile.csv", s.as_bytes())?;
        }
        FigureName::Fig6 => {
            let f = fig6(model, full, p)?;
            let mut s = String::from("feature,band_lo,band_hi,rel_log_amp\n");
            profile_rows(&mut s, "backbone", &f.backbone);
            profile_rows(&mut s, "skip", &f.skip);
            profile_rows(&mut s, "fused", &f.fused);
            put("profiles.csv", s.as_bytes())?;
        }
        FigureName::Fig13 => {
            let f = fig13(model, full, p)?;
            let mut s = String::from("variant,t,band_lo,band_hi,rel_log_amp\n");
            for (t, b, _) in &f.steps {
                profile_rows(&mut s, &format!("baseline,{t}"), b);
            }
            for (t, _, fr) in &f.steps {
                profile_rows(&mut s, &format!("freeu,{t}"), fr);
            }
            put("profiles.csv", s.as_bytes())?;
            let mut s = String::from("t,baseline_top_quartile,freeu_top_quartile\n");
            for (t, b, fr) in &f.steps {
                s.push_str(&format!(
                    "{t},{},{}\n",
                    fmt_sig9(b.top_quartile_mean()),
                    fmt_sig9(fr.top_quartile_mean())
                ));
            }
            put("top_quartile.csv", s.as_bytes())?;
        }
    }
    Ok(files)
}

