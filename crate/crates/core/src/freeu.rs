//! FreeU decoder-stage modulation.
//!
//! Backbone features are amplified by a structure-related factor map built from
//! their channel mean, restricted to the leading fraction of channels. Skip
//! features have their low-frequency Fourier coefficients (radius below a
//! threshold on the centred spectrum) scaled by `s`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{centered_radii, filter_plane, symmetrize_centered};
use crate::tensor::Tensor;
use crate::unet::{stage_average_map, StageFeatures, StageModulator, StageSite};

fn default_fraction() -> f64 {
    0.5
}

/// How the backbone amplification factor is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneScaling {
    /// Min–max normalised channel-mean map, from 1 up to `b`.
    #[default]
    StructureRelated,
    /// The constant `b` everywhere (ablation).
    Constant,
}

/// Factors for one decoder stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeUStageConfig {
    #[serde(rename = "l")]
    pub stage: usize,
    #[serde(rename = "b_l")]
    pub backbone_factor: f64,
    #[serde(rename = "s_l")]
    pub skip_factor: f64,
    /// Radial threshold in frequency-grid cells.
    pub r_thresh: f64,
    #[serde(default = "default_fraction")]
    pub channel_fraction: f64,
}

/// A single validation failure, addressed by its serialized field path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FreeUStageConfig {
    pub fn new(stage: usize, b: f64, s: f64, r_thresh: f64) -> Self {
        Self {
            stage,
            backbone_factor: b,
            skip_factor: s,
            r_thresh,
            channel_fraction: default_fraction(),
        }
    }

    /// `b = 1` and `s = 1`: the stage must be left bit-exactly untouched.
    pub fn is_identity(&self) -> bool {
        self.backbone_factor == 1.0 && self.skip_factor == 1.0
    }

    pub fn validate(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let mut fail = |field: &str, message: String| {
            errs.push(FieldError {
                field: format!("{prefix}{field}"),
                message,
            })
        };
        let b = self.backbone_factor;
        if !(b.is_finite() && b > 0.0) {
            fail("b_l", format!("must be finite and > 0, got {b}"));
        }
        let s = self.skip_factor;
        if !(s.is_finite() && s >= 0.0) {
            fail("s_l", format!("must be finite and >= 0, got {s}"));
        }
        let r = self.r_thresh;
        if !(r.is_finite() && r >= 0.0) {
            fail("r_thresh", format!("must be finite and >= 0, got {r}"));
        }
        let f = self.channel_fraction;
        if !(f > 0.0 && f <= 1.0) {
            fail("channel_fraction", format!("must lie in (0, 1], got {f}"));
        }
        if self.stage == 0 {
            fail("l", "decoder stages are numbered from 1".into());
        }
        errs
    }
}

/// Full modulation setup attached to one sampling run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeUConfig {
    pub enabled: bool,
    #[serde(default)]
    pub backbone_scaling: BackboneScaling,
    #[serde(default)]
    pub stages: Vec<FreeUStageConfig>,
}

impl Default for FreeUConfig {
    fn default() -> Self {
        Self::disabled()
    }
}

impl FreeUConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            backbone_scaling: BackboneScaling::StructureRelated,
            stages: Vec::new(),
        }
    }

    /// Tuned defaults on the two coarsest decoder stages, `r_thresh = H_l / 4`.
    pub fn default_for(sites: &[StageSite]) -> Self {
        let pick = |stage: usize, b: f64, s: f64| {
            sites.iter().find(|site| site.stage == stage).map(|site| {
                FreeUStageConfig::new(stage, b, s, site.height as f64 / 4.0)
            })
        };
        Self {
            enabled: true,
            backbone_scaling: BackboneScaling::StructureRelated,
            stages: [pick(1, 1.3, 0.9), pick(2, 1.2, 0.9)]
                .into_iter()
                .flatten()
                .collect(),
        }
    }

    /// Enabled config with `b = s = 1` on the given stages.
    pub fn identity(stages: &[usize]) -> Self {
        Self {
            enabled: true,
            backbone_scaling: BackboneScaling::StructureRelated,
            stages: stages
                .iter()
                .map(|&l| FreeUStageConfig::new(l, 1.0, 1.0, 0.0))
                .collect(),
        }
    }

    pub fn stage(&self, l: usize) -> Option<&FreeUStageConfig> {
        self.stages.iter().find(|s| s.stage == l)
    }

    /// Field-level validation; `stage_count` bounds the stage indices when known.
    pub fn validate(&self, stage_count: Option<usize>) -> Vec<FieldError> {
        let mut errs = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            let prefix = format!("stages[{i}].");
            errs.extend(s.validate(&prefix));
            if let Some(n) = stage_count {
                if s.stage > n {
                    errs.push(FieldError {
                        field: format!("{prefix}l"),
                        message: format!("decoder has stages 1..={n}, got {}", s.stage),
                    });
                }
            }
            if self.stages[..i].iter().any(|o| o.stage == s.stage) {
                errs.push(FieldError {
                    field: format!("{prefix}l"),
                    message: format!("duplicate entry for stage {}", s.stage),
                });
            }
        }
        errs
    }

    pub fn check(&self, stage_count: Option<usize>) -> Result<()> {
        let errs = self.validate(stage_count);
        match errs.first() {
            None => Ok(()),
            Some(e) => Err(Error::invalid(
                "freeu_config",
                format!("{}: {}", e.field, e.message),
            )),
        }
    }
}

impl StageModulator for FreeUConfig {
    fn modulate(&self, features: StageFeatures) -> Result<StageFeatures> {
        if !self.enabled {
            return Ok(features);
        }
        match self.stage(features.stage) {
            Some(cfg) => modulate_stage_with(features, cfg, self.backbone_scaling),
            None => Ok(features),
        }
    }
}

/// Per-sample backbone factor map `α`, `[N, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorMap(pub Tensor);

impl FactorMap {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// `α = (b − 1)·(x̄ − min)/(max − min) + 1` with per-sample spatial min/max;
/// `α ≡ 1` when the map is constant.
pub fn backbone_factor_map(mean_map: &Tensor, b: f64) -> Result<FactorMap> {
    let [n, c, h, w] = mean_map.dims4()?;
    if c != 1 {
        return Err(Error::invalid(
            "backbone_factor_map",
            format!("expected a single-channel map, got {c} channels"),
        ));
    }
    if !mean_map.is_finite() {
        return Err(Error::NonFinite {
            op: "backbone_factor_map",
        });
    }
    let plane = h * w;
    let (lo_b, hi_b) = (b.min(1.0), b.max(1.0));
    let mut out = Vec::with_capacity(n * plane);
    for s in mean_map.data().chunks_exact(plane) {
        let min = s.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let max = s.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        if max == min {
            out.extend(std::iter::repeat_n(1.0f32, plane));
            continue;
        }
        let range = max - min;
        out.extend(s.iter().map(|&v| {
            let a = (b - 1.0) * ((v as f64 - min) / range) + 1.0;
            a.clamp(lo_b, hi_b) as f32
        }));
    }
    Ok(FactorMap(Tensor::new(vec![n, 1, h, w], out)?))
}

/// Number of leading channels scaled: `floor(C · fraction)`.
pub fn scaled_channel_count(channels: usize, fraction: f64) -> usize {
    ((channels as f64 * fraction).floor() as usize).min(channels)
}

/// Multiplies channels `i < floor(C · fraction)` by `α`; the rest are copied bit-exactly.
pub fn apply_backbone_scaling(x: &Tensor, alpha: &FactorMap, fraction: f64) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let a = alpha.tensor();
    if a.shape() != [n, 1, h, w] {
        return Err(Error::shape("apply_backbone_scaling", x.shape(), a.shape()));
    }
    let k = scaled_channel_count(c, fraction);
    let plane = h * w;
    let mut out = x.data().to_vec();
    for s in 0..n {
        let amap = &a.data()[s * plane..(s + 1) * plane];
        for ch in 0..k {
            let dst = &mut out[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            for (v, m) in dst.iter_mut().zip(amap) {
                *v *= m;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Centred Fourier mask: `s` where `r < r_thresh`, 1 elsewhere, symmetrised
/// with its conjugate mirror.
pub fn radial_mask(h: usize, w: usize, r_thresh: f64, s: f64) -> Tensor {
    let mask = radial_mask_f64(h, w, r_thresh, s);
    Tensor::new(vec![h, w], mask.into_iter().map(|v| v as f32).collect())
        .expect("mask extents are positive")
}

fn radial_mask_f64(h: usize, w: usize, r_thresh: f64, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = centered_radii(h, w)
        .into_iter()
        .map(|r| if r < r_thresh { s } else { 1.0 })
        .collect();
    symmetrize_centered(&raw, h, w)
}

/// Scales each skip channel's low-frequency coefficients by `s`.
pub fn apply_skip_spectral(h_feat: &Tensor, s: f64, r_thresh: f64) -> Result<Tensor> {
    let [_, _, h, w] = h_feat.dims4()?;
    crate::fft::check_pow2("apply_skip_spectral", h, w)?;
    if !h_feat.is_finite() {
        return Err(Error::NonFinite {
            op: "apply_skip_spectral",
        });
    }
    let mask = radial_mask_f64(h, w, r_thresh, s);
    let mut out = Vec::with_capacity(h_feat.numel());
    for plane in h_feat.data().chunks_exact(h * w) {
        out.extend(filter_plane("apply_skip_spectral", plane, h, w, &mask)?);
    }
    Tensor::new(h_feat.shape().to_vec(), out)
}

/// Structure-related FreeU modulation of one stage.
pub fn modulate_stage(features: StageFeatures, cfg: &FreeUStageConfig) -> Result<StageFeatures> {
    modulate_stage_with(features, cfg, BackboneScaling::StructureRelated)
}

pub fn modulate_stage_with(
    features: StageFeatures,
    cfg: &FreeUStageConfig,
    scaling: BackboneScaling,
) -> Result<StageFeatures> {
    if cfg.stage != features.stage {
        return Err(Error::invalid(
            "modulate_stage",
            format!("config for stage {} applied to stage {}", cfg.stage, features.stage),
        ));
    }
    if cfg.is_identity() {
        return Ok(features);
    }
    let StageFeatures {
        stage,
        backbone,
        skip,
    } = features;
    let backbone = if cfg.backbone_factor == 1.0 {
        backbone
    } else {
        let alpha = match scaling {
            BackboneScaling::StructureRelated => {
                backbone_factor_map(&stage_average_map(&backbone)?, cfg.backbone_factor)?
            }
            BackboneScaling::Constant => {
                let [n, _, h, w] = backbone.dims4()?;
                FactorMap(Tensor::full(vec![n, 1, h, w], cfg.backbone_factor as f32))
            }
        };
        apply_backbone_scaling(&backbone, &alpha, cfg.channel_fraction)?
    };
    let skip = if cfg.skip_factor == 1.0 {
        skip
    } else {
        apply_skip_spectral(&skip, cfg.skip_factor, cfg.r_thresh)?
    };
    Ok(StageFeatures {
        stage,
        backbone,
        skip,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(n: usize, c: usize, h: usize, w: usize, f: impl FnMut(usize) -> f32) -> Tensor {
        Tensor::from_fn(vec![n, c, h, w], f)
    }

    #[test]
    fn factor_map_linear_endpoints() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let a = backbone_factor_map(&x, 1.6).unwrap();
        let want = [1.0, 1.6, 1.3, 1.15];
        for (g, w) in a.tensor().data().iter().zip(want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
        let a = backbone_factor_map(&x, 1.0).unwrap();
        assert!(a.tensor().data().iter().all(|&v| v == 1.0));
        let c = Tensor::full(vec![2, 1, 3, 3], -0.4);
        let a = backbone_factor_map(&c, 1.8).unwrap();
        assert!(a.tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backbone_scaling_channel_rules() {
        let x = t4(1, 4, 2, 2, |i| i as f32 - 7.5);
        let two = FactorMap(Tensor::full(vec![1, 1, 2, 2], 2.0));
        let y = apply_backbone_scaling(&x, &two, 0.5).unwrap();
        assert!(y.slice_channels(0, 2).unwrap().bit_eq(&x.slice_channels(0, 2).unwrap().map(|v| 2.0 * v)));
        assert!(y.slice_channels(2, 4).unwrap().bit_eq(&x.slice_channels(2, 4).unwrap()));

        let one = FactorMap(Tensor::ones(vec![1, 1, 2, 2]));
        assert!(apply_backbone_scaling(&x, &one, 1.0).unwrap().bit_eq(&x));

        let x5 = t4(1, 5, 2, 2, |i| i as f32 + 1.0);
        let y5 = apply_backbone_scaling(&x5, &two, 0.5).unwrap();
        let changed = (0..5)
            .filter(|&c| !y5.slice_channels(c, c + 1).unwrap().bit_eq(&x5.slice_channels(c, c + 1).unwrap()))
            .count();
        assert_eq!(changed, 2);

        let wrong = FactorMap(Tensor::ones(vec![1, 1, 3, 2]));
        assert!(apply_backbone_scaling(&x, &wrong, 0.5).is_err());
    }

    #[test]
    fn radial_mask_examples() {
        let m = radial_mask(4, 4, 1.0, 0.5);
        for y in 0..4 {
            for x in 0..4 {
                let want = if (y, x) == (2, 2) { 0.5 } else { 1.0 };
                assert_eq!(m.data()[y * 4 + x], want);
            }
        }
        assert!(radial_mask(8, 8, 0.0, 0.3).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn skip_spectral_unit_mask_and_dc_kill() {
        let h = t4(2, 3, 8, 8, |i| ((i * 37 % 11) as f32 - 5.0) * 0.1);
        let y = apply_skip_spectral(&h, 1.0, 3.0).unwrap();
        assert!(y.max_abs_diff(&h).unwrap() <= 1e-5);
        let c = Tensor::full(vec![1, 2, 8, 8], 1.7);
        let y = apply_skip_spectral(&c, 0.0, 1.0).unwrap();
        assert!(y.data().iter().all(|v| v.abs() <= 1e-5));
    }

    #[test]
    fn identity_config_returns_input() {
        let f = StageFeatures {
            stage: 2,
            backbone: t4(1, 4, 4, 4, |i| i as f32),
            skip: t4(1, 2, 4, 4, |i| -(i as f32)),
        };
        let out = modulate_stage(f.clone(), &FreeUStageConfig::new(2, 1.0, 1.0, 2.0)).unwrap();
        assert_eq!(out, f);
        assert!(modulate_stage(f, &FreeUStageConfig::new(1, 1.2, 1.0, 2.0)).is_err());
    }

    #[test]
    fn b_only_leaves_skip_untouched() {
        let f = StageFeatures {
            stage: 1,
            backbone: t4(1, 4, 4, 4, |i| ((i * 7) % 13) as f32 * 0.1),
            skip: t4(1, 2, 4, 4, |i| (i as f32 * 0.3).sin()),
        };
        let out = modulate_stage(f.clone(), &FreeUStageConfig::new(1, 1.4, 1.0, 2.0)).unwrap();
        assert!(out.skip.bit_eq(&f.skip));
        assert!(!out.backbone.slice_channels(0, 2).unwrap().bit_eq(&f.backbone.slice_channels(0, 2).unwrap()));
        assert!(out.backbone.slice_channels(2, 4).unwrap().bit_eq(&f.backbone.slice_channels(2, 4).unwrap()));
    }

    #[test]
    fn constant_scaling_multiplies_by_b() {
        let f = StageFeatures {
            stage: 1,
            backbone: t4(1, 2, 2, 2, |i| i as f32 + 1.0),
            skip: t4(1, 1, 2, 2, |_| 0.0),
        };
        let cfg = FreeUStageConfig::new(1, 1.5, 1.0, 0.0);
        let out = modulate_stage_with(f, &cfg, BackboneScaling::Constant).unwrap();
        assert_eq!(out.backbone.data(), &[1.5, 3.0, 4.5, 6.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn validation_names_fields() {
        let mut cfg = FreeUConfig::default_for(&[]);
        cfg.stages.push(FreeUStageConfig::new(1, -1.0, 0.5, 2.0));
        cfg.stages.push(FreeUStageConfig::new(1, 1.2, -0.1, -1.0));
        let errs = cfg.validate(Some(3));
        let fields: Vec<_> = errs.iter().map(|e| e.field.as_str()).collect();
        assert!(fields.contains(&"stages[0].b_l"));
        assert!(fields.contains(&"stages[1].s_l"));
        assert!(fields.contains(&"stages[1].r_thresh"));
        assert!(fields.contains(&"stages[1].l"));
        let far = FreeUConfig {
            stages: vec![FreeUStageConfig::new(4, 1.1, 1.0, 0.0)],
            ..FreeUConfig::disabled()
        };
        assert_eq!(far.validate(Some(3))[0].field, "stages[0].l");
    }
}
