//! Small time-conditional U-Net with instrumented decoder concatenation sites.
//!
//! Decoder stages are numbered from 1 at the coarsest resolution. At every
//! stage the upsampled backbone features `x_l` and the matching encoder skip
//! features `h_l` pass through an optional [`StageModulator`] before being
//! concatenated backbone-first.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Resample, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const GROUP_NORM_EPS: f32 = 1e-5;

/// Channel order used at every decoder concatenation.
pub const CONCAT_ORDER: &str = "backbone-first";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub blocks_per_stage: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
    pub image_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            blocks_per_stage: 1,
            time_embed_dim: 64,
            norm_groups: 8,
            image_size: 32,
        }
    }
}

impl UNetConfig {
    pub fn stages(&self) -> usize {
        self.channel_mults.len()
    }

    fn widths(&self) -> Vec<usize> {
        self.channel_mults
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    fn hidden_time_dim(&self) -> usize {
        2 * self.time_embed_dim
    }

    /// Decoder concatenation sites for `size x size` inputs.
    pub fn stage_sites(&self, size: usize) -> Vec<StageSite> {
        let widths = self.widths();
        let l = widths.len();
        (1..=l)
            .map(|stage| {
                let level = l - stage;
                StageSite {
                    stage,
                    backbone_channels: if stage == 1 { widths[l - 1] } else { widths[level + 1] },
                    skip_channels: widths[level],
                    height: size >> level,
                    width: size >> level,
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let op = "unet_config";
        if self.stages() < 2 {
            return Err(Error::invalid(op, "at least two resolution stages are required"));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.norm_groups == 0 {
            return Err(Error::invalid(op, "channel counts and groups must be positive"));
        }
        if self.blocks_per_stage != 1 {
            return Err(Error::invalid(op, "only one residual block per stage is supported"));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid(op, "time embedding dimension must be even and positive"));
        }
        if let Some(w) = self.widths().iter().find(|&&w| w == 0 || w % self.norm_groups != 0) {
            return Err(Error::invalid(
                op,
                format!("width {w} not divisible by {} groups", self.norm_groups),
            ));
        }
        let factor = 1usize << (self.stages() - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(factor) {
            return Err(Error::invalid(
                op,
                format!("image size {} not divisible by {factor}", self.image_size),
            ));
        }
        Ok(())
    }
}

/// Backbone and skip features meeting at decoder stage `stage`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures {
    pub stage: usize,
    /// Backbone features `x_l`, `[N, C, H, W]`.
    pub backbone: Tensor,
    /// Skip features `h_l`, `[N, C_s, H, W]`.
    pub skip: Tensor,
}

/// Everything observed at one decoder stage during a forward pass.
#[derive(Clone, Debug)]
pub struct StageTap {
    pub stage: usize,
    pub backbone: Tensor,
    pub skip: Tensor,
    pub backbone_modulated: Tensor,
    pub skip_modulated: Tensor,
    /// Stage output after the residual block (before upsampling).
    pub fused: Tensor,
}

/// Rewrites the `(x_l, h_l)` pair before concatenation.
pub trait StageModulator {
    fn modulate(&self, features: StageFeatures) -> Result<StageFeatures>;
}

impl<F> StageModulator for F
where
    F: Fn(StageFeatures) -> Result<StageFeatures>,
{
    fn modulate(&self, features: StageFeatures) -> Result<StageFeatures> {
        self(features)
    }
}

/// Shape descriptor of one decoder concatenation site.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSite {
    pub stage: usize,
    pub backbone_channels: usize,
    pub skip_channels: usize,
    pub height: usize,
    pub width: usize,
}

/// `x̄_l[n, 0, h, w] = (1/C) Σ_i x_l[n, i, h, w]`.
pub fn stage_average_map(features: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = features.dims4()?;
    let plane = h * w;
    let d = features.data();
    let mut out = vec![0.0f32; n * plane];
    for s in 0..n {
        let dst = &mut out[s * plane..(s + 1) * plane];
        for ch in 0..c {
            let src = &d[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
        let inv = c as f32;
        for v in dst.iter_mut() {
            *v /= inv;
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| step as f64 * f).collect();
        out.extend(args.iter().map(|a| a.sin() as f32));
        out.extend(args.iter().map(|a| a.cos() as f32));
    }
    Tensor::new(vec![t.len(), dim], out).expect("embedding shape")
}

/// Named graph handles for every weight of a [`UNetModel`].
pub type ParamVars = BTreeMap<String, Var>;

#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel {
    config: UNetConfig,
    weights: BTreeMap<String, Tensor>,
}

fn weight_shapes(cfg: &UNetConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let td = cfg.time_embed_dim;
    let hid = cfg.hidden_time_dim();
    let linear = |name: &str, i: usize, o: usize, out: &mut Vec<_>| {
        out.push((format!("{name}.weight"), vec![o, i]));
        out.push((format!("{name}.bias"), vec![o]));
    };
    linear("time.lin1", td, hid, &mut out);
    linear("time.lin2", hid, hid, &mut out);
    let conv = |name: &str, i: usize, o: usize, k: usize, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{name}.weight"), vec![o, i, k, k]));
        out.push((format!("{name}.bias"), vec![o]));
    };
    let norm = |name: &str, c: usize, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{name}.gamma"), vec![c]));
        out.push((format!("{name}.beta"), vec![c]));
    };
    let res = |name: &str, i: usize, o: usize, out: &mut Vec<(String, Vec<usize>)>| {
        norm(&format!("{name}.norm1"), i, out);
        conv(&format!("{name}.conv1"), i, o, 3, out);
        out.push((format!("{name}.temb.weight"), vec![o, hid]));
        out.push((format!("{name}.temb.bias"), vec![o]));
        norm(&format!("{name}.norm2"), o, out);
        conv(&format!("{name}.conv2"), o, o, 3, out);
        if i != o {
            conv(&format!("{name}.shortcut"), i, o, 1, out);
        }
    };
    let widths = cfg.widths();
    let l = widths.len();
    conv("conv_in", cfg.in_channels, cfg.base_channels, 3, &mut out);
    let mut prev = cfg.base_channels;
    for (i, &w) in widths.iter().enumerate() {
        res(&format!("enc.{i}"), prev, w, &mut out);
        prev = w;
    }
    res("mid", prev, prev, &mut out);
    for stage in 1..=l {
        let level = l - stage;
        let backbone = if stage == 1 { widths[l - 1] } else { widths[level + 1] };
        let skip = widths[level];
        conv(&format!("dec.{stage}.reduce"), backbone + skip, skip, 3, &mut out);
        res(&format!("dec.{stage}.res"), skip, skip, &mut out);
    }
    norm("out.norm", widths[0], &mut out);
    conv("out.conv", widths[0], cfg.in_channels, 3, &mut out);
    out
}

impl UNetModel {
    /// Freshly initialised model: weights `N(0, 1/fan_in)`, biases 0, norms identity.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed, 0x756e_6574);
        let mut weights = BTreeMap::new();
        for (name, shape) in weight_shapes(&config) {
            let numel: usize = shape.iter().product();
            let t = if name.ends_with(".gamma") {
                Tensor::ones(shape)
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let std = (1.0 / fan_in as f64).sqrt() as f32;
                Tensor::new(shape, rng.normals(numel).into_iter().map(|v| v * std).collect())?
            };
            weights.insert(name, t);
        }
        Ok(Self { config, weights })
    }

    /// Rebuilds a model from a weight map, checking names and shapes.
    pub fn from_weights(config: UNetConfig, weights: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = weight_shapes(&config);
        if expected.len() != weights.len() {
            return Err(Error::invalid(
                "unet_weights",
                format!("expected {} tensors, got {}", expected.len(), weights.len()),
            ));
        }
        for (name, shape) in &expected {
            match weights.get(name) {
                Some(t) if t.shape() == shape.as_slice() && t.is_finite() => {}
                Some(t) => return Err(Error::shape("unet_weights", shape, t.shape())),
                None => {
                    return Err(Error::invalid("unet_weights", format!("missing tensor {name}")))
                }
            }
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn into_weights(self) -> BTreeMap<String, Tensor> {
        self.weights
    }

    /// Mutable access for optimizers; shapes must be preserved.
    pub fn weights_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.weights
    }

    pub fn weight_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.weights.get_mut(name)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.values().map(Tensor::numel).sum()
    }

    /// Decoder concatenation sites for `size x size` inputs.
    pub fn stage_sites_for(&self, size: usize) -> Vec<StageSite> {
        self.config.stage_sites(size)
    }

    /// Sites at the configured image size.
    pub fn stage_sites(&self) -> Vec<StageSite> {
        self.config.stage_sites(self.config.image_size)
    }

    /// Copies every weight into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        self.weights
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable)))
            .collect()
    }

    /// Predicted noise for a batch, one timestep per item.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &ParamVars,
        x_t: Var,
        t: &[usize],
        modulator: Option<&dyn StageModulator>,
        mut tap: Option<&mut dyn FnMut(StageTap)>,
    ) -> Result<Var> {
        let [n, c, h, w] = g.value(x_t).dims4()?;
        let factor = 1usize << (self.config.stages() - 1);
        if c != self.config.in_channels || h % factor != 0 || w % factor != 0 || t.len() != n {
            return Err(Error::invalid(
                "unet_forward",
                format!(
                    "input {:?} with {} timesteps incompatible with the model",
                    g.value(x_t).shape(),
                    t.len()
                ),
            ));
        }
        let mut b = Builder {
            g,
            p: params,
            groups: self.config.norm_groups,
        };

        let emb = b.g.constant(timestep_embedding(t, self.config.time_embed_dim));
        let temb = b.linear("time.lin1", emb)?;
        let temb = b.g.silu(temb)?;
        let temb = b.linear("time.lin2", temb)?;
        let temb = b.g.silu(temb)?;

        let stages = self.config.stages();
        let mut x = b.conv("conv_in", x_t, 1)?;
        let mut skips = Vec::with_capacity(stages);
        for i in 0..stages {
            x = b.res_block(&format!("enc.{i}"), x, temb)?;
            skips.push(x);
            if i + 1 < stages {
                x = b.g.resample(x, Resample::Down2Avg)?;
            }
        }
        x = b.res_block("mid", x, temb)?;
        for stage in 1..=stages {
            let skip = skips.pop().expect("balanced skip stack");
            let (xb, hs) = match modulator {
                None => (x, skip),
                Some(m) => {
                    let out = m.modulate(StageFeatures {
                        stage,
                        backbone: b.g.value(x).clone(),
                        skip: b.g.value(skip).clone(),
                    })?;
                    if out.backbone.shape() != b.g.value(x).shape()
                        || out.skip.shape() != b.g.value(skip).shape()
                    {
                        return Err(Error::shape(
                            "stage_modulator",
                            b.g.value(x).shape(),
                            out.backbone.shape(),
                        ));
                    }
                    (b.g.constant(out.backbone), b.g.constant(out.skip))
                }
            };
            let cat = b.g.concat_channels(xb, hs)?;
            let y = b.conv(&format!("dec.{stage}.reduce"), cat, 1)?;
            let y = b.res_block(&format!("dec.{stage}.res"), y, temb)?;
            if let Some(tap) = tap.as_deref_mut() {
                tap(StageTap {
                    stage,
                    backbone: b.g.value(x).clone(),
                    skip: b.g.value(skip).clone(),
                    backbone_modulated: b.g.value(xb).clone(),
                    skip_modulated: b.g.value(hs).clone(),
                    fused: b.g.value(y).clone(),
                });
            }
            x = if stage < stages {
                b.g.resample(y, Resample::Up2Nearest)?
            } else {
                y
            };
        }
        debug_assert!(skips.is_empty());
        let y = b.norm("out.norm", x)?;
        let y = b.g.silu(y)?;
        b.conv("out.conv", y, 1)
    }

    /// Inference forward pass at a single timestep.
    pub fn forward(
        &self,
        x_t: &Tensor,
        t: usize,
        modulator: Option<&dyn StageModulator>,
        tap: Option<&mut dyn FnMut(StageTap)>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let n = x_t.shape()[0];
        let out = self.forward_graph(&mut g, &params, x, &vec![t; n], modulator, tap)?;
        Ok(g.value(out).clone())
    }
}

struct Builder<'a> {
    g: &'a mut Graph,
    p: &'a ParamVars,
    groups: usize,
}

impl Builder<'_> {
    fn param(&self, name: &str) -> Result<Var> {
        self.p
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("unet_forward", format!("missing parameter {name}")))
    }

    fn conv(&mut self, name: &str, x: Var, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        let k = self.g.value(w).shape()[2];
        self.g.conv2d(x, w, b, 1, if k == 1 { 0 } else { pad })
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        self.g.linear(x, w, b)
    }

    fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        self.g.group_norm(x, self.groups, gamma, beta, GROUP_NORM_EPS)
    }

    /// GroupNorm → silu → conv, time projection added, GroupNorm → silu → conv, plus shortcut.
    fn res_block(&mut self, name: &str, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm(&format!("{name}.norm1"), x)?;
        let h = self.g.silu(h)?;
        let h = self.conv(&format!("{name}.conv1"), h, 1)?;
        let proj = self.linear(&format!("{name}.temb"), temb)?;
        let [n, c] = [self.g.value(proj).shape()[0], self.g.value(proj).shape()[1]];
        let proj = self.g.reshape(proj, &[n, c, 1, 1])?;
        let h = self.g.add(h, proj)?;
        let h = self.norm(&format!("{name}.norm2"), h)?;
        let h = self.g.silu(h)?;
        let h = self.conv(&format!("{name}.conv2"), h, 1)?;
        let shortcut = if self.p.contains_key(&format!("{name}.shortcut.weight")) {
            self.conv(&format!("{name}.shortcut"), x, 0)?
        } else {
            x
        };
        self.g.add(h, shortcut)
    }
}
