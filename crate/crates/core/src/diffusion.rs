//! ε-prediction training objective and ancestral DDPM sampling.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::schedule::{forward_noise, NoiseSchedule};
use crate::tensor::Tensor;
use crate::unet::{ParamVars, StageModulator, StageTap, UNetModel};

/// Tensor-level noise predictor used by the sampler.
pub trait Denoiser {
    /// `[C, H, W]` of one sample.
    fn sample_shape(&self) -> [usize; 3];

    fn predict_eps(
        &self,
        x_t: &Tensor,
        t: usize,
        modulator: Option<&dyn StageModulator>,
        tap: Option<&mut dyn FnMut(StageTap)>,
    ) -> Result<Tensor>;
}

impl Denoiser for UNetModel {
    fn sample_shape(&self) -> [usize; 3] {
        let c = self.config();
        [c.in_channels, c.image_size, c.image_size]
    }

    fn predict_eps(
        &self,
        x_t: &Tensor,
        t: usize,
        modulator: Option<&dyn StageModulator>,
        tap: Option<&mut dyn FnMut(StageTap)>,
    ) -> Result<Tensor> {
        self.forward(x_t, t, modulator, tap)
    }
}

/// Graph-level noise predictor used by the training objective.
pub trait EpsilonModel {
    fn forward_eps(&self, g: &mut Graph, x_t: Var, t: &[usize]) -> Result<Var>;
}

/// A [`UNetModel`] whose weights are already bound into a graph.
pub struct BoundUNet<'a> {
    pub model: &'a UNetModel,
    pub params: &'a ParamVars,
}

impl EpsilonModel for BoundUNet<'_> {
    fn forward_eps(&self, g: &mut Graph, x_t: Var, t: &[usize]) -> Result<Var> {
        self.model.forward_graph(g, self.params, x_t, t, None, None)
    }
}

/// Mean squared error between injected and predicted noise on a batch.
///
/// Per item, `t` is uniform in `1..=T` and `ε` is standard normal, both drawn
/// from `rng` in item order (timestep first).
pub fn training_loss(
    g: &mut Graph,
    model: &dyn EpsilonModel,
    x0: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<Var> {
    let [n, c, h, w] = x0.dims4()?;
    if n == 0 {
        return Err(Error::invalid("training_loss", "empty batch"));
    }
    let per = c * h * w;
    let mut ts = Vec::with_capacity(n);
    let mut noisy = Vec::with_capacity(n * per);
    let mut eps_all = Vec::with_capacity(n * per);
    for i in 0..n {
        let t = 1 + rng.below(schedule.len());
        let eps = rng.normal_tensor(&[1, c, h, w]);
        let item = x0.batch_item(i)?;
        noisy.extend_from_slice(forward_noise(&item, t, &eps, schedule)?.data());
        eps_all.extend_from_slice(eps.data());
        ts.push(t);
    }
    let x_t = g.constant(Tensor::new(vec![n, c, h, w], noisy)?);
    let target = g.constant(Tensor::new(vec![n, c, h, w], eps_all)?);
    let pred = model.forward_eps(g, x_t, &ts)?;
    g.mse(pred, target)
}

/// Features tapped at one stage during one sampling step.
#[derive(Clone, Debug)]
pub struct StageRecord {
    pub stage: usize,
    pub backbone: Tensor,
    pub skip: Tensor,
    pub fused: Tensor,
}

/// One executed sampling step.
#[derive(Clone, Debug)]
pub struct TrajectoryStep {
    /// Step index, `T` down to 1.
    pub t: usize,
    /// State entering the step.
    pub x_t: Tensor,
    /// `(x_t − √(1−ᾱ_t)·ε_θ) / √ᾱ_t`.
    pub x0_pred: Tensor,
    pub features: Vec<StageRecord>,
}

#[derive(Clone, Debug, Default)]
pub struct TrajectoryRecord {
    pub steps: Vec<TrajectoryStep>,
}

impl TrajectoryRecord {
    /// Flattens the record into named tensors, e.g. `step0200.x_t`,
    /// `step0200.stage2.skip`. Feature tensors are post-modulation.
    pub fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for s in &self.steps {
            out.push((format!("step{:04}.x_t", s.t), s.x_t.clone()));
            out.push((format!("step{:04}.x0_pred", s.t), s.x0_pred.clone()));
            for f in &s.features {
                let p = format!("step{:04}.stage{}", s.t, f.stage);
                out.push((format!("{p}.backbone"), f.backbone.clone()));
                out.push((format!("{p}.skip"), f.skip.clone()));
                out.push((format!("{p}.fused"), f.fused.clone()));
            }
        }
        out
    }
}

/// What [`sample`] keeps per step.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum RecordLevel {
    #[default]
    None,
    States,
    /// States plus post-modulation features of the listed decoder stages.
    StatesAndFeatures(Vec<usize>),
}

/// Per-stage observer called with `(t, tap)`.
pub type TapFn<'a> = dyn FnMut(usize, &StageTap) + 'a;

/// Sampling inputs besides model and schedule.
pub struct SampleRequest<'a> {
    pub seed: u64,
    pub count: usize,
    pub modulator: Option<&'a dyn StageModulator>,
    pub record: RecordLevel,
    /// Called with `(t, tap)` for every stage of every step.
    pub tap: Option<&'a mut TapFn<'a>>,
}

impl<'a> SampleRequest<'a> {
    pub fn new(seed: u64, count: usize) -> Self {
        Self {
            seed,
            count,
            modulator: None,
            record: RecordLevel::None,
            tap: None,
        }
    }

    pub fn with_modulator(mut self, m: &'a dyn StageModulator) -> Self {
        self.modulator = Some(m);
        self
    }

    pub fn recording(mut self, level: RecordLevel) -> Self {
        self.record = level;
        self
    }
}

/// Noise streams of one batch: item `i` draws `x_T` and then every `z` from
/// stream `i` of `seed`, independent of model outputs, so runs that differ only
/// in modulation share all noise.
struct NoiseStreams {
    rngs: Vec<SeededRng>,
    shape: [usize; 3],
}

impl NoiseStreams {
    fn new(seed: u64, count: usize, shape: [usize; 3]) -> Self {
        Self {
            rngs: (0..count as u64).map(|i| SeededRng::new(seed, i)).collect(),
            shape,
        }
    }

    fn draw(&mut self) -> Tensor {
        let [c, h, w] = self.shape;
        let mut data = Vec::with_capacity(self.rngs.len() * c * h * w);
        for rng in &mut self.rngs {
            data.extend(rng.normals(c * h * w));
        }
        Tensor::new(vec![self.rngs.len(), c, h, w], data).expect("noise shape")
    }
}

/// Ancestral sampling from `x_T ~ N(0, I)` with `σ_t² = β_t` and `z = 0` at `t = 1`.
pub fn sample(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    request: SampleRequest<'_>,
) -> Result<(Tensor, Option<TrajectoryRecord>)> {
    if request.count == 0 {
        return Err(Error::invalid("sample", "count must be at least 1"));
    }
    let mut noise = NoiseStreams::new(request.seed, request.count, model.sample_shape());
    let x_init = noise.draw();
    sample_from(model, schedule, x_init, &mut noise, request)
}

/// Like [`sample`] but starting from a caller-supplied `x_T` (noise for the
/// per-step `z` still comes from `seed`).
pub fn sample_from_state(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x_init: Tensor,
    request: SampleRequest<'_>,
) -> Result<(Tensor, Option<TrajectoryRecord>)> {
    let [n, c, h, w] = x_init.dims4()?;
    if [c, h, w] != model.sample_shape() || n != request.count {
        return Err(Error::shape(
            "sample",
            x_init.shape(),
            &[request.count, model.sample_shape()[0], model.sample_shape()[1], model.sample_shape()[2]],
        ));
    }
    let mut noise = NoiseStreams::new(request.seed, request.count, model.sample_shape());
    noise.draw();
    sample_from(model, schedule, x_init, &mut noise, request)
}

fn sample_from(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    mut x: Tensor,
    noise: &mut NoiseStreams,
    mut request: SampleRequest<'_>,
) -> Result<(Tensor, Option<TrajectoryRecord>)> {
    let mut record = match request.record {
        RecordLevel::None => None,
        _ => Some(TrajectoryRecord::default()),
    };
    let keep_stages: &[usize] = match &request.record {
        RecordLevel::StatesAndFeatures(s) => s,
        _ => &[],
    };
    for t in (1..=schedule.len()).rev() {
        let mut features = Vec::new();
        let mut user_tap = request.tap.as_deref_mut();
        let wants_tap = user_tap.is_some() || !keep_stages.is_empty();
        let mut on_tap = |tap: StageTap| {
            if let Some(f) = user_tap.as_deref_mut() {
                f(t, &tap);
            }
            if keep_stages.contains(&tap.stage) {
                features.push(StageRecord {
                    stage: tap.stage,
                    backbone: tap.backbone_modulated,
                    skip: tap.skip_modulated,
                    fused: tap.fused,
                });
            }
        };
        let tap_arg: Option<&mut dyn FnMut(StageTap)> = if wants_tap {
            Some(&mut on_tap)
        } else {
            None
        };
        let eps = model
            .predict_eps(&x, schedule.model_timestep(t), request.modulator, tap_arg)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::SamplingDiverged { step: t },
                other => other,
            })?;
        if eps.shape() != x.shape() {
            return Err(Error::shape("sample", x.shape(), eps.shape()));
        }
        let (alpha, beta, ab) = (schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t));
        let inv_sqrt_alpha = (1.0 / alpha.sqrt()) as f32;
        let eps_coef = (beta / (1.0 - ab).sqrt()) as f32;
        let mut next = x.zip_map(&eps, |xv, ev| inv_sqrt_alpha * (xv - eps_coef * ev))?;
        if t > 1 {
            let sigma = beta.sqrt() as f32;
            let z = noise.draw();
            for (v, zv) in next.data_mut().iter_mut().zip(z.data()) {
                *v += sigma * zv;
            }
        }
        if !next.is_finite() {
            return Err(Error::SamplingDiverged { step: t });
        }
        if let Some(rec) = record.as_mut() {
            let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let x0_pred = x.zip_map(&eps, |xv, ev| (xv - sb * ev) / sa)?;
            rec.steps.push(TrajectoryStep {
                t,
                x_t: x.clone(),
                x0_pred,
                features,
            });
        }
        x = next;
    }
    Ok((x, record))
}
