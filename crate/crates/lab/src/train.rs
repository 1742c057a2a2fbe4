//! Training loop with periodic evaluation snapshots and divergence handling.

use std::collections::BTreeMap;
use std::path::Path;

use freeu_core::autodiff::Graph;
use freeu_core::diffusion::{training_loss, BoundUNet};
use freeu_core::rng::SeededRng;
use freeu_core::schedule::NoiseSchedule;
use freeu_core::spectral::fmt_sig9;
use freeu_core::tensor::Tensor;
use freeu_core::Error as CoreError;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::container::write_atomic;
use crate::dataset::synth_from_spec;
use crate::error::{LabError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// `(step, training loss)` for every step run.
    pub losses: Vec<(u64, f64)>,
    /// `(step, evaluation loss)` at every snapshot.
    pub evals: Vec<(u64, f64)>,
}

impl TrainLog {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (s, l) in &self.losses {
            out.push_str(&format!("{s},{}\n", fmt_sig9(*l)));
        }
        out
    }

    pub fn eval_csv(&self) -> String {
        let mut out = String::from("step,eval_loss\n");
        for (s, l) in &self.evals {
            out.push_str(&format!("{s},{}\n", fmt_sig9(*l)));
        }
        out
    }
}

/// Trailing-window mean of the logged loss ending at `step` (inclusive).
pub fn smoothed_loss(losses: &[(u64, f64)], step: u64, window: usize) -> Option<f64> {
    let end = losses.iter().position(|&(s, _)| s == step)? + 1;
    let start = end.saturating_sub(window);
    let w = &losses[start..end];
    Some(w.iter().map(|(_, l)| l).sum::<f64>() / w.len() as f64)
}

/// Mean loss of the first `eval_batch` images under a fixed noise stream.
pub fn eval_loss(ckpt: &Checkpoint, dataset: &Tensor, schedule: &NoiseSchedule) -> Result<f64> {
    let n = ckpt.config.train.eval_batch.min(dataset.shape()[0]);
    let items: Vec<Tensor> = (0..n).map(|i| dataset.batch_item(i)).collect::<Result<_, _>>()?;
    let x0 = Tensor::stack_batch(&items)?;
    let mut g = Graph::new();
    let params = ckpt.model.bind(&mut g, false);
    let bound = BoundUNet {
        model: &ckpt.model,
        params: &params,
    };
    let mut rng = SeededRng::new(ckpt.config.train.seed, 2);
    let loss = training_loss(&mut g, &bound, &x0, schedule, &mut rng)?;
    Ok(g.value(loss).data()[0] as f64)
}

/// One optimizer step. On a non-finite loss or gradient the checkpoint is left
/// exactly as it was before the call.
pub fn train_step(ckpt: &mut Checkpoint, dataset: &Tensor, schedule: &NoiseSchedule) -> Result<f64> {
    let next = ckpt.step + 1;
    let rng_before = ckpt.rng.clone();
    let diverged = |ckpt: &mut Checkpoint| {
        ckpt.rng = rng_before.clone();
        LabError::TrainingDiverged {
            step: next,
            checkpoint: Default::default(),
        }
    };
    let count = dataset.shape()[0];
    let items: Vec<Tensor> = (0..ckpt.config.train.batch)
        .map(|_| dataset.batch_item(ckpt.rng.below(count)))
        .collect::<Result<_, _>>()?;
    let x0 = Tensor::stack_batch(&items)?;

    let mut g = Graph::new();
    let params = ckpt.model.bind(&mut g, true);
    let bound = BoundUNet {
        model: &ckpt.model,
        params: &params,
    };
    let outcome = training_loss(&mut g, &bound, &x0, schedule, &mut ckpt.rng)
        .and_then(|loss| g.backward(loss).map(|_| loss));
    let loss = match outcome {
        Ok(l) => l,
        Err(CoreError::NonFinite { .. }) => return Err(diverged(ckpt)),
        Err(e) => return Err(e.into()),
    };
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(diverged(ckpt));
    }
    let grads: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(k, &v)| (k.clone(), g.grad_or_zeros(v)))
        .collect();
    let before = (ckpt.adam.clone(), ckpt.model.weights().clone());
    ckpt.adam.update(ckpt.model.weights_mut(), &grads)?;
    if ckpt.model.weights().values().any(|w| !w.is_finite()) {
        ckpt.adam = before.0;
        *ckpt.model.weights_mut() = before.1;
        return Err(diverged(ckpt));
    }
    ckpt.step = next;
    Ok(value)
}

/// Runs `ckpt` forward to `config.train.steps` total steps.
///
/// With `checkpoint_path` set, every snapshot saves the checkpoint there
/// and on divergence the last good state is saved there before returning.
pub fn train_to(
    ckpt: &mut Checkpoint,
    checkpoint_path: Option<&Path>,
    log: &mut TrainLog,
    mut on_step: impl FnMut(u64, f64),
) -> Result<()> {
    let config = ckpt.config.clone();
    let dataset = synth_from_spec(&config.dataset)?;
    let schedule = config.schedule.build()?;
    let every = config.train.snapshot_every;
    while ckpt.step < config.train.steps {
        match train_step(ckpt, &dataset, &schedule) {
            Ok(loss) => {
                log.losses.push((ckpt.step, loss));
                on_step(ckpt.step, loss);
            }
            Err(LabError::TrainingDiverged { step, .. }) => {
                let path = checkpoint_path.map(Path::to_path_buf).unwrap_or_default();
                if checkpoint_path.is_some() {
                    ckpt.save(&path)?;
                }
                return Err(LabError::TrainingDiverged {
                    step,
                    checkpoint: path,
                });
            }
            Err(e) => return Err(e),
        }
        if every > 0 && ckpt.step.is_multiple_of(every) {
            log.evals.push((ckpt.step, eval_loss(ckpt, &dataset, &schedule)?));
            if let Some(p) = checkpoint_path {
                ckpt.save(p)?;
            }
        }
    }
    if let Some(p) = checkpoint_path {
        ckpt.save(p)?;
    }
    Ok(())
}

/// Fresh training run as described by `config.output`: writes the checkpoint,
/// `loss.csv` and `eval.csv`.
pub fn train(config: &RunConfig) -> Result<(Checkpoint, TrainLog)> {
    let mut ckpt = Checkpoint::initial(config)?;
    let path = config.output.checkpoint.clone();
    let mut log = TrainLog::default();
    let result = train_to(&mut ckpt, Some(&path), &mut log, |_, _| {});
    write_logs(&config.output.dir, &log)?;
    result.map(|_| (ckpt, log))
}

pub fn write_logs(dir: &Path, log: &TrainLog) -> Result<()> {
    write_atomic(&dir.join("loss.csv"), log.loss_csv().as_bytes())?;
    write_atomic(&dir.join("eval.csv"), log.eval_csv().as_bytes())
}
