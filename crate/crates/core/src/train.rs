//! Mini-batch SGD training and accuracy evaluation.

use serde::{Deserialize, Serialize};

use crate::autodiff::ComputeGraph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::optim::{OptimizerState, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `gamma` every `every_epochs` epochs.
    Step { every_epochs: usize, gamma: f64 },
    /// Cosine decay to zero over the whole run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

fn correct(logits: &[f64], classes: usize, labels: &[usize]) -> usize {
    logits
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Eval-mode top-1 accuracy in `[0, 1]`.
pub fn evaluate(model: &Model, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let mut hits = 0;
    for (s, e) in ds.batch_ranges(batch_size) {
        let (x, y) = ds.batch(s, e)?;
        let logits = model.predict(x)?;
        hits += correct(logits.data(), logits.shape()[1], y);
    }
    Ok(hits as f64 / ds.len() as f64)
}

/// Trains in place. The sample order of each epoch derives from `seed`;
/// the whole run is deterministic. Returns one record per epoch.
pub fn fit(
    model: &mut Model,
    train: &Dataset,
    eval: Option<&Dataset>,
    recipe: &Recipe,
    seed: u64,
) -> Result<Vec<EpochRecord>> {
    if recipe.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if model.extension().is_some() {
        return Err(Error::State("refusing to train an extended model".into()));
    }
    let per_epoch = train.len().div_ceil(recipe.batch_size);
    let schedule = match recipe.schedule {
        LrSchedule::Constant => Schedule::Constant,
        LrSchedule::Step { every_epochs, gamma } => Schedule::Step {
            size: every_epochs.max(1) * per_epoch,
            gamma,
        },
        LrSchedule::Cosine => Schedule::Cosine {
            total: recipe.epochs * per_epoch,
        },
    };
    let mut opt = OptimizerState::new(recipe.lr, recipe.momentum, recipe.weight_decay, schedule)?;
    let mut trace = Vec::with_capacity(recipe.epochs);
    for epoch in 0..recipe.epochs {
        let order = train.epoch_order(seed, epoch);
        let (mut loss_sum, mut hits) = (0.0, 0);
        for chunk in order.chunks(recipe.batch_size) {
            let (x, y) = {
                let b = train.select(chunk)?;
                let (x, y) = b.batch(0, b.len())?;
                (x, y.to_vec())
            };
            let mut g = ComputeGraph::new();
            let (loss, pass) = model.loss(&mut g, x, &y, Mode::Train)?;
            let logits = g.value(pass.logits);
            hits += correct(logits.data(), logits.shape()[1], &y);
            loss_sum += g.value(loss).item()? * y.len() as f64;
            let grads = g.backward()?;
            opt.sgd_step(model.params_mut(), &grads)?;
            model.update_running_stats(&g, &pass)?;
        }
        let eval_accuracy = match eval {
            Some(ds) => Some(evaluate(model, ds, recipe.batch_size.max(256))?),
            None => None,
        };
        trace.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / train.len() as f64,
            train_accuracy: hits as f64 / train.len() as f64,
            eval_accuracy,
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, Split, SyntheticSpec};
    use crate::model::{build_model, LayerSpec, ModelSpec};

    fn data(noise: f64) -> Dataset {
        synthetic(
            &SyntheticSpec {
                classes: 3,
                per_class: 20,
                shape: vec![6],
                noise,
                blobs: 2,
                seed: 11,
            },
            Split::Train,
        )
        .unwrap()
    }

    fn recipe(epochs: usize) -> Recipe {
        Recipe {
            epochs,
            batch_size: 10,
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: LrSchedule::Cosine,
        }
    }

    fn linear() -> ModelSpec {
        ModelSpec {
            name: "linear".into(),
            input: vec![6],
            layers: vec![LayerSpec::dense("fc", 6, 3)],
        }
    }

    #[test]
    fn separable_data_is_learned_by_one_dense_layer() {
        let ds = data(0.0);
        let ds = ds.normalize(&ds.channel_stats()).unwrap();
        let mut m = build_model(&linear(), 0).unwrap();
        fit(&mut m, &ds, None, &recipe(60), 1).unwrap();
        assert_eq!(evaluate(&m, &ds, 64).unwrap(), 1.0);
    }

    #[test]
    fn zero_epochs_leave_the_model_alone() {
        let mut m = build_model(&linear(), 0).unwrap();
        let before = m.clone();
        assert!(fit(&mut m, &data(0.1), None, &recipe(0), 1).unwrap().is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn same_seed_same_trace() {
        let ds = data(0.3);
        let run = || {
            let mut m = build_model(&linear(), 2).unwrap();
            let t = fit(&mut m, &ds, Some(&ds), &recipe(3), 5).unwrap();
            (t, m.checkpoint_bytes())
        };
        assert_eq!(run(), run());
    }
}
