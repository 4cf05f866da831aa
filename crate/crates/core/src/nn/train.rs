use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, ZcaWhitener, ZCA_EPSILON};
use super::model::{Gradients, TrainedModel};
use super::spec::{NetworkSpec, TrainConfig, NUM_CLASSES};
use crate::cohort::{stratified_split, Split};
use crate::error::{Error, Result};
use crate::volume::Volume3D;

#[derive(Clone, Debug)]
pub struct LabeledExample {
    pub subject: String,
    pub volume: Volume3D,
    pub label: usize,
    /// Pre-assigned split; when absent on every example, `train` splits the
    /// cohort itself.
    pub split: Option<Split>,
}

#[derive(Clone, Debug, Default)]
pub struct LabeledCohort {
    pub examples: Vec<LabeledExample>,
}

impl LabeledCohort {
    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub stopped_early: bool,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss,val_acc` with six decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_acc\n");
        for r in &self.history {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_acc
            ));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a validation-loss
/// improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(model: &mut TrainedModel) -> Self {
        let shapes: Vec<usize> = model.parameters_mut().iter().map(|p| p.len()).collect();
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut TrainedModel, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (((p, g), m), v) in model
            .parameters_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

fn split_indices(data: &LabeledCohort, cfg: &TrainConfig) -> Result<[Vec<usize>; 3]> {
    let assigned: Vec<Option<Split>> = data.examples.iter().map(|e| e.split).collect();
    let splits = if assigned.iter().all(|s| s.is_some()) {
        assigned.into_iter().map(|s| s.unwrap()).collect()
    } else {
        stratified_split(&data.labels(), cfg.split, cfg.seed)?
    };
    let mut out: [Vec<usize>; 3] = Default::default();
    for (i, s) in splits.iter().enumerate() {
        out[*s as usize].push(i);
    }
    for (k, name) in ["train", "validation", "test"].iter().enumerate() {
        for class in 0..NUM_CLASSES {
            let n = out[k].iter().filter(|&&i| data.examples[i].label == class).count();
            if n < 2 {
                return Err(Error::DegenerateSplit(format!(
                    "{name} split has {n} examples of class {class} (need at least 2)"
                )));
            }
        }
    }
    Ok(out)
}

/// Adam on mean cross-entropy with a decaying learning rate, early stopping
/// on validation loss, and the best-validation weights restored at the end.
pub fn train(spec: NetworkSpec, data: &LabeledCohort, cfg: &TrainConfig) -> Result<(TrainedModel, TrainReport)> {
    cfg.validate()?;
    for e in &data.examples {
        e.volume.ensure_dims(spec.input_dims)?;
        if e.label >= NUM_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "{}: label {} out of range",
                e.subject, e.label
            )));
        }
    }
    let [train_idx, val_idx, test_idx] = split_indices(data, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = match cfg.weight_init_scale {
        Some(g) => TrainedModel::init_scaled(spec, rng.gen(), g)?,
        None => TrainedModel::init(spec, rng.gen())?,
    };
    if cfg.augment.zca {
        let samples: Vec<&[f64]> = train_idx.iter().map(|&i| data.examples[i].volume.data()).collect();
        model.zca = Some(ZcaWhitener::fit(&samples, ZCA_EPSILON)?);
    }
    let subset = |idx: &[usize]| -> (Vec<&Volume3D>, Vec<usize>) {
        (
            idx.iter().map(|&i| &data.examples[i].volume).collect(),
            idx.iter().map(|&i| data.examples[i].label).collect(),
        )
    };
    let (val_x, val_y) = subset(&val_idx);
    let augmenting = cfg.augment.max_rotation_deg > 0.0 || cfg.augment.max_shift > 0;

    let mut adam = Adam::new(&mut model);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut order = train_idx.clone();
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let lr = cfg.learning_rate_at(epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let owned: Vec<Volume3D> = if augmenting {
                batch
                    .iter()
                    .map(|&i| augment(&data.examples[i].volume, &cfg.augment, &mut rng))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let xs: Vec<&Volume3D> = if augmenting {
                owned.iter().collect()
            } else {
                batch.iter().map(|&i| &data.examples[i].volume).collect()
            };
            let ys: Vec<usize> = batch.iter().map(|&i| data.examples[i].label).collect();
            let (loss, grads) = model.train_step_grads(&xs, &ys, &mut rng);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {}", epoch + 1)));
            }
            loss_sum += loss * batch.len() as f64;
            adam.step(&mut model, &grads, lr);
        }
        let (val_loss, val_acc) = model.evaluate(&val_x, &val_y)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {}", epoch + 1)));
        }
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / order.len() as f64,
            val_loss,
            val_acc,
        });
        match stopper.update(epoch + 1, val_loss) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    let model = best;
    let (tx, ty) = subset(&train_idx);
    let (_, train_accuracy) = model.evaluate(&tx, &ty)?;
    let (_, val_accuracy) = model.evaluate(&val_x, &val_y)?;
    let (ex, ey) = subset(&test_idx);
    let (test_loss, test_accuracy) = model.evaluate(&ex, &ey)?;
    let report = TrainReport {
        stopped_epoch: history.len(),
        history,
        best_epoch: stopper.best_epoch(),
        stopped_early,
        train_accuracy,
        val_accuracy,
        test_accuracy,
        test_loss,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_one_epoch_after_worsening_with_patience_one() {
        let mut es = EarlyStopping::new(1);
        assert_eq!(es.update(1, 0.9), StopDecision::Improved);
        assert_eq!(es.update(2, 1.1), StopDecision::Stop);
        assert_eq!(es.best_epoch(), 1);
    }

    #[test]
    fn patience_counts_consecutive_stale_epochs() {
        let mut es = EarlyStopping::new(3);
        let losses = [1.0, 0.8, 0.9, 0.85, 0.7, 0.75, 0.71, 0.72];
        let decisions: Vec<StopDecision> = losses.iter().enumerate().map(|(i, &l)| es.update(i + 1, l)).collect();
        assert_eq!(decisions[7], StopDecision::Stop);
        assert!(decisions[..7].iter().all(|d| *d != StopDecision::Stop));
        assert_eq!(es.best_epoch(), 5);
    }

    #[test]
    fn report_csv_has_fixed_columns() {
        let r = TrainReport {
            history: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                val_acc: 1.0,
            }],
            best_epoch: 1,
            stopped_epoch: 1,
            stopped_early: false,
            train_accuracy: 1.0,
            val_accuracy: 1.0,
            test_accuracy: 1.0,
            test_loss: 0.1,
        };
        assert_eq!(
            r.to_csv(),
            "epoch,train_loss,val_loss,val_acc\n1,0.500000,0.250000,1.000000\n"
        );
    }
}
