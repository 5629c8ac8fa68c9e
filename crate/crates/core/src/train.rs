//! Loss, projected SGD and the epoch loop.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{argmax_columns, Gradients, Model, Signal};

/// Mean cross-entropy of softmax(logits) against integer labels, and its
/// gradient with respect to the logits, `(softmax − onehot) / N`.
pub fn softmax_cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (classes, n) = logits.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} logit columns but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::LabelRange {
            label,
            index,
            class_count: classes,
        });
    }
    let mut grad = Array2::<f64>::zeros((classes, n));
    let mut loss = 0.0;
    for (j, col) in logits.columns().into_iter().enumerate() {
        let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = col.iter().map(|&v| (v - m).exp()).sum();
        let log_sum = sum.ln();
        loss += log_sum - (col[labels[j]] - m);
        for i in 0..classes {
            grad[[i, j]] = (col[i] - m).exp() / sum;
        }
        grad[[labels[j], j]] -= 1.0;
    }
    let inv = 1.0 / n as f64;
    grad *= inv;
    Ok((loss * inv, grad))
}

/// Projects every recurrent cell onto its constraint sets. Linear weights
/// and offsets are left untouched.
pub fn project_params(model: &mut Model) {
    model.cells_mut().for_each(|c| c.project());
}

fn check_gradients(model: &Model, grads: &Gradients) -> Result<()> {
    let params = model.parameters();
    if params.len() != grads.len()
        || params
            .iter()
            .zip(grads.iter())
            .any(|((pn, p), (gn, g))| pn != gn || p.shape() != g.shape())
    {
        return Err(Error::Shape("gradients do not match model parameters".into()));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(())
}

/// `θ ← θ − ρ g` for every parameter, then projection of the cells.
pub fn sgd_step(model: &mut Model, grads: &Gradients, rate: f64) -> Result<()> {
    check_gradients(model, grads)?;
    for ((_, mut p), (_, g)) in model.parameters_mut().into_iter().zip(grads.iter()) {
        p.scaled_add(-rate, g);
    }
    project_params(model);
    Ok(())
}

/// Heavy-ball momentum on top of [`sgd_step`]: `v ← μ v + g`, then a
/// projected step along `v`. Not part of the reference training scheme;
/// enabled only when `momentum > 0`.
#[derive(Debug, Clone)]
pub struct Momentum {
    coefficient: f64,
    velocity: Option<Gradients>,
}

impl Momentum {
    pub fn new(coefficient: f64) -> Self {
        Self {
            coefficient,
            velocity: None,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, rate: f64) -> Result<()> {
        check_gradients(model, grads)?;
        let v = self.velocity.get_or_insert_with(|| grads.zeros_like());
        for ((_, vel), (_, g)) in v.entries_mut().zip(grads.iter()) {
            vel.mapv_inplace(|x| x * self.coefficient);
            *vel += g;
        }
        sgd_step(model, v, rate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied at each epoch listed in `decay_epochs`.
    pub decay: f64,
    pub decay_epochs: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Zero selects plain SGD.
    pub momentum: f64,
    pub tt_max: usize,
    pub lambda: f64,
    pub beta: f64,
    pub alpha: f64,
    pub dataset: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            decay: 0.1,
            decay_epochs: Vec::new(),
            epochs: 50,
            batch_size: 32,
            seed: 0,
            momentum: 0.0,
            tt_max: crate::qprox::DEFAULT_TT_MAX,
            lambda: 0.05,
            beta: 0.01,
            alpha: 0.1,
            dataset: String::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.tt_max == 0 {
            return Err(Error::Config("tt_max must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.decay > 0.0) {
            return Err(Error::Config(format!("decay must be positive, got {}", self.decay)));
        }
        Ok(())
    }

    /// Step-decayed rate for a zero-based epoch.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate * self.decay.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

pub const METRICS_HEADER: [&str; 5] = ["epoch", "train_loss", "train_acc", "test_acc", "wall_s"];

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Equality ignoring wall-clock times.
    pub fn same_metrics(&self, other: &History) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(other.records.iter()).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.train_acc.to_bits() == b.train_acc.to_bits()
                    && a.test_acc.to_bits() == b.test_acc.to_bits()
            })
    }

    /// Writes the fixed-column metrics CSV. With `include_wall_time` false
    /// the `wall_s` column is written as 0 so the file depends only on the
    /// seed and configuration.
    pub fn write_csv(&self, path: impl AsRef<Path>, include_wall_time: bool) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(METRICS_HEADER)?;
        for r in &self.records {
            let wall = if include_wall_time { r.wall_s } else { 0.0 };
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.train_acc.to_string(),
                r.test_acc.to_string(),
                wall.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        if r.headers()?.iter().ne(METRICS_HEADER.iter().copied()) {
            return Err(Error::Config("metrics CSV has an unexpected header".into()));
        }
        let mut records = Vec::new();
        for row in r.records() {
            let row = row?;
            let field = |i: usize| -> Result<f64> {
                row.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Config(format!("bad metrics field {i}")))
            };
            records.push(EpochRecord {
                epoch: field(0)? as usize,
                train_loss: field(1)?,
                train_acc: field(2)?,
                test_acc: field(3)?,
                wall_s: field(4)?,
            });
        }
        Ok(Self { records })
    }
}

/// Fraction of correctly classified samples.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let predicted = model.classify(data.features())?;
    let hits = predicted.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Loss and accuracy over a whole dataset.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    let logits = model.predict(data.features())?;
    let (loss, _) = softmax_cross_entropy(logits.view(), data.labels())?;
    let predicted = argmax_columns(logits.view());
    let hits = predicted.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok((loss, hits as f64 / data.len() as f64))
}

/// Loss and gradients on one batch.
pub fn loss_and_gradients(model: &Model, x: &Signal, labels: &[usize]) -> Result<(f64, Gradients)> {
    let (logits, cache) = model.forward(x)?;
    let (loss, grad_logits) = softmax_cross_entropy(logits.view(), labels)?;
    Ok((loss, model.backward(&cache, grad_logits.view())?))
}

#[derive(Debug, thiserror::Error)]
#[error("training stopped in epoch {epoch}: {source}")]
pub struct TrainFailure {
    pub epoch: usize,
    /// Records of the epochs that completed.
    pub history: History,
    #[source]
    pub source: Error,
}

/// Runs `config.epochs` epochs of shuffled minibatch projected SGD and
/// records full-set train loss/accuracy and test accuracy after each epoch.
pub fn train_loop(
    model: &mut Model,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
) -> std::result::Result<History, TrainFailure> {
    let fail = |epoch, history: &History, source| TrainFailure {
        epoch,
        history: history.clone(),
        source,
    };
    let mut history = History::default();
    if let Err(e) = config.validate() {
        return Err(fail(0, &history, e));
    }
    if train.is_empty() {
        return Err(fail(0, &history, Error::Shape("empty training set".into())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut momentum = (config.momentum > 0.0).then(|| Momentum::new(config.momentum));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let start = Instant::now();

    for epoch in 0..config.epochs {
        let rate = config.rate_at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let (x, y) = train.select(batch);
            let step = loss_and_gradients(model, &x, &y).and_then(|(_, g)| match &mut momentum {
                Some(m) => m.step(model, &g, rate),
                None => sgd_step(model, &g, rate),
            });
            if let Err(e) = step {
                return Err(fail(epoch + 1, &history, e));
            }
        }
        let evals = evaluate(model, train).and_then(|tr| Ok((tr, accuracy(model, test)?)));
        let ((train_loss, train_acc), test_acc) = match evals {
            Ok(v) => v,
            Err(e) => return Err(fail(epoch + 1, &history, e)),
        };
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            train_acc,
            test_acc,
            wall_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::RnnCell;
    use crate::net::ActivationKind;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_ln2() {
        let (loss, _) = softmax_cross_entropy(array![[0.0], [0.0]].view(), &[0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_prediction_has_tiny_loss() {
        let (loss, _) = softmax_cross_entropy(array![[10.0], [-10.0]].view(), &[0]).unwrap();
        assert!(loss <= 1e-4);
    }

    #[test]
    fn huge_logits_are_stable() {
        let (loss, grad) = softmax_cross_entropy(array![[1000.0], [-1000.0]].view(), &[1]).unwrap();
        assert!((loss - 2000.0).abs() < 1e-9);
        assert!(grad.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn label_out_of_range() {
        let err = softmax_cross_entropy(array![[0.0], [0.0]].view(), &[2]).unwrap_err();
        assert!(matches!(err, Error::LabelRange { label: 2, .. }));
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::mlp(2, &[2], 2, ActivationKind::QMetric, 2, &mut rng).unwrap();
        {
            let cell = model.cells_mut().next().unwrap();
            cell.wt = array![[1.0, 2.0], [3.0, 4.0]];
            cell.h = array![-0.2, 1.7];
            cell.b = array![-1e-9, 3.0];
        }
        project_params(&mut model);
        let cell: &RnnCell = model.cells().next().unwrap();
        assert_eq!(cell.coupling(), &array![[0.0, 2.0], [3.0, 0.0]]);
        assert_eq!(cell.gain(), &array![0.0, 1.0]);
        assert_eq!(cell.threshold(), &array![0.0, 3.0]);
    }

    #[test]
    fn scalar_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::mlp(1, &[], 1, ActivationKind::PlainRelu, 1, &mut rng).unwrap();
        model.set_flat_parameters(&[1.0, 0.0]).unwrap();
        let grads = Gradients::from_entries(vec![
            (
                "head.weight".into(),
                ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 1]), 2.0),
            ),
            ("head.offset".into(), ndarray::ArrayD::zeros(ndarray::IxDyn(&[1]))),
        ]);
        sgd_step(&mut model, &grads, 0.1).unwrap();
        assert!((model.flat_parameters()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::mlp(1, &[], 1, ActivationKind::PlainRelu, 1, &mut rng).unwrap();
        let grads = Gradients::from_entries(vec![
            (
                "head.weight".into(),
                ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 1]), f64::NAN),
            ),
            ("head.offset".into(), ndarray::ArrayD::zeros(ndarray::IxDyn(&[1]))),
        ]);
        assert!(matches!(sgd_step(&mut model, &grads, 0.1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn step_decay_schedule() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            decay: 0.1,
            decay_epochs: vec![2, 4],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.rate_at(0), 1.0);
        assert_eq!(cfg.rate_at(1), 1.0);
        assert!((cfg.rate_at(2) - 0.1).abs() < 1e-15);
        assert!((cfg.rate_at(5) - 0.01).abs() < 1e-15);
    }
}
