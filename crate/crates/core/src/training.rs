//! Loss, SGD, splitting, the epoch loop and evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, LabelClass};
use crate::error::{Error, Result};
use crate::layers::argmax_rows;
use crate::model::{
    init_params, model_backward, model_forward, param_count, ModelConfig, ModelParams,
};
use crate::tensor::{Scalar, Tensor};

/// Lower clamp on probabilities inside the logarithm.
pub const LOG_EPSILON: f64 = 1e-7;

/// Samples per forward pass during evaluation.
const EVAL_BATCH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 128,
            epochs: 5,
            train_fraction: 0.8,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::usage(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::usage("epochs must be at least 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::usage(format!(
                "train fraction must lie strictly between 0 and 1, got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    fn derive(&self, stream: u64) -> u64 {
        splitmix64(self.seed ^ splitmix64(stream))
    }

    pub fn init_seed(&self) -> u64 {
        self.derive(1)
    }

    pub fn split_seed(&self) -> u64 {
        self.derive(2)
    }

    /// Shuffle seed for a 1-based epoch index.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        self.derive(1000 + epoch as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub per_epoch: Vec<EpochMetrics>,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub param_count: usize,
    pub model: ModelConfig,
    pub config: TrainConfig,
}

impl TrainReport {
    /// Tab-separated report: one row per epoch, then the test row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("split\tepoch\tloss\tacc\n");
        for m in &self.per_epoch {
            let _ = writeln!(out, "train\t{}\t{:.4}\t{:.4}", m.epoch, m.mean_loss, m.accuracy);
        }
        let _ = writeln!(out, "test\t-\t{:.4}\t{:.4}", self.test_loss, self.test_accuracy);
        out
    }

    /// One line in the `loss - acc` layout, prefixed by the train-test split
    /// in percent, e.g. `80-20  0.2660 - 0.9380 ... | 0.0053 - 1.0000`.
    pub fn summary_row(&self) -> String {
        let train_pct = self.config.train_fraction * 100.0;
        let mut out = format!("{}-{}", trim_pct(train_pct), trim_pct(100.0 - train_pct));
        for m in &self.per_epoch {
            let _ = write!(out, "  {:.4} - {:.4}", m.mean_loss, m.accuracy);
        }
        let _ = write!(out, "  | {:.4} - {:.4}", self.test_loss, self.test_accuracy);
        out
    }
}

fn trim_pct(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Mean categorical cross-entropy over the rows of `probs` and its gradient
/// with respect to the logits that produced them, `(p - y) / n`.
pub fn cross_entropy_loss<T: Scalar>(
    probs: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = probs.as_matrix("probabilities")?;
    if targets.shape() != probs.shape() {
        return Err(Error::usage(format!(
            "targets {} do not match probabilities {}",
            targets.shape(),
            probs.shape()
        )));
    }
    let mut total = 0.0f64;
    let inv_n = T::one() / T::of(n as f64);
    let mut grad = Vec::with_capacity(n * k);
    for (r, (p_row, y_row)) in probs
        .data()
        .chunks_exact(k)
        .zip(targets.data().chunks_exact(k))
        .enumerate()
    {
        let ones = y_row.iter().filter(|&&y| y == T::one()).count();
        let zeros = y_row.iter().filter(|&&y| y == T::zero()).count();
        if ones != 1 || ones + zeros != k {
            return Err(Error::usage(format!("target row {r} is not one-hot")));
        }
        for (&p, &y) in p_row.iter().zip(y_row) {
            if y == T::one() {
                total -= p.to_f64_lossy().clamp(LOG_EPSILON, 1.0 - LOG_EPSILON).ln();
            }
            grad.push((p - y) * inv_n);
        }
    }
    Ok((total / n as f64, Tensor::new(probs.dims(), grad)?))
}

/// `w <- w - lr * g` for every scalar.
pub fn sgd_step<T: Scalar>(
    params: &ModelParams<T>,
    grads: &ModelParams<T>,
    learning_rate: f64,
) -> Result<ModelParams<T>> {
    let mut next = params.clone();
    sgd_step_in_place(&mut next, grads, learning_rate)?;
    Ok(next)
}

pub(crate) fn sgd_step_in_place<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    learning_rate: f64,
) -> Result<()> {
    let lr = T::of(learning_rate);
    for (w, g) in params.pairs_mut(grads)? {
        for (wv, &gv) in w.iter_mut().zip(g) {
            *wv = *wv - lr * gv;
        }
    }
    Ok(())
}

/// Indices of the train and test sides of a stratified random split.
///
/// The train side holds `round(fraction * n)` samples, shared between the
/// classes in proportion to their sizes (largest remainder, ties to the
/// lower class index). Both sides keep the original sample order.
pub fn split_indices(labels: &[LabelClass], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.is_empty() {
        return Err(Error::usage("cannot split an empty dataset"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::usage(format!(
            "train fraction must lie strictly between 0 and 1, got {fraction}"
        )));
    }
    let total = labels.len();
    let train_total = (fraction * total as f64).round() as usize;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); LabelClass::ALL.len()];
    for (i, l) in labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    let exact: Vec<f64> = by_class
        .iter()
        .map(|c| c.len() as f64 * train_total as f64 / total as f64)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = train_total - quota.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(train_total);
    let mut test = Vec::with_capacity(total - train_total);
    for (members, &q) in by_class.iter_mut().zip(&quota) {
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..q]);
        test.extend_from_slice(&members[q..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::usage(format!(
            "fraction {fraction} of {total} samples leaves one side of the split empty"
        )));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split_dataset(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let labels: Vec<LabelClass> = dataset.samples.iter().map(|s| s.label).collect();
    let (train, test) = split_indices(&labels, fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Seeded shuffle of `0..len` cut into batches; the last batch may be short.
pub fn batch_iterator(len: usize, batch_size: usize, epoch_seed: u64) -> impl Iterator<Item = Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    let size = batch_size.max(1);
    let mut rest = order.into_iter().peekable();
    std::iter::from_fn(move || {
        rest.peek()?;
        Some(rest.by_ref().take(size).collect())
    })
}

/// Stacks the selected samples into an `(n, h, w, 3)` batch and `(n, 2)` targets.
pub fn stack_batch<T: Scalar>(set: &Dataset, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = indices
        .first()
        .map(|&i| &set.samples[i])
        .ok_or_else(|| Error::usage("empty batch"))?;
    let dims = first.pixels.dims().to_vec();
    let per = first.pixels.len();
    let mut pixels = Vec::with_capacity(indices.len() * per);
    let mut targets = Vec::with_capacity(indices.len() * 2);
    for &i in indices {
        let s = &set.samples[i];
        pixels.extend(s.pixels.data().iter().map(|&v| T::of(v as f64)));
        targets.extend(s.target().iter().map(|&v| T::of(v as f64)));
    }
    Ok((
        Tensor::new(&[indices.len(), dims[0], dims[1], dims[2]], pixels)?,
        Tensor::new(&[indices.len(), 2], targets)?,
    ))
}

fn count_correct<T: Scalar>(probs: &Tensor<T>, set: &Dataset, indices: &[usize]) -> Result<usize> {
    Ok(argmax_rows(probs)?
        .iter()
        .zip(indices)
        .filter(|(&p, &i)| p == set.samples[i].label.index())
        .count())
}

/// Runs `config.epochs` epochs of mini-batch SGD over the whole of `set`.
pub fn fit<T: Scalar>(
    model: &ModelConfig,
    mut params: ModelParams<T>,
    config: &TrainConfig,
    set: &Dataset,
) -> Result<(ModelParams<T>, Vec<EpochMetrics>)> {
    if config.epochs == 0 {
        return Err(Error::usage("epochs must be at least 1"));
    }
    if config.batch_size == 0 {
        return Err(Error::usage("batch size must be at least 1"));
    }
    if set.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (b, indices) in batch_iterator(set.len(), config.batch_size, config.epoch_seed(epoch)).enumerate() {
            let (x, y) = stack_batch::<T>(set, &indices)?;
            let (probs, cache) = model_forward(model, &params, &x)?;
            let (loss, grad_logits) = cross_entropy_loss(&probs, &y)?;
            if !loss.is_finite() || !cache.logits.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            loss_sum += loss * indices.len() as f64;
            correct += count_correct(&probs, set, &indices)?;
            let grads = model_backward(model, &params, &cache, &grad_logits)?;
            sgd_step_in_place(&mut params, &grads, config.learning_rate)?;
        }
        metrics.push(EpochMetrics {
            epoch,
            mean_loss: loss_sum / set.len() as f64,
            accuracy: correct as f64 / set.len() as f64,
        });
    }
    Ok((params, metrics))
}

/// Mean cross-entropy and accuracy of `params` on `set`.
pub fn evaluate<T: Scalar>(
    model: &ModelConfig,
    params: &ModelParams<T>,
    set: &Dataset,
) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty set"));
    }
    let all: Vec<usize> = (0..set.len()).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for indices in all.chunks(EVAL_BATCH) {
        let (x, y) = stack_batch::<T>(set, indices)?;
        let (probs, _) = model_forward(model, params, &x)?;
        let (loss, _) = cross_entropy_loss(&probs, &y)?;
        loss_sum += loss * indices.len() as f64;
        correct += count_correct(&probs, set, indices)?;
    }
    Ok((loss_sum / set.len() as f64, correct as f64 / set.len() as f64))
}

/// Splits `dataset`, trains a freshly initialised model on the train side and
/// evaluates it on the test side.
pub fn train(
    model: &ModelConfig,
    config: &TrainConfig,
    dataset: &Dataset,
) -> Result<(ModelParams<f32>, TrainReport)> {
    model.validate()?;
    config.validate()?;
    let counts = dataset.class_counts();
    if counts.contains(&0) {
        return Err(Error::usage(format!(
            "dataset must contain both classes (exp: {}, pri: {})",
            counts[0], counts[1]
        )));
    }
    let (train_set, test_set) = split_dataset(dataset, config.train_fraction, config.split_seed())?;
    let (params, per_epoch, (test_loss, test_accuracy)) = match config.precision {
        Precision::F32 => run::<f32>(model, config, &train_set, &test_set)?,
        Precision::F64 => {
            let (p, m, e) = run::<f64>(model, config, &train_set, &test_set)?;
            (p.cast(), m, e)
        }
    };
    let report = TrainReport {
        per_epoch,
        test_loss,
        test_accuracy,
        train_samples: train_set.len(),
        test_samples: test_set.len(),
        param_count: param_count(model)?,
        model: model.clone(),
        config: config.clone(),
    };
    Ok((params, report))
}

type RunResult<T> = (ModelParams<T>, Vec<EpochMetrics>, (f64, f64));

fn run<T: Scalar>(
    model: &ModelConfig,
    config: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<RunResult<T>> {
    let initial = init_params::<T>(model, config.init_seed())?;
    let (params, metrics) = fit(model, initial, config, train_set)?;
    let eval = evaluate(model, &params, test_set)?;
    Ok((params, metrics, eval))
}
