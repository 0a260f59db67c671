//! One-hidden-layer tanh MLP with a softmax cross-entropy head, stored as a
//! flat parameter vector.

use std::ops::Range;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClientData, Dataset, Split};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameter layout of the MLP: `[W1 (in x hidden), b1 (hidden), W2 (hidden x classes), b2 (classes)]`,
/// row-major. The classifier ("last") layer is `W2` followed by `b2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn mlp(inputs: usize, hidden: usize, classes: usize) -> Self {
        Self {
            entries: vec![
                LayoutEntry::new("hidden.weight", &[inputs, hidden]),
                LayoutEntry::new("hidden.bias", &[hidden]),
                LayoutEntry::new("last.weight", &[hidden, classes]),
                LayoutEntry::new("last.bias", &[classes]),
            ],
        }
    }

    pub fn new(entries: Vec<LayoutEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::config("layout", "layout is empty"));
        }
        let shapes: Vec<&[usize]> = entries.iter().map(|e| e.shape.as_slice()).collect();
        match shapes.as_slice() {
            [&[inputs, hidden], &[b1], &[h2, classes], &[b2]]
                if inputs > 0 && hidden > 0 && classes >= 2 && b1 == hidden && h2 == hidden && b2 == classes =>
            {
                Ok(Self { entries })
            }
            _ => Err(Error::config(
                "layout",
                "expected [in x hidden, hidden, hidden x classes, classes] with classes >= 2",
            )),
        }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn inputs(&self) -> usize {
        self.entries[0].shape[0]
    }

    pub fn hidden(&self) -> usize {
        self.entries[0].shape[1]
    }

    pub fn classes(&self) -> usize {
        self.entries[3].shape[0]
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(LayoutEntry::len).sum()
    }

    /// Index range of the classifier layer (final weight matrix and its bias).
    pub fn last_layer_range(&self) -> Range<usize> {
        let start = self.entries[0].len() + self.entries[1].len();
        start..self.param_count()
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.entries[0].len();
        let b1 = w1 + self.entries[1].len();
        let w2 = b1 + self.entries[2].len();
        (w1, b1, w2)
    }
}

/// Flat model parameters plus the layout they follow.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.param_count() {
            return Err(Error::Contract(format!(
                "{} values for a layout of {} parameters",
                values.len(),
                layout.param_count()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn last_layer_range(&self) -> Range<usize> {
        self.layout.last_layer_range()
    }

    pub fn last_layer(&self) -> &[f64] {
        &self.values[self.last_layer_range()]
    }

    /// Same layout, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, Arc::clone(&self.layout))
    }

    /// `self + update`, entrywise.
    pub fn apply(&self, update: &[f64]) -> Result<Self> {
        if update.len() != self.values.len() {
            return Err(Error::Contract(format!(
                "update of length {} applied to {} parameters",
                update.len(),
                self.values.len()
            )));
        }
        self.with_values(self.values.iter().zip(update).map(|(p, u)| p + u).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Local update transmitted to the aggregator: `new_params - old_params`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateVector {
    pub values: Vec<f64>,
    pub round: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 2,
            batch_size: 8,
        }
    }
}

/// Uniform init in `±1/sqrt(fan_in)` for weights, zero biases.
pub fn init_model(layout: Layout, seed: u64) -> Result<ParamVector> {
    let layout = Layout::new(layout.entries)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(layout.param_count());
    for (i, entry) in layout.entries().iter().enumerate() {
        if i % 2 == 0 {
            let bound = 1.0 / (entry.shape[0] as f64).sqrt();
            values.extend((0..entry.len()).map(|_| rng.random_range(-bound..bound)));
        } else {
            values.extend(std::iter::repeat_n(0.0, entry.len()));
        }
    }
    ParamVector::new(values, Arc::new(layout))
}

struct Forward {
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

fn forward(layout: &Layout, params: &[f64], x: &[f64]) -> Forward {
    let (n_in, n_hidden, n_out) = (layout.inputs(), layout.hidden(), layout.classes());
    let (o_b1, o_w2, o_b2) = layout.offsets();
    let w1 = &params[..o_b1];
    let b1 = &params[o_b1..o_w2];
    let w2 = &params[o_w2..o_b2];
    let b2 = &params[o_b2..];

    let mut hidden = b1.to_vec();
    for i in 0..n_in {
        let xi = x[i];
        let row = &w1[i * n_hidden..(i + 1) * n_hidden];
        for (h, w) in hidden.iter_mut().zip(row) {
            *h += xi * w;
        }
    }
    hidden.iter_mut().for_each(|h| *h = h.tanh());

    let mut logits = b2.to_vec();
    for j in 0..n_hidden {
        let hj = hidden[j];
        let row = &w2[j * n_out..(j + 1) * n_out];
        for (z, w) in logits.iter_mut().zip(row) {
            *z += hj * w;
        }
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Forward { hidden, probs }
}

/// Predicted class (argmax, ties to the lowest index).
pub fn predict(params: &ParamVector, x: &[f64]) -> usize {
    let probs = forward(&params.layout, &params.values, x).probs;
    probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best })
        .0
}

/// Mean cross-entropy over `indices` and its gradient with respect to every
/// parameter (same layout as `params`).
pub fn loss_and_gradient(params: &ParamVector, dataset: &Dataset, indices: &[usize]) -> (f64, Vec<f64>) {
    let layout = &*params.layout;
    let (n_in, n_hidden, n_out) = (layout.inputs(), layout.hidden(), layout.classes());
    let (o_b1, o_w2, o_b2) = layout.offsets();
    let w2 = &params.values[o_w2..o_b2];

    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut d_hidden = vec![0.0; n_hidden];
    for &idx in indices {
        let x = dataset.sample(idx);
        let y = dataset.label(idx);
        let Forward { hidden, mut probs } = forward(layout, &params.values, x);
        loss -= probs[y].max(f64::MIN_POSITIVE).ln();

        // dL/dz = p - onehot(y)
        probs[y] -= 1.0;
        let dz = &probs;
        for j in 0..n_hidden {
            let row = &mut grad[o_w2 + j * n_out..o_w2 + (j + 1) * n_out];
            for (g, d) in row.iter_mut().zip(dz) {
                *g += hidden[j] * d;
            }
            let w_row = &w2[j * n_out..(j + 1) * n_out];
            let back: f64 = w_row.iter().zip(dz).map(|(w, d)| w * d).sum();
            d_hidden[j] = back * (1.0 - hidden[j] * hidden[j]);
        }
        for (g, d) in grad[o_b2..].iter_mut().zip(dz) {
            *g += d;
        }
        for i in 0..n_in {
            let xi = x[i];
            let row = &mut grad[i * n_hidden..(i + 1) * n_hidden];
            for (g, d) in row.iter_mut().zip(&d_hidden) {
                *g += xi * d;
            }
        }
        for (g, d) in grad[o_b1..o_w2].iter_mut().zip(&d_hidden) {
            *g += d;
        }
    }
    let n = indices.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// Mini-batch SGD on the client's data. Batches are reshuffled every epoch
/// from `seed`. Returns the trained parameters and the delta from `params`.
///
/// Empty client data yields [`Error::NoContribution`].
pub fn local_train(
    params: &ParamVector,
    dataset: &Dataset,
    data: &ClientData,
    config: &TrainConfig,
    round: u32,
    seed: u64,
) -> Result<(ParamVector, UpdateVector)> {
    if data.is_empty() {
        return Err(Error::NoContribution);
    }
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(Error::config("lr", "learning rate must be finite and non-negative"));
    }
    if config.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = params.clone();
    let mut order = data.indices.clone();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let (_, grad) = loss_and_gradient(&current, dataset, batch);
            for (p, g) in current.values.iter_mut().zip(&grad) {
                *p -= config.lr * g;
            }
        }
    }
    let update = UpdateVector {
        values: current
            .values
            .iter()
            .zip(&params.values)
            .map(|(new, old)| new - old)
            .collect(),
        round,
    };
    Ok((current, update))
}

/// Fraction of `split` samples classified correctly.
pub fn evaluate(params: &ParamVector, dataset: &Dataset, split: Split) -> Result<f64> {
    let indices = dataset.indices(split);
    if indices.is_empty() {
        return Err(Error::config("split", format!("{split:?} split is empty")));
    }
    Ok(accuracy_on(params, dataset, &indices))
}

pub(crate) fn accuracy_on(params: &ParamVector, dataset: &Dataset, indices: &[usize]) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let correct = indices
        .iter()
        .filter(|&&i| predict(params, dataset.sample(i)) == dataset.label(i))
        .count();
    correct as f64 / indices.len() as f64
}
