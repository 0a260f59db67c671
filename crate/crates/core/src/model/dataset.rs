use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result, VehicleId};

const VALIDATION_FRACTION: f64 = 0.15;
const TEST_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Labeled samples with a fixed train/validation/test assignment.
///
/// Features are stored row-major, `n_features` values per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_features: usize,
    n_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn new(
        n_features: usize,
        n_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::config("n_features", "must be positive"));
        }
        if n_classes < 2 {
            return Err(Error::config("n_classes", "need at least two classes"));
        }
        if features.len() != labels.len() * n_features || splits.len() != labels.len() {
            return Err(Error::Contract(format!(
                "dataset shape mismatch: {} feature values, {} labels, {} split tags",
                features.len(),
                labels.len(),
                splits.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::config("labels", format!("label {bad} >= n_classes {n_classes}")));
        }
        for split in [Split::Train, Split::Validation, Split::Test] {
            if !splits.contains(&split) {
                return Err(Error::config("splits", format!("{split:?} split is empty")));
            }
        }
        Ok(Self {
            n_features,
            n_classes,
            features,
            labels,
            splits,
        })
    }

    /// Parse delimited numeric text: one sample per line, integer label in the
    /// last column. Commas, semicolons, tabs and spaces all act as separators;
    /// blank lines and lines starting with `#` are skipped. Samples are split
    /// 70/15/15 stratified by class using `seed`.
    pub fn from_delimited(text: &str, seed: u64) -> Result<Self> {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut n_features = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line
                .split([',', ';', '\t', ' '])
                .filter(|f| !f.is_empty())
                .collect();
            let parse_err = |reason: String| Error::Parse {
                line: lineno + 1,
                reason,
            };
            let (label, row) = fields
                .split_last()
                .filter(|(_, row)| !row.is_empty())
                .ok_or_else(|| parse_err("need at least one feature and a label".into()))?;
            match n_features {
                None => n_features = Some(row.len()),
                Some(n) if n != row.len() => {
                    return Err(parse_err(format!("expected {n} features, found {}", row.len())))
                }
                Some(_) => {}
            }
            for f in row {
                features.push(
                    f.parse::<f64>()
                        .map_err(|e| parse_err(format!("bad feature `{f}`: {e}")))?,
                );
            }
            labels.push(
                label
                    .parse::<usize>()
                    .map_err(|e| parse_err(format!("bad label `{label}`: {e}")))?,
            );
        }
        let n_features = n_features.ok_or_else(|| Error::config("dataset", "no samples"))?;
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        let splits = stratified_split(&labels, n_classes, &mut ChaCha8Rng::seed_from_u64(seed));
        Self::new(n_features, n_classes, features, labels, splits)
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, index: usize) -> &[f64] {
        &self.features[index * self.n_features..(index + 1) * self.n_features]
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.splits[index]
    }

    /// Sample indices in `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

/// Per-vehicle local training data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientData {
    pub owner: VehicleId,
    /// Indices into the train split of the owning [`Dataset`].
    pub indices: Vec<usize>,
}

impl ClientData {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn classes(&self, dataset: &Dataset) -> BTreeSet<usize> {
        self.indices.iter().map(|&i| dataset.label(i)).collect()
    }
}

fn stratified_split(labels: &[usize], n_classes: usize, rng: &mut ChaCha8Rng) -> Vec<Split> {
    let mut splits = vec![Split::Train; labels.len()];
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(rng);
        let n = members.len();
        if n < 3 {
            continue;
        }
        let n_val = ((n as f64 * VALIDATION_FRACTION).round() as usize).clamp(1, n - 2);
        let n_test = ((n as f64 * TEST_FRACTION).round() as usize).clamp(1, n - 1 - n_val);
        for &i in &members[..n_val] {
            splits[i] = Split::Validation;
        }
        for &i in &members[n_val..n_val + n_test] {
            splits[i] = Split::Test;
        }
    }
    splits
}

/// Isotropic Gaussian class clusters with unit noise and pairwise center
/// distance of at least `class_separation`, split 70/15/15 by class.
pub fn gen_dataset(
    n_classes: usize,
    n_features: usize,
    n_samples: usize,
    class_separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::config("n_classes", "need at least two classes"));
    }
    if n_features == 0 {
        return Err(Error::config("n_features", "must be positive"));
    }
    if n_samples < 10 * n_classes {
        return Err(Error::config(
            "n_samples",
            format!("need at least {} samples for {n_classes} classes", 10 * n_classes),
        ));
    }
    if !(class_separation > 0.0 && class_separation.is_finite()) {
        return Err(Error::config("class_separation", "must be a positive finite number"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Center spread chosen so typical pairwise distances are ~1.5x the minimum;
    // rejection then enforces the minimum exactly.
    let mut spread = 1.5 * class_separation / (2.0 * n_features as f64).sqrt();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    let mut attempts = 0;
    while centers.len() < n_classes {
        let candidate: Vec<f64> = (0..n_features)
            .map(|_| spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let far_enough = centers.iter().all(|c| {
            c.iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                >= class_separation
        });
        if far_enough {
            centers.push(candidate);
        } else {
            attempts += 1;
            if attempts % 200 == 0 {
                spread *= 1.25;
            }
        }
    }

    let mut features = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    for (class, center) in centers.iter().enumerate() {
        let count = n_samples / n_classes + usize::from(class < n_samples % n_classes);
        for _ in 0..count {
            for &c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(c + z);
            }
            labels.push(class);
        }
    }
    let splits = stratified_split(&labels, n_classes, &mut rng);
    Dataset::new(n_features, n_classes, features, labels, splits)
}

/// Label-shard partition of the train split.
///
/// The train split is sorted by label and cut into `n_clients * shards_per_client`
/// equal contiguous shards; shards are dealt to clients after a seeded shuffle.
/// Client `c` is owned by vehicle `c`.
pub fn partition_non_iid(
    dataset: &Dataset,
    n_clients: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<Vec<ClientData>> {
    if n_clients == 0 {
        return Err(Error::config("n_clients", "must be positive"));
    }
    if shards_per_client == 0 {
        return Err(Error::config("shards_per_client", "must be positive"));
    }
    let mut train = dataset.indices(Split::Train);
    let n_shards = n_clients * shards_per_client;
    if n_shards > train.len() {
        return Err(Error::config(
            "n_clients",
            format!(
                "{n_clients} clients x {shards_per_client} shards exceeds {} train samples",
                train.len()
            ),
        ));
    }
    train.sort_by_key(|&i| (dataset.label(i), i));
    let bounds = |k: usize| k * train.len() / n_shards;

    let mut order: Vec<usize> = (0..n_shards).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    Ok(order
        .chunks(shards_per_client)
        .enumerate()
        .map(|(client, shards)| {
            let mut indices: Vec<usize> = shards
                .iter()
                .flat_map(|&s| train[bounds(s)..bounds(s + 1)].iter().copied())
                .collect();
            indices.sort_unstable();
            ClientData {
                owner: client as VehicleId,
                indices,
            }
        })
        .collect())
}
