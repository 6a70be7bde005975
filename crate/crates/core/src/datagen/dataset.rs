use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::InputShape;
use crate::real::Real;
use crate::tensor::Tensor;

/// Which partition of a center's data a set of samples came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Full,
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Full => "full",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Split::Full),
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

/// Provenance of a batch: which center and which split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DataOrigin {
    pub center_id: u32,
    pub split: Split,
}

/// A mini-batch converted to the model's element type.
#[derive(Clone, Debug)]
pub struct Batch<R> {
    pub images: Tensor<R>,
    pub labels: Vec<usize>,
    pub origin: DataOrigin,
}

/// Images `[n, C, H, W]` with pixel values in `[0, 1]` and binary labels
/// (1 = tumor-like pattern present).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub center_id: u32,
    pub split: Split,
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(center_id: u32, split: Split, images: Tensor<f32>, labels: Vec<u8>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "images must be [n, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Format(format!("label {bad} is not binary")));
        }
        Ok(LabeledDataset {
            center_id,
            split,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> InputShape {
        let s = self.images.shape();
        InputShape::new(s[1], s[2], s[3])
    }

    pub fn origin(&self) -> DataOrigin {
        DataOrigin {
            center_id: self.center_id,
            split: self.split,
        }
    }

    /// (negatives, positives)
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (self.len() - pos, pos)
    }

    fn volume(&self) -> usize {
        self.sample_shape().volume()
    }

    /// Copies the given samples (repeats allowed) into a batch.
    pub fn gather<R: Real>(&self, indices: &[usize]) -> Result<Batch<R>> {
        let vol = self.volume();
        let mut data = Vec::with_capacity(indices.len() * vol);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Shape(format!(
                    "sample {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend(
                self.images.data()[i * vol..(i + 1) * vol]
                    .iter()
                    .map(|&v| R::of_f64(v as f64)),
            );
            labels.push(self.labels[i] as usize);
        }
        let s = self.sample_shape();
        Ok(Batch {
            images: Tensor::new(vec![indices.len(), s.channels, s.height, s.width], data)?,
            labels,
            origin: self.origin(),
        })
    }

    /// Consecutive batches covering the dataset in order; the last may be short.
    pub fn batches<R: Real>(&self, size: usize) -> impl Iterator<Item = Result<Batch<R>>> + '_ {
        let size = size.max(1);
        (0..self.len())
            .step_by(size)
            .map(move |start| self.gather(&(start..(start + size).min(self.len())).collect::<Vec<_>>()))
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<LabeledDataset> {
        let vol = self.volume();
        let mut data = Vec::with_capacity(indices.len() * vol);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * vol..(i + 1) * vol]);
        }
        let s = self.sample_shape();
        LabeledDataset::new(
            self.center_id,
            split,
            Tensor::new(vec![indices.len(), s.channels, s.height, s.width], data)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Concatenation in argument order; the result carries `center_id`.
    pub fn concat(parts: &[&LabeledDataset], center_id: u32, split: Split) -> Result<LabeledDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyDataset("nothing to concatenate".into()))?;
        let shape = first.sample_shape();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.sample_shape() != shape {
                return Err(Error::Shape(format!(
                    "cannot concatenate {} samples with {} samples",
                    p.sample_shape(),
                    shape
                )));
            }
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
        }
        LabeledDataset::new(
            center_id,
            split,
            Tensor::new(vec![labels.len(), shape.channels, shape.height, shape.width], data)?,
            labels,
        )
    }

    /// Mean pixel value over all samples, channels and positions.
    pub fn mean_pixel(&self) -> f64 {
        let d = self.images.data();
        d.iter().map(|&v| v as f64).sum::<f64>() / d.len().max(1) as f64
    }
}

/// Fractions of a center's samples assigned to train / validation / test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !(*r > 0.0)) || ((all.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split ratios must be positive and sum to 1, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

/// Stratified, deterministic train/validation/test partition.
///
/// Each class is shuffled, the classes are interleaved so that every prefix
/// of the merged order holds each class in proportion, and the merged order
/// is cut at the ratio boundaries. Split sizes are `round(train * n)`,
/// `round(val * n)` and the remainder; each split's class count is within one
/// sample of the global proportion.
pub fn split_partitions(
    ds: &LabeledDataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    ratios.validate()?;
    let n = ds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut keyed: Vec<(f64, u8, usize)> = Vec::with_capacity(n);
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..n).filter(|&i| ds.labels[i] == class).collect();
        members.shuffle(&mut rng);
        let count = members.len() as f64;
        keyed.extend(
            members
                .into_iter()
                .enumerate()
                .map(|(rank, i)| ((rank as f64 + 0.5) / count, class, i)),
        );
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();

    let n_train = (ratios.train * n as f64).round() as usize;
    let n_val = ((ratios.val * n as f64).round() as usize).min(n - n_train.min(n));
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::EmptyDataset(format!(
            "{n} samples are too few for a {}/{}/{} split",
            ratios.train, ratios.val, ratios.test
        )));
    }

    let mut parts = Vec::with_capacity(3);
    for (range, split) in [
        (0..n_train, Split::Train),
        (n_train..n_train + n_val, Split::Val),
        (n_train + n_val..n, Split::Test),
    ] {
        let mut idx = order[range].to_vec();
        idx.shuffle(&mut rng);
        let part = ds.subset(&idx, split)?;
        let (neg, pos) = part.class_counts();
        if neg == 0 || pos == 0 {
            return Err(Error::EmptyDataset(format!(
                "{split} split of center {} would have no {} samples",
                ds.center_id,
                if pos == 0 { "positive" } else { "negative" }
            )));
        }
        parts.push(part);
    }
    let test = parts.pop().expect("three parts");
    let val = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok((train, val, test))
}
