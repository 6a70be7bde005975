//! Batch normalization with running statistics kept apart from the learned
//! affine parameters.
//!
//! A layer computes, per channel,
//!
//! ```text
//! y = gamma * (x - mu) / sqrt(var + eps) + beta
//! ```
//!
//! where `(mu, var)` are the batch moments in training mode and the running
//! statistics in evaluation mode. Moments are taken over the batch and all
//! spatial positions of a channel, using the biased (population) variance.
//! `gamma`/`beta` take part in gradient descent and federated aggregation;
//! the running statistics are only ever updated from data.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-channel running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<R = f64> {
    pub mean: Vec<R>,
    pub var: Vec<R>,
}

impl<R: Real> BnStats<R> {
    /// `mean = 0`, `var = 1`.
    pub fn fresh(channels: usize) -> Self {
        BnStats {
            mean: vec![R::zero(); channels],
            var: vec![R::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Learned scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct BnLearned<'a, R> {
    pub gamma: &'a [R],
    pub beta: &'a [R],
}

/// Batch moments of one training-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<R> {
    pub mean: Vec<R>,
    pub var: Vec<R>,
}

/// What [`backward`] needs from a training-mode pass.
#[derive(Clone, Debug)]
pub struct TrainCache<R> {
    pub x_hat: Vec<R>,
    pub inv_std: Vec<R>,
    pub moments: BatchMoments<R>,
    shape: Vec<usize>,
    layout: Layout,
}

impl<R> TrainCache<R> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    n: usize,
    c: usize,
    extent: usize,
}

impl Layout {
    fn of(shape: &[usize]) -> Result<Layout> {
        if shape.len() < 2 {
            return Err(Error::Shape(format!(
                "batch norm input needs [batch, channels, ...], got {shape:?}"
            )));
        }
        Ok(Layout {
            n: shape[0],
            c: shape[1],
            extent: shape[2..].iter().product(),
        })
    }

    /// Iterates the flat offsets of channel `ch`, one contiguous run per sample.
    fn runs(&self, ch: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.n).map(move |s| {
            let start = (s * self.c + ch) * self.extent;
            start..start + self.extent
        })
    }

    fn count(&self) -> usize {
        self.n * self.extent
    }
}

fn check_channels<R>(layout: Layout, gamma: &[R], beta: &[R]) -> Result<()> {
    if gamma.len() != layout.c || beta.len() != layout.c {
        return Err(Error::Shape(format!(
            "batch norm over {} channels given gamma/beta of length {}/{}",
            layout.c,
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Exact per-channel mean and biased variance (two passes).
pub fn channel_moments<R: Real>(x: &Tensor<R>) -> Result<BatchMoments<R>> {
    let layout = Layout::of(x.shape())?;
    let data = x.data();
    let count = R::of_f64(layout.count() as f64);
    let mut mean = Vec::with_capacity(layout.c);
    let mut var = Vec::with_capacity(layout.c);
    for ch in 0..layout.c {
        let sum: R = layout.runs(ch).flat_map(|r| data[r].iter().copied()).sum();
        let m = sum / count;
        let sq: R = layout
            .runs(ch)
            .flat_map(|r| data[r].iter().copied())
            .map(|v| (v - m) * (v - m))
            .sum();
        mean.push(m);
        var.push(sq / count);
    }
    Ok(BatchMoments { mean, var })
}

/// Normalizes with batch moments. Pure: running statistics are not touched;
/// fold the returned moments in with [`update_running`].
pub fn forward_train_pure<R: Real>(
    x: &Tensor<R>,
    learned: BnLearned<'_, R>,
    eps: f64,
) -> Result<(Tensor<R>, TrainCache<R>)> {
    let layout = Layout::of(x.shape())?;
    check_channels(layout, learned.gamma, learned.beta)?;
    if layout.count() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "batch norm reduces over {} value(s) per channel; need at least 2",
            layout.count()
        )));
    }
    let moments = channel_moments(x)?;
    let eps = R::of_f64(eps);
    let inv_std: Vec<R> = moments.var.iter().map(|&v| (v + eps).sqrt().recip()).collect();

    let data = x.data();
    let mut x_hat = vec![R::zero(); data.len()];
    let mut y = vec![R::zero(); data.len()];
    for ch in 0..layout.c {
        let (m, s, g, b) = (moments.mean[ch], inv_std[ch], learned.gamma[ch], learned.beta[ch]);
        for run in layout.runs(ch) {
            for i in run {
                let h = (data[i] - m) * s;
                x_hat[i] = h;
                y[i] = g * h + b;
            }
        }
    }
    let y = Tensor::new(x.shape().to_vec(), y)?;
    y.ensure_finite(|| "batch norm output (train)".into())?;
    Ok((
        y,
        TrainCache {
            x_hat,
            inv_std,
            moments,
            shape: x.shape().to_vec(),
            layout,
        },
    ))
}

/// Exponential moving average: `stat <- (1 - momentum) * stat + momentum * batch`.
pub fn update_running<R: Real>(stats: &mut BnStats<R>, moments: &BatchMoments<R>, momentum: f64) {
    let keep = R::of_f64(1.0 - momentum);
    let take = R::of_f64(momentum);
    for (s, &b) in stats.mean.iter_mut().zip(&moments.mean) {
        *s = keep * *s + take * b;
    }
    for (s, &b) in stats.var.iter_mut().zip(&moments.var) {
        *s = keep * *s + take * b;
    }
}

/// Training-mode forward that also folds the batch moments into `stats`.
pub fn forward_train<R: Real>(
    x: &Tensor<R>,
    learned: BnLearned<'_, R>,
    stats: &mut BnStats<R>,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor<R>, TrainCache<R>)> {
    let (y, cache) = forward_train_pure(x, learned, eps)?;
    if stats.channels() != cache.layout.c {
        return Err(Error::Shape(format!(
            "running statistics have {} channels, input has {}",
            stats.channels(),
            cache.layout.c
        )));
    }
    update_running(stats, &cache.moments, momentum);
    Ok((y, cache))
}

/// Normalizes with the running statistics.
pub fn forward_eval<R: Real>(
    x: &Tensor<R>,
    learned: BnLearned<'_, R>,
    mean: &[R],
    var: &[R],
    eps: f64,
) -> Result<Tensor<R>> {
    let layout = Layout::of(x.shape())?;
    check_channels(layout, learned.gamma, learned.beta)?;
    if mean.len() != layout.c || var.len() != layout.c {
        return Err(Error::Shape(format!(
            "running statistics have {}/{} channels, input has {}",
            mean.len(),
            var.len(),
            layout.c
        )));
    }
    let eps = R::of_f64(eps);
    let data = x.data();
    let mut y = vec![R::zero(); data.len()];
    for ch in 0..layout.c {
        let s = (var[ch] + eps).sqrt().recip();
        let (m, g, b) = (mean[ch], learned.gamma[ch], learned.beta[ch]);
        for run in layout.runs(ch) {
            for i in run {
                y[i] = g * ((data[i] - m) * s) + b;
            }
        }
    }
    let y = Tensor::new(x.shape().to_vec(), y)?;
    y.ensure_finite(|| "batch norm output (eval)".into())?;
    Ok(y)
}

/// Gradients through a training-mode pass, including the dependence of the
/// batch mean and variance on every input.
pub fn backward<R: Real>(
    cache: &TrainCache<R>,
    gamma: &[R],
    upstream: &Tensor<R>,
) -> Result<(Tensor<R>, Vec<R>, Vec<R>)> {
    let layout = cache.layout;
    if upstream.shape() != cache.shape.as_slice() || gamma.len() != layout.c {
        return Err(Error::Shape(format!(
            "batch norm backward: cache {:?}, upstream {:?}, gamma {}",
            cache.shape,
            upstream.shape(),
            gamma.len()
        )));
    }
    let dy = upstream.data();
    let count = R::of_f64(layout.count() as f64);
    let mut dx = vec![R::zero(); dy.len()];
    let mut dgamma = vec![R::zero(); layout.c];
    let mut dbeta = vec![R::zero(); layout.c];
    for ch in 0..layout.c {
        let mut sum_dy = R::zero();
        let mut sum_dy_xhat = R::zero();
        for run in layout.runs(ch) {
            for i in run {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * cache.x_hat[i];
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * cache.inv_std[ch] / count;
        for run in layout.runs(ch) {
            for i in run {
                dx[i] = scale * (count * dy[i] - sum_dy - cache.x_hat[i] * sum_dy_xhat);
            }
        }
    }
    Ok((Tensor::new(cache.shape.clone(), dx)?, dgamma, dbeta))
}
