//! Synthetic multi-center data with per-center covariate shift.
//!
//! Every center draws images from the same class-conditional pattern: a
//! noisy flat background, and for positive samples a Gaussian blob with a
//! fixed colour signature at a random position. Negatives can optionally
//! carry a grey blob of the same shape, so that only the relation between
//! channels separates the classes.
//!
//! Each center then applies its own [`CenterShift`]
//! `x -> clamp(s * x + o, 0, 1) ^ g` per channel. Labels never depend on the
//! shift.

pub mod dataset;
pub mod format;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use dataset::{split_partitions, Batch, DataOrigin, LabeledDataset, Split, SplitRatios};
pub use format::{dataset_path, decode_dataset, encode_dataset, load_dataset, save_dataset};

use crate::error::{Error, Result};
use crate::model::InputShape;
use crate::seeds::{self, Stream};
use crate::tensor::Tensor;

/// Per-channel affine + power-law distortion of one center.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterShift {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl CenterShift {
    pub fn identity(channels: usize) -> Self {
        CenterShift {
            scale: vec![1.0; channels],
            offset: vec![0.0; channels],
            gamma: vec![1.0; channels],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.scale.iter().all(|&s| s == 1.0)
            && self.offset.iter().all(|&o| o == 0.0)
            && self.gamma.iter().all(|&g| g == 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().chain(&self.gamma).any(|&v| !(v > 0.0)) || self.offset.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidConfig(format!("invalid center shift {self:?}")));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, channel: usize, x: f64) -> f64 {
        let v = (self.scale[channel] * x + self.offset[channel]).clamp(0.0, 1.0);
        if self.gamma[channel] == 1.0 {
            v
        } else {
            v.powf(self.gamma[channel])
        }
    }
}

/// Parameters of the class-conditional image pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSignal {
    /// Peak amplitude of the blob.
    pub contrast: f64,
    /// Blob standard deviation as a fraction of the image width.
    pub radius: f64,
    /// Standard deviation of i.i.d. pixel noise.
    pub noise_std: f64,
    /// Probability that a negative sample carries a grey distractor blob.
    pub distractor_rate: f64,
}

impl Default for LabelSignal {
    fn default() -> Self {
        LabelSignal {
            contrast: 0.25,
            radius: 0.12,
            noise_std: 0.1,
            distractor_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_centers: usize,
    pub samples_per_center: usize,
    pub image: InputShape,
    /// Fraction of positive samples.
    pub class_balance: f64,
    /// 0 gives identical input distributions at every center.
    pub shift_magnitude: f64,
    pub signal: LabelSignal,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_centers: 3,
            samples_per_center: 2000,
            image: InputShape::new(3, 32, 32),
            class_balance: 0.5,
            shift_magnitude: 0.5,
            signal: LabelSignal::default(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let s = &self.signal;
        let problems = [
            (self.n_centers < 1, "n_centers must be >= 1"),
            (self.samples_per_center < 10, "samples_per_center must be >= 10"),
            (
                !(self.class_balance > 0.0 && self.class_balance < 1.0),
                "class_balance must be in (0, 1)",
            ),
            (!(self.shift_magnitude >= 0.0), "shift_magnitude must be >= 0"),
            (self.image.volume() == 0, "image dimensions must be positive"),
            (!(s.radius > 0.0), "signal radius must be positive"),
            (!(s.noise_std >= 0.0), "noise_std must be >= 0"),
            (
                !(0.0..=1.0).contains(&s.distractor_rate),
                "distractor_rate must be in [0, 1]",
            ),
            (!s.contrast.is_finite(), "contrast must be finite"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::InvalidConfig((*msg).into())),
            None => Ok(()),
        }
    }
}

/// Colour signature of the positive-class blob, cycled over channels.
const SIGNATURE: [f64; 3] = [1.0, -0.6, 0.8];

/// The shift of every center. Centers are spread evenly around a circle in
/// channel space, with a seed-dependent phase, and along a brightness axis.
pub fn center_shifts(spec: &SyntheticSpec) -> Vec<CenterShift> {
    let k = spec.n_centers;
    let c = spec.image.channels;
    let m = spec.shift_magnitude;
    if m == 0.0 {
        return vec![CenterShift::identity(c); k];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, Stream::Shift, 0));
    let phase0 = rng.gen_range(0.0..2.0 * PI);
    (0..k)
        .map(|center| {
            let brightness = if k == 1 {
                0.0
            } else {
                -1.0 + 2.0 * center as f64 / (k - 1) as f64
            };
            let phi = phase0 + 2.0 * PI * center as f64 / k as f64;
            let mut shift = CenterShift::identity(c);
            for ch in 0..c {
                let theta = phi + 2.0 * PI * ch as f64 / c as f64;
                shift.offset[ch] = m * (0.3 * brightness + 0.15 * theta.cos());
                shift.scale[ch] = (m * 0.5 * theta.sin()).exp();
                shift.gamma[ch] = (m * 0.6 * (theta + 1.0).cos()).exp();
            }
            shift
        })
        .collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws one un-shifted image into `out` (`[C, H, W]`).
fn draw_base_image(rng: &mut ChaCha8Rng, image: InputShape, signal: &LabelSignal, positive: bool, out: &mut [f64]) {
    let InputShape {
        channels,
        height,
        width,
    } = image;
    let level = rng.gen_range(0.3..0.6);
    let tint: Vec<f64> = (0..channels).map(|_| 0.03 * normal(rng)).collect();
    let blob = if positive {
        Some(true)
    } else if rng.gen_bool(signal.distractor_rate) {
        Some(false)
    } else {
        None
    };
    let sigma = signal.radius * width as f64;
    let (cy, cx) = (rng.gen_range(0.0..height as f64), rng.gen_range(0.0..width as f64));
    for ch in 0..channels {
        let weight = match blob {
            Some(true) => SIGNATURE[ch % SIGNATURE.len()],
            Some(false) => 0.4,
            None => 0.0,
        };
        for y in 0..height {
            for x in 0..width {
                let mut v = level + tint[ch] + signal.noise_std * normal(rng);
                if weight != 0.0 {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    v += signal.contrast * weight * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                out[(ch * height + y) * width + x] = v.clamp(0.0, 1.0);
            }
        }
    }
}

/// One dataset per center, deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<LabeledDataset>> {
    spec.validate()?;
    let shifts = center_shifts(spec);
    let n = spec.samples_per_center;
    let vol = spec.image.volume();
    let hw = spec.image.height * spec.image.width;
    let n_pos = ((spec.class_balance * n as f64).round() as usize).clamp(1, n - 1);

    shifts
        .iter()
        .enumerate()
        .map(|(center, shift)| {
            shift.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, Stream::Images, center as u64));
            let mut labels: Vec<u8> = (0..n).map(|i| (i < n_pos) as u8).collect();
            labels.shuffle(&mut rng);
            let mut base = vec![0.0; vol];
            let mut images = Vec::with_capacity(n * vol);
            for &label in &labels {
                draw_base_image(&mut rng, spec.image, &spec.signal, label == 1, &mut base);
                images.extend(base.iter().enumerate().map(|(i, &v)| shift.apply(i / hw, v) as f32));
            }
            let s = spec.image;
            LabeledDataset::new(
                center as u32,
                Split::Full,
                Tensor::new(vec![n, s.channels, s.height, s.width], images)?,
                labels,
            )
        })
        .collect()
}

/// Generates and splits every center: `(train, val, test)` per center.
pub fn generate_partitioned(
    spec: &SyntheticSpec,
    ratios: SplitRatios,
) -> Result<Vec<(LabeledDataset, LabeledDataset, LabeledDataset)>> {
    generate_synthetic(spec)?
        .iter()
        .map(|ds| split_partitions(ds, ratios, seeds::derive(spec.seed, Stream::Split, ds.center_id as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(k: usize, shift: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_centers: k,
            samples_per_center: 200,
            image: InputShape::new(3, 8, 8),
            shift_magnitude: shift,
            seed: 17,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn zero_magnitude_means_identity_shifts() {
        assert!(center_shifts(&small(4, 0.0)).iter().all(CenterShift::is_identity));
    }

    #[test]
    fn identity_shift_leaves_pixels() {
        let s = CenterShift::identity(1);
        for x in [0.0, 0.123, 0.5, 1.0] {
            assert_eq!(s.apply(0, x), x);
        }
    }

    #[test]
    fn pixels_in_unit_interval_and_labels_binary() {
        for ds in generate_synthetic(&small(3, 2.0)).unwrap() {
            assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(ds.labels.iter().all(|&l| l <= 1));
            let (neg, pos) = ds.class_counts();
            assert_eq!((neg, pos), (100, 100));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small(2, 0.5)).unwrap();
        let b = generate_synthetic(&small(2, 0.5)).unwrap();
        assert_eq!(a, b);
        let mut other = small(2, 0.5);
        other.seed += 1;
        assert_ne!(a, generate_synthetic(&other).unwrap());
    }

    #[test]
    fn single_center() {
        let ds = generate_synthetic(&small(1, 0.5)).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].center_id, 0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small(2, 0.5);
        s.class_balance = 1.0;
        assert!(generate_synthetic(&s).is_err());
        let mut s = small(0, 0.5);
        s.n_centers = 0;
        assert!(generate_synthetic(&s).is_err());
        let mut s = small(2, 0.5);
        s.samples_per_center = 9;
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn only_positives_carry_structure_without_noise() {
        let mut s = small(1, 0.0);
        s.signal.noise_std = 0.0;
        let ds = generate_synthetic(&s).unwrap().remove(0);
        let vol = 3 * 64;
        for (i, &label) in ds.labels.iter().enumerate() {
            let ch0 = &ds.images.data()[i * vol..i * vol + 64];
            let spread = ch0.iter().cloned().fold(f32::MIN, f32::max) - ch0.iter().cloned().fold(f32::MAX, f32::min);
            assert_eq!(spread > 0.0, label == 1, "sample {i}");
        }
    }

    #[test]
    fn shifted_centers_differ_in_mean() {
        let mut s = small(2, 0.5);
        s.samples_per_center = 400;
        let ds = generate_synthetic(&s).unwrap();
        assert!((ds[0].mean_pixel() - ds[1].mean_pixel()).abs() >= 0.05);
    }
}
