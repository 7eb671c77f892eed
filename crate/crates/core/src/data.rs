//! Dataset ingestion and preprocessing.
//!
//! CIFAR binary records are 1 label byte (or 2 for the 100-class layout:
//! coarse then fine, fine is used) followed by 3072 pixel bytes, row-major
//! red then green then blue planes. Pixels are scaled to [0, 1] on load.
//!
//! The training pipeline is pad-4/random-crop/flip in pixel space, then
//! per-channel normalization with statistics computed from the training
//! split only. A synthetic class-conditional Gaussian-blob generator stands
//! in for CIFAR at desk scale and writes to the same binary format.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

pub const IMAGE_CHANNELS: usize = 3;
const CROP_PADDING: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images in [0, 1] with integer labels below `num_classes`.
#[derive(Clone, Debug)]
pub struct LabeledImageSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Coarse labels of a 100-class file, kept only so encoding can
    /// reproduce the original bytes.
    pub coarse_labels: Option<Vec<u8>>,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape().h
    }

    /// Borrow of one image's (c, h, w) values.
    pub fn image(&self, index: usize) -> &[f32] {
        let len = IMAGE_CHANNELS * self.image_size() * self.image_size();
        &self.images.data()[index * len..(index + 1) * len]
    }
}

/// Per-channel normalization statistics from the training split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessSpec {
    pub mean: [f32; IMAGE_CHANNELS],
    pub std: [f32; IMAGE_CHANNELS],
}

impl PreprocessSpec {
    /// Identity normalization, for tests.
    pub fn identity() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }

    /// Text manifest recording the statistics for reproducibility.
    pub fn manifest(&self) -> String {
        format!(
            "channel_mean {} {} {}\nchannel_std {} {} {}\n",
            self.mean[0], self.mean[1], self.mean[2], self.std[0], self.std[1], self.std[2]
        )
    }
}

/// Computes mean and (biased) standard deviation per channel.
pub fn compute_preprocess_spec(set: &LabeledImageSet) -> Result<PreprocessSpec> {
    if set.is_empty() {
        return Err(Error::Data("cannot compute statistics of an empty dataset".into()));
    }
    let s = set.images.shape();
    let plane = s.h * s.w;
    let per_channel = (s.n * plane) as f64;
    let data = set.images.data();
    let mut mean = [0.0f64; IMAGE_CHANNELS];
    let mut var = [0.0f64; IMAGE_CHANNELS];
    for n in 0..s.n {
        for c in 0..IMAGE_CHANNELS {
            let base = (n * IMAGE_CHANNELS + c) * plane;
            for i in 0..plane {
                mean[c] += data[base + i] as f64;
            }
        }
    }
    for m in &mut mean {
        *m /= per_channel;
    }
    for n in 0..s.n {
        for c in 0..IMAGE_CHANNELS {
            let base = (n * IMAGE_CHANNELS + c) * plane;
            for i in 0..plane {
                let d = data[base + i] as f64 - mean[c];
                var[c] += d * d;
            }
        }
    }
    let mut out = PreprocessSpec { mean: [0.0; 3], std: [0.0; 3] };
    for c in 0..IMAGE_CHANNELS {
        let std = (var[c] / per_channel).sqrt();
        if std == 0.0 {
            return Err(Error::Data(format!(
                "channel {c} has zero standard deviation; cannot normalize"
            )));
        }
        out.mean[c] = mean[c] as f32;
        out.std[c] = std as f32;
    }
    Ok(out)
}

/// x <- (x - mean_c) / std_c on a whole dataset.
pub fn normalize(set: &LabeledImageSet, spec: &PreprocessSpec) -> LabeledImageSet {
    let s = set.images.shape();
    let plane = s.h * s.w;
    let mut data = set.images.data().to_vec();
    for n in 0..s.n {
        for c in 0..IMAGE_CHANNELS {
            let base = (n * IMAGE_CHANNELS + c) * plane;
            for v in &mut data[base..base + plane] {
                *v = (*v - spec.mean[c]) / spec.std[c];
            }
        }
    }
    LabeledImageSet {
        images: Tensor::from_vec(s, data).expect("same length"),
        labels: set.labels.clone(),
        num_classes: set.num_classes,
        split: set.split,
        coarse_labels: set.coarse_labels.clone(),
    }
}

/// Normalizes a single (c, h, w) image in place.
pub fn normalize_image(img: &mut [f32], size: usize, spec: &PreprocessSpec) {
    let plane = size * size;
    for c in 0..IMAGE_CHANNELS {
        for v in &mut img[c * plane..(c + 1) * plane] {
            *v = (*v - spec.mean[c]) / spec.std[c];
        }
    }
}

/// Zero-pads by `CROP_PADDING` on each side and crops a window whose top-left
/// corner in padded coordinates is (dy, dx); (4, 4) is the identity.
pub fn crop_with_offset(img: &[f32], size: usize, dy: usize, dx: usize) -> Vec<f32> {
    debug_assert!(dy <= 2 * CROP_PADDING && dx <= 2 * CROP_PADDING);
    let plane = size * size;
    let mut out = vec![0.0f32; img.len()];
    for c in 0..IMAGE_CHANNELS {
        for y in 0..size {
            let src_y = y as isize + dy as isize - CROP_PADDING as isize;
            if src_y < 0 || src_y >= size as isize {
                continue;
            }
            for x in 0..size {
                let src_x = x as isize + dx as isize - CROP_PADDING as isize;
                if src_x < 0 || src_x >= size as isize {
                    continue;
                }
                out[c * plane + y * size + x] = img[c * plane + src_y as usize * size + src_x as usize];
            }
        }
    }
    out
}

/// Mirrors an image left-right.
pub fn hflip(img: &[f32], size: usize) -> Vec<f32> {
    let plane = size * size;
    let mut out = vec![0.0f32; img.len()];
    for c in 0..IMAGE_CHANNELS {
        for y in 0..size {
            for x in 0..size {
                out[c * plane + y * size + x] = img[c * plane + y * size + (size - 1 - x)];
            }
        }
    }
    out
}

/// Training augmentation: random 4-pixel-padded crop, then horizontal flip
/// with probability one half. Draw order: dy, dx, flip.
pub fn augment_image(img: &[f32], size: usize, rng: &mut impl Rng) -> Vec<f32> {
    let dy = rng.random_range(0..=2 * CROP_PADDING);
    let dx = rng.random_range(0..=2 * CROP_PADDING);
    let cropped = crop_with_offset(img, size, dy, dx);
    if rng.random_bool(0.5) {
        hflip(&cropped, size)
    } else {
        cropped
    }
}

fn record_len(num_classes: usize) -> Result<usize> {
    match num_classes {
        10 => Ok(1 + 3072),
        100 => Ok(2 + 3072),
        other => Err(Error::Data(format!(
            "CIFAR binary layout exists only for 10 or 100 classes, got {other}"
        ))),
    }
}

/// Parses a CIFAR binary file. `num_classes` selects the 10- or 100-class
/// record layout.
pub fn load_cifar_binary(path: &Path, num_classes: usize, split: Split) -> Result<LabeledImageSet> {
    let bytes = std::fs::read(path)?;
    decode_cifar_binary(&bytes, num_classes, split)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Decodes CIFAR records from a byte buffer.
pub fn decode_cifar_binary(bytes: &[u8], num_classes: usize, split: Split) -> Result<LabeledImageSet> {
    let rec = record_len(num_classes)?;
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Data(format!(
            "truncated file: {} bytes is not a positive multiple of the {rec}-byte record",
            bytes.len()
        )));
    }
    let count = bytes.len() / rec;
    let mut labels = Vec::with_capacity(count);
    let mut coarse = (num_classes == 100).then(Vec::new);
    let mut data = Vec::with_capacity(count * 3072);
    for r in 0..count {
        let record = &bytes[r * rec..(r + 1) * rec];
        let (label, pixels) = if num_classes == 100 {
            if let Some(c) = coarse.as_mut() {
                c.push(record[0]);
            }
            (record[1] as usize, &record[2..])
        } else {
            (record[0] as usize, &record[1..])
        };
        if label >= num_classes {
            return Err(Error::Data(format!(
                "record {r}: label {label} out of range for {num_classes} classes"
            )));
        }
        labels.push(label);
        data.extend(pixels.iter().map(|&b| b as f32 / 255.0));
    }
    Ok(LabeledImageSet {
        images: Tensor::from_vec(Shape::new(count, 3, 32, 32), data)?,
        labels,
        num_classes,
        split,
        coarse_labels: coarse,
    })
}

/// Re-encodes a dataset to the CIFAR binary layout. Inverse of
/// [`decode_cifar_binary`] for well-formed files.
pub fn encode_cifar_binary(set: &LabeledImageSet) -> Result<Vec<u8>> {
    let rec = record_len(set.num_classes)?;
    let s = set.images.shape();
    if s.h != 32 || s.w != 32 {
        return Err(Error::Data(format!(
            "CIFAR binary layout requires 32x32 images, got {}x{}",
            s.h, s.w
        )));
    }
    let mut out = Vec::with_capacity(set.len() * rec);
    let data = set.images.data();
    for i in 0..set.len() {
        if set.num_classes == 100 {
            out.push(set.coarse_labels.as_ref().map_or(0, |c| c[i]));
        }
        out.push(set.labels[i] as u8);
        let img = &data[i * 3072..(i + 1) * 3072];
        out.extend(img.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

/// Class-conditional Gaussian blobs: each class owns a blob position on a
/// circle and a color pattern; images are blob + pixel noise, clamped to
/// [0, 1]. High `signal` against low `noise` makes the classes linearly
/// separable. Labels go round-robin, so classes are exactly balanced when
/// `count` divides by `num_classes` and near-balanced otherwise.
pub fn synthesize_dataset_with(
    num_classes: usize,
    count: usize,
    image_size: usize,
    seed: u64,
    signal: f32,
    noise: f32,
    split: Split,
) -> Result<LabeledImageSet> {
    if num_classes < 2 {
        return Err(Error::Data("need at least 2 classes".into()));
    }
    if count == 0 {
        return Err(Error::Data("count must be positive".into()));
    }
    if image_size < 8 {
        return Err(Error::Data("image size must be at least 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0f64, 1.0).expect("unit normal");
    let plane = image_size * image_size;
    let mut data = vec![0.0f32; count * IMAGE_CHANNELS * plane];
    let mut labels = Vec::with_capacity(count);
    let sigma = image_size as f32 / 6.0;

    for i in 0..count {
        let label = i % num_classes;
        labels.push(label);
        let angle = std::f32::consts::TAU * label as f32 / num_classes as f32;
        let cx = image_size as f32 / 2.0 + 0.28 * image_size as f32 * angle.cos();
        let cy = image_size as f32 / 2.0 + 0.28 * image_size as f32 * angle.sin();
        for c in 0..IMAGE_CHANNELS {
            let tone = (std::f32::consts::TAU * (label as f32 / num_classes as f32 + c as f32 / 3.0))
                .cos();
            let base = (i * IMAGE_CHANNELS + c) * plane;
            for y in 0..image_size {
                for x in 0..image_size {
                    let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                    let bump = (-d2 / (2.0 * sigma * sigma)).exp();
                    let eta = gauss.sample(&mut rng) as f32;
                    data[base + y * image_size + x] =
                        (0.5 + signal * tone * bump + noise * eta).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(LabeledImageSet {
        images: Tensor::from_vec(Shape::new(count, IMAGE_CHANNELS, image_size, image_size), data)?,
        labels,
        num_classes,
        split,
        coarse_labels: None,
    })
}

/// High signal-to-noise synthetic dataset with the default blob contrast.
pub fn synthesize_dataset(
    num_classes: usize,
    count: usize,
    image_size: usize,
    seed: u64,
) -> Result<LabeledImageSet> {
    synthesize_dataset_with(num_classes, count, image_size, seed, 0.45, 0.05, Split::Train)
}

/// Companion test split drawn from an independent stream of the same seed.
pub fn synthesize_test_split(
    num_classes: usize,
    count: usize,
    image_size: usize,
    seed: u64,
    signal: f32,
    noise: f32,
) -> Result<LabeledImageSet> {
    synthesize_dataset_with(
        num_classes,
        count,
        image_size,
        rng::mix_seed(seed, rng::SALT_TEST_SPLIT),
        signal,
        noise,
        Split::Test,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_set(count: usize, seed: u64) -> LabeledImageSet {
        synthesize_dataset(10, count, 32, seed).unwrap()
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = tiny_set(40, 5);
        let b = tiny_set(40, 5);
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        for class in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 4);
        }
        let c = tiny_set(40, 6);
        assert_ne!(a.images.data(), c.images.data());
    }

    #[test]
    fn synthetic_rejects_degenerate_requests() {
        assert!(synthesize_dataset(10, 0, 32, 0).is_err());
        assert!(synthesize_dataset(1, 10, 32, 0).is_err());
        // Non-divisible counts stay near-balanced.
        let set = synthesize_dataset(10, 15, 32, 0).unwrap();
        for class in 0..10 {
            let c = set.labels.iter().filter(|&&l| l == class).count();
            assert!(c == 1 || c == 2, "class {class} has {c}");
        }
    }

    #[test]
    fn nearest_centroid_separates_high_snr_blobs() {
        // A linear classifier (nearest class centroid) gets under 5%
        // training error when the signal dominates the noise.
        let set = tiny_set(200, 9);
        let dim = 3 * 32 * 32;
        let mut centroids = vec![vec![0.0f64; dim]; 10];
        let mut counts = [0usize; 10];
        for i in 0..set.len() {
            let img = set.image(i);
            let y = set.labels[i];
            counts[y] += 1;
            for (c, &v) in centroids[y].iter_mut().zip(img) {
                *c += v as f64;
            }
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }
        let mut wrong = 0;
        for i in 0..set.len() {
            let img = set.image(i);
            let mut best = (f64::INFINITY, 0usize);
            for (k, c) in centroids.iter().enumerate() {
                let d: f64 = img
                    .iter()
                    .zip(c)
                    .map(|(&v, &m)| (v as f64 - m).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            wrong += (best.1 != set.labels[i]) as usize;
        }
        let err = wrong as f64 / set.len() as f64;
        assert!(err < 0.05, "nearest-centroid error {err}");
    }

    #[test]
    fn cifar10_round_trip_with_hand_crafted_records() {
        // Two records with labels 3 and 7.
        let mut bytes = Vec::new();
        bytes.push(3u8);
        bytes.extend((0..3072).map(|i| (i % 251) as u8));
        bytes.push(7u8);
        bytes.extend((0..3072).map(|i| (i * 7 % 256) as u8));

        let set = decode_cifar_binary(&bytes, 10, Split::Train).unwrap();
        assert_eq!(set.labels, vec![3, 7]);
        assert_eq!(encode_cifar_binary(&set).unwrap(), bytes);
    }

    #[test]
    fn cifar100_uses_fine_label_and_round_trips() {
        let mut bytes = Vec::new();
        bytes.push(11u8); // coarse
        bytes.push(42u8); // fine
        bytes.extend(std::iter::repeat_n(0u8, 3072));
        let set = decode_cifar_binary(&bytes, 100, Split::Test).unwrap();
        assert_eq!(set.labels, vec![42]);
        assert!(set.images.data().iter().all(|&v| v == 0.0));
        assert_eq!(encode_cifar_binary(&set).unwrap(), bytes);
    }

    #[test]
    fn truncated_and_out_of_range_files_are_rejected() {
        let bytes = vec![0u8; 3073 * 2 + 1];
        let err = decode_cifar_binary(&bytes, 10, Split::Train).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        let mut bytes = vec![0u8; 3073];
        bytes[0] = 10;
        let err = decode_cifar_binary(&bytes, 10, Split::Train).unwrap_err().to_string();
        assert!(err.contains("label 10"), "{err}");
    }

    #[test]
    fn normalization_statistics_and_arithmetic() {
        let set = tiny_set(50, 3);
        let spec = compute_preprocess_spec(&set).unwrap();
        let normalized = normalize(&set, &spec);
        // Recomputed statistics of the normalized set are ~ (0, 1).
        let s = normalized.images.shape();
        let plane = s.h * s.w;
        for c in 0..3 {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for n in 0..s.n {
                let base = (n * 3 + c) * plane;
                for i in 0..plane {
                    sum += normalized.images.data()[base + i] as f64;
                    count += 1;
                }
            }
            assert!((sum / count as f64).abs() < 1e-5, "channel {c}");
        }

        // mean 0.5, std 0.5: 1 -> 1, 0 -> -1.
        let hand = PreprocessSpec { mean: [0.5; 3], std: [0.5; 3] };
        let mut img = vec![1.0f32, 0.0, 0.5, 0.25];
        // One channel worth of 2x... use a 2x2 single plane per channel of a
        // 3-channel 2x2 image. Fill remaining channels with 0.5.
        let mut full = vec![0.5f32; 12];
        full[..4].copy_from_slice(&img);
        normalize_image(&mut full, 2, &hand);
        img = full[..4].to_vec();
        assert_eq!(img, vec![1.0, -1.0, 0.0, -0.5]);
    }

    #[test]
    fn constant_dataset_is_rejected() {
        let set = LabeledImageSet {
            images: Tensor::filled(Shape::new(4, 3, 32, 32), 0.25),
            labels: vec![0, 1, 0, 1],
            num_classes: 2,
            split: Split::Train,
            coarse_labels: None,
        };
        assert!(compute_preprocess_spec(&set).is_err());
    }

    #[test]
    fn center_crop_is_identity_and_flip_is_involution() {
        let set = tiny_set(10, 1);
        let img = set.image(0);
        assert_eq!(crop_with_offset(img, 32, 4, 4), img);
        assert_eq!(hflip(&hflip(img, 32), 32), img);
    }

    #[test]
    fn augmentation_statistics() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let trials = 10_000usize;
        let mut flips = 0usize;
        let mut offsets = vec![0usize; 81];
        for _ in 0..trials {
            let dy = rng.random_range(0..=8usize);
            let dx = rng.random_range(0..=8usize);
            offsets[dy * 9 + dx] += 1;
            flips += rng.random_bool(0.5) as usize;
        }
        // Flip frequency within 3 sigma of 1/2.
        let sigma = (0.25f64 / trials as f64).sqrt();
        assert!((flips as f64 / trials as f64 - 0.5).abs() < 3.0 * sigma);
        // Offsets uniform over 81 cells by chi-square at 99% confidence
        // (80 dof -> critical value 112.33).
        let expect = trials as f64 / 81.0;
        let chi2: f64 = offsets.iter().map(|&o| (o as f64 - expect).powi(2) / expect).sum();
        assert!(chi2 < 112.33, "chi-square {chi2}");
    }

    #[test]
    fn augment_preserves_shape_and_range() {
        use rand::SeedableRng;
        let set = tiny_set(10, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = augment_image(set.image(0), 32, &mut rng);
        assert_eq!(out.len(), 3 * 32 * 32);
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
