//! CIFAR-10 binary ingestion, the pad-crop-flip augmentation, and synthetic image sets.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const PIXELS: usize = CHANNELS * SIDE * SIDE;
/// One label byte followed by the R, G and B planes.
pub const RECORD_BYTES: usize = 1 + PIXELS;
pub const PAD: usize = 4;
pub const CIFAR10_CLASSES: usize = 10;

pub const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR10_TEST_FILE: &str = "test_batch.bin";

/// Images `[N, 3, 32, 32]` in `[0, 1]` with labels and the normalisation statistics of the
/// training split they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub channel_means: [f64; CHANNELS],
    pub channel_stds: [f64; CHANNELS],
}

impl LabeledImageSet {
    /// Builds a set and computes its own channel statistics (use for training splits).
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let [n, c, h, w] = images.dims4("images")?;
        if c != CHANNELS || h != SIDE || w != SIDE {
            return Err(Error::dim(format!(
                "images must be [N, 3, 32, 32], got {:?}",
                images.shape()
            )));
        }
        if labels.len() != n {
            return Err(Error::dim(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!("label {bad} outside [0, {num_classes})")));
        }
        let (channel_means, channel_stds) = channel_stats(&images);
        Ok(Self {
            images,
            labels,
            num_classes,
            channel_means,
            channel_stds,
        })
    }

    /// Replaces the statistics with those of a training split.
    pub fn with_stats_of(mut self, train: &LabeledImageSet) -> Self {
        self.channel_means = train.channel_means;
        self.channel_stds = train.channel_stds;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images.data()[i * PIXELS..(i + 1) * PIXELS]
    }

    /// The first `n` samples, with statistics recomputed from them.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let images = Tensor::new(
            &[n, CHANNELS, SIDE, SIDE],
            self.images.data()[..n * PIXELS].to_vec(),
        )?;
        Self::new(images, self.labels[..n].to_vec(), self.num_classes)
    }

    /// The first `n` samples, keeping the current statistics.
    pub fn take_keep_stats(&self, n: usize) -> Result<Self> {
        let stats = self.clone();
        Ok(self.take(n)?.with_stats_of(&stats))
    }

    /// Whole set normalised by its channel statistics.
    pub fn normalized(&self) -> Tensor<f32> {
        let mut out = self.images.clone();
        normalize_in_place(out.data_mut(), &self.channel_means, &self.channel_stds);
        out
    }

    /// Gathers a batch: normalised, optionally augmented with `rng`.
    pub fn batch<R: Rng>(
        &self,
        indices: &[usize],
        augment_rng: Option<&mut R>,
    ) -> Result<(Tensor<f32>, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        match augment_rng {
            Some(rng) => {
                for &i in indices {
                    let (dy, dx, flip) = draw_augmentation(rng);
                    data.extend(crop_flip(self.image(i), dy, dx, flip));
                }
            }
            None => {
                for &i in indices {
                    data.extend_from_slice(self.image(i));
                }
            }
        }
        normalize_in_place(&mut data, &self.channel_means, &self.channel_stds);
        Ok((Tensor::new(&[indices.len(), CHANNELS, SIDE, SIDE], data)?, labels))
    }
}

/// Per-channel mean and population standard deviation over `[N, C, H, W]` images.
pub fn channel_stats(images: &Tensor<f32>) -> ([f64; CHANNELS], [f64; CHANNELS]) {
    let mut means = [0.0; CHANNELS];
    let mut stds = [1.0; CHANNELS];
    let n = images.shape()[0];
    let plane = SIDE * SIDE;
    let count = (n * plane) as f64;
    if n == 0 {
        return (means, stds);
    }
    for c in 0..CHANNELS {
        let values = || {
            (0..n).flat_map(move |i| {
                let start = (i * CHANNELS + c) * plane;
                images.data()[start..start + plane].iter().map(|&v| v as f64)
            })
        };
        let mean = values().sum::<f64>() / count;
        let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        means[c] = mean;
        stds[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    (means, stds)
}

/// `(x - mean_c) / std_c` over CHW images laid out back to back.
pub fn normalize_in_place(data: &mut [f32], means: &[f64; CHANNELS], stds: &[f64; CHANNELS]) {
    let plane = SIDE * SIDE;
    for (i, chunk) in data.chunks_mut(plane).enumerate() {
        let c = i % CHANNELS;
        for v in chunk {
            *v = ((*v as f64 - means[c]) / stds[c]) as f32;
        }
    }
}

/// Crop offsets in `0..=2*PAD` and a mirror flag with probability one half.
pub fn draw_augmentation<R: Rng>(rng: &mut R) -> (usize, usize, bool) {
    let dy = rng.gen_range(0..=2 * PAD);
    let dx = rng.gen_range(0..=2 * PAD);
    (dy, dx, rng.gen_bool(0.5))
}

/// Zero-pads a CHW 32x32 image by 4, crops 32x32 at `(dy, dx)` in padded coordinates and
/// optionally mirrors it horizontally. No normalisation.
pub fn crop_flip(image: &[f32], dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    assert!(dy <= 2 * PAD && dx <= 2 * PAD, "crop offset out of range");
    assert_eq!(image.len(), PIXELS);
    let mut out = vec![0.0f32; PIXELS];
    for c in 0..CHANNELS {
        let src = &image[c * SIDE * SIDE..(c + 1) * SIDE * SIDE];
        let dst = &mut out[c * SIDE * SIDE..(c + 1) * SIDE * SIDE];
        for y in 0..SIDE {
            let sy = (y + dy) as isize - PAD as isize;
            if !(0..SIDE as isize).contains(&sy) {
                continue;
            }
            for x in 0..SIDE {
                let sx = (x + dx) as isize - PAD as isize;
                if !(0..SIDE as isize).contains(&sx) {
                    continue;
                }
                let ox = if flip { SIDE - 1 - x } else { x };
                dst[y * SIDE + ox] = src[sy as usize * SIDE + sx as usize];
            }
        }
    }
    out
}

/// Augments a single image with given offsets and flip, then normalises it.
pub fn augment_with(
    image: &[f32],
    dy: usize,
    dx: usize,
    flip: bool,
    means: &[f64; CHANNELS],
    stds: &[f64; CHANNELS],
) -> Vec<f32> {
    let mut out = crop_flip(image, dy, dx, flip);
    normalize_in_place(&mut out, means, stds);
    out
}

/// Pad-crop-flip-normalise for every image of a `[N, 3, 32, 32]` batch.
pub fn augment<R: Rng>(
    batch: &Tensor<f32>,
    rng: &mut R,
    means: &[f64; CHANNELS],
    stds: &[f64; CHANNELS],
) -> Result<Tensor<f32>> {
    let [n, c, h, w] = batch.dims4("augment input")?;
    if c != CHANNELS || h != SIDE || w != SIDE {
        return Err(Error::dim(format!("augmentation needs 3x32x32 images, got {:?}", batch.shape())));
    }
    let mut data = Vec::with_capacity(n * PIXELS);
    for img in batch.data().chunks(PIXELS) {
        let (dy, dx, flip) = draw_augmentation(rng);
        data.extend(augment_with(img, dy, dx, flip, means, stds));
    }
    Tensor::new(batch.shape(), data)
}

fn ingestion(file: &Path, record: usize, offset: u64, message: impl Into<String>) -> Error {
    Error::Ingestion {
        file: file.to_path_buf(),
        record,
        offset,
        message: message.into(),
    }
}

/// Reads one CIFAR-10 binary batch file. Pixels are appended to `pixels` scaled to `[0, 1]`.
///
/// A trailing partial record is reported with its 1-based record number and the byte offset
/// at which it starts.
pub fn read_batch_file(path: &Path, pixels: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<usize> {
    let bytes = fs::read(path).map_err(|e| ingestion(path, 0, 0, format!("cannot read file: {e}")))?;
    let full = bytes.len() / RECORD_BYTES;
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(ingestion(
            path,
            full + 1,
            (full * RECORD_BYTES) as u64,
            format!(
                "truncated record: {} of {RECORD_BYTES} bytes present",
                bytes.len() % RECORD_BYTES
            ),
        ));
    }
    if full == 0 {
        return Err(ingestion(path, 1, 0, "file holds no records"));
    }
    pixels.reserve(full * PIXELS);
    for (r, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR10_CLASSES {
            return Err(ingestion(
                path,
                r + 1,
                (r * RECORD_BYTES) as u64,
                format!("label {label} is not a CIFAR-10 class"),
            ));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(full)
}

fn read_split(dir: &Path, files: &[&str]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        read_batch_file(&dir.join(f), &mut pixels, &mut labels)?;
    }
    let n = labels.len();
    Ok((Tensor::new(&[n, CHANNELS, SIDE, SIDE], pixels)?, labels))
}

/// Loads the binary CIFAR-10 distribution from `dir` (the `cifar-10-batches-bin` folder).
/// The test split is normalised with training statistics.
pub fn load_cifar10(dir: &Path) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let (train_x, train_y) = read_split(dir, &CIFAR10_TRAIN_FILES)?;
    let (test_x, test_y) = read_split(dir, &[CIFAR10_TEST_FILE])?;
    let train = LabeledImageSet::new(train_x, train_y, CIFAR10_CLASSES)?;
    let test = LabeledImageSet::new(test_x, test_y, CIFAR10_CLASSES)?.with_stats_of(&train);
    Ok((train, test))
}

/// Looks for the batch files in `dir` or in `dir/cifar-10-batches-bin`.
pub fn locate_cifar10(dir: &Path) -> Option<PathBuf> {
    [dir.to_path_buf(), dir.join("cifar-10-batches-bin")]
        .into_iter()
        .find(|d| d.join(CIFAR10_TEST_FILE).is_file() && d.join(CIFAR10_TRAIN_FILES[0]).is_file())
}

/// Per-class blob colour, spread around the colour wheel.
fn class_colour(class: usize, num_classes: usize) -> [f64; CHANNELS] {
    let angle = 2.0 * PI * class as f64 / num_classes as f64;
    let mut col = [0.0; CHANNELS];
    for (ch, v) in col.iter_mut().enumerate() {
        *v = 0.5 + 0.4 * (angle + 2.0 * PI * ch as f64 / CHANNELS as f64).cos();
    }
    col
}

/// Class-conditional Gaussian blobs on a grey background: sample `i` has label
/// `i % num_classes`, a blob of the class colour at a jittered centre, and pixel noise.
pub fn synthetic_set(num_classes: usize, n: usize, seed: u64) -> Result<LabeledImageSet> {
    if num_classes == 0 || n < num_classes {
        return Err(Error::config(
            "data",
            format!("synthetic set needs N >= num_classes >= 1, got N={n}, classes={num_classes}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid normal");
    let sigma2 = 2.0 * 7.0f64 * 7.0;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let colour = class_colour(label, num_classes);
        let cy = 15.5 + rng.gen_range(-4.0..=4.0);
        let cx = 15.5 + rng.gen_range(-4.0..=4.0);
        for col in colour {
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let g = (-r2 / sigma2).exp();
                    let v = 0.5 + g * (col - 0.5) + noise.sample(&mut rng);
                    pixels.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(label);
    }
    LabeledImageSet::new(Tensor::new(&[n, CHANNELS, SIDE, SIDE], pixels)?, labels, num_classes)
}

/// A synthetic train/test pair drawn from independent seeds; the test set uses training
/// statistics.
pub fn synthetic_split(
    num_classes: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let train = synthetic_set(num_classes, n_train, seed)?;
    let test = synthetic_set(num_classes, n_test.max(num_classes), seed ^ 0x7e57)?.with_stats_of(&train);
    Ok((train, test))
}
