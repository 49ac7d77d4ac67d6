//! CIFAR binary parsing, augmentation, batching and a synthetic corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR10_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR100_RECORD: usize = 2 + CIFAR_PIXELS;
pub const FLIP_PROBABILITY: f64 = 0.5;

/// One image, channel-planar, pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub label: usize,
    /// Superclass of CIFAR-100 images; carried but unused.
    pub coarse_label: Option<usize>,
}

impl LabeledImage {
    pub fn pixel(&self, c: usize, h: usize, w: usize) -> f32 {
        self.pixels[(c * self.height + h) * self.width + w]
    }

    /// CIFAR-10 record bytes (label byte then planar pixels).
    pub fn to_cifar10_record(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + self.pixels.len());
        out.push(self.label as u8);
        out.extend(
            self.pixels
                .iter()
                .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        out
    }
}

fn decode_pixels(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| f32::from(b) / 255.0).collect()
}

fn cifar_image(pixels: &[u8], label: usize, coarse_label: Option<usize>) -> LabeledImage {
    LabeledImage {
        pixels: decode_pixels(pixels),
        channels: 3,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        label,
        coarse_label,
    }
}

fn check_length(bytes: &[u8], record: usize, what: &str) -> Result<()> {
    if !bytes.len().is_multiple_of(record) {
        return Err(Error::Format(format!(
            "{what} data of {} bytes is not a whole number of {record}-byte records",
            bytes.len()
        )));
    }
    Ok(())
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    check_length(bytes, CIFAR10_RECORD, "CIFAR-10")?;
    bytes
        .chunks_exact(CIFAR10_RECORD)
        .enumerate()
        .map(|(i, r)| {
            if r[0] > 9 {
                return Err(Error::Format(format!(
                    "CIFAR-10 record {i} has label {}",
                    r[0]
                )));
            }
            Ok(cifar_image(&r[1..], r[0] as usize, None))
        })
        .collect()
}

pub fn parse_cifar100(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    check_length(bytes, CIFAR100_RECORD, "CIFAR-100")?;
    bytes
        .chunks_exact(CIFAR100_RECORD)
        .enumerate()
        .map(|(i, r)| {
            if r[1] > 99 {
                return Err(Error::Format(format!(
                    "CIFAR-100 record {i} has fine label {}",
                    r[1]
                )));
            }
            Ok(cifar_image(&r[2..], r[1] as usize, Some(r[0] as usize)))
        })
        .collect()
}

/// Mirrors each channel left to right.
pub fn hflip(img: &LabeledImage) -> LabeledImage {
    let mut out = img.clone();
    for row in out.pixels.chunks_exact_mut(img.width) {
        row.reverse();
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    #[default]
    Synthetic,
}

impl DatasetKind {
    pub fn classes(self) -> Option<usize> {
        match self {
            DatasetKind::Cifar10 => Some(10),
            DatasetKind::Cifar100 => Some(100),
            DatasetKind::Synthetic => None,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "cifar100" => Ok(DatasetKind::Cifar100),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(format!("unknown dataset `{other}`")),
        }
    }
}

/// Train and test images of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

fn first_existing(dir: &Path, nested: &str, probe: &str) -> Result<PathBuf> {
    for candidate in [dir.join(nested), dir.to_path_buf()] {
        if candidate.join(probe).is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!(
            "no {probe} under {} or {}",
            dir.display(),
            dir.join(nested).display()
        ),
    )))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Reads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir` or its
/// `cifar-10-batches-bin` subdirectory.
pub fn load_cifar10_dir(dir: &Path) -> Result<Split> {
    load_cifar10_dir_limited(dir, None, None)
}

/// Like [`load_cifar10_dir`], keeping at most the first `train_limit` and
/// `test_limit` images and skipping files that are not needed.
pub fn load_cifar10_dir_limited(
    dir: &Path,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<Split> {
    let root = first_existing(dir, "cifar-10-batches-bin", "test_batch.bin")?;
    let train_limit = train_limit.unwrap_or(usize::MAX);
    let mut train = Vec::new();
    for i in 1..=5 {
        if train.len() >= train_limit {
            break;
        }
        train.extend(parse_cifar10(&read(
            &root.join(format!("data_batch_{i}.bin")),
        )?)?);
    }
    train.truncate(train_limit);
    let mut test = parse_cifar10(&read(&root.join("test_batch.bin"))?)?;
    test.truncate(test_limit.unwrap_or(usize::MAX));
    Ok(Split { train, test })
}

/// Reads `train.bin` and `test.bin` from `dir` or its `cifar-100-binary`
/// subdirectory.
pub fn load_cifar100_dir(dir: &Path) -> Result<Split> {
    let root = first_existing(dir, "cifar-100-binary", "test.bin")?;
    Ok(Split {
        train: parse_cifar100(&read(&root.join("train.bin"))?)?,
        test: parse_cifar100(&read(&root.join("test.bin"))?)?,
    })
}

/// Deterministic images whose class sets the height, horizontal offset and
/// colour of a Gaussian blob, plus uniform noise. The offset's side is
/// random, so the corpus is closed under horizontal flips. Labels are
/// balanced and shuffled.
pub fn synthetic_blobs(n: usize, classes: usize, size: usize, seed: u64) -> Vec<LabeledImage> {
    assert!(classes >= 2, "synthetic corpus needs at least two classes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let side = size as f32;
    let sigma = (side / 6.0).max(0.75);
    labels
        .into_iter()
        .map(|label| {
            let angle = std::f32::consts::TAU * label as f32 / classes as f32;
            let jitter = side * 0.05;
            let cy = side / 2.0 - 0.5 + side * 0.25 * angle.sin() + rng.gen_range(-jitter..=jitter);
            let mirror = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let cx = side / 2.0 - 0.5
                + mirror * side * 0.25 * angle.cos()
                + rng.gen_range(-jitter..=jitter);
            let colour = [
                0.5 + 0.5 * angle.cos(),
                0.5 + 0.5 * (angle + 2.1).cos(),
                0.5 + 0.5 * (angle + 4.2).cos(),
            ];
            let mut pixels = Vec::with_capacity(3 * size * size);
            for tint in colour {
                for h in 0..size {
                    for w in 0..size {
                        let d2 = (h as f32 - cy).powi(2) + (w as f32 - cx).powi(2);
                        let blob = (-d2 / (2.0 * sigma * sigma)).exp();
                        let v = 0.1 + 0.8 * blob * (0.3 + 0.7 * tint) + rng.gen_range(-0.1..=0.1);
                        pixels.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            LabeledImage {
                pixels,
                channels: 3,
                height: size,
                width: size,
                label,
                coarse_label: None,
            }
        })
        .collect()
}

/// Shuffling and batching of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub len: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: u64,
}

impl BatchPlan {
    pub fn new(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Self> {
        if len == 0 || batch_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "batching needs a non-empty dataset and batch size (got {len}, {batch_size})"
            )));
        }
        Ok(Self {
            len,
            batch_size,
            seed,
            epoch,
        })
    }

    pub fn batch_count(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * self.epoch + stream);
        rng
    }

    /// The epoch's permutation of `0..len`.
    pub fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len).collect();
        idx.shuffle(&mut self.rng(0));
        idx
    }

    /// Index groups in delivery order; the last may be partial.
    pub fn index_batches(&self) -> Vec<Vec<usize>> {
        self.order()
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Stacks images into an `(n, c, h, w)` tensor and a label vector.
pub fn stack<T: Element>(images: &[&LabeledImage]) -> Result<(Tensor<T>, Vec<usize>)> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack zero images".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::InvalidArgument(
                "images in one batch differ in shape".into(),
            ));
        }
        data.extend(img.pixels.iter().map(|&p| T::from_f64(f64::from(p))));
    }
    let labels = images.iter().map(|i| i.label).collect();
    Ok((Tensor::from_vec((images.len(), c, h, w), data)?, labels))
}

/// The epoch's batches. With `augment`, each image is independently
/// mirrored with probability one half.
pub fn batches<'a, T: Element>(
    data: &'a [LabeledImage],
    plan: BatchPlan,
    augment: bool,
) -> impl Iterator<Item = Result<(Tensor<T>, Vec<usize>)>> + 'a {
    let mut flip_rng = plan.rng(1);
    plan.index_batches().into_iter().map(move |idx| {
        let flipped: Vec<std::borrow::Cow<'_, LabeledImage>> = idx
            .iter()
            .map(|&i| {
                let img = &data[i];
                if augment && flip_rng.gen_bool(FLIP_PROBABILITY) {
                    std::borrow::Cow::Owned(hflip(img))
                } else {
                    std::borrow::Cow::Borrowed(img)
                }
            })
            .collect();
        let refs: Vec<&LabeledImage> = flipped.iter().map(|c| c.as_ref()).collect();
        stack(&refs)
    })
}

/// Sequential, unshuffled batches for evaluation.
pub fn eval_batches<'a, T: Element>(
    data: &'a [LabeledImage],
    batch_size: usize,
) -> impl Iterator<Item = Result<(Tensor<T>, Vec<usize>)>> + 'a {
    data.chunks(batch_size.max(1)).map(|chunk| {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        stack(&refs)
    })
}
