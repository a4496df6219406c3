//! Synthetic glyph dataset, augmentation, batch assembly and the `MLGD` file format.

mod augment;
mod format;
mod glyphs;

pub use augment::{augment, AugmentConfig};
pub use format::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_HEADER_LEN, DATASET_MAGIC, DATASET_VERSION};
pub use glyphs::{generate, generate_split, labels_of, render, sample_glyphs, Glyph, GlyphDatasetConfig, SplitKind, GLYPH_NAMES};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labels::LabelMatrix;
use crate::tensor::{Real, Tensor};

/// Mixes several integers into one 64-bit seed (splitmix64 finalizer per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// A stored split: interleaved RGB bytes (`N × H × W × 3`) and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
    labels: LabelMatrix,
    /// Generator descriptors, present only for freshly generated splits.
    glyphs: Vec<Vec<Glyph>>,
}

impl Split {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>, labels: LabelMatrix) -> Result<Self> {
        if pixels.len() != labels.rows() * height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "{} pixel bytes for {} images of {height}×{width}",
                pixels.len(),
                labels.rows()
            )));
        }
        Ok(Self { height, width, pixels, labels, glyphs: Vec::new() })
    }

    fn with_glyphs(mut self, glyphs: Vec<Vec<Glyph>>) -> Self {
        self.glyphs = glyphs;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn label_count(&self) -> usize {
        self.labels.labels()
    }

    pub fn labels(&self) -> &LabelMatrix {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn glyphs(&self) -> &[Vec<Glyph>] {
        &self.glyphs
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.height * self.width * 3;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` as channel-first reals in `[0, 1]` (`3 × H × W`).
    pub fn image_chw(&self, i: usize) -> Vec<Real> {
        let (h, w) = (self.height, self.width);
        let src = self.image_bytes(i);
        let mut out = vec![0.0; 3 * h * w];
        for p in 0..h * w {
            for c in 0..3 {
                out[c * h * w + p] = src[p * 3 + c] as Real / 255.0;
            }
        }
        out
    }

    /// Subset of images, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Split {
        let pixels = indices.iter().flat_map(|&i| self.image_bytes(i).iter().copied()).collect();
        let glyphs = if self.glyphs.is_empty() { Vec::new() } else { indices.iter().map(|&i| self.glyphs[i].clone()).collect() };
        Split { height: self.height, width: self.width, pixels, labels: self.labels.select(indices), glyphs }
    }

    /// Un-augmented batch of the given images.
    pub fn batch(&self, indices: &[usize]) -> LabeledImageBatch {
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
        for &i in indices {
            data.extend(self.image_chw(i));
        }
        LabeledImageBatch {
            images: Tensor::from_parts(vec![indices.len(), 3, h, w], data),
            labels: self.labels.select(indices),
            ids: indices.to_vec(),
        }
    }
}

/// Images (channel-first, `N × 3 × H × W`, values in `[0,1]`) with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageBatch {
    pub images: Tensor,
    pub labels: LabelMatrix,
    /// Index of each row's source image in its split.
    pub ids: Vec<usize>,
}

impl LabeledImageBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// How one epoch of batches is drawn from a split.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    /// Emit every sampled image twice with independent augmentations.
    pub augmented_pair: bool,
    /// Augmentation for single-copy batches and for the first copy of a pair.
    pub light: AugmentConfig,
    /// Augmentation for the second copy of a pair.
    pub strong: AugmentConfig,
}

impl BatchPlan {
    pub fn batches_per_epoch(&self, split_len: usize) -> usize {
        split_len / self.batch_size.max(1)
    }

    /// Deterministic shuffled order of the split for `epoch`.
    pub fn epoch_order(&self, split_len: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..split_len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 0x5348_5546, epoch as u64]));
        order.shuffle(&mut rng);
        order
    }

    /// Assembles batch `index` of `epoch` (drop-last: the ragged tail is never emitted).
    pub fn batch(&self, split: &Split, epoch: usize, index: usize) -> Result<LabeledImageBatch> {
        let per_epoch = self.batches_per_epoch(split.len());
        if self.batch_size == 0 || self.batch_size > split.len() {
            return Err(Error::InvalidArgument(format!(
                "batch size {} invalid for split of {}",
                self.batch_size,
                split.len()
            )));
        }
        if index >= per_epoch {
            return Err(Error::InvalidArgument(format!("batch {index} beyond {per_epoch} per epoch")));
        }
        let order = self.epoch_order(split.len(), epoch);
        let picked = &order[index * self.batch_size..(index + 1) * self.batch_size];
        let copies = if self.augmented_pair { 2 } else { 1 };
        let (h, w) = (split.height(), split.width());
        let mut data = Vec::with_capacity(picked.len() * copies * 3 * h * w);
        let mut ids = Vec::with_capacity(picked.len() * copies);
        for &i in picked {
            for copy in 0..copies {
                let cfg = if copy == 0 { &self.light } else { &self.strong };
                let seed = derive_seed(&[self.seed, epoch as u64, i as u64, copy as u64]);
                data.extend(augment(&split.image_chw(i), h, w, cfg, seed));
                ids.push(i);
            }
        }
        Ok(LabeledImageBatch {
            images: Tensor::from_parts(vec![ids.len(), 3, h, w], data),
            labels: split.labels().select(&ids),
            ids,
        })
    }

    /// Iterator over all batches of one epoch.
    pub fn epoch<'a>(&'a self, split: &'a Split, epoch: usize) -> impl Iterator<Item = Result<LabeledImageBatch>> + 'a {
        (0..self.batches_per_epoch(split.len())).map(move |b| self.batch(split, epoch, b))
    }
}

/// Batches for one epoch; see [`BatchPlan`].
pub fn make_batches<'a>(
    split: &'a Split,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
    with_augmented_pair: bool,
) -> impl Iterator<Item = Result<LabeledImageBatch>> + 'a {
    let plan = BatchPlan {
        batch_size,
        seed: shuffle_seed,
        augmented_pair: with_augmented_pair,
        light: AugmentConfig::flip_only(),
        strong: AugmentConfig::default(),
    };
    let per_epoch = plan.batches_per_epoch(split.len());
    (0..per_epoch).map(move |b| plan.batch(split, epoch, b))
}
