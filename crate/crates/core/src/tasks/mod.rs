//! Synthetic steganalysis tasks: smooth random cover textures, four
//! embedding schemes, and paired 60/20/20 splits.

mod embed;
mod image;

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use embed::{embed, embed_with_report, EmbedKind, EmbedReport, EmbedScheme};
pub use image::GrayImage;

use crate::error::{Error, Result};
use crate::models::LabelVector;
use crate::rng::{mix_seed, rng_for, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest cover side accepted by [`generate_covers`].
pub const MIN_SIDE: usize = 8;

/// Smallest pair count that leaves at least one pair in every split.
pub const MIN_PAIRS: usize = 10;

/// Covers spanning the full 8-bit range.
pub fn generate_covers(count: usize, size: [usize; 2], seed: u64) -> Result<Vec<GrayImage>> {
    generate_covers_in_range(count, size, seed, 255.0)
}

/// Seeded white noise, box-smoothed (3x3, twice), then min-max rescaled onto
/// a window of width `range` centred on 127.5. Cover `i` depends only on
/// `(seed, i)`.
pub fn generate_covers_in_range(count: usize, size: [usize; 2], seed: u64, range: f64) -> Result<Vec<GrayImage>> {
    let [h, w] = size;
    if count == 0 {
        return Err(Error::Empty("cover count"));
    }
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::Task(format!("cover size must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")));
    }
    if !(range > 0.0 && range <= 255.0) {
        return Err(Error::Task(format!("texture range must lie in (0, 255], got {range}")));
    }
    Ok((0..count)
        .into_par_iter()
        .map(|i| cover(h, w, mix_seed(seed, &[stream::COVER, i as u64]), range))
        .collect())
}

fn cover(h: usize, w: usize, seed: u64, range: f64) -> GrayImage {
    let mut rng = rng_for(seed, &[]);
    let noise: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
    let smooth = image::box_filter(&image::box_filter(&noise, h, w, 3), h, w, 3);
    let lo = smooth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let base = (255.0 - range) / 2.0;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = smooth
        .iter()
        .map(|&v| (base + (v - lo) / span * range).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage::new(h, w, px).expect("buffer sized from h and w")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Image indices per split. Pair `p` owns images `2p` (cover) and `2p + 1`
/// (stego), and both always sit in the same split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// `floor(0.6 n)` / `floor(0.2 n)` / remainder pairs, in pair order.
    pub fn paired(pairs: usize) -> Result<Self> {
        let train = pairs * 3 / 5;
        let val = pairs / 5;
        let test = pairs - train - val;
        if pairs < MIN_PAIRS || train == 0 || val == 0 || test == 0 {
            return Err(Error::Task(format!(
                "{pairs} pairs cannot fill train/val/test; need at least {MIN_PAIRS}"
            )));
        }
        let images = |from: usize, to: usize| (from..to).flat_map(|p| [2 * p, 2 * p + 1]).collect();
        Ok(Self {
            train: images(0, train),
            val: images(train, train + val),
            test: images(train + val, pairs),
        })
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub scheme: EmbedScheme,
    pub seed: u64,
    /// Interleaved cover/stego images; label 0 = cover, 1 = stego.
    pub images: Vec<GrayImage>,
    pub labels: LabelVector,
    pub splits: Splits,
    pub embedding: EmbedReport,
}

/// Pixel-to-input mapping: `(p − 128) / pixel_scale`.
pub fn normalize_pixel<T: Scalar>(p: u8, pixel_scale: f64) -> T {
    T::of((p as f64 - 128.0) / pixel_scale)
}

impl TaskDataset {
    pub fn pair_count(&self) -> usize {
        self.images.len() / 2
    }

    pub fn size(&self) -> [usize; 2] {
        [self.images[0].height(), self.images[0].width()]
    }

    /// Inputs shaped `[n, h, w]` and labels for one split.
    pub fn split_data<T: Scalar>(&self, split: Split, pixel_scale: f64) -> Result<(Tensor<T>, LabelVector)> {
        self.subset(self.splits.get(split), pixel_scale)
    }

    pub fn subset<T: Scalar>(&self, idx: &[usize], pixel_scale: f64) -> Result<(Tensor<T>, LabelVector)> {
        let [h, w] = self.size();
        let mut data = Vec::with_capacity(idx.len() * h * w);
        for &i in idx {
            let img = self.images.get(i).ok_or_else(|| Error::Task(format!("image index {i} out of range")))?;
            data.extend(img.pixels().iter().map(|&p| normalize_pixel::<T>(p, pixel_scale)));
        }
        Ok((Tensor::new(vec![idx.len(), h, w], data)?, self.labels.select(idx)))
    }

    pub fn manifest(&self) -> TaskManifest {
        TaskManifest {
            task_id: self.task_id,
            scheme: self.scheme.clone(),
            seed: self.seed,
            pair_count: self.pair_count(),
            size: self.size(),
            counts: [self.splits.train.len(), self.splits.val.len(), self.splits.test.len()],
            embedding: self.embedding,
            splits: self.splits.clone(),
        }
    }

    /// Writes every image as `NNNNN.pgm` plus `manifest.json` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        crate::io::create_dir(dir)?;
        for (i, img) in self.images.iter().enumerate() {
            img.write_pgm(&dir.join(format!("{i:05}.pgm")))?;
        }
        crate::io::write_json(&dir.join("manifest.json"), &self.manifest())
    }
}

/// Dataset description written next to exported images. Image counts are
/// train/val/test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub task_id: usize,
    pub scheme: EmbedScheme,
    pub seed: u64,
    pub pair_count: usize,
    pub size: [usize; 2],
    pub counts: [usize; 3],
    pub embedding: EmbedReport,
    pub splits: Splits,
}

pub fn build_task(task_id: usize, scheme: &EmbedScheme, pair_count: usize, size: [usize; 2], seed: u64) -> Result<TaskDataset> {
    build_task_in_range(task_id, scheme, pair_count, size, seed, 255.0)
}

pub fn build_task_in_range(
    task_id: usize,
    scheme: &EmbedScheme,
    pair_count: usize,
    size: [usize; 2],
    seed: u64,
    texture_range: f64,
) -> Result<TaskDataset> {
    scheme.validate()?;
    let splits = Splits::paired(pair_count)?;
    let covers = generate_covers_in_range(pair_count, size, seed, texture_range)?;
    let stegos: Vec<(GrayImage, EmbedReport)> = covers.par_iter().map(|c| embed_with_report(c, scheme)).collect();
    let mut embedding = EmbedReport::default();
    let mut images = Vec::with_capacity(2 * pair_count);
    for (c, (s, r)) in covers.into_iter().zip(stegos) {
        embedding.add(&r);
        images.push(c);
        images.push(s);
    }
    let labels = LabelVector::new((0..2 * pair_count).map(|i| i % 2).collect(), 2)?;
    Ok(TaskDataset { task_id, scheme: scheme.clone(), seed, images, labels, splits, embedding })
}

fn default_pairs() -> usize {
    2000
}

fn default_size() -> [usize; 2] {
    [16, 16]
}

fn default_range() -> f64 {
    40.0
}

fn default_pixel_scale() -> f64 {
    8.0
}

/// An ordered task sequence plus shared generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawSequence")]
pub struct SequenceSpec {
    pub schemes: Vec<EmbedScheme>,
    pub pair_count: usize,
    pub size: [usize; 2],
    /// Width of the cover intensity window; narrower means fainter textures
    /// and a payload that is easier to see.
    pub texture_range: f64,
    /// Per-task override of `texture_range`, one entry per scheme.
    pub texture_ranges: Option<Vec<f64>>,
    pub pixel_scale: f64,
    /// Data seed; derived from the run seed when absent.
    pub seed: Option<u64>,
}

/// Config-file form. The default per-task ranges belong to the default
/// schemes, so they only apply when `schemes` is left out.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSequence {
    schemes: Option<Vec<EmbedScheme>>,
    #[serde(default = "default_pairs")]
    pair_count: usize,
    #[serde(default = "default_size")]
    size: [usize; 2],
    #[serde(default = "default_range")]
    texture_range: f64,
    #[serde(default)]
    texture_ranges: Option<Vec<f64>>,
    #[serde(default = "default_pixel_scale")]
    pixel_scale: f64,
    #[serde(default)]
    seed: Option<u64>,
}

impl From<RawSequence> for SequenceSpec {
    fn from(raw: RawSequence) -> Self {
        let (schemes, texture_ranges) = match raw.schemes {
            Some(s) => (s, raw.texture_ranges),
            None => (
                SequenceSpec::default_schemes(),
                raw.texture_ranges.or_else(|| Some(SequenceSpec::default_texture_ranges())),
            ),
        };
        Self {
            schemes,
            pair_count: raw.pair_count,
            size: raw.size,
            texture_range: raw.texture_range,
            texture_ranges,
            pixel_scale: raw.pixel_scale,
            seed: raw.seed,
        }
    }
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            schemes: Self::default_schemes(),
            pair_count: default_pairs(),
            size: default_size(),
            texture_range: default_range(),
            texture_ranges: Some(Self::default_texture_ranges()),
            pixel_scale: default_pixel_scale(),
            seed: None,
        }
    }
}

impl SequenceSpec {
    /// pm1-adaptive (3x3), pm1-uniform, pm1-adaptive (5x5), hf-noise; 0.4 bpp.
    pub fn default_schemes() -> Vec<EmbedScheme> {
        vec![
            EmbedScheme::new(EmbedKind::Pm1Adaptive, 0.4, 101),
            EmbedScheme::new(EmbedKind::Pm1Uniform, 0.4, 202),
            EmbedScheme::new(EmbedKind::Pm1Adaptive, 0.4, 303).with_window(5),
            EmbedScheme::new(EmbedKind::HfNoise, 0.4, 404),
        ]
    }

    /// Three tasks on faint textures, then hf-noise on busy ones. The busier
    /// covers push the detector's threshold up, which is what makes the
    /// earlier, fainter payloads slip under it during plain fine-tuning.
    pub fn default_texture_ranges() -> Vec<f64> {
        vec![40.0, 40.0, 40.0, 140.0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return Err(Error::Config("task sequence has no schemes".into()));
        }
        for (i, s) in self.schemes.iter().enumerate() {
            s.validate().map_err(|e| Error::Config(format!("task {i}: {e}")))?;
            if self.schemes[..i].iter().any(|o| o.label() == s.label()) {
                return Err(Error::Config(format!("task {i} repeats scheme {}", s.label())));
            }
        }
        if !(self.pixel_scale > 0.0 && self.pixel_scale.is_finite()) {
            return Err(Error::Config(format!("pixel_scale must be positive, got {}", self.pixel_scale)));
        }
        if let Some(r) = &self.texture_ranges {
            if r.len() != self.schemes.len() {
                return Err(Error::Config(format!("texture_ranges has {} entries for {} tasks", r.len(), self.schemes.len())));
            }
        }
        for t in 0..self.schemes.len() {
            let r = self.range_of(t);
            if !(r > 0.0 && r <= 255.0) {
                return Err(Error::Config(format!("texture range for task {t} must lie in (0, 255], got {r}")));
            }
        }
        Splits::paired(self.pair_count).map_err(|e| Error::Config(e.to_string()))?;
        if self.size[0] < MIN_SIDE || self.size[1] < MIN_SIDE {
            return Err(Error::Config(format!("image size must be at least {MIN_SIDE}x{MIN_SIDE}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.schemes.len()
    }

    /// Keeps the first `n` tasks.
    pub fn truncate(&mut self, n: usize) {
        self.schemes.truncate(n);
        if let Some(r) = &mut self.texture_ranges {
            r.truncate(n);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.schemes.is_empty()
    }

    pub fn data_seed(&self, run_seed: u64) -> u64 {
        self.seed.unwrap_or_else(|| mix_seed(run_seed, &[stream::DATA]))
    }

    pub fn task_seed(&self, run_seed: u64, task: usize) -> u64 {
        mix_seed(self.data_seed(run_seed), &[task as u64])
    }

    pub fn range_of(&self, task: usize) -> f64 {
        self.texture_ranges.as_ref().and_then(|r| r.get(task).copied()).unwrap_or(self.texture_range)
    }

    pub fn build(&self, run_seed: u64) -> Result<Vec<TaskDataset>> {
        self.validate()?;
        self.schemes
            .iter()
            .enumerate()
            .map(|(t, s)| build_task_in_range(t, s, self.pair_count, self.size, self.task_seed(run_seed, t), self.range_of(t)))
            .collect()
    }
}
