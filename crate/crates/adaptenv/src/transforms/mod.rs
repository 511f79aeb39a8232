//! Environment transformations `T_γ` and benchmark dataset construction.
//!
//! Three transformation families instantiate environments:
//!
//! - color correlation: a two-channel encoding where the digit is painted
//!   into the channel selected by a noisy-label-correlated color bit;
//! - rotation: bilinear rotation about the image center with zero padding,
//!   over the fixed angle set {0°, 45°, 90°, 135°, 180°};
//! - group shift: resampling of a spurious tabular feature so it agrees
//!   with the label with a chosen probability.
//!
//! Training materializes transformed minibatches through the same kernels
//! used by the eager dataset builders, so a dataset built once and a
//! per-step transformed batch agree bit for bit given the same draws.

pub mod idx;

use crate::error::{Error, Result};
use ndarray::{Array2, Array3, Array4, ArrayView1, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::{Arc, OnceLock};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// The rotation environments, in degrees.
pub const ANGLES_DEG: [f64; 5] = [0.0, 45.0, 90.0, 135.0, 180.0];

/// Colored-MNIST label-flip rate (the community-standard construction).
pub const COLOR_LABEL_NOISE: f64 = 0.25;

// Synthetic spurious-group family: a 2-D Gaussian core separated by
// ±CORE_SHIFT per class plus one spurious feature at ±SPURIOUS_SCALE whose
// sign tracks the label with the configured probability.
pub const CORE_SHIFT: f32 = 0.75;
pub const SPURIOUS_SCALE: f32 = 2.0;
pub const SPURIOUS_NOISE: f32 = 0.1;

// ---------------------------------------------------------------------------
// Batch types
// ---------------------------------------------------------------------------

/// A batch of images `(n, channels, 28, 28)` with binary labels.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Array4<f32>,
    pub labels: Vec<u8>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f32>, labels: Vec<u8>) -> Result<Self> {
        let (n, _c, h, w) = pixels.dim();
        if n == 0 {
            return Err(Error::config("image batch must be nonempty"));
        }
        if n != labels.len() {
            return Err(Error::config(format!(
                "batch has {n} images but {} labels",
                labels.len()
            )));
        }
        if h != IMAGE_SIDE || w != IMAGE_SIDE {
            return Err(Error::config(format!(
                "expected {IMAGE_SIDE}x{IMAGE_SIDE} images, got {h}x{w}"
            )));
        }
        if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::config("pixel values must lie in [0, 1]"));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::config("labels must be binary"));
        }
        Ok(ImageBatch { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().1
    }

    /// Flatten to `(n, channels * 784)` model inputs.
    pub fn features(&self) -> Array2<f32> {
        let (n, c, h, w) = self.pixels.dim();
        self.pixels
            .to_shape((n, c * h * w))
            .expect("contiguous")
            .to_owned()
    }
}

/// Single-channel images stored flat `(n, 784)`: the base data the
/// transformation families act on.
#[derive(Debug, Clone)]
pub struct GrayBatch {
    pub pixels: Array2<f32>,
    pub labels: Vec<u8>,
}

impl GrayBatch {
    /// Build from raw MNIST images and digit labels; labels become
    /// `1[digit >= 5]`.
    pub fn from_mnist(images: ArrayView3<f32>, digits: &[u8]) -> Result<Self> {
        let (n, h, w) = images.dim();
        if n == 0 || n != digits.len() {
            return Err(Error::config("images/labels length mismatch or empty"));
        }
        if h != IMAGE_SIDE || w != IMAGE_SIDE {
            return Err(Error::config("expected 28x28 images"));
        }
        let pixels = images
            .to_shape((n, h * w))
            .expect("contiguous")
            .to_owned();
        let labels = digits.iter().map(|&d| u8::from(d >= 5)).collect();
        Ok(GrayBatch { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gather a subset by index.
    pub fn select(&self, indices: &[usize]) -> GrayBatch {
        GrayBatch {
            pixels: self.pixels.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// View as a 1-channel [`ImageBatch`].
    pub fn to_image_batch(&self) -> Result<ImageBatch> {
        let n = self.len();
        let pixels = self
            .pixels
            .to_shape((n, 1, IMAGE_SIDE, IMAGE_SIDE))
            .expect("contiguous")
            .to_owned();
        ImageBatch::new(pixels, self.labels.clone())
    }
}

/// Tabular batch for the synthetic spurious-group family.
#[derive(Debug, Clone)]
pub struct TabularBatch {
    /// `(n, 3)`: two core features plus the spurious feature.
    pub features: Array2<f32>,
    pub labels: Vec<u8>,
    pub spurious_bits: Vec<u8>,
    /// Group id `2*y + b` in {0, 1, 2, 3}.
    pub groups: Vec<u8>,
}

impl TabularBatch {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group_sizes(&self) -> [usize; 4] {
        let mut sizes = [0usize; 4];
        for &g in &self.groups {
            sizes[g as usize] += 1;
        }
        sizes
    }
}

/// Model-ready minibatch produced by materializing an environment.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub features: Array2<f32>,
    pub labels: Vec<u8>,
    pub groups: Option<Vec<u8>>,
}

// ---------------------------------------------------------------------------
// Environment descriptors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Identity of the environment a dataset was built from, so worst-case
/// evaluation can group by environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvDescriptor {
    /// Color-correlation strength `e`.
    Correlation { e: f64 },
    /// Rotation angle by index into [`ANGLES_DEG`].
    Angle { index: usize },
    /// Spurious-feature agreement probability.
    SpuriousCorr { p: f64 },
    /// Annotated group id within a grouped dataset.
    Group { id: u8 },
}

impl std::fmt::Display for EnvDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EnvDescriptor::Correlation { e } => write!(f, "e={e:.2}"),
            EnvDescriptor::Angle { index } => write!(f, "{}°", ANGLES_DEG[*index]),
            EnvDescriptor::SpuriousCorr { p } => write!(f, "corr={p:.2}"),
            EnvDescriptor::Group { id } => write!(f, "group{id}"),
        }
    }
}

/// A transformation `T_γ` instantiating one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum EnvTransform {
    ColorCorrelation { gamma: f64, label_noise: f64 },
    Rotation { angle_index: usize },
    GroupShift { correlation: f64 },
}

impl EnvTransform {
    pub fn validate(&self) -> Result<()> {
        match self {
            EnvTransform::ColorCorrelation { gamma, label_noise } => {
                if !(0.0..=1.0).contains(gamma) {
                    return Err(Error::config(format!("gamma {gamma} outside [0, 1]")));
                }
                if !(0.0..=1.0).contains(label_noise) {
                    return Err(Error::config(format!(
                        "label_noise {label_noise} outside [0, 1]"
                    )));
                }
            }
            EnvTransform::Rotation { angle_index } => {
                if *angle_index >= ANGLES_DEG.len() {
                    return Err(Error::config(format!(
                        "angle index {angle_index} outside 0..{}",
                        ANGLES_DEG.len()
                    )));
                }
            }
            EnvTransform::GroupShift { correlation } => {
                if !(0.0..=1.0).contains(correlation) {
                    return Err(Error::config(format!(
                        "correlation {correlation} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Color-correlation transform
// ---------------------------------------------------------------------------

/// Per-sample draws of the color construction: flip each label with
/// probability `label_noise`, then flip the color bit relative to the noisy
/// label with probability `gamma`. Draw order is one noise draw then one
/// color draw per sample, so eager and lazy paths agree exactly.
pub fn color_draws(
    labels: &[u8],
    gamma: f64,
    label_noise: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<u8>, Vec<u8>) {
    let mut noisy = Vec::with_capacity(labels.len());
    let mut color = Vec::with_capacity(labels.len());
    for &y in labels {
        let flip_label = rng.random::<f64>() < label_noise;
        let y_tilde = y ^ u8::from(flip_label);
        let flip_color = rng.random::<f64>() < gamma;
        noisy.push(y_tilde);
        color.push(y_tilde ^ u8::from(flip_color));
    }
    (noisy, color)
}

/// Paint a 784-pixel digit into channel `c` of a 1568-wide feature row,
/// zeroing the other channel.
pub fn colorize_row(src: &[f32], dst: &mut [f32], channel: u8) {
    debug_assert_eq!(src.len(), IMAGE_PIXELS);
    debug_assert_eq!(dst.len(), 2 * IMAGE_PIXELS);
    dst.fill(0.0);
    let offset = channel as usize * IMAGE_PIXELS;
    dst[offset..offset + IMAGE_PIXELS].copy_from_slice(src);
}

/// Colorize a whole gray batch into `(n, 1568)` features.
pub fn colorize_features(pixels: &Array2<f32>, color_bits: &[u8]) -> Array2<f32> {
    let n = pixels.nrows();
    let mut out = Array2::<f32>::zeros((n, 2 * IMAGE_PIXELS));
    for i in 0..n {
        colorize_row(
            pixels.row(i).as_slice().expect("contiguous"),
            out.row_mut(i).as_slice_mut().expect("contiguous"),
            color_bits[i],
        );
    }
    out
}

/// Apply the color-correlation transform to a single-channel batch,
/// producing the 2-channel encoding and the noisy labels.
pub fn apply_color_transform(
    batch: &ImageBatch,
    gamma: f64,
    label_noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ImageBatch> {
    EnvTransform::ColorCorrelation { gamma, label_noise }.validate()?;
    if batch.channels() != 1 {
        return Err(Error::config(format!(
            "color transform expects a single-channel batch, got {} channels",
            batch.channels()
        )));
    }
    let n = batch.len();
    let (noisy, color) = color_draws(&batch.labels, gamma, label_noise, rng);
    let flat = batch
        .pixels
        .to_shape((n, IMAGE_PIXELS))
        .expect("contiguous")
        .to_owned();
    let features = colorize_features(&flat, &color);
    let pixels = features
        .to_shape((n, 2, IMAGE_SIDE, IMAGE_SIDE))
        .expect("contiguous")
        .to_owned();
    ImageBatch::new(pixels, noisy)
}

// ---------------------------------------------------------------------------
// Rotation transform
// ---------------------------------------------------------------------------

/// Precomputed bilinear taps for one rotation angle: for each output pixel,
/// four source indices and weights (out-of-bounds taps carry zero weight).
pub struct RotationTable {
    taps: Vec<([usize; 4], [f32; 4])>,
}

// Exact direction cosines for the fixed angle set; 0°/90°/180° become exact
// pixel permutations.
const ANGLE_COS: [f64; 5] = [
    1.0,
    std::f64::consts::FRAC_1_SQRT_2,
    0.0,
    -std::f64::consts::FRAC_1_SQRT_2,
    -1.0,
];
const ANGLE_SIN: [f64; 5] = [
    0.0,
    std::f64::consts::FRAC_1_SQRT_2,
    1.0,
    std::f64::consts::FRAC_1_SQRT_2,
    0.0,
];

impl RotationTable {
    fn build(angle_index: usize) -> Self {
        let (cos_t, sin_t) = (ANGLE_COS[angle_index], ANGLE_SIN[angle_index]);
        let center = (IMAGE_SIDE as f64 - 1.0) / 2.0;
        let mut taps = Vec::with_capacity(IMAGE_PIXELS);
        for r in 0..IMAGE_SIDE {
            for c in 0..IMAGE_SIDE {
                let x = c as f64 - center;
                let y = r as f64 - center;
                // inverse map: rotate the output coordinate back by -θ
                let sx = cos_t * x + sin_t * y + center;
                let sy = -sin_t * x + cos_t * y + center;
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = (sx - x0) as f32;
                let fy = (sy - y0) as f32;
                let mut idx = [0usize; 4];
                let mut w = [0f32; 4];
                let corners = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x0 + 1.0, (1.0 - fy) * fx),
                    (y0 + 1.0, x0, fy * (1.0 - fx)),
                    (y0 + 1.0, x0 + 1.0, fy * fx),
                ];
                for (t, (cy, cx, cw)) in corners.into_iter().enumerate() {
                    if cy >= 0.0
                        && cy < IMAGE_SIDE as f64
                        && cx >= 0.0
                        && cx < IMAGE_SIDE as f64
                    {
                        idx[t] = cy as usize * IMAGE_SIDE + cx as usize;
                        w[t] = cw;
                    }
                }
                taps.push((idx, w));
            }
        }
        RotationTable { taps }
    }

    /// Rotate one flat 784-pixel image into `dst`.
    pub fn apply(&self, src: &[f32], dst: &mut [f32]) {
        debug_assert_eq!(src.len(), IMAGE_PIXELS);
        for (out, (idx, w)) in dst.iter_mut().zip(self.taps.iter()) {
            *out = src[idx[0]] * w[0] + src[idx[1]] * w[1] + src[idx[2]] * w[2] + src[idx[3]] * w[3];
        }
    }
}

/// Shared rotation tables for the five angles.
pub fn rotation_table(angle_index: usize) -> Result<&'static RotationTable> {
    static TABLES: OnceLock<Vec<RotationTable>> = OnceLock::new();
    if angle_index >= ANGLES_DEG.len() {
        return Err(Error::config(format!(
            "angle index {angle_index} outside 0..{}",
            ANGLES_DEG.len()
        )));
    }
    let tables = TABLES.get_or_init(|| (0..ANGLES_DEG.len()).map(RotationTable::build).collect());
    Ok(&tables[angle_index])
}

/// Rotate every row of a flat `(n, 784)` pixel matrix.
pub fn rotate_features(pixels: &Array2<f32>, angle_index: usize) -> Result<Array2<f32>> {
    let table = rotation_table(angle_index)?;
    let mut out = Array2::<f32>::zeros(pixels.dim());
    for (src, mut dst) in pixels.rows().into_iter().zip(out.rows_mut()) {
        table.apply(
            src.as_slice().expect("contiguous"),
            dst.as_slice_mut().expect("contiguous"),
        );
    }
    Ok(out)
}

/// Rotate each channel of every image about the center; labels unchanged.
pub fn apply_rotation(batch: &ImageBatch, angle_index: usize) -> Result<ImageBatch> {
    let table = rotation_table(angle_index)?;
    let (n, c, h, w) = batch.pixels.dim();
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            let src = batch.pixels.index_axis(Axis(0), i);
            let src = src.index_axis(Axis(0), ch);
            let flat_src = src.to_shape(IMAGE_PIXELS).expect("contiguous");
            let mut dst = out.index_axis_mut(Axis(0), i);
            let mut dst = dst.index_axis_mut(Axis(0), ch);
            let mut flat_dst = dst.as_slice_mut().expect("contiguous");
            table.apply(
                flat_src.as_slice().expect("contiguous"),
                &mut flat_dst,
            );
        }
    }
    ImageBatch::new(
        out.mapv(|v| v.clamp(0.0, 1.0)),
        batch.labels.clone(),
    )
}

// ---------------------------------------------------------------------------
// Group-shift transform
// ---------------------------------------------------------------------------

/// Resample spurious bits so they agree with the label with probability
/// `gamma`, regenerating the spurious feature values. Core features and
/// labels are untouched.
pub fn apply_group_shift(
    batch: &TabularBatch,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TabularBatch> {
    EnvTransform::GroupShift { correlation: gamma }.validate()?;
    let n = batch.len();
    let mut features = batch.features.clone();
    let mut bits = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    let normal = StandardNormal;
    for i in 0..n {
        let y = batch.labels[i];
        let agree = rng.random::<f64>() < gamma;
        let b = if agree { y } else { 1 - y };
        let noise: f64 = normal.sample(rng);
        features[[i, 2]] =
            (2.0 * b as f32 - 1.0) * SPURIOUS_SCALE + SPURIOUS_NOISE * noise as f32;
        bits.push(b);
        groups.push(2 * y + b);
    }
    Ok(TabularBatch {
        features,
        labels: batch.labels.clone(),
        spurious_bits: bits,
        groups,
    })
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Backing data of an environment dataset. Image environments are stored as
/// views over a shared base so the full evaluation grids stay cheap; the
/// transformed pixels are materialized per chunk.
#[derive(Clone)]
pub enum EnvSource {
    Colored {
        base: Arc<GrayBatch>,
        labels: Vec<u8>,
        color: Vec<u8>,
    },
    Rotated {
        base: Arc<GrayBatch>,
        angle_index: usize,
    },
    Tabular(TabularBatch),
}

/// A dataset drawn from one environment, tagged with the environment
/// identity used to build it.
#[derive(Clone)]
pub struct EnvDataset {
    pub source: EnvSource,
    pub descriptor: EnvDescriptor,
    pub split: Split,
}

impl EnvDataset {
    pub fn len(&self) -> usize {
        match &self.source {
            EnvSource::Colored { base, .. } => base.len(),
            EnvSource::Rotated { base, .. } => base.len(),
            EnvSource::Tabular(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Materialize `[start, start+len)` as model inputs.
    pub fn materialize(&self, start: usize, len: usize) -> Result<FeatureBatch> {
        let end = (start + len).min(self.len());
        match &self.source {
            EnvSource::Colored { base, labels, color } => {
                let pixels = base.pixels.slice(ndarray::s![start..end, ..]).to_owned();
                let features = colorize_features(&pixels, &color[start..end]);
                Ok(FeatureBatch {
                    features,
                    labels: labels[start..end].to_vec(),
                    groups: None,
                })
            }
            EnvSource::Rotated { base, angle_index } => {
                let pixels = base.pixels.slice(ndarray::s![start..end, ..]).to_owned();
                let features = rotate_features(&pixels, *angle_index)?;
                Ok(FeatureBatch {
                    features,
                    labels: base.labels[start..end].to_vec(),
                    groups: None,
                })
            }
            EnvSource::Tabular(t) => Ok(FeatureBatch {
                features: t.features.slice(ndarray::s![start..end, ..]).to_owned(),
                labels: t.labels[start..end].to_vec(),
                groups: Some(t.groups[start..end].to_vec()),
            }),
        }
    }
}

/// Colored-MNIST environment: binary digit task with label noise 0.25 and
/// color bit flipped with probability `e`.
pub fn build_colored_mnist(
    base: Arc<GrayBatch>,
    e: f64,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> Result<EnvDataset> {
    if base.is_empty() {
        return Err(Error::config("empty base data"));
    }
    EnvTransform::ColorCorrelation {
        gamma: e,
        label_noise: COLOR_LABEL_NOISE,
    }
    .validate()?;
    let (labels, color) = color_draws(&base.labels, e, COLOR_LABEL_NOISE, rng);
    Ok(EnvDataset {
        source: EnvSource::Colored { base, labels, color },
        descriptor: EnvDescriptor::Correlation { e },
        split,
    })
}

/// Rotated-MNIST environments: one dataset per requested angle index.
pub fn build_rotated_mnist(
    base: Arc<GrayBatch>,
    angle_indices: &[usize],
    split: Split,
) -> Result<Vec<EnvDataset>> {
    if angle_indices.is_empty() {
        return Err(Error::config("angle set must be nonempty"));
    }
    if base.is_empty() {
        return Err(Error::config("empty base data"));
    }
    angle_indices
        .iter()
        .map(|&index| {
            EnvTransform::Rotation { angle_index: index }.validate()?;
            Ok(EnvDataset {
                source: EnvSource::Rotated {
                    base: Arc::clone(&base),
                    angle_index: index,
                },
                descriptor: EnvDescriptor::Angle { index },
                split,
            })
        })
        .collect()
}

/// Synthetic spurious-group dataset: 2-D Gaussian core predictive of `y`
/// plus a spurious feature agreeing with `y` with probability
/// `spurious_corr`; four groups indexed by `(y, spurious bit)`.
pub fn build_synthetic_groups(
    n: usize,
    spurious_corr: f64,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> Result<EnvDataset> {
    if n < 4 {
        return Err(Error::config(format!("need n >= 4 samples, got {n}")));
    }
    EnvTransform::GroupShift {
        correlation: spurious_corr,
    }
    .validate()?;
    let normal = StandardNormal;
    let mut features = Array2::<f32>::zeros((n, 3));
    let mut labels = Vec::with_capacity(n);
    let mut bits = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for i in 0..n {
        let y: u8 = u8::from(rng.random::<f64>() < 0.5);
        let sign = 2.0 * y as f32 - 1.0;
        let z0: f64 = normal.sample(rng);
        let z1: f64 = normal.sample(rng);
        features[[i, 0]] = sign * CORE_SHIFT + z0 as f32;
        features[[i, 1]] = sign * CORE_SHIFT + z1 as f32;
        let agree = rng.random::<f64>() < spurious_corr;
        let b = if agree { y } else { 1 - y };
        let z2: f64 = normal.sample(rng);
        features[[i, 2]] = (2.0 * b as f32 - 1.0) * SPURIOUS_SCALE + SPURIOUS_NOISE * z2 as f32;
        labels.push(y);
        bits.push(b);
        groups.push(2 * y + b);
    }
    Ok(EnvDataset {
        source: EnvSource::Tabular(TabularBatch {
            features,
            labels,
            spurious_bits: bits,
            groups,
        }),
        descriptor: EnvDescriptor::SpuriousCorr { p: spurious_corr },
        split,
    })
}

// ---------------------------------------------------------------------------
// Raw MNIST ingestion
// ---------------------------------------------------------------------------

/// The four canonical MNIST IDX files.
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Raw MNIST tensors (digit labels, not yet binarized).
pub struct RawMnist {
    pub train_images: Array3<f32>,
    pub train_digits: Vec<u8>,
    pub test_images: Array3<f32>,
    pub test_digits: Vec<u8>,
}

fn find_idx_file(dir: &std::path::Path, stem: &str) -> Result<std::path::PathBuf> {
    let raw = dir.join(stem);
    if raw.exists() {
        return Ok(raw);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::config(format!(
        "MNIST file {stem}[.gz] not found under {}; run the fetch command first",
        dir.display()
    )))
}

/// Load the four MNIST files (gzip or raw) from `dir`.
pub fn load_mnist(dir: &std::path::Path) -> Result<RawMnist> {
    let images = |stem: &str| -> Result<Array3<f32>> {
        match idx::load_idx_file(&find_idx_file(dir, stem)?)? {
            idx::IdxTensor::Images(t) => Ok(t),
            _ => Err(Error::format(format!("{stem} is not an image file"))),
        }
    };
    let labels = |stem: &str| -> Result<Vec<u8>> {
        match idx::load_idx_file(&find_idx_file(dir, stem)?)? {
            idx::IdxTensor::Labels(v) => Ok(v),
            _ => Err(Error::format(format!("{stem} is not a label file"))),
        }
    };
    let raw = RawMnist {
        train_images: images(MNIST_FILES[0])?,
        train_digits: labels(MNIST_FILES[1])?,
        test_images: images(MNIST_FILES[2])?,
        test_digits: labels(MNIST_FILES[3])?,
    };
    if raw.train_images.dim().0 != raw.train_digits.len()
        || raw.test_images.dim().0 != raw.test_digits.len()
    {
        return Err(Error::format("MNIST image/label counts disagree"));
    }
    Ok(raw)
}

/// Deterministically shuffle `0..n` and split into disjoint index blocks of
/// the requested sizes.
pub fn shuffled_splits(n: usize, sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let total: usize = sizes.iter().sum();
    if total > n {
        return Err(Error::config(format!(
            "requested {total} samples from a pool of {n}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &s in sizes {
        out.push(indices[at..at + s].to_vec());
        at += s;
    }
    Ok(out)
}

/// Convenience view of one label column as a slice (used in tests).
pub fn labels_of(view: ArrayView1<u8>) -> Vec<u8> {
    view.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn toy_gray(n: usize, seed: u64) -> GrayBatch {
        let mut r = rng(seed);
        let pixels = Array2::from_shape_fn((n, IMAGE_PIXELS), |_| r.random::<f32>());
        let labels = (0..n).map(|i| (i % 2) as u8).collect();
        GrayBatch { pixels, labels }
    }

    #[test]
    fn color_bits_follow_labels_at_extremes() {
        let base = toy_gray(64, 1);
        let img = base.to_image_batch().unwrap();
        let out = apply_color_transform(&img, 0.0, 0.0, &mut rng(2)).unwrap();
        // gamma = 0, no label noise: channel index equals the label.
        for (i, &y) in out.labels.iter().enumerate() {
            assert_eq!(y, base.labels[i]);
            let ch = y as usize;
            let digit_sum: f32 = out.pixels.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum();
            let other_sum: f32 = out
                .pixels
                .index_axis(Axis(0), i)
                .index_axis(Axis(0), 1 - ch)
                .sum();
            assert!(digit_sum > 0.0 && other_sum == 0.0);
        }
        // gamma = 1: channel index equals 1 - label.
        let out = apply_color_transform(&img, 1.0, 0.0, &mut rng(3)).unwrap();
        for (i, &y) in out.labels.iter().enumerate() {
            let ch = (1 - y) as usize;
            let digit_sum: f32 = out.pixels.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum();
            assert!(digit_sum > 0.0);
        }
    }

    #[test]
    fn color_gamma_out_of_range_rejected() {
        let img = toy_gray(4, 1).to_image_batch().unwrap();
        assert!(matches!(
            apply_color_transform(&img, 1.5, 0.0, &mut rng(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn color_agreement_rate_matches_binomial() {
        let n = 10_000;
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let (noisy, color) = color_draws(&labels, 0.5, 0.0, &mut rng(9));
        let agree = noisy
            .iter()
            .zip(&color)
            .filter(|(a, b)| a == b)
            .count() as f64
            / n as f64;
        assert!((agree - 0.5).abs() < 0.015, "agreement {agree}");
    }

    #[test]
    fn rotation_identity_is_bit_exact() {
        let base = toy_gray(8, 4);
        let img = base.to_image_batch().unwrap();
        let out = apply_rotation(&img, 0).unwrap();
        assert_eq!(out.pixels, img.pixels);
        assert_eq!(out.labels, img.labels);
    }

    #[test]
    fn rotation_out_of_range_rejected() {
        let img = toy_gray(2, 4).to_image_batch().unwrap();
        assert!(matches!(apply_rotation(&img, 5), Err(Error::Config(_))));
    }

    #[test]
    fn ninety_twice_matches_one_eighty() {
        let img = toy_gray(6, 5).to_image_batch().unwrap();
        let twice = apply_rotation(&apply_rotation(&img, 2).unwrap(), 2).unwrap();
        let direct = apply_rotation(&img, 4).unwrap();
        for (a, b) in twice.pixels.iter().zip(direct.pixels.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn one_eighty_twice_recovers_input() {
        let img = toy_gray(6, 6).to_image_batch().unwrap();
        let round = apply_rotation(&apply_rotation(&img, 4).unwrap(), 4).unwrap();
        for (a, b) in round.pixels.iter().zip(img.pixels.iter()) {
            assert!((a - b).abs() < 2e-2, "{a} vs {b}");
        }
    }

    #[test]
    fn forty_five_rotations_preserve_center_mass_roughly() {
        // a centered blob mostly survives a 45° rotation with zero padding
        let mut pixels = Array2::<f32>::zeros((1, IMAGE_PIXELS));
        for r in 10..18 {
            for c in 10..18 {
                pixels[[0, r * IMAGE_SIDE + c]] = 1.0;
            }
        }
        let img = GrayBatch {
            pixels,
            labels: vec![0],
        }
        .to_image_batch()
        .unwrap();
        let rot = apply_rotation(&img, 1).unwrap();
        let before: f32 = img.pixels.sum();
        let after: f32 = rot.pixels.sum();
        assert!((after - before).abs() / before < 0.1);
    }

    #[test]
    fn colored_mnist_builder_descriptor_and_binarization() {
        let mut images = Array3::<f32>::zeros((2, IMAGE_SIDE, IMAGE_SIDE));
        images[[0, 14, 14]] = 1.0;
        images[[1, 14, 14]] = 1.0;
        let gray = Arc::new(GrayBatch::from_mnist(images.view(), &[3, 7]).unwrap());
        assert_eq!(gray.labels, vec![0, 1]);
        let ds = build_colored_mnist(gray, 0.9, Split::Test, &mut rng(0)).unwrap();
        assert_eq!(ds.descriptor, EnvDescriptor::Correlation { e: 0.9 });
    }

    #[test]
    fn colored_mnist_agreement_close_to_one_minus_e() {
        let base = Arc::new(toy_gray(10_000, 7));
        let ds = build_colored_mnist(base, 0.1, Split::Train, &mut rng(21)).unwrap();
        match &ds.source {
            EnvSource::Colored { labels, color, .. } => {
                let agree = labels
                    .iter()
                    .zip(color.iter())
                    .filter(|(a, b)| a == b)
                    .count() as f64
                    / labels.len() as f64;
                assert!((agree - 0.9).abs() < 0.01, "agreement {agree}");
            }
            _ => panic!("expected colored source"),
        }
    }

    #[test]
    fn rotated_builder_counts_and_descriptors() {
        let base = Arc::new(toy_gray(4, 8));
        let sets = build_rotated_mnist(Arc::clone(&base), &[0, 2], Split::Train).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].descriptor.to_string(), "0°");
        assert_eq!(sets[1].descriptor.to_string(), "90°");
        let all = build_rotated_mnist(Arc::clone(&base), &[0, 1, 2, 3, 4], Split::Test).unwrap();
        assert_eq!(all.len(), 5);
        assert!(build_rotated_mnist(base, &[], Split::Train).is_err());
    }

    #[test]
    fn synthetic_groups_minority_fraction() {
        let ds = build_synthetic_groups(10_000, 0.95, Split::Train, &mut rng(3)).unwrap();
        match &ds.source {
            EnvSource::Tabular(t) => {
                let sizes = t.group_sizes();
                // minority groups are (y=0,b=1) -> id 1 and (y=1,b=0) -> id 2
                let minority = (sizes[1] + sizes[2]) as f64 / t.len() as f64;
                assert!((minority - 0.05).abs() < 0.01, "minority {minority}");
            }
            _ => panic!("expected tabular"),
        }
    }

    #[test]
    fn synthetic_groups_balanced_at_half() {
        let ds = build_synthetic_groups(20_000, 0.5, Split::Train, &mut rng(4)).unwrap();
        match &ds.source {
            EnvSource::Tabular(t) => {
                for &s in &t.group_sizes() {
                    let frac = s as f64 / t.len() as f64;
                    assert!((frac - 0.25).abs() < 0.02, "group fraction {frac}");
                }
            }
            _ => panic!("expected tabular"),
        }
    }

    #[test]
    fn synthetic_groups_minimal_instance() {
        let ds = build_synthetic_groups(4, 0.9, Split::Train, &mut rng(5)).unwrap();
        assert_eq!(ds.len(), 4);
        match &ds.source {
            EnvSource::Tabular(t) => assert!(t.groups.iter().all(|&g| g < 4)),
            _ => panic!("expected tabular"),
        }
        assert!(build_synthetic_groups(3, 0.9, Split::Train, &mut rng(5)).is_err());
        assert!(build_synthetic_groups(10, 1.5, Split::Train, &mut rng(5)).is_err());
    }

    #[test]
    fn transforms_are_deterministic_given_seed() {
        let img = toy_gray(32, 11).to_image_batch().unwrap();
        let a = apply_color_transform(&img, 0.3, 0.25, &mut rng(99)).unwrap();
        let b = apply_color_transform(&img, 0.3, 0.25, &mut rng(99)).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.labels, b.labels);

        let t = build_synthetic_groups(100, 0.8, Split::Train, &mut rng(42)).unwrap();
        let (ta, tb) = match (&t.source, &build_synthetic_groups(100, 0.8, Split::Train, &mut rng(42)).unwrap().source) {
            (EnvSource::Tabular(a), EnvSource::Tabular(b)) => (a.clone(), b.clone()),
            _ => unreachable!(),
        };
        assert_eq!(ta.features, tb.features);
        assert_eq!(ta.groups, tb.groups);
    }

    #[test]
    fn rotation_never_alters_labels_color_only_via_declared_noise() {
        let img = toy_gray(16, 12).to_image_batch().unwrap();
        for a in 0..5 {
            assert_eq!(apply_rotation(&img, a).unwrap().labels, img.labels);
        }
        let colored = apply_color_transform(&img, 0.7, 0.0, &mut rng(0)).unwrap();
        assert_eq!(colored.labels, img.labels);
    }

    #[test]
    fn lazy_and_eager_colored_views_agree() {
        let base = Arc::new(toy_gray(16, 13));
        let ds = build_colored_mnist(Arc::clone(&base), 0.4, Split::Val, &mut rng(77)).unwrap();
        let chunk = ds.materialize(0, 16).unwrap();
        // eager path through apply_color_transform with the same rng
        let eager =
            apply_color_transform(&base.to_image_batch().unwrap(), 0.4, COLOR_LABEL_NOISE, &mut rng(77))
                .unwrap();
        assert_eq!(chunk.features, eager.features());
        assert_eq!(chunk.labels, eager.labels);
    }
}
