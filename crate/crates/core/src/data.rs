//! Datasets: a deterministic synthetic image generator, a CIFAR-binary
//! subset reader, and a directory-per-class loader.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Luma};
use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::models::Backbone;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    SyntheticClusters,
    CifarLikeSubset,
    CustomDir,
}

/// Per-channel standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Knobs of the synthetic generator.
///
/// Each class owns a latent center; centers of classes in the same group
/// share a common offset so the teacher's soft targets carry inter-class
/// similarity. Latent vectors are rendered through fixed smooth basis images,
/// then randomly shifted and corrupted with pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub latent_dim: usize,
    pub groups: usize,
    pub group_spread: f64,
    pub class_spread: f64,
    pub sample_spread: f64,
    pub pixel_noise: f64,
    pub max_shift: usize,
    /// Fraction of training labels replaced by a uniformly random class.
    pub label_noise: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            latent_dim: 12,
            groups: 5,
            group_spread: 1.0,
            class_spread: 0.6,
            sample_spread: 0.35,
            pixel_noise: 0.3,
            max_shift: 1,
            label_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Training items per class (synthetic) or total cap (file-backed; 0 = all).
    pub train_count: usize,
    pub test_count: usize,
    /// Held-out share for `custom-dir`, which has no predefined split.
    pub test_fraction: f64,
    pub normalization: Option<NormStats>,
    pub root: Option<PathBuf>,
    pub seed: u64,
    pub synthetic: SyntheticParams,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            name: DatasetName::SyntheticClusters,
            num_classes: 10,
            image_size: 8,
            channels: 3,
            train_count: 100,
            test_count: 50,
            test_fraction: 0.2,
            normalization: None,
            root: None,
            seed: 0,
            synthetic: SyntheticParams::default(),
        }
    }
}

/// Images in NCHW layout with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Split {
    pub fn new(images: Array4<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.dim().0 != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.dim().0,
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Data(format!("label {l} at item {i} outside [0, {num_classes})")));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite pixel value".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> (Array4<f64>, Vec<usize>) {
        (
            self.images.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Split {
        let (images, labels) = self.batch(indices);
        Split {
            images,
            labels,
            num_classes: self.num_classes,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub stats: NormStats,
}

pub fn compute_stats(images: &Array4<f64>) -> NormStats {
    let c = images.dim().1;
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = images.index_axis(Axis(1), ch);
        let m = plane.mean().unwrap_or(0.0);
        let v = plane.mapv(|x| (x - m) * (x - m)).mean().unwrap_or(0.0);
        mean.push(m);
        std.push(v.sqrt());
    }
    NormStats { mean, std }
}

pub fn apply_stats(images: &mut Array4<f64>, stats: &NormStats) -> Result<()> {
    let c = images.dim().1;
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::Config(format!(
            "normalization stats cover {} channels, images have {c}",
            stats.mean.len()
        )));
    }
    for ch in 0..c {
        let sd = if stats.std[ch] > 1e-12 { stats.std[ch] } else { 1.0 };
        images
            .index_axis_mut(Axis(1), ch)
            .mapv_inplace(|x| (x - stats.mean[ch]) / sd);
    }
    Ok(())
}

/// Loads both splits, standardizing with the supplied stats or, failing
/// that, with statistics of the training split.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    validate_spec(spec)?;
    let (mut train, mut test) = match spec.name {
        DatasetName::SyntheticClusters => synthetic_clusters(spec)?,
        DatasetName::CifarLikeSubset => cifar_subset(spec)?,
        DatasetName::CustomDir => custom_dir(spec)?,
    };
    let stats = spec.normalization.clone().unwrap_or_else(|| compute_stats(&train.images));
    apply_stats(&mut train.images, &stats)?;
    apply_stats(&mut test.images, &stats)?;
    Ok(Dataset { train, test, stats })
}

fn validate_spec(spec: &DatasetSpec) -> Result<()> {
    if spec.image_size < 2 {
        return Err(Error::Config("image_size must be at least 2".into()));
    }
    if spec.channels == 0 {
        return Err(Error::Config("channels must be positive".into()));
    }
    if spec.name != DatasetName::CustomDir && spec.num_classes < 2 {
        return Err(Error::Config("num_classes must be at least 2".into()));
    }
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
    }
    if !(0.0..=1.0).contains(&spec.synthetic.label_noise) {
        return Err(Error::Config("label_noise must lie in [0, 1]".into()));
    }
    Ok(())
}

fn smooth_pattern<R: Rng + ?Sized>(c: usize, size: usize, rng: &mut R) -> Array3<f64> {
    let mut p: Array3<f64> = Array3::zeros((c, size, size));
    let bumps = 3;
    for ch in 0..c {
        for _ in 0..bumps {
            let cy = rng.random_range(0.0..size as f64);
            let cx = rng.random_range(0.0..size as f64);
            let width = rng.random_range(0.8..(size as f64 / 2.5).max(1.0));
            let amp: f64 = StandardNormal.sample(rng);
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    p[[ch, y, x]] += amp * (-d2 / (2.0 * width * width)).exp();
                }
            }
        }
    }
    let norm = p.mapv(|v| v * v).sum().sqrt().max(1e-12);
    p / norm * (size as f64)
}

fn gaussian_vec<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> Array1<f64> {
    let n = Normal::new(0.0, scale).expect("non-negative scale");
    Array1::from_shape_fn(dim, |_| n.sample(rng))
}

struct SyntheticWorld {
    centers: Array2<f64>,
    basis: Vec<Array3<f64>>,
}

fn synthetic_world(spec: &DatasetSpec) -> SyntheticWorld {
    let p = &spec.synthetic;
    let mut rng = seed::stream(spec.seed, seed::DATA, 0);
    let groups = p.groups.clamp(1, spec.num_classes);
    let group_centers: Vec<_> = (0..groups)
        .map(|_| gaussian_vec(p.latent_dim, p.group_spread, &mut rng))
        .collect();
    let mut centers = Array2::zeros((spec.num_classes, p.latent_dim));
    for c in 0..spec.num_classes {
        let own = gaussian_vec(p.latent_dim, p.class_spread, &mut rng);
        centers.row_mut(c).assign(&(&group_centers[c % groups] + &own));
    }
    let basis = (0..p.latent_dim)
        .map(|_| smooth_pattern(spec.channels, spec.image_size, &mut rng))
        .collect();
    SyntheticWorld { centers, basis }
}

fn render<R: Rng + ?Sized>(world: &SyntheticWorld, spec: &DatasetSpec, label: usize, rng: &mut R) -> Array3<f64> {
    let p = &spec.synthetic;
    let z = &world.centers.row(label) + &gaussian_vec(p.latent_dim, p.sample_spread, rng);
    let (c, size) = (spec.channels, spec.image_size);
    let mut img = Array3::zeros((c, size, size));
    for (k, b) in world.basis.iter().enumerate() {
        img.scaled_add(z[k], b);
    }
    let shift = p.max_shift as i64;
    let (dy, dx) = if shift > 0 {
        (rng.random_range(-shift..=shift) as isize, rng.random_range(-shift..=shift) as isize)
    } else {
        (0, 0)
    };
    let noise = Normal::new(0.0, p.pixel_noise.max(0.0)).expect("non-negative noise");
    let n = size as isize;
    Array3::from_shape_fn((c, size, size), |(ch, y, x)| {
        let sy = (y as isize - dy).rem_euclid(n) as usize;
        let sx = (x as isize - dx).rem_euclid(n) as usize;
        img[[ch, sy, sx]] + noise.sample(rng)
    })
}

fn synthetic_split(world: &SyntheticWorld, spec: &DatasetSpec, per_class: usize, stream: u64, noisy: bool) -> Result<Split> {
    let mut rng = seed::stream(spec.seed, seed::DATA, stream);
    let (c, size) = (spec.channels, spec.image_size);
    let total = per_class * spec.num_classes;
    let mut images = Array4::zeros((total, c, size, size));
    let mut labels = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..total).map(|i| i % spec.num_classes).collect();
    order.shuffle(&mut rng);
    for (i, &label) in order.iter().enumerate() {
        images.index_axis_mut(Axis(0), i).assign(&render(world, spec, label, &mut rng));
        let observed = if noisy && rng.random::<f64>() < spec.synthetic.label_noise {
            rng.random_range(0..spec.num_classes)
        } else {
            label
        };
        labels.push(observed);
    }
    Split::new(images, labels, spec.num_classes)
}

fn synthetic_clusters(spec: &DatasetSpec) -> Result<(Split, Split)> {
    let world = synthetic_world(spec);
    let train = synthetic_split(&world, spec, spec.train_count, 1, true)?;
    let test = synthetic_split(&world, spec, spec.test_count, 2, false)?;
    Ok((train, test))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn require_root(spec: &DatasetSpec) -> Result<&Path> {
    spec.root
        .as_deref()
        .ok_or_else(|| Error::Config(format!("dataset {:?} needs a root directory", spec.name)))
}

fn resize_chw(img: &Array3<f64>, size: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    if h == size && w == size {
        return img.clone();
    }
    let mut out = Array3::zeros((c, size, size));
    for ch in 0..c {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([img[[ch, y as usize, x as usize]] as f32]));
        let r = image::imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
        for (x, y, p) in r.enumerate_pixels() {
            out[[ch, y as usize, x as usize]] = p.0[0] as f64;
        }
    }
    out
}

/// Resizes every image of a batch to `size × size` (bilinear).
pub fn resize_images(images: &Array4<f64>, size: usize) -> Array4<f64> {
    let (n, c, _, _) = images.dim();
    let mut out = Array4::zeros((n, c, size, size));
    for i in 0..n {
        let r = resize_chw(&images.index_axis(Axis(0), i).to_owned(), size);
        out.index_axis_mut(Axis(0), i).assign(&r);
    }
    out
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn read_cifar_file(path: &Path, spec: &DatasetSpec, cap: usize) -> Result<Split> {
    let bytes = read(path)?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "{} is not a CIFAR binary batch ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let available = bytes.len() / CIFAR_RECORD;
    let n = if cap == 0 { available } else { cap.min(available) };
    let mut images = Array4::zeros((n, 3, spec.image_size, spec.image_size));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &bytes[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD];
        labels.push(rec[0] as usize);
        let raw = Array3::from_shape_fn((3, 32, 32), |(c, y, x)| rec[1 + c * 1024 + y * 32 + x] as f64 / 255.0);
        images.index_axis_mut(Axis(0), i).assign(&resize_chw(&raw, spec.image_size));
    }
    Split::new(images, labels, spec.num_classes)
}

/// Reads the CIFAR binary layout (`data_batch_1.bin`, `test_batch.bin`),
/// keeping the first `train_count` / `test_count` records and downsampling.
fn cifar_subset(spec: &DatasetSpec) -> Result<(Split, Split)> {
    if spec.channels != 3 {
        return Err(Error::Config("cifar-like-subset images have 3 channels".into()));
    }
    let root = require_root(spec)?;
    let train = read_cifar_file(&root.join("data_batch_1.bin"), spec, spec.train_count)?;
    let test = read_cifar_file(&root.join("test_batch.bin"), spec, spec.test_count)?;
    Ok((train, test))
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp" | "gif" | "pnm" | "ppm" | "pgm" | "tif" | "tiff")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

fn load_image(path: &Path, channels: usize, size: usize) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let img = img.resize_exact(size as u32, size as u32, FilterType::Triangle);
    match channels {
        1 => {
            let g = img.to_luma8();
            Ok(Array3::from_shape_fn((1, size, size), |(_, y, x)| {
                g.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
            }))
        }
        3 => {
            let rgb = img.to_rgb8();
            Ok(Array3::from_shape_fn((3, size, size), |(c, y, x)| {
                rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
            }))
        }
        other => Err(Error::Config(format!("custom-dir supports 1 or 3 channels, got {other}"))),
    }
}

/// One subdirectory per class (sorted by name gives the label order); within
/// each class a seeded shuffle puts `test_fraction` of the files in the test split.
fn custom_dir(spec: &DatasetSpec) -> Result<(Split, Split)> {
    let root = require_root(spec)?;
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(Error::Data(format!(
            "{} must contain at least two class subdirectories",
            root.display()
        )));
    }
    if spec.num_classes != 0 && spec.num_classes != class_dirs.len() {
        return Err(Error::Data(format!(
            "expected {} classes, found {} subdirectories in {}",
            spec.num_classes,
            class_dirs.len(),
            root.display()
        )));
    }
    let num_classes = class_dirs.len();
    let mut rng = seed::stream(spec.seed, seed::DATA, 0);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_image(p)).collect();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {} holds no images", dir.display())));
        }
        files.shuffle(&mut rng);
        let n_test = ((files.len() as f64) * spec.test_fraction).round() as usize;
        for (i, f) in files.into_iter().enumerate() {
            if i < n_test {
                test.push((f, label));
            } else {
                train.push((f, label));
            }
        }
    }
    let build = |items: &[(PathBuf, usize)], cap: usize| -> Result<Split> {
        let n = if cap == 0 { items.len() } else { cap.min(items.len()) };
        let mut images = Array4::zeros((n, spec.channels, spec.image_size, spec.image_size));
        let mut labels = Vec::with_capacity(n);
        for (i, (path, label)) in items.iter().take(n).enumerate() {
            images
                .index_axis_mut(Axis(0), i)
                .assign(&load_image(path, spec.channels, spec.image_size)?);
            labels.push(*label);
        }
        Split::new(images, labels, num_classes)
    };
    train.shuffle(&mut rng);
    Ok((build(&train, spec.train_count)?, build(&test, spec.test_count)?))
}

/// Item order for one epoch, derived from `(seed, epoch)` only.
pub fn epoch_order(n: usize, master_seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = seed::stream(master_seed, seed::SHUFFLE, epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Full batches only; the trailing partial batch is dropped.
pub fn full_batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    order.chunks_exact(batch_size).collect()
}

/// Frozen representations with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Passes a target split through a frozen network after resizing the images
/// to the network's input size.
pub fn make_transfer_split(network: &Backbone, input_size: usize, target: &Split) -> Result<FeatureSet> {
    let (_, c, h, w) = target.images.dim();
    if c != network.in_channels {
        return Err(Error::Config(format!(
            "target images have {c} channels, network {} expects {}",
            network.arch, network.in_channels
        )));
    }
    let images = if h == input_size && w == input_size {
        target.images.clone()
    } else {
        resize_images(&target.images, input_size)
    };
    Ok(FeatureSet {
        features: network.features(&images, 256),
        labels: target.labels.clone(),
        num_classes: target.num_classes,
    })
}

/// Flattened pixels, handy for quick linear baselines on raw data.
pub fn flatten(images: &Array4<f64>) -> Matrix {
    let n = images.dim().0;
    let rest = images.len() / n.max(1);
    images
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((n, rest))
        .expect("contiguous")
}

/// Returns the first `n` test items, used for fixed heatmap batches.
pub fn head(split: &Split, n: usize) -> Split {
    let n = n.min(split.len());
    Split {
        images: split.images.slice(s![..n, .., .., ..]).to_owned(),
        labels: split.labels[..n].to_vec(),
        num_classes: split.num_classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            num_classes: 10,
            train_count: 100,
            test_count: 10,
            seed: 3,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn synthetic_counts_and_labels() {
        let d = load_dataset(&small_spec()).unwrap();
        assert_eq!(d.train.len(), 1000);
        assert_eq!(d.test.len(), 100);
        assert_eq!(d.train.class_histogram(), vec![100; 10]);
        assert!(d.train.labels.iter().all(|&l| l < 10));
    }

    #[test]
    fn normalization_standardizes_training_split() {
        let d = load_dataset(&small_spec()).unwrap();
        for ch in 0..3 {
            let plane = d.train.images.index_axis(Axis(1), ch);
            let m = plane.mean().unwrap();
            let sd = plane.mapv(|v| (v - m).powi(2)).mean().unwrap().sqrt();
            assert!(m.abs() < 1e-6, "{m}");
            assert!((sd - 1.0).abs() < 1e-3, "{sd}");
        }
    }

    #[test]
    fn loads_and_shuffles_replay() {
        let a = load_dataset(&small_spec()).unwrap();
        let b = load_dataset(&small_spec()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(epoch_order(1000, 3, 4), epoch_order(1000, 3, 4));
        assert_ne!(epoch_order(1000, 3, 4), epoch_order(1000, 3, 5));
        let other = load_dataset(&DatasetSpec { seed: 4, ..small_spec() }).unwrap();
        assert_ne!(a.train.images, other.train.images);
    }

    #[test]
    fn batches_cover_epoch_once_minus_remainder() {
        let order = epoch_order(70, 1, 0);
        let batches = full_batches(&order, 16);
        assert_eq!(batches.len(), 4);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.iter().copied()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 64);
    }

    #[test]
    fn label_validation() {
        let imgs = Array4::zeros((2, 1, 2, 2));
        assert!(matches!(Split::new(imgs.clone(), vec![0, 3], 3), Err(Error::Data(_))));
        assert!(matches!(Split::new(imgs, vec![0], 3), Err(Error::Data(_))));
    }

    #[test]
    fn label_noise_flips_some_training_labels_only() {
        let mut spec = small_spec();
        spec.synthetic.label_noise = 0.5;
        let noisy = load_dataset(&spec).unwrap();
        assert_eq!(noisy.test.class_histogram(), vec![10; 10]);
        assert_ne!(noisy.train.class_histogram(), vec![100; 10]);
    }

    #[test]
    fn missing_sources_report_paths() {
        let spec = DatasetSpec {
            name: DatasetName::CifarLikeSubset,
            root: Some(PathBuf::from("/nonexistent/cifar")),
            ..DatasetSpec::default()
        };
        match load_dataset(&spec) {
            Err(Error::Io { path, .. }) => assert!(path.starts_with("/nonexistent/cifar")),
            other => panic!("unexpected {other:?}"),
        }
        let spec = DatasetSpec {
            name: DatasetName::CustomDir,
            root: None,
            ..DatasetSpec::default()
        };
        assert!(matches!(load_dataset(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn cifar_binary_records_parse() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for i in 0..4u8 {
            bytes.push(i % 2);
            bytes.extend(std::iter::repeat_n(i * 60, 3072));
        }
        fs::write(dir.path().join("data_batch_1.bin"), &bytes).unwrap();
        fs::write(dir.path().join("test_batch.bin"), &bytes[..2 * CIFAR_RECORD]).unwrap();
        let spec = DatasetSpec {
            name: DatasetName::CifarLikeSubset,
            num_classes: 2,
            train_count: 3,
            test_count: 0,
            root: Some(dir.path().to_path_buf()),
            normalization: Some(NormStats {
                mean: vec![0.0; 3],
                std: vec![1.0; 3],
            }),
            ..DatasetSpec::default()
        };
        let d = load_dataset(&spec).unwrap();
        assert_eq!(d.train.labels, vec![0, 1, 0]);
        assert_eq!(d.test.len(), 2);
        assert!((d.train.images[[1, 0, 3, 3]] - 60.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn custom_dir_layout() {
        let dir = tempfile::tempdir().unwrap();
        for (class, shade) in [("cat", 10u8), ("dog", 200u8)] {
            let cdir = dir.path().join(class);
            fs::create_dir(&cdir).unwrap();
            for i in 0..5 {
                let img = image::RgbImage::from_pixel(12, 12, image::Rgb([shade, shade, shade + i]));
                img.save(cdir.join(format!("{i}.png"))).unwrap();
            }
        }
        let spec = DatasetSpec {
            name: DatasetName::CustomDir,
            num_classes: 2,
            train_count: 0,
            test_count: 0,
            test_fraction: 0.4,
            root: Some(dir.path().to_path_buf()),
            ..DatasetSpec::default()
        };
        let d = load_dataset(&spec).unwrap();
        assert_eq!(d.train.len(), 6);
        assert_eq!(d.test.len(), 4);
        assert_eq!(d.test.class_histogram(), vec![2, 2]);
        assert_eq!(d.train.images.dim(), (6, 3, 8, 8));
        let wrong = DatasetSpec { num_classes: 3, ..spec };
        assert!(matches!(load_dataset(&wrong), Err(Error::Data(_))));
    }

    #[test]
    fn transfer_features_have_student_width_and_labels() {
        let student = crate::models::build_backbone("small-convnet-S", 10, 3, 0).unwrap();
        let target = load_dataset(&DatasetSpec {
            image_size: 12,
            num_classes: 4,
            train_count: 5,
            test_count: 3,
            ..DatasetSpec::default()
        })
        .unwrap();
        let a = make_transfer_split(&student, 8, &target.train).unwrap();
        let b = make_transfer_split(&student, 8, &target.train).unwrap();
        assert_eq!(a.features.dim(), (20, 16));
        assert_eq!(a, b);
        let mut hist = vec![0; 4];
        a.labels.iter().for_each(|&l| hist[l] += 1);
        assert_eq!(hist, target.train.class_histogram());
        let gray = Split::new(Array4::zeros((2, 1, 8, 8)), vec![0, 1], 2).unwrap();
        assert!(matches!(make_transfer_split(&student, 8, &gray), Err(Error::Config(_))));
    }
}
