//! Dataset ingestion, splits and deterministic batch iteration.

pub mod cifar;
pub mod idx;
pub mod preprocess;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub use preprocess::{Augment, ResizeMethod};

/// Environment variable naming the default dataset root.
pub const DATA_ROOT_ENV: &str = "BIOPROP_DATA_ROOT";

const SPLIT_STREAM: u64 = 0x5350_4c49;
const ORDER_STREAM: u64 = 0x4f52_4452;
const AUGMENT_STREAM: u64 = 0x4155_474d;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images kept as bytes (`N×C×H×W`) and scaled by 1/255 when gathered.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    shape: [usize; 3],
    pixels: Vec<u8>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn from_bytes(
        name: &str,
        split: Split,
        shape: [usize; 3],
        pixels: Vec<u8>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || pixels.len() % per != 0 {
            return Err(Error::invalid("dataset", format!("{} bytes for images of {shape:?}", pixels.len())));
        }
        let images = pixels.len() / per;
        if images != labels.len() {
            return Err(Error::CountMismatch {
                images,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid("dataset", format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            name: name.to_string(),
            split,
            shape,
            pixels,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    fn per(&self) -> usize {
        self.shape.iter().product()
    }

    /// Images at `indices` as an `n×C×H×W` tensor in `[0, 1]`, with labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.per();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.pixels[i * per..(i + 1) * per].iter().map(|&b| b as f64 / 255.0));
        }
        let [c, h, w] = self.shape;
        let images = Tensor::new(&[indices.len(), c, h, w], data).expect("gathered buffer matches shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let per = self.per();
        let mut pixels = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            pixels.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
        }
        Dataset {
            name: self.name.clone(),
            split,
            shape: self.shape,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// The first `n` samples (all of them if `n ≥ len`).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split)
    }

    pub fn resized(self, target: usize, method: ResizeMethod) -> Result<Dataset> {
        let [c, h, w] = self.shape;
        if h == target && w == target {
            return Ok(self);
        }
        let pixels = preprocess::resize(&self.pixels, [self.len(), c, h, w], target, method)?;
        Ok(Dataset {
            shape: [c, target, target],
            pixels,
            ..self
        })
    }

    /// Per-channel mean and standard deviation of the `[0, 1]` images.
    pub fn channel_stats(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        preprocess::channel_stats(&self.pixels, self.shape[0], self.shape[1] * self.shape[2])
    }
}

/// Disjoint, exhaustive split of `train` into `(train′, val)` with `n`
/// validation samples chosen by `seed`.
pub fn split_validation(train: &Dataset, n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n >= train.len() && n > 0 {
        return Err(Error::invalid(
            "split_validation",
            format!("validation size {n} must be smaller than the {} training samples", train.len()),
        ));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    Rng::derive(seed, &[SPLIT_STREAM]).shuffle(&mut order);
    let (val, rest) = order.split_at(n);
    let (mut val, mut rest) = (val.to_vec(), rest.to_vec());
    val.sort_unstable();
    rest.sort_unstable();
    Ok((train.subset(&rest, Split::Train), train.subset(&val, Split::Val)))
}

/// Visiting order for `epoch`: a permutation that depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derive(seed, &[ORDER_STREAM, epoch as u64]).shuffle(&mut order);
    order
}

/// Mini-batches over a dataset; the final partial batch is kept.
pub struct BatchIterator<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: Option<Augment>,
    rng: Rng,
}

impl<'a> BatchIterator<'a> {
    /// Dataset order, no augmentation.
    pub fn sequential(ds: &'a Dataset, batch_size: usize) -> Result<Self> {
        Self::with_order(ds, (0..ds.len()).collect(), batch_size, None, Rng::new(0))
    }

    /// Shuffled order and augmentation stream derived from `(seed, epoch)`.
    pub fn shuffled(ds: &'a Dataset, batch_size: usize, seed: u64, epoch: usize, augment: Option<Augment>) -> Result<Self> {
        let rng = Rng::derive(seed, &[AUGMENT_STREAM, epoch as u64]);
        Self::with_order(ds, epoch_order(ds.len(), seed, epoch), batch_size, augment, rng)
    }

    fn with_order(ds: &'a Dataset, order: Vec<usize>, batch_size: usize, augment: Option<Augment>, rng: Rng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batches", "batch size must be positive"));
        }
        Ok(Self {
            ds,
            order,
            pos: 0,
            batch_size,
            augment,
            rng,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let (mut x, y) = self.ds.gather(&self.order[self.pos..end]);
        self.pos = end;
        if let Some(a) = &self.augment {
            a.apply(&mut x, &mut self.rng);
        }
        Some((x, y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl DatasetKind {
    pub fn is_cifar(&self) -> bool {
        *self == DatasetKind::Cifar10
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion_mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    fn candidate_dirs(&self, root: &Path) -> Vec<PathBuf> {
        let subdirs: &[&str] = match self {
            DatasetKind::Mnist => &["mnist", "MNIST/raw"],
            DatasetKind::FashionMnist => &["fashion_mnist", "fashion-mnist", "FashionMNIST/raw"],
            DatasetKind::Cifar10 => &["cifar-10-batches-bin", "cifar10"],
        };
        subdirs.iter().map(|s| root.join(s)).chain(std::iter::once(root.to_path_buf())).collect()
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion_mnist" | "fashion-mnist" | "fashionmnist" => Ok(DatasetKind::FashionMnist),
            "cifar10" | "cifar10_benchmark" | "cifar-10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::invalid(
                "dataset",
                format!("unknown dataset `{other}` (expected mnist, fashion_mnist, cifar10 or cifar10_benchmark)"),
            )),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Configured path, else `$BIOPROP_DATA_ROOT`, else `./data`.
pub fn resolve_root(configured: Option<&str>) -> PathBuf {
    configured
        .map(PathBuf::from)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads an IDX image/label pair.
pub fn load_idx(images_path: &Path, labels_path: &Path, name: &str, split: Split) -> Result<Dataset> {
    let images = idx::read_idx_images(images_path)?;
    let labels = idx::read_idx_labels(labels_path)?;
    if images.count != labels.len() {
        return Err(Error::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    Dataset::from_bytes(
        name,
        split,
        [1, images.rows, images.cols],
        images.pixels,
        labels.into_iter().map(usize::from).collect(),
        10,
    )
}

/// `(train, test)` from the five CIFAR-10 training batches and the test batch.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for f in cifar::TRAIN_FILES {
        let (l, p) = cifar::read_cifar_batch(&dir.join(f))?;
        labels.extend(l.into_iter().map(usize::from));
        pixels.extend(p);
    }
    let train = Dataset::from_bytes("cifar10", Split::Train, [3, 32, 32], pixels, labels, 10)?;
    let (l, p) = cifar::read_cifar_batch(&dir.join(cifar::TEST_FILE))?;
    let test = Dataset::from_bytes("cifar10", Split::Test, [3, 32, 32], p, l.into_iter().map(usize::from).collect(), 10)?;
    Ok((train, test))
}

/// `(train, test)` for a named dataset under `root`.
pub fn load(kind: DatasetKind, root: &Path) -> Result<(Dataset, Dataset)> {
    let marker = match kind {
        DatasetKind::Cifar10 => cifar::TEST_FILE,
        _ => "t10k-images-idx3-ubyte",
    };
    let candidates = kind.candidate_dirs(root);
    let Some(dir) = candidates.iter().find(|d| d.join(marker).is_file()) else {
        let tried: Vec<String> = candidates.iter().map(|d| d.display().to_string()).collect();
        return Err(Error::io(
            format!("{kind} not found (looked for {marker} in {})", tried.join(", ")),
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    };
    match kind {
        DatasetKind::Cifar10 => load_cifar10(dir),
        _ => {
            let name = kind.as_str();
            let train = load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
                name,
                Split::Train,
            )?;
            let test = load_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
                name,
                Split::Test,
            )?;
            Ok((train, test))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let pixels = (0..n * 4).map(|i| (i % 256) as u8).collect();
        Dataset::from_bytes("toy", Split::Train, [1, 2, 2], pixels, (0..n).map(|i| i % 3).collect(), 3).unwrap()
    }

    #[test]
    fn idx_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = idx::IdxImages {
            count: 2,
            rows: 2,
            cols: 2,
            pixels: vec![0, 128, 255, 7, 1, 2, 3, 4],
        };
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, idx::encode_idx_images(&img)).unwrap();
        std::fs::write(&lp, idx::encode_idx_labels(&[5, 9])).unwrap();
        let ds = load_idx(&ip, &lp, "fx", Split::Test).unwrap();
        assert_eq!(ds.pixels(), &img.pixels[..]);
        assert_eq!(ds.labels(), &[5, 9]);
        let (x, _) = ds.gather(&[0]);
        assert_eq!(x.data(), &[0.0, 128.0 / 255.0, 1.0, 7.0 / 255.0]);

        std::fs::write(&lp, idx::encode_idx_labels(&[5, 9, 1])).unwrap();
        assert!(matches!(load_idx(&ip, &lp, "fx", Split::Test), Err(Error::CountMismatch { .. })));
    }

    #[test]
    fn split_properties() {
        let ds = toy(50);
        let (a, b) = split_validation(&ds, 10, 1).unwrap();
        assert_eq!((a.len(), b.len()), (40, 10));
        let (a2, b2) = split_validation(&ds, 10, 1).unwrap();
        assert_eq!((a.clone(), b.clone()), (a2, b2));
        let (t, v) = split_validation(&ds, 0, 1).unwrap();
        assert_eq!(t.pixels(), ds.pixels());
        assert!(v.is_empty());
        assert!(split_validation(&ds, 50, 1).is_err());
        // Disjoint and exhaustive: the byte multisets add up.
        let mut all: Vec<u8> = a.pixels().iter().chain(b.pixels()).copied().collect();
        let mut orig = ds.pixels().to_vec();
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);
    }

    #[test]
    fn epoch_orders_are_reproducible_permutations() {
        let a = epoch_order(100, 3, 0);
        assert_eq!(a, epoch_order(100, 3, 0));
        assert_ne!(a, epoch_order(100, 3, 1));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn batches_cover_the_epoch_once() {
        let ds = toy(10);
        let it = BatchIterator::shuffled(&ds, 4, 7, 2, None).unwrap();
        assert_eq!(it.num_batches(), 3);
        let sizes: Vec<usize> = it.map(|(x, _)| x.dim(0)).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let seen: usize = BatchIterator::sequential(&ds, 3).unwrap().map(|(_, y)| y.len()).sum();
        assert_eq!(seen, 10);
        assert!(BatchIterator::sequential(&ds, 0).is_err());
    }

    #[test]
    fn augmented_batches_are_reproducible() {
        let pixels: Vec<u8> = (0..8 * 3 * 8 * 8).map(|i| (i * 31 % 256) as u8).collect();
        let ds = Dataset::from_bytes("c", Split::Train, [3, 8, 8], pixels, vec![0; 8], 10).unwrap();
        let run = || -> Vec<Tensor> {
            BatchIterator::shuffled(&ds, 3, 1, 0, Some(Augment::default())).unwrap().map(|b| b.0).collect()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|t| t.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn dataset_names() {
        assert_eq!("cifar10_benchmark".parse::<DatasetKind>().unwrap(), DatasetKind::Cifar10);
        assert_eq!("fashion_mnist".parse::<DatasetKind>().unwrap(), DatasetKind::FashionMnist);
        assert!("imagenet".parse::<DatasetKind>().is_err());
    }

    #[test]
    fn missing_dataset_reports_paths() {
        let dir = tempfile::tempdir().unwrap();
        let err = load(DatasetKind::Mnist, dir.path()).unwrap_err().to_string();
        assert!(err.contains("t10k-images-idx3-ubyte"), "{err}");
    }
}
