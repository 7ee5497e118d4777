//! Dataset ingestion (MNIST IDX and synthetic generators), stratified
//! subsetting, and exact network checkpoints.
//!
//! Checkpoints are versioned plain text with one parameter per line at 17
//! significant digits — enough to reproduce every 64-bit float exactly
//! while staying diffable. The synthetic image generator writes genuine IDX
//! files so the real loader is exercised even on machines without MNIST.

use crate::net::{forward, LabeledSet, MlpNetwork, NetError, Target};
use crate::rng::Stream;
use crate::trainer::{initialize, InitScheme};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CHECKPOINT_VERSION: u32 = 1;

/// Standard MNIST file names, also used by the synthetic surrogate.
pub const IDX_FILE_NAMES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Debug)]
pub enum DataError {
    BadMagic {
        context: &'static str,
        expected: u32,
        got: u32,
    },
    TruncatedFile {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    CountMismatch {
        images: usize,
        labels: usize,
    },
    InvalidSubset {
        requested: usize,
        available: usize,
    },
    VersionMismatch {
        expected: u32,
        got: String,
    },
    CorruptFile {
        reason: String,
    },
    Io(std::io::Error),
    Net(NetError),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::BadMagic {
                context,
                expected,
                got,
            } => write!(f, "{context}: bad magic {got:#010x}, expected {expected:#010x}"),
            DataError::TruncatedFile {
                context,
                expected,
                got,
            } => write!(f, "{context}: needs {expected} bytes, only {got} present"),
            DataError::CountMismatch { images, labels } => {
                write!(f, "{images} images but {labels} labels")
            }
            DataError::InvalidSubset {
                requested,
                available,
            } => write!(f, "subset of {requested} requested from {available} samples"),
            DataError::VersionMismatch { expected, got } => {
                write!(f, "checkpoint version '{got}' unsupported (expected v{expected})")
            }
            DataError::CorruptFile { reason } => write!(f, "corrupt checkpoint: {reason}"),
            DataError::Io(e) => e.fmt(f),
            DataError::Net(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

impl From<NetError> for DataError {
    fn from(e: NetError) -> Self {
        DataError::Net(e)
    }
}

/// A train/test pair plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub name: String,
    /// Pixel inputs were scaled into [0,1].
    pub normalized: bool,
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    offset: usize,
    context: &'static str,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8], context: &'static str) -> Self {
        ByteReader {
            bytes,
            offset: 0,
            context,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.offset + n > self.bytes.len() {
            return Err(DataError::TruncatedFile {
                context: self.context,
                expected: self.offset + n,
                got: self.bytes.len(),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn read_u32_be(&mut self) -> Result<u32, DataError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads one IDX image/label file pair: inputs become `rows·cols` vectors
/// scaled by 1/255, targets the class indices.
pub fn load_mnist_idx(
    images_path: &Path,
    labels_path: &Path,
) -> Result<LabeledSet, DataError> {
    let image_bytes = fs::read(images_path)?;
    let mut r = ByteReader::new(&image_bytes, "IDX image file");
    let magic = r.read_u32_be()?;
    if magic != MNIST_IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            context: "IDX image file",
            expected: MNIST_IMAGE_MAGIC,
            got: magic,
        });
    }
    let count = r.read_u32_be()? as usize;
    let rows = r.read_u32_be()? as usize;
    let cols = r.read_u32_be()? as usize;
    let pixels = rows * cols;
    let data = r.take(count * pixels)?;
    let inputs: Vec<Vec<f64>> = data
        .chunks_exact(pixels)
        .map(|px| px.iter().map(|&b| b as f64 / 255.0).collect())
        .collect();

    let label_bytes = fs::read(labels_path)?;
    let mut r = ByteReader::new(&label_bytes, "IDX label file");
    let magic = r.read_u32_be()?;
    if magic != MNIST_LABEL_MAGIC {
        return Err(DataError::BadMagic {
            context: "IDX label file",
            expected: MNIST_LABEL_MAGIC,
            got: magic,
        });
    }
    let label_count = r.read_u32_be()? as usize;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let labels = r.take(label_count)?;
    let targets = labels.iter().map(|&c| Target::Class(c as usize)).collect();
    LabeledSet::new(inputs, targets).map_err(DataError::from)
}

/// Writes an IDX image file (big-endian header, unsigned pixel bytes).
pub fn write_idx_images(
    path: &Path,
    images: &[Vec<u8>],
    rows: usize,
    cols: usize,
) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&MNIST_IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for image in images {
        assert_eq!(image.len(), rows * cols, "image size mismatch");
        out.extend_from_slice(image);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes an IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&MNIST_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

/// First-N stratified subset for classification sets: walks the set in
/// order taking samples while a class is below its quota (n/classes, the
/// remainder going to the lowest class indices); any deficit left by an
/// exhausted class is filled with the earliest untaken samples.
pub fn stratified_subset(set: &LabeledSet, n: usize) -> Result<LabeledSet, DataError> {
    if n == 0 || n > set.len() {
        return Err(DataError::InvalidSubset {
            requested: n,
            available: set.len(),
        });
    }
    let mut classes = 0usize;
    for t in set.targets() {
        match t {
            Target::Class(c) => classes = classes.max(c + 1),
            Target::Vector(_) => {
                return Err(DataError::Net(NetError::TargetKindMismatch {
                    context: "stratified subset",
                }))
            }
        }
    }
    let base = n / classes;
    let extra = n % classes;
    let quota: Vec<usize> = (0..classes)
        .map(|c| base + usize::from(c < extra))
        .collect();
    let mut counts = vec![0usize; classes];
    let mut chosen = vec![false; set.len()];
    let mut picked = 0usize;
    for (i, slot) in chosen.iter_mut().enumerate() {
        let Target::Class(c) = *set.target(i) else {
            unreachable!("checked above")
        };
        if counts[c] < quota[c] {
            counts[c] += 1;
            *slot = true;
            picked += 1;
        }
    }
    for slot in chosen.iter_mut() {
        if picked == n {
            break;
        }
        if !*slot {
            *slot = true;
            picked += 1;
        }
    }
    let indices: Vec<usize> = (0..set.len()).filter(|&i| chosen[i]).collect();
    set.subset(&indices).map_err(DataError::from)
}

/// Regression bundle labeled by a frozen random teacher network
/// (`input_dim → hidden… → 1`); inputs standard normal, train and test
/// drawn independently, all deterministic per seed.
pub fn synthetic_teacher(
    seed: u64,
    input_dim: usize,
    hidden: &[usize],
    n_train: usize,
    n_test: usize,
) -> Result<DatasetBundle, DataError> {
    let mut shape = vec![input_dim];
    shape.extend_from_slice(hidden);
    shape.push(1);
    let teacher = initialize(&shape, InitScheme::NormalSigma, seed)
        .map_err(|e| DataError::CorruptFile {
            reason: format!("teacher construction: {e}"),
        })?;
    let mut stream = Stream::new(seed, 1);
    let mut draw = |n: usize| -> Result<LabeledSet, NetError> {
        let inputs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..input_dim).map(|_| stream.next_standard_normal()).collect())
            .collect();
        let targets = inputs
            .iter()
            .map(|x| Ok(Target::Vector(forward(&teacher, x)?)))
            .collect::<Result<Vec<_>, NetError>>()?;
        LabeledSet::new(inputs, targets)
    };
    let train = draw(n_train)?;
    let test = draw(n_test)?;
    Ok(DatasetBundle {
        train,
        test,
        name: format!("teacher-{seed}"),
        normalized: false,
    })
}

/// Pixel side length of the synthetic image surrogate (28×28 like MNIST).
const SURROGATE_SIDE: usize = 28;
const SURROGATE_CLASSES: usize = 10;
/// Distinct render styles per class — the analog of handwriting variants.
/// A 10k-sample training subset sees each style only ~125 times, so the
/// carved class boundaries are genuinely undersampled.
const SURROGATE_MODES: usize = 8;
/// Soft blobs per style.
const SURROGATE_BLOBS: usize = 5;
/// Per-pixel Gaussian noise.
const SURROGATE_NOISE: f64 = 0.18;
/// Fraction of samples blended toward a style of another class while
/// keeping their own label — ambiguous examples standing in for MNIST's
/// hard digits. Blends near the upper end look more like the foreign
/// class than the labeled one, so a few percent of both splits is
/// irreducibly hard and only memorizable.
const SURROGATE_CONFUSER_RATE: f64 = 0.16;
const SURROGATE_BLEND_LO: f64 = 0.30;
const SURROGATE_BLEND_HI: f64 = 0.60;

/// Writes a 10-class MNIST-shaped synthetic dataset as genuine IDX files
/// (standard MNIST names) under `dir`. Each class owns a set of blob
/// styles on the 28×28 grid; samples pick a style, optionally blend
/// toward a foreign-class style (label unchanged), jitter the overall
/// intensity, and add Gaussian pixel noise. Train and test are drawn from
/// the same distribution. The task is learnable but not separable at desk
/// scale, so trained networks show genuine generalization gaps.
pub fn write_synthetic_idx(
    dir: &Path,
    seed: u64,
    n_train: usize,
    n_test: usize,
) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let mut proto_stream = Stream::new(seed, 0);
    let side = SURROGATE_SIDE as f64;
    let mut styles: Vec<Vec<Vec<f64>>> = Vec::with_capacity(SURROGATE_CLASSES);
    for _ in 0..SURROGATE_CLASSES {
        let mut class_styles = Vec::with_capacity(SURROGATE_MODES);
        for _ in 0..SURROGATE_MODES {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..SURROGATE_BLOBS)
                .map(|_| {
                    (
                        2.0 + (side - 4.0) * proto_stream.next_f64(),
                        2.0 + (side - 4.0) * proto_stream.next_f64(),
                        1.5 + 2.0 * proto_stream.next_f64(),
                        0.5 + 0.5 * proto_stream.next_f64(),
                    )
                })
                .collect();
            let mut proto = vec![0.0f64; SURROGATE_SIDE * SURROGATE_SIDE];
            for y in 0..SURROGATE_SIDE {
                for x in 0..SURROGATE_SIDE {
                    let mut v = 0.0;
                    for &(cx, cy, sigma, amp) in &blobs {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                    proto[y * SURROGATE_SIDE + x] = v.min(1.0);
                }
            }
            class_styles.push(proto);
        }
        styles.push(class_styles);
    }
    let render = |count: usize, stream_id: u64| -> (Vec<Vec<u8>>, Vec<u8>) {
        let mut s = Stream::new(seed, stream_id);
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % SURROGATE_CLASSES;
            let mode = (s.next_u64() % SURROGATE_MODES as u64) as usize;
            let mut pattern = styles[class][mode].clone();
            if s.next_f64() < SURROGATE_CONFUSER_RATE {
                let mut other = (s.next_u64() % (SURROGATE_CLASSES - 1) as u64) as usize;
                if other >= class {
                    other += 1;
                }
                let other_mode = (s.next_u64() % SURROGATE_MODES as u64) as usize;
                let beta = SURROGATE_BLEND_LO
                    + (SURROGATE_BLEND_HI - SURROGATE_BLEND_LO) * s.next_f64();
                for (p, &q) in pattern.iter_mut().zip(&styles[other][other_mode]) {
                    *p = (1.0 - beta) * *p + beta * q;
                }
            }
            let gain = 0.75 + 0.3 * s.next_f64();
            let image: Vec<u8> = pattern
                .iter()
                .map(|&p| {
                    let noisy = gain * p + SURROGATE_NOISE * s.next_standard_normal();
                    (noisy.clamp(0.0, 1.0) * 255.0).round() as u8
                })
                .collect();
            images.push(image);
            labels.push(class as u8);
        }
        (images, labels)
    };
    let (train_images, train_labels) = render(n_train, 1);
    let (test_images, test_labels) = render(n_test, 2);
    write_idx_images(
        &dir.join(IDX_FILE_NAMES[0]),
        &train_images,
        SURROGATE_SIDE,
        SURROGATE_SIDE,
    )?;
    write_idx_labels(&dir.join(IDX_FILE_NAMES[1]), &train_labels)?;
    write_idx_images(
        &dir.join(IDX_FILE_NAMES[2]),
        &test_images,
        SURROGATE_SIDE,
        SURROGATE_SIDE,
    )?;
    write_idx_labels(&dir.join(IDX_FILE_NAMES[3]), &test_labels)?;
    Ok(())
}

/// Loads the train/test pair from a directory laid out with the standard
/// MNIST file names.
pub fn load_idx_dir(dir: &Path, name: &str) -> Result<DatasetBundle, DataError> {
    let train = load_mnist_idx(&dir.join(IDX_FILE_NAMES[0]), &dir.join(IDX_FILE_NAMES[1]))?;
    let test = load_mnist_idx(&dir.join(IDX_FILE_NAMES[2]), &dir.join(IDX_FILE_NAMES[3]))?;
    Ok(DatasetBundle {
        train,
        test,
        name: name.to_string(),
        normalized: true,
    })
}

/// Run metadata stored alongside checkpoint parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
}

/// Saves a network as versioned decimal text, exact to the last bit.
pub fn save_checkpoint(
    path: &Path,
    net: &MlpNetwork,
    meta: &CheckpointMeta,
) -> Result<(), DataError> {
    let mut out = Vec::new();
    writeln!(out, "flatmeter-checkpoint v{CHECKPOINT_VERSION}")?;
    let shape: Vec<String> = net.shape().iter().map(|u| u.to_string()).collect();
    writeln!(out, "shape {}", shape.join(" "))?;
    writeln!(out, "seed {}", meta.seed)?;
    writeln!(out, "config_hash {}", meta.config_hash)?;
    let params = net.params_flat();
    writeln!(out, "params {}", params.len())?;
    for p in &params {
        writeln!(out, "{p:.16e}")?;
    }
    fs::write(path, out)?;
    Ok(())
}

fn corrupt(reason: impl Into<String>) -> DataError {
    DataError::CorruptFile {
        reason: reason.into(),
    }
}

/// Loads a checkpoint saved by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(MlpNetwork, CheckpointMeta), DataError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| corrupt("empty file"))?;
    match header.strip_prefix("flatmeter-checkpoint ") {
        Some(v) if v == format!("v{CHECKPOINT_VERSION}") => {}
        Some(v) => {
            return Err(DataError::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                got: v.to_string(),
            })
        }
        None => return Err(corrupt("missing checkpoint header")),
    }
    let shape_line = lines.next().ok_or_else(|| corrupt("missing shape"))?;
    let shape: Vec<usize> = shape_line
        .strip_prefix("shape ")
        .ok_or_else(|| corrupt("missing shape"))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| corrupt(format!("bad shape token '{t}'"))))
        .collect::<Result<_, _>>()?;
    if shape.len() < 2 {
        return Err(corrupt("shape needs at least two sizes"));
    }
    let seed: u64 = lines
        .next()
        .and_then(|l| l.strip_prefix("seed "))
        .ok_or_else(|| corrupt("missing seed"))?
        .parse()
        .map_err(|_| corrupt("bad seed"))?;
    let config_hash = lines
        .next()
        .and_then(|l| l.strip_prefix("config_hash "))
        .ok_or_else(|| corrupt("missing config_hash"))?
        .to_string();
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("params "))
        .ok_or_else(|| corrupt("missing params count"))?
        .parse()
        .map_err(|_| corrupt("bad params count"))?;
    let mut params = Vec::with_capacity(count);
    for line in lines {
        let v: f64 = line
            .trim()
            .parse()
            .map_err(|_| corrupt(format!("bad parameter '{line}'")))?;
        params.push(v);
    }
    if params.len() != count {
        return Err(corrupt(format!(
            "expected {count} parameters, found {}",
            params.len()
        )));
    }
    let mut net = zero_network(&shape)?;
    net.set_params_flat(&params)?;
    Ok((net, CheckpointMeta { seed, config_hash }))
}

fn zero_network(shape: &[usize]) -> Result<MlpNetwork, DataError> {
    let layers = (1..shape.len())
        .map(|i| {
            crate::net::Layer::new(
                crate::numlin::DenseMatrix::zeros(shape[i], shape[i - 1]),
                vec![0.0; shape[i]],
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    MlpNetwork::new(layers).map_err(DataError::from)
}
