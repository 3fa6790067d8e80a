//! MNIST loading: IDX parsing, pixel scaling, shuffled mini-batches and a
//! checksum-verified download helper. Parsing never touches the network;
//! [`fetch_mnist`] is the only function that does.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "{what}: truncated header, needed {end} bytes, got {}",
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Parse an IDX image file into a [N, 1, H, W] f32 tensor with pixels
/// scaled to [0, 1] (byte value / 255).
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let magic = read_u32_be(bytes, 0, "idx images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "idx images: magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(bytes, 4, "idx images")? as usize;
    let h = read_u32_be(bytes, 8, "idx images")? as usize;
    let w = read_u32_be(bytes, 12, "idx images")? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Data(format!("idx images: degenerate dims {n}x{h}x{w}")));
    }
    let expect = 16 + n * h * w;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "idx images: {n} {h}x{w} images need {expect} bytes, file has {}",
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[16..].iter().map(|&p| p as f32 / 255.0).collect();
    Tensor::from_vec(&[n, 1, h, w], data)
}

/// Parse an IDX label file. Labels must be digits 0..=9.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0, "idx labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "idx labels: magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(bytes, 4, "idx labels")? as usize;
    let expect = 8 + n;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "idx labels: {n} labels need {expect} bytes, file has {}",
            bytes.len()
        )));
    }
    let labels = bytes[8..].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Data(format!("idx labels: label {bad} out of range 0..=9")));
    }
    Ok(labels)
}

/// Inverse of [`parse_idx_images`]; exact for tensors that came from bytes.
pub fn serialize_idx_images(images: &Tensor<f32>) -> Result<Vec<u8>> {
    let (n, h, w) = match images.shape() {
        [n, 1, h, w] => (*n, *h, *w),
        other => return Err(Error::Config(format!("images must be [N,1,H,W], got {other:?}"))),
    };
    let mut out = Vec::with_capacity(16 + n * h * w);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in images.data() {
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn serialize_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Images and labels of equal length.
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<u8>) -> Result<Self> {
        let n = images.shape()[0];
        if n != labels.len() {
            return Err(Error::Data(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gather `indices` into a fresh (images, labels) batch.
    pub fn gather(&self, indices: &[u32]) -> (Tensor<f32>, Vec<u8>) {
        let shape = self.images.shape();
        let stride: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        let src = self.images.data();
        for &i in indices {
            let i = i as usize;
            out.extend_from_slice(&src[i * stride..][..stride]);
            labels.push(self.labels[i]);
        }
        let mut bshape = shape.to_vec();
        bshape[0] = indices.len();
        (Tensor::from_vec(&bshape, out).unwrap(), labels)
    }
}

pub fn load_dataset(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    Dataset::new(images, labels)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub struct MnistData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Load the four canonical files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<MnistData> {
    Ok(MnistData {
        train: load_dataset(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?,
        test: load_dataset(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?,
    })
}

/// Number of batches one epoch yields: every sample exactly once, short
/// final batch kept. 60000 at batch 128 gives 469 (468 full + one of 96).
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Mini-batch schedule: batch size plus the seed the per-epoch shuffles
/// are derived from.
#[derive(Clone, Copy, Debug)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchPlan {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if n == 0 {
            return Err(Error::Data("cannot batch an empty dataset".into()));
        }
        Ok(())
    }
}

/// Endless stream of shuffled mini-batches. Each epoch reshuffles the whole
/// index range with a seed derived from `(plan.seed, epoch)`, walks it in
/// batch-size chunks and keeps the short final batch, so every sample
/// appears exactly once per epoch. Fine-tuning simply takes K batches off
/// the stream and flows across epoch boundaries.
pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    plan: BatchPlan,
    epoch: u64,
    order: Vec<u32>,
    cursor: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(dataset: &'a Dataset, plan: BatchPlan) -> Result<Self> {
        plan.validate(dataset.len())?;
        let mut s = BatchStream { dataset, plan, epoch: 0, order: Vec::new(), cursor: 0 };
        s.reshuffle();
        Ok(s)
    }

    /// Epoch the next batch will come from, starting at 0.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn reshuffle(&mut self) {
        let mut rng = rng_from_seed(derive_seed(self.plan.seed, &[self.epoch]));
        self.order = (0..self.dataset.len() as u32).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    /// Indices of the next batch; exposed for permutation tests.
    pub fn next_indices(&mut self) -> Vec<u32> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.plan.batch_size).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }

    pub fn next_batch(&mut self) -> (Tensor<f32>, Vec<u8>) {
        let idx = self.next_indices();
        self.dataset.gather(&idx)
    }
}

const MD5_TRAIN_IMAGES_GZ: &str = "f68b3c2dcbeaaa9fbdd348bbdeb94873";
const MD5_TRAIN_LABELS_GZ: &str = "d53e105ee54ea40749a09fcbcd1e9432";
const MD5_TEST_IMAGES_GZ: &str = "9fb629c4189551a2d022fa330f9573f3";
const MD5_TEST_LABELS_GZ: &str = "ec29112dd5afa0611ce80d1b7f02629c";

/// Canonical mirror carrying the original four gzip files.
pub const DEFAULT_BASE_URL: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";

struct RemoteFile {
    gz_name: &'static str,
    out_name: &'static str,
    md5: &'static str,
}

const REMOTE_FILES: [RemoteFile; 4] = [
    RemoteFile { gz_name: "train-images-idx3-ubyte.gz", out_name: TRAIN_IMAGES, md5: MD5_TRAIN_IMAGES_GZ },
    RemoteFile { gz_name: "train-labels-idx1-ubyte.gz", out_name: TRAIN_LABELS, md5: MD5_TRAIN_LABELS_GZ },
    RemoteFile { gz_name: "t10k-images-idx3-ubyte.gz", out_name: TEST_IMAGES, md5: MD5_TEST_IMAGES_GZ },
    RemoteFile { gz_name: "t10k-labels-idx1-ubyte.gz", out_name: TEST_LABELS, md5: MD5_TEST_LABELS_GZ },
];

fn md5_hex(bytes: &[u8]) -> String {
    use md5::{Digest, Md5};
    let mut hasher = Md5::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| Error::Format(format!("gzip decode failed: {e}")))?;
    Ok(out)
}

/// Download, checksum-verify and decompress the four MNIST files into
/// `dir`. Files already present and parseable are left alone.
pub fn fetch_mnist(dir: &Path, base_url: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for file in &REMOTE_FILES {
        let target = dir.join(file.out_name);
        if target.exists() {
            let ok = read_file(&target).and_then(|bytes| {
                if file.out_name.contains("images") {
                    parse_idx_images(&bytes).map(|_| ())
                } else {
                    parse_idx_labels(&bytes).map(|_| ())
                }
            });
            if ok.is_ok() {
                continue;
            }
        }
        let url = format!("{}{}", base_url, file.gz_name);
        let mut gz = Vec::new();
        ureq::get(&url)
            .call()
            .map_err(|e| Error::Data(format!("GET {url} failed: {e}")))?
            .into_reader()
            .read_to_end(&mut gz)
            .map_err(|e| Error::Data(format!("reading {url} failed: {e}")))?;
        let got = md5_hex(&gz);
        if got != file.md5 {
            return Err(Error::Data(format!(
                "{}: checksum {got}, expected {}",
                file.gz_name, file.md5
            )));
        }
        let raw = gunzip(&gz)?;
        fs::write(&target, &raw).map_err(|e| Error::io(&target, e))?;
    }
    Ok(())
}
