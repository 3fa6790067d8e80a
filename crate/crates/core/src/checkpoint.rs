//! Binary container for named tensors plus string metadata.
//!
//! Layout (all integers little-endian except nothing; the container is LE
//! throughout):
//!
//! ```text
//! magic   4 bytes  "WSF1"
//! version u32      currently 1
//! u32 metadata count, then per entry: u32 key len, key, u32 value len, value
//! u32 tensor count, then per tensor:
//!     u32 name len, name bytes
//!     u8  dtype tag (0 = f32, 1 = f64)
//!     u32 rank, then u64 per dim
//!     payload, little-endian scalars
//! ```
//!
//! Metadata is sorted by key and tensors keep their store order, so saving
//! the same content twice produces identical bytes. Writes go through a
//! temp file in the target directory plus an atomic rename.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::stats::StatsSnapshot;
use crate::tensor::{Dtype, Element, ParamStore, Tensor};

pub const MAGIC: [u8; 4] = *b"WSF1";
pub const VERSION: u32 = 1;

/// Metadata key listing non-trainable parameter names (`;`-separated).
/// Absent when every tensor is trainable.
const META_NON_TRAINABLE: &str = "nontrainable";
/// Metadata key carrying the observation count of a statistics snapshot.
pub const META_COUNT: &str = "count";

struct RawTensor {
    name: String,
    dtype: Dtype,
    dims: Vec<u64>,
    payload: Vec<u8>,
}

fn encode(metadata: &BTreeMap<String, String>, tensors: &[RawTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    for (k, v) in metadata {
        out.extend_from_slice(&(k.len() as u32).to_le_bytes());
        out.extend_from_slice(k.as_bytes());
        out.extend_from_slice(&(v.len() as u32).to_le_bytes());
        out.extend_from_slice(v.as_bytes());
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dtype.tag());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&t.payload);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "{what}: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format(format!("{what}: invalid utf-8")))
    }
}

fn decode(bytes: &[u8]) -> Result<(BTreeMap<String, String>, Vec<RawTensor>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "header")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:02x?}, expected {MAGIC:02x?}")));
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let mut metadata = BTreeMap::new();
    let meta_count = r.u32("metadata")?;
    for _ in 0..meta_count {
        let k = r.string("metadata key")?;
        let v = r.string("metadata value")?;
        if metadata.insert(k.clone(), v).is_some() {
            return Err(Error::Format(format!("duplicate metadata key `{k}`")));
        }
    }
    let tensor_count = r.u32("tensor table")?;
    let mut tensors = Vec::with_capacity(tensor_count as usize);
    for _ in 0..tensor_count {
        let name = r.string("tensor name")?;
        let dtype = Dtype::from_tag(r.u8(&format!("tensor `{name}` dtype"))?)?;
        let rank = r.u32(&format!("tensor `{name}` rank"))?;
        let mut dims = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = r.u64(&format!("tensor `{name}` dims"))?;
            numel = numel.saturating_mul(d);
            dims.push(d);
        }
        let payload_len = (numel as usize).saturating_mul(dtype.size_bytes());
        let payload = r.take(payload_len, &format!("tensor `{name}` payload"))?.to_vec();
        if tensors.iter().any(|t: &RawTensor| t.name == name) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        tensors.push(RawTensor { name, dtype, dims, payload });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor table",
            bytes.len() - r.pos
        )));
    }
    Ok((metadata, tensors))
}

fn tensor_to_raw<E: Element>(name: &str, t: &Tensor<E>) -> RawTensor {
    let mut payload = Vec::with_capacity(t.numel() * E::DTYPE.size_bytes());
    for &v in t.data() {
        v.write_le(&mut payload);
    }
    RawTensor {
        name: name.to_string(),
        dtype: E::DTYPE,
        dims: t.shape().iter().map(|&d| d as u64).collect(),
        payload,
    }
}

fn raw_to_tensor<E: Element>(raw: &RawTensor) -> Result<Tensor<E>> {
    if raw.dtype != E::DTYPE {
        return Err(Error::Format(format!(
            "tensor `{}` is {}, loader expects {}",
            raw.name,
            raw.dtype,
            E::DTYPE
        )));
    }
    let shape: Vec<usize> = raw.dims.iter().map(|&d| d as usize).collect();
    let step = E::DTYPE.size_bytes();
    let data: Vec<E> = raw.payload.chunks_exact(step).map(E::read_le).collect();
    Tensor::from_vec(&shape, data).map_err(|e| Error::Format(format!("tensor `{}`: {e}", raw.name)))
}

/// Write `bytes` to `path` atomically: temp file, flush+sync, rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn store_to_raw<E: Element>(
    store: &ParamStore<E>,
    metadata: &BTreeMap<String, String>,
) -> Result<(BTreeMap<String, String>, Vec<RawTensor>)> {
    let mut metadata = metadata.clone();
    if metadata.contains_key(META_NON_TRAINABLE) {
        return Err(Error::Config(format!(
            "metadata key `{META_NON_TRAINABLE}` is reserved"
        )));
    }
    let frozen: Vec<&str> =
        store.iter().filter(|p| !p.trainable).map(|p| p.name.as_str()).collect();
    if !frozen.is_empty() {
        metadata.insert(META_NON_TRAINABLE.to_string(), frozen.join(";"));
    }
    let tensors = store.iter().map(|p| tensor_to_raw(&p.name, &p.tensor)).collect();
    Ok((metadata, tensors))
}

fn raw_to_store<E: Element>(
    mut metadata: BTreeMap<String, String>,
    tensors: Vec<RawTensor>,
) -> Result<(ParamStore<E>, BTreeMap<String, String>)> {
    let frozen: Vec<String> = metadata
        .remove(META_NON_TRAINABLE)
        .map(|v| v.split(';').map(str::to_string).collect())
        .unwrap_or_default();
    let mut store = ParamStore::new();
    for raw in &tensors {
        let trainable = !frozen.iter().any(|f| *f == raw.name);
        store
            .insert(raw.name.clone(), raw_to_tensor::<E>(raw)?, trainable)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok((store, metadata))
}

/// Save a parameter store with caller metadata.
pub fn save_param_store<E: Element>(
    path: &Path,
    store: &ParamStore<E>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let (metadata, tensors) = store_to_raw(store, metadata)?;
    write_atomic(path, &encode(&metadata, &tensors))
}

/// Load a parameter store; every tensor must have dtype `E`.
pub fn load_param_store<E: Element>(
    path: &Path,
) -> Result<(ParamStore<E>, BTreeMap<String, String>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (metadata, tensors) = decode(&bytes)?;
    raw_to_store(metadata, tensors)
}

/// Save a statistics snapshot: `<name>.mean` and `<name>.stddev` tensor
/// pairs plus the observation count in metadata.
pub fn save_snapshot<E: Element>(
    path: &Path,
    snapshot: &StatsSnapshot<E>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let mut metadata = metadata.clone();
    if metadata.contains_key(META_COUNT) {
        return Err(Error::Config(format!("metadata key `{META_COUNT}` is reserved")));
    }
    metadata.insert(META_COUNT.to_string(), snapshot.count().to_string());
    let mut tensors = Vec::with_capacity(snapshot.mean().len() * 2);
    for (m, s) in snapshot.mean().iter().zip(snapshot.stddev().iter()) {
        tensors.push(tensor_to_raw(&format!("{}.mean", m.name), &m.tensor));
        tensors.push(tensor_to_raw(&format!("{}.stddev", s.name), &s.tensor));
    }
    write_atomic(path, &encode(&metadata, &tensors))
}

/// Load a statistics snapshot saved by [`save_snapshot`].
pub fn load_snapshot<E: Element>(
    path: &Path,
) -> Result<(StatsSnapshot<E>, BTreeMap<String, String>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (mut metadata, tensors) = decode(&bytes)?;
    let count: u64 = metadata
        .remove(META_COUNT)
        .ok_or_else(|| Error::Format(format!("snapshot missing `{META_COUNT}` metadata")))?
        .parse()
        .map_err(|_| Error::Format(format!("snapshot `{META_COUNT}` is not an integer")))?;
    let mut mean = ParamStore::new();
    let mut stddev = ParamStore::new();
    for raw in &tensors {
        let tensor = raw_to_tensor::<E>(raw)?;
        if let Some(base) = raw.name.strip_suffix(".mean") {
            mean.insert(base.to_string(), tensor, true)
                .map_err(|e| Error::Format(e.to_string()))?;
        } else if let Some(base) = raw.name.strip_suffix(".stddev") {
            stddev
                .insert(base.to_string(), tensor, true)
                .map_err(|e| Error::Format(e.to_string()))?;
        } else {
            return Err(Error::Format(format!(
                "snapshot tensor `{}` is neither a .mean nor a .stddev",
                raw.name
            )));
        }
    }
    let snapshot = StatsSnapshot::from_parts(mean, stddev, count)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((snapshot, metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::stats::WelfordAccumulator;
    use rand::Rng;

    fn sample_store(seed: u64) -> ParamStore<f32> {
        let mut rng = rng_from_seed(seed);
        let mut s = ParamStore::new();
        for (name, shape, trainable) in [
            ("conv1.weight", vec![4usize, 1, 3, 3], true),
            ("conv1.bias", vec![4], true),
            ("running_mean", vec![4], false),
        ] {
            let mut t = Tensor::<f32>::zeros(&shape);
            for x in t.data_mut() {
                *x = rng.random::<f32>() - 0.5;
            }
            s.insert(name, t, trainable).unwrap();
        }
        s
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.wsf");
        let store = sample_store(1);
        let mut meta = BTreeMap::new();
        meta.insert("stage".to_string(), "train".to_string());
        meta.insert("seed".to_string(), "42".to_string());
        save_param_store(&path, &store, &meta).unwrap();

        let (loaded, got_meta) = load_param_store::<f32>(&path).unwrap();
        assert_eq!(got_meta, meta);
        assert_eq!(loaded.len(), store.len());
        for (a, b) in store.iter().zip(loaded.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.wsf");
        let b = dir.path().join("b.wsf");
        let store = sample_store(7);
        let meta = BTreeMap::new();
        save_param_store(&a, &store, &meta).unwrap();
        save_param_store(&b, &store, &meta).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn empty_store_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.wsf");
        let store = ParamStore::<f32>::new();
        save_param_store(&path, &store, &BTreeMap::new()).unwrap();
        let (loaded, meta) = load_param_store::<f32>(&path).unwrap();
        assert!(loaded.is_empty());
        assert!(meta.is_empty());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wsf");
        fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = load_param_store::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wsf");
        let store = sample_store(2);
        save_param_store(&path, &store, &BTreeMap::new()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        let err = load_param_store::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("version 9"));
    }

    #[test]
    fn truncation_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wsf");
        save_param_store(&path, &sample_store(3), &BTreeMap::new()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = load_param_store::<f32>(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("running_mean"), "{msg}");
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wsf");
        save_param_store(&path, &sample_store(4), &BTreeMap::new()).unwrap();
        let err = load_param_store::<f64>(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("f32") && msg.contains("f64"), "{msg}");
    }

    #[test]
    fn f64_stores_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.wsf");
        let store = sample_store(5).convert::<f64>();
        save_param_store(&path, &store, &BTreeMap::new()).unwrap();
        let (loaded, _) = load_param_store::<f64>(&path).unwrap();
        for (a, b) in store.iter().zip(loaded.iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn snapshot_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.wsf");
        let layout = sample_store(6);
        let mut acc = WelfordAccumulator::for_params(&layout);
        acc.update(&layout).unwrap();
        let mut jiggled = layout.clone();
        for p in jiggled.trainable_mut() {
            for v in p.tensor.data_mut() {
                *v += 0.25;
            }
        }
        acc.update(&jiggled).unwrap();
        let snap = acc.snapshot::<f32>().unwrap();

        save_snapshot(&path, &snap, &BTreeMap::new()).unwrap();
        let (loaded, meta) = load_snapshot::<f32>(&path).unwrap();
        assert!(meta.is_empty());
        assert_eq!(loaded.count(), 2);
        for (a, b) in snap.mean().iter().zip(loaded.mean().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        for (a, b) in snap.stddev().iter().zip(loaded.stddev().iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn snapshot_missing_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.wsf");
        // a plain param store is not a snapshot
        save_param_store(&path, &sample_store(8), &BTreeMap::new()).unwrap();
        let err = load_snapshot::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("count"));
    }

    #[test]
    fn overwrite_replaces_previous_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.wsf");
        save_param_store(&path, &sample_store(10), &BTreeMap::new()).unwrap();
        let second = sample_store(11);
        save_param_store(&path, &second, &BTreeMap::new()).unwrap();
        let (loaded, _) = load_param_store::<f32>(&path).unwrap();
        assert_eq!(
            loaded.get("conv1.weight").unwrap().data(),
            second.get("conv1.weight").unwrap().data()
        );
    }
}
