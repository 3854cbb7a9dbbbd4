//! Binary checkpoint container: named f64 tensors grouped into sections,
//! tagged with the config fingerprint, epoch, and seed of the run that
//! produced them. The teacher is never serialized; it is reconstructed
//! from the config. The same container doubles as the weight-bundle
//! format for pretrained backbones (fingerprint ignored on that path).

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DMDDCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub fingerprint: String,
    pub epoch: u64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub sections: Vec<(String, Vec<(String, Tensor)>)>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::io(path, source)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptDataset("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::CorruptDataset("non-utf8 string in checkpoint".into()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::CorruptDataset(format!(
                "implausible tensor rank {ndim}"
            )));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut count = 1usize;
        for _ in 0..ndim {
            let d = self.u64()? as usize;
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::CorruptDataset("tensor size overflow".into()))?;
            shape.push(d);
        }
        let raw = self.take(count * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(crate::tensor::from_vec(&shape, data))
    }
}

/// Serialize sections of named tensors under the run's identity.
pub fn save(
    path: &Path,
    fingerprint: &str,
    epoch: u64,
    seed: u64,
    sections: &[(&str, &ParamStore)],
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_str(&mut out, fingerprint);
    put_u64(&mut out, epoch);
    put_u64(&mut out, seed);
    put_u32(&mut out, sections.len() as u32);
    for (name, store) in sections {
        put_str(&mut out, name);
        put_u32(&mut out, store.len() as u32);
        for id in store.ids() {
            put_str(&mut out, store.name(id));
            let t = store.value(id);
            put_u32(&mut out, t.ndim() as u32);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for &v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&out).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Parse a checkpoint file into memory.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut buf)
        .map_err(|e| io_err(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::CorruptDataset(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CorruptDataset(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let fingerprint = r.string()?;
    let epoch = r.u64()?;
    let seed = r.u64()?;
    let n_sections = r.u32()? as usize;
    let mut sections = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let sec_name = r.string()?;
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = r.string()?;
            tensors.push((name, r.tensor()?));
        }
        sections.push((sec_name, tensors));
    }
    Ok(Checkpoint {
        meta: CheckpointMeta {
            fingerprint,
            epoch,
            seed,
        },
        sections,
    })
}

fn assign(store: &mut ParamStore, tensors: &[(String, Tensor)], origin: &Path) -> Result<()> {
    for (name, tensor) in tensors {
        let id = store.find(name).ok_or_else(|| {
            Error::Config(format!(
                "{}: tensor {name} has no matching parameter",
                origin.display()
            ))
        })?;
        let dst = store.value_mut(id);
        if dst.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: checkpoint {:?} vs model {:?}",
                tensor.shape(),
                dst.shape()
            )));
        }
        dst.assign(tensor);
    }
    Ok(())
}

/// Restore parameter stores from a checkpoint, verifying the fingerprint.
/// Every parameter of every target store must be present; extra tensors in
/// the file are rejected so silent drift is impossible.
pub fn load_into(
    path: &Path,
    expected_fingerprint: &str,
    force: bool,
    targets: &mut [(&str, &mut ParamStore)],
) -> Result<CheckpointMeta> {
    let ckpt = load(path)?;
    if ckpt.meta.fingerprint != expected_fingerprint && !force {
        return Err(Error::FingerprintMismatch {
            expected: expected_fingerprint.into(),
            found: ckpt.meta.fingerprint.clone(),
        });
    }
    for (sec_name, store) in targets.iter_mut() {
        let tensors = ckpt
            .sections
            .iter()
            .find(|(n, _)| n == sec_name)
            .map(|(_, t)| t)
            .ok_or_else(|| {
                Error::CorruptDataset(format!(
                    "{}: missing section {sec_name}",
                    path.display()
                ))
            })?;
        if tensors.len() != store.len() {
            return Err(Error::Config(format!(
                "{}: section {sec_name} has {} tensors, model expects {}",
                path.display(),
                tensors.len(),
                store.len()
            )));
        }
        assign(store, tensors, path)?;
    }
    Ok(ckpt.meta)
}

/// Load a weight bundle into one store by parameter name, ignoring run
/// identity. Used for pretrained backbone weights.
pub fn load_tensors_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let ckpt = load(path)?;
    let mut flat: Vec<(String, Tensor)> = Vec::new();
    for (_, tensors) in ckpt.sections {
        flat.extend(tensors);
    }
    assign(store, &flat, path)
}
