//! Shared named-tensor checkpoint container plus small line-oriented
//! writers for traces and reports.
//!
//! Container layout (little-endian throughout):
//!   magic "ILMC" | u32 version | u32 meta count | (key, value) strings
//!   | u32 array count | per array: name, u32 ndim, u64 dims..., f32 payload
//!
//! Strings are u32 length + UTF-8 bytes. Array values are row-major f32.
//! Writes are bit-exact given identical inputs, so identical stages rerun to
//! identical files.

use crate::error::{IlmError, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tensor};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ILMC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn push_array(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.arrays.push((name.into(), shape, data));
    }

    pub fn array(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| IlmError::Checkpoint(format!("missing array `{name}`")))
    }

    pub fn from_params<S: Scalar>(params: &ParamSet<S>) -> Self {
        let mut ck = Checkpoint::default();
        for (name, t) in params.iter() {
            let data: Vec<f32> = t.data().iter().map(|v| v.to_f32c()).collect();
            ck.push_array(name.to_string(), t.shape().to_vec(), data);
        }
        ck
    }

    /// Load arrays back into a parameter set with matching names/shapes.
    pub fn into_params<S: Scalar>(&self, params: &mut ParamSet<S>) -> Result<()> {
        if self.arrays.len() != params.len() {
            return Err(IlmError::Checkpoint(format!(
                "checkpoint has {} arrays, model has {} parameters",
                self.arrays.len(),
                params.len()
            )));
        }
        for (name, shape, data) in &self.arrays {
            let converted: Vec<S> = data.iter().map(|&v| S::from_f32c(v)).collect();
            params.load_named(name, &converted, shape)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut names = std::collections::BTreeSet::new();
        for (n, _, _) in &self.arrays {
            if !names.insert(n) {
                return Err(IlmError::Checkpoint(format!("duplicate array name `{n}`")));
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, shape, data) in &self.arrays {
            write_str(&mut w, name)?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let n: usize = shape.iter().product();
            if n != data.len() {
                return Err(IlmError::Checkpoint(format!(
                    "array `{name}` shape/data mismatch"
                )));
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path).map_err(|e| {
            IlmError::Storage(format!("cannot open checkpoint {}: {e}", path.display()))
        })?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(IlmError::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(IlmError::Checkpoint(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..read_u32(&mut r)? {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            meta.insert(k, v);
        }
        let mut arrays = Vec::new();
        let mut names = std::collections::BTreeSet::new();
        for _ in 0..read_u32(&mut r)? {
            let name = read_str(&mut r)?;
            if !names.insert(name.clone()) {
                return Err(IlmError::Checkpoint(format!("duplicate array name `{name}`")));
            }
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push((name, shape, data));
        }
        Ok(Checkpoint { meta, arrays })
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(IlmError::Checkpoint("unreasonable string length".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| IlmError::Checkpoint(format!("bad UTF-8: {e}")))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex(&h.finalize()))
}

pub fn sha256_str(s: &str) -> String {
    let mut h = Sha256::new();
    h.update(s.as_bytes());
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Tensor view of a checkpoint array.
pub fn array_to_tensor<S: Scalar>(shape: &[usize], data: &[f32]) -> Result<Tensor<S>> {
    Tensor::new(shape.to_vec(), data.iter().map(|&v| S::from_f32c(v)).collect())
}

/// Append-only writer for line-delimited (step, name, value) loss traces.
pub struct TraceWriter {
    w: BufWriter<std::fs::File>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(TraceWriter { w: BufWriter::new(std::fs::File::create(path)?) })
    }

    pub fn record(&mut self, step: usize, name: &str, value: f64) -> Result<()> {
        writeln!(self.w, "step={step}\tloss={name}\tvalue={value:.6}")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// Write a whole text artifact at once (deterministic content, no
/// timestamps).
pub fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, content)?;
    Ok(())
}

pub fn read_lines(path: &Path, stage: &str) -> Result<Vec<String>> {
    let content = std::fs::read_to_string(path)
        .map_err(|_| IlmError::Dependency { stage: stage.to_string() })?;
    Ok(content.lines().map(|l| l.to_string()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.ilmc");
        let mut ck = Checkpoint::default();
        ck.meta.insert("config_hash".into(), "abc".into());
        ck.meta.insert("step".into(), "42".into());
        ck.push_array("w", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.75]);
        ck.push_array("b", vec![3], vec![0.5, 0.25, -0.125]);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.arrays.len(), 2);
        for ((n1, s1, d1), (n2, s2, d2)) in ck.arrays.iter().zip(&back.arrays) {
            assert_eq!(n1, n2);
            assert_eq!(s1, s2);
            assert_eq!(
                d1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                d2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.ilmc");
        let mut ck = Checkpoint::default();
        ck.push_array("w", vec![1], vec![1.0]);
        ck.push_array("w", vec![1], vec![2.0]);
        assert!(ck.save(&path).is_err());
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ilmc");
        let ck = Checkpoint::default();
        ck.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // clobber the version field
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(IlmError::Checkpoint(_))));
    }

    #[test]
    fn identical_saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ilmc"), dir.path().join("b.ilmc"));
        let mut ck = Checkpoint::default();
        ck.meta.insert("k".into(), "v".into());
        ck.push_array("x", vec![4], vec![0.1, 0.2, 0.3, 0.4]);
        ck.save(&p1).unwrap();
        ck.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(sha256_file(&p1).unwrap(), sha256_file(&p2).unwrap());
    }
}
