use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use super::Sgd;
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SEGK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// One named array: element type, dimensions and raw little-endian bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub dtype: DType,
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

impl Entry {
    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

/// Parameters that a fine-tune load could not take from the checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FinetuneReport {
    pub loaded: Vec<String>,
    /// `(parameter path, reason)`.
    pub skipped: Vec<(String, String)>,
}

/// Ordered collection of named entries with a checksummed binary encoding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: IndexMap<String, Entry>,
}

fn le_bytes<T: Element>(data: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * T::DTYPE.size());
    for &v in data {
        v.write_le(&mut out);
    }
    out
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_tensor<T: Element>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.insert(
            name.into(),
            Entry {
                dtype: T::DTYPE,
                dims: t.shape().iter().map(|&d| d as u32).collect(),
                data: le_bytes(t.data()),
            },
        );
    }

    pub fn insert_u64(&mut self, name: impl Into<String>, v: u64) {
        self.entries.insert(
            name.into(),
            Entry {
                dtype: DType::U64,
                dims: vec![1],
                data: v.to_le_bytes().to_vec(),
            },
        );
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, v: f64) {
        self.entries.insert(
            name.into(),
            Entry {
                dtype: DType::F64,
                dims: vec![1],
                data: v.to_le_bytes().to_vec(),
            },
        );
    }

    pub fn insert_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.entries.insert(
            name.into(),
            Entry {
                dtype: DType::U8,
                dims: vec![bytes.len() as u32],
                data: bytes.to_vec(),
            },
        );
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no entry '{name}'")))
    }

    /// Floating-point entry converted to `T`.
    pub fn tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entry(name)?;
        let values: Vec<T> = match e.dtype {
            DType::F32 => e.data.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => e.data.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
            other => return Err(Error::Format(format!("entry '{name}' has non-float dtype {other:?}"))),
        };
        Tensor::new(e.dims.iter().map(|&d| d as usize).collect::<Vec<_>>(), values)
            .map_err(|err| Error::Format(format!("entry '{name}': {err}")))
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        let e = self.entry(name)?;
        match (e.dtype, e.data.as_slice().try_into()) {
            (DType::U64, Ok(b)) => Ok(u64::from_le_bytes(b)),
            _ => Err(Error::Format(format!("entry '{name}' is not a u64 scalar"))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        let e = self.entry(name)?;
        match (e.dtype, e.data.as_slice().try_into()) {
            (DType::F64, Ok(b)) => Ok(f64::from_le_bytes(b)),
            _ => Err(Error::Format(format!("entry '{name}' is not an f64 scalar"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        let e = self.entry(name)?;
        match e.dtype {
            DType::U8 => Ok(&e.data),
            _ => Err(Error::Format(format!("entry '{name}' is not a byte array"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.dtype as u8);
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
        for e in self.entries.values() {
            out.extend_from_slice(&e.data);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 14 {
            return Err(fmt("file too short to be a checkpoint"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic; not a segkit checkpoint"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(fmt("checksum mismatch; file is truncated or corrupt"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| fmt("entry name is not UTF-8"))?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            manifest.push((name, dtype, dims));
        }
        let mut entries = IndexMap::new();
        for (name, dtype, dims) in manifest {
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let data = r.take(n * dtype.size())?.to_vec();
            if entries.insert(name.clone(), Entry { dtype, dims, data }).is_some() {
                return Err(Error::Format(format!("duplicate entry '{name}'")));
            }
        }
        if r.pos != body.len() {
            return Err(fmt("trailing bytes after the last entry"));
        }
        Ok(Self { entries })
    }

    /// Write to a sibling temporary file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp~");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
    }

    /// Model parameters (including buffers) under `model/`.
    pub fn put_params<T: Element>(&mut self, params: &ParamStore<T>) {
        for (name, e) in params.iter() {
            self.insert_tensor(format!("model/{name}"), &e.tensor);
        }
    }

    /// Momentum buffers under `optim/`.
    pub fn put_optimizer<T: Element>(&mut self, params: &ParamStore<T>, opt: &Sgd<T>) {
        for ((name, e), v) in params.iter().zip(&opt.velocity) {
            if e.trainable {
                let t = Tensor::new(e.tensor.shape().to_vec(), v.clone()).expect("velocity mirrors parameter");
                self.insert_tensor(format!("optim/{name}"), &t);
            }
        }
    }

    /// Exact restore: every parameter and buffer must be present with its shape, and the
    /// checkpoint must hold nothing else under `model/`.
    pub fn restore_params<T: Element>(&self, params: &mut ParamStore<T>) -> Result<()> {
        for (name, e) in params.iter() {
            let key = format!("model/{name}");
            let Some(entry) = self.entries.get(&key) else {
                return Err(Error::Config(format!("topology mismatch at '{name}': missing from checkpoint")));
            };
            let dims: Vec<usize> = entry.dims.iter().map(|&d| d as usize).collect();
            if dims != e.tensor.shape() {
                return Err(Error::Config(format!(
                    "topology mismatch at '{name}': checkpoint {dims:?}, model {:?}",
                    e.tensor.shape()
                )));
            }
        }
        if let Some(extra) = self
            .entries
            .keys()
            .filter_map(|k| k.strip_prefix("model/"))
            .find(|k| params.get(k).is_none())
        {
            return Err(Error::Config(format!("topology mismatch at '{extra}': not a parameter of this model")));
        }
        for (name, e) in params.iter_mut() {
            let t: Tensor<T> = self.tensor(&format!("model/{name}"))?;
            e.tensor.data_mut().copy_from_slice(t.data());
            e.tensor.zero_grad();
        }
        Ok(())
    }

    pub fn restore_optimizer<T: Element>(&self, params: &ParamStore<T>, opt: &mut Sgd<T>) -> Result<()> {
        for ((name, e), v) in params.iter().zip(opt.velocity.iter_mut()) {
            if !e.trainable {
                continue;
            }
            let t: Tensor<T> = self
                .tensor(&format!("optim/{name}"))
                .map_err(|err| Error::Config(format!("topology mismatch at '{name}': {err}")))?;
            if t.shape() != e.tensor.shape() {
                return Err(Error::Config(format!("topology mismatch at '{name}': optimizer state shape differs")));
            }
            v.copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Load every parameter whose name and shape match; leave the rest initialized.
    pub fn load_matching<T: Element>(&self, params: &mut ParamStore<T>) -> Result<FinetuneReport> {
        let mut report = FinetuneReport::default();
        for (name, e) in params.iter_mut() {
            let key = format!("model/{name}");
            match self.entries.get(&key) {
                None => report.skipped.push((name.to_string(), "not in checkpoint".into())),
                Some(entry) if entry.dims.iter().map(|&d| d as usize).ne(e.tensor.shape().iter().copied()) => {
                    report.skipped.push((
                        name.to_string(),
                        format!("shape {:?} vs model {:?}", entry.dims, e.tensor.shape()),
                    ));
                }
                Some(_) => {
                    let t: Tensor<T> = self.tensor(&key)?;
                    e.tensor.data_mut().copy_from_slice(t.data());
                    report.loaded.push(name.to_string());
                }
            }
        }
        Ok(report)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Format("unexpected end of checkpoint data".into()));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
