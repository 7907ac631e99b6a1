//! Binary tensor container for parameters and optimizer state.
//!
//! Layout, all little-endian:
//!   magic "SGDCKPT\0" | version u32 | dtype u8 | count u32
//!   then per entry, sorted by name:
//!   name_len u32 | name utf-8 | has_bound u8 | bound f64?
//!   | ndim u32 | dims u32 each | values f64 each
//! Values are stored as f64 regardless of the training dtype (f32 widens
//! exactly), so save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sgdiff_core::element::Element;
use sgdiff_core::optim::{Adam, AdamConfig};
use sgdiff_core::ParamStore;

use crate::error::{AppError, Result};

pub const MAGIC: [u8; 8] = *b"SGDCKPT\0";
pub const VERSION: u32 = 1;

fn dtype_code<E: Element>() -> u8 {
    match E::DTYPE {
        sgdiff_core::Dtype::F32 => 1,
        sgdiff_core::Dtype::F64 => 2,
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(dtype: u8, count: u32) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(dtype);
        buf.extend_from_slice(&count.to_le_bytes());
        Writer { buf }
    }

    fn entry(&mut self, name: &str, bound: Option<f64>, dims: &[usize], values: &[f64]) {
        self.buf
            .extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        match bound {
            Some(b) => {
                self.buf.push(1);
                self.buf.extend_from_slice(&b.to_le_bytes());
            }
            None => self.buf.push(0),
        }
        self.buf
            .extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            self.buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(AppError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// One named tensor with optional lower bound.
pub struct Entry {
    pub name: String,
    pub bound: Option<f64>,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn save_entries<E: Element>(path: &Path, entries: &[Entry]) -> Result<()> {
    let mut w = Writer::new(dtype_code::<E>(), entries.len() as u32);
    for e in entries {
        w.entry(&e.name, e.bound, &e.dims, &e.values);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, &w.buf)?;
    Ok(())
}

pub fn load_entries<E: Element>(path: &Path) -> Result<Vec<Entry>> {
    let buf = fs::read(path)
        .map_err(|e| AppError::Checkpoint(format!("cannot read {}: {}", path.display(), e)))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(AppError::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(AppError::Checkpoint(format!(
            "checkpoint version {} does not match supported version {}",
            version, VERSION
        )));
    }
    let dtype = r.u8()?;
    if dtype != dtype_code::<E>() {
        return Err(AppError::Checkpoint(format!(
            "checkpoint dtype code {} does not match the configured element type",
            dtype
        )));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| AppError::Checkpoint("entry name is not UTF-8".into()))?;
        let bound = match r.u8()? {
            0 => None,
            1 => Some(r.f64()?),
            _ => return Err(AppError::Checkpoint("bad bound flag".into())),
        };
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(r.f64()?);
        }
        entries.push(Entry {
            name,
            bound,
            dims,
            values,
        });
    }
    if r.pos != buf.len() {
        return Err(AppError::Checkpoint("trailing bytes after entries".into()));
    }
    Ok(entries)
}

pub fn save_store<E: Element>(path: &Path, store: &ParamStore<E>) -> Result<()> {
    let entries: Vec<Entry> = store
        .iter()
        .map(|(name, p)| Entry {
            name: name.clone(),
            bound: p.lower_bound,
            dims: p.shape.clone(),
            values: p.data.iter().map(|v| v.to_f64()).collect(),
        })
        .collect();
    save_entries::<E>(path, &entries)
}

pub fn load_store<E: Element>(path: &Path) -> Result<ParamStore<E>> {
    let mut store = ParamStore::new();
    for e in load_entries::<E>(path)? {
        let data: Vec<E> = e.values.iter().map(|&v| E::from_f64(v)).collect();
        store
            .insert(&e.name, e.dims, data)
            .map_err(|err| AppError::Checkpoint(format!("{}: {}", e.name, err)))?;
        if let Some(b) = e.bound {
            store
                .set_lower_bound(&e.name, b)
                .map_err(|err| AppError::Checkpoint(format!("{}: {}", e.name, err)))?;
        }
    }
    Ok(store)
}

/// Optimizer state rides in the same container: per-parameter first and
/// second moments plus the step counter.
pub fn save_adam<E: Element>(path: &Path, adam: &Adam<E>) -> Result<()> {
    let (m, v) = adam.moments();
    let mut entries = Vec::with_capacity(2 * m.len() + 1);
    entries.push(Entry {
        name: "step".into(),
        bound: None,
        dims: vec![1],
        values: vec![adam.step_count() as f64],
    });
    for (name, vals) in m {
        entries.push(Entry {
            name: format!("m.{}", name),
            bound: None,
            dims: vec![vals.len()],
            values: vals.iter().map(|v| v.to_f64()).collect(),
        });
    }
    for (name, vals) in v {
        entries.push(Entry {
            name: format!("v.{}", name),
            bound: None,
            dims: vec![vals.len()],
            values: vals.iter().map(|v| v.to_f64()).collect(),
        });
    }
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    save_entries::<E>(path, &entries)
}

pub fn load_adam<E: Element>(path: &Path, cfg: AdamConfig) -> Result<Adam<E>> {
    let mut step = None;
    let mut m: BTreeMap<String, Vec<E>> = BTreeMap::new();
    let mut v: BTreeMap<String, Vec<E>> = BTreeMap::new();
    for e in load_entries::<E>(path)? {
        let vals: Vec<E> = e.values.iter().map(|&x| E::from_f64(x)).collect();
        if e.name == "step" {
            step = Some(e.values[0] as usize);
        } else if let Some(p) = e.name.strip_prefix("m.") {
            m.insert(p.to_string(), vals);
        } else if let Some(p) = e.name.strip_prefix("v.") {
            v.insert(p.to_string(), vals);
        } else {
            return Err(AppError::Checkpoint(format!(
                "unexpected optimizer entry {}",
                e.name
            )));
        }
    }
    let step =
        step.ok_or_else(|| AppError::Checkpoint("optimizer state lacks a step count".into()))?;
    Ok(Adam::restore(cfg, step, m, v))
}
