//! Checkpoints: a text manifest (format line, model kind, config, metadata and
//! one line per tensor) next to a little-endian f64 blob.
//!
//! ```text
//! depthpost-checkpoint 1
//! kind dcn
//! blob model.ckpt.bin
//! config decoder_k 1.0
//! meta step 500
//! tensor depth.stage0.conv1.weight f64 4 1 3 3 offset 0 count 36
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{CpnConfig, CpnModel, DcnConfig, DcnModel, ParamStore};
use crate::error::{Error, Result};
use crate::fsutil::{read, write_atomic};
use crate::tensor::{Shape, Tensor};

const MAGIC: &str = "depthpost-checkpoint 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Cpn,
    Dcn,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Cpn => "cpn",
            ModelKind::Dcn => "dcn",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: BTreeMap<String, String>,
    /// Free-form run metadata such as the training step.
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn step(&self) -> usize {
        self.meta
            .get("step")
            .and_then(|s| s.parse().ok())
            .unwrap_or(0)
    }
}

fn blob_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".bin");
    path.with_file_name(name)
}

fn check_token(path: &Path, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::format(
            path,
            format!("value {s:?} must be a single non-empty token"),
        ));
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let blob = blob_path(path);
    let blob_name = blob
        .file_name()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();
    let mut manifest = format!("{MAGIC}\nkind {}\nblob {blob_name}\n", ckpt.kind.as_str());
    for (k, v) in &ckpt.config {
        check_token(path, k)?;
        check_token(path, v)?;
        manifest.push_str(&format!("config {k} {v}\n"));
    }
    for (k, v) in &ckpt.meta {
        check_token(path, k)?;
        check_token(path, v)?;
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    let mut bytes = Vec::with_capacity(ckpt.params.scalar_count() * 8);
    for (name, t) in ckpt.params.names().iter().zip(ckpt.params.tensors()) {
        check_token(path, name)?;
        let s = t.shape();
        manifest.push_str(&format!(
            "tensor {name} f64 {} {} {} {} offset {} count {}\n",
            s.n,
            s.c,
            s.h,
            s.w,
            bytes.len(),
            t.len()
        ));
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(&blob, &bytes)?;
    write_atomic(path, manifest.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text =
        String::from_utf8(read(path)?).map_err(|_| Error::format(path, "manifest is not UTF-8"))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        _ => return Err(Error::format(path, "missing checkpoint header")),
    }
    let mut kind = None;
    let mut blob_name = None;
    let mut config = BTreeMap::new();
    let mut meta = BTreeMap::new();
    let mut entries = Vec::new();
    for (i, line) in lines {
        let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", i + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            [] => {}
            ["kind", "cpn"] => kind = Some(ModelKind::Cpn),
            ["kind", "dcn"] => kind = Some(ModelKind::Dcn),
            ["blob", name] => blob_name = Some(name.to_string()),
            ["config", k, v] => {
                config.insert(k.to_string(), v.to_string());
            }
            ["meta", k, v] => {
                meta.insert(k.to_string(), v.to_string());
            }
            ["tensor", name, "f64", n, c, h, w, "offset", off, "count", count] => {
                let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
                let shape = Shape::new(num(n)?, num(c)?, num(h)?, num(w)?);
                let (off, count) = (num(off)?, num(count)?);
                if shape.numel() != count {
                    return Err(bad("tensor count does not match its shape"));
                }
                entries.push((name.to_string(), shape, off, count));
            }
            _ => return Err(bad("unrecognized line")),
        }
    }
    let kind = kind.ok_or_else(|| Error::format(path, "missing kind line"))?;
    let blob_name = blob_name.ok_or_else(|| Error::format(path, "missing blob line"))?;
    let blob_file = path.with_file_name(&blob_name);
    let bytes = read(&blob_file)?;
    let mut params = ParamStore::new();
    let mut expected = 0usize;
    for (name, shape, off, count) in entries {
        if off != expected || off + count * 8 > bytes.len() {
            return Err(Error::format(
                &blob_file,
                format!("tensor {name} lies outside the blob"),
            ));
        }
        let data = bytes[off..off + count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.push(name, Tensor::from_vec(shape, data)?)?;
        expected = off + count * 8;
    }
    if expected != bytes.len() {
        return Err(Error::format(&blob_file, "blob has trailing bytes"));
    }
    Ok(Checkpoint {
        kind,
        config,
        meta,
        params,
    })
}

fn check_names(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    if expected.names() != got.names() {
        return Err(Error::invalid(
            "checkpoint tensors do not match the layers of its configuration",
        ));
    }
    Ok(())
}

impl CpnModel {
    pub fn to_checkpoint(&self, meta: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Cpn,
            config: self.config().to_kv(),
            meta,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != ModelKind::Cpn {
            return Err(Error::invalid(format!(
                "expected a cpn checkpoint, found {}",
                ckpt.kind.as_str()
            )));
        }
        let config = CpnConfig::from_kv(&ckpt.config)?;
        let mut model = super::build_cpn(config, 0)?;
        check_names(&model.params, &ckpt.params)?;
        model.params.load(ckpt.params.tensors().to_vec())?;
        Ok(model)
    }
}

impl DcnModel {
    pub fn to_checkpoint(&self, meta: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Dcn,
            config: self.config().to_kv(),
            meta,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != ModelKind::Dcn {
            return Err(Error::invalid(format!(
                "expected a dcn checkpoint, found {}",
                ckpt.kind.as_str()
            )));
        }
        let config = DcnConfig::from_kv(&ckpt.config)?;
        let mut model = super::build_dcn(config, 0)?;
        check_names(&model.params, &ckpt.params)?;
        model.params.load(ckpt.params.tensors().to_vec())?;
        Ok(model)
    }
}
