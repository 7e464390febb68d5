//! Binary checkpoint format.
//!
//! ```text
//! "DLRA"                       magic, 4 bytes
//! version        u32 LE        currently 1
//! metadata_len   u32 LE        followed by UTF-8 JSON metadata
//! tensor_count   u32 LE
//! per tensor:
//!   name_len u32 LE, name (UTF-8)
//!   dtype    u8              1 = f64
//!   rows u32 LE, cols u32 LE
//!   rows·cols little-endian values
//! ```
//!
//! Full checkpoints carry every parameter. Adapter checkpoints carry every
//! non-base parameter (adapters, λ, group-norm gains) plus the digest of
//! the base they were trained on. Tensors whose name starts with `extra.`
//! belong to the caller (optimizer state and the like).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_base, inject_adapters, ModelConfig, ParamKind, ToyModel};
use crate::error::{Error, Result};
use crate::linalg::Tensor2D;

pub const MAGIC: &[u8; 4] = b"DLRA";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const EXTRA_PREFIX: &str = "extra.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Full,
    AdaptersOnly,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Metadata {
    kind: CheckpointKind,
    config: ModelConfig,
    injected: bool,
    base_digest: String,
    #[serde(default)]
    extra: Option<serde_json::Value>,
}

/// Caller-owned state stored alongside the model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointExtras {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor2D)>,
}

/// A decoded file, before it is turned back into a model.
#[derive(Clone, Debug)]
pub struct RawCheckpoint {
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub injected: bool,
    pub base_digest: String,
    pub tensors: Vec<(String, Tensor2D)>,
    pub extras: Option<CheckpointExtras>,
}

pub fn save_checkpoint(model: &ToyModel, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, CheckpointKind::Full, None, path)
}

pub fn save_adapter_checkpoint(model: &ToyModel, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, CheckpointKind::AdaptersOnly, None, path)
}

pub fn write_checkpoint(
    model: &ToyModel,
    kind: CheckpointKind,
    extras: Option<&CheckpointExtras>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let meta = Metadata {
        kind,
        config: model.config.clone(),
        injected: model.is_injected(),
        base_digest: model.base_digest(),
        extra: extras.map(|e| e.metadata.clone()),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;

    let mut tensors: Vec<(String, (usize, usize), &[f64])> = model
        .params()
        .into_iter()
        .filter(|(info, _)| kind == CheckpointKind::Full || info.kind != ParamKind::Base)
        .map(|(info, data)| (info.name, info.shape, data))
        .collect();
    if let Some(extras) = extras {
        for (name, t) in &extras.tensors {
            tensors.push((format!("{EXTRA_PREFIX}{name}"), t.shape(), t.data()));
        }
    }

    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&len_u32(meta_bytes.len())?.to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    w.write_all(&len_u32(tensors.len())?.to_le_bytes())?;
    for (name, (rows, cols), data) in tensors {
        w.write_all(&len_u32(name.len())?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F64])?;
        w.write_all(&len_u32(rows)?.to_le_bytes())?;
        w.write_all(&len_u32(cols)?.to_le_bytes())?;
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Input(format!("{n} does not fit the checkpoint's u32 fields")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated file while reading {what}")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Decodes a checkpoint file without building a model.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<RawCheckpoint> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, message: "bad magic bytes".into() });
    }
    let version_at = r.pos;
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: version_at as u64,
            message: format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        });
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_at = r.pos;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| {
        Error::Format { offset: meta_at as u64, message: format!("bad metadata: {e}") }
    })?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    let mut extra_tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| r.err("tensor name is not UTF-8"))?
            .to_string();
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(r.err(format!("unsupported dtype tag {dtype} for `{name}`")));
        }
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| r.err("tensor size overflows"))?;
        let raw = r.take(n, &format!("data of `{name}`"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor2D::from_vec(rows, cols, data)
            .map_err(|e| r.err(format!("tensor `{name}`: {e}")))?;
        match name.strip_prefix(EXTRA_PREFIX) {
            Some(rest) => extra_tensors.push((rest.to_string(), t)),
            None => tensors.push((name, t)),
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after the last tensor"));
    }
    let extras = match meta.extra {
        Some(metadata) => Some(CheckpointExtras { metadata, tensors: extra_tensors }),
        None if extra_tensors.is_empty() => None,
        None => Some(CheckpointExtras { metadata: serde_json::Value::Null, tensors: extra_tensors }),
    };
    Ok(RawCheckpoint {
        kind: meta.kind,
        config: meta.config,
        injected: meta.injected,
        base_digest: meta.base_digest,
        tensors,
        extras,
    })
}

fn skeleton(config: &ModelConfig, injected: bool) -> Result<ToyModel> {
    let base = build_base(config)?;
    if injected {
        inject_adapters(base, config)
    } else {
        Ok(base)
    }
}

/// Overwrites the parameters selected by `keep` from `tensors`; every
/// selected parameter must be present and nothing else may be.
fn fill(
    model: &mut ToyModel,
    tensors: &[(String, Tensor2D)],
    keep: impl Fn(ParamKind) -> bool,
) -> Result<()> {
    let wanted: Vec<_> = model.param_infos().into_iter().filter(|i| keep(i.kind)).collect();
    for (name, _) in tensors {
        if !wanted.iter().any(|i| &i.name == name) {
            return Err(Error::Format { offset: 0, message: format!("unexpected tensor `{name}`") });
        }
    }
    for info in wanted {
        let (_, t) = tensors.iter().find(|(n, _)| *n == info.name).ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("missing tensor `{}`", info.name),
        })?;
        model.set_param(&info.name, t)?;
    }
    Ok(())
}

/// Loads a full checkpoint.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyModel> {
    Ok(load_checkpoint_with_extras(path)?.0)
}

pub fn load_checkpoint_with_extras(
    path: impl AsRef<Path>,
) -> Result<(ToyModel, Option<CheckpointExtras>)> {
    let raw = read_checkpoint(path)?;
    if raw.kind != CheckpointKind::Full {
        return Err(Error::Input(
            "adapter-only checkpoint needs a base model; use apply_adapter_checkpoint".into(),
        ));
    }
    let mut model = skeleton(&raw.config, raw.injected)?;
    fill(&mut model, &raw.tensors, |_| true)?;
    Ok((model, raw.extras))
}

/// Injects the adapters stored in `path` into `base`. The base must be the
/// one the adapters were trained on (same base digest).
pub fn apply_adapter_checkpoint(
    base: ToyModel,
    path: impl AsRef<Path>,
) -> Result<(ToyModel, Option<CheckpointExtras>)> {
    let raw = read_checkpoint(path)?;
    if base.base_digest() != raw.base_digest {
        return Err(Error::Config(
            "adapter checkpoint was trained on a different base model".into(),
        ));
    }
    let mut model = if raw.injected { inject_adapters(base, &raw.config)? } else { base };
    let tensors: Vec<_> = match raw.kind {
        CheckpointKind::AdaptersOnly => raw.tensors,
        CheckpointKind::Full => {
            let non_base: Vec<String> = model
                .param_infos()
                .into_iter()
                .filter(|i| i.kind != ParamKind::Base)
                .map(|i| i.name)
                .collect();
            raw.tensors.into_iter().filter(|(n, _)| non_base.contains(n)).collect()
        }
    };
    fill(&mut model, &tensors, |k| k != ParamKind::Base)?;
    Ok((model, raw.extras))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterPlacement;
    use crate::attention::LambdaMode;
    use crate::model::{LambdaConfig, Variant};

    fn trained_like(cfg: &ModelConfig) -> ToyModel {
        let mut model = ToyModel::new(cfg).unwrap();
        for (info, data) in model.params_mut() {
            if info.kind != ParamKind::Base {
                for (k, v) in data.iter_mut().enumerate() {
                    *v += 0.01 * ((k * 31 + info.name.len()) % 17) as f64 - 0.08;
                }
            }
        }
        model
    }

    fn cfg() -> ModelConfig {
        ModelConfig {
            placement: Some(AdapterPlacement::both_terms(4)),
            lambda: LambdaConfig { mode: LambdaMode::Learnable, init: 0.1 },
            group_norm: true,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn full_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = trained_like(&cfg());
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        let toks = [1, 5, 9, 2, 40];
        assert_eq!(back.logits(&toks).unwrap(), model.logits(&toks).unwrap());
    }

    #[test]
    fn adapter_checkpoint_matches_full_load() {
        let dir = tempfile::tempdir().unwrap();
        let model = trained_like(&cfg());
        save_checkpoint(&model, dir.path().join("full.ckpt")).unwrap();
        save_adapter_checkpoint(&model, dir.path().join("ad.ckpt")).unwrap();
        let base = build_base(&cfg()).unwrap();
        let (applied, _) = apply_adapter_checkpoint(base, dir.path().join("ad.ckpt")).unwrap();
        let full = load_checkpoint(dir.path().join("full.ckpt")).unwrap();
        assert_eq!(applied, full);

        let other_base = build_base(&ModelConfig { seed: 4, ..cfg() }).unwrap();
        assert!(apply_adapter_checkpoint(other_base, dir.path().join("ad.ckpt")).is_err());
        assert!(load_checkpoint(dir.path().join("ad.ckpt")).is_err());
    }

    #[test]
    fn corrupt_files_report_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ToyModel::new(&ModelConfig { variant: Variant::Baseline, group_norm: false, ..cfg() }).unwrap(), &path)
            .unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::Format { offset: 0, .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(decode(&bad_version), Err(Error::Format { offset: 4, .. })));

        let truncated = &good[..good.len() - 5];
        match decode(truncated) {
            Err(Error::Format { offset, message }) => {
                assert!(offset > 0 && (offset as usize) < good.len());
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn extras_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = trained_like(&cfg());
        let extras = CheckpointExtras {
            metadata: serde_json::json!({"step": 12, "note": "x"}),
            tensors: vec![("opt.m.a".into(), Tensor2D::filled(2, 3, 0.5))],
        };
        write_checkpoint(&model, CheckpointKind::AdaptersOnly, Some(&extras), &path).unwrap();
        let raw = read_checkpoint(&path).unwrap();
        assert_eq!(raw.extras.unwrap(), extras);
    }
}
