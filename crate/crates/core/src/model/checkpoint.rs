//! Named-tensor container and checkpoint files.
//!
//! Container layout: a text header, then raw little-endian f32 payloads.
//!
//! ```text
//! htensor v1
//! count <n>
//! <name> f32 <d0>[,<d1>...] <byte offset into payload>
//! ...
//! end
//! <payload bytes>
//! ```
//!
//! Checkpoints pair a container file with a `<file>.meta.json` sidecar
//! holding step, tokens seen, and the model config. Round-trips are
//! bit-exact: floats are moved as raw bit patterns.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &str = "htensor v1";

/// Sidecar metadata for a checkpoint container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub tokens_seen: u64,
    pub config: ModelConfig,
}

/// One named tensor heading to or from disk.
pub(crate) struct TensorEntry<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

pub(crate) fn write_tensor_file(path: &Path, entries: &[TensorEntry<'_>]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("count {}\n", entries.len()));
    let mut offset = 0usize;
    for e in entries {
        let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("{} f32 {} {}\n", e.name, dims.join(","), offset));
        offset += e.data.len() * 4;
        let expect: usize = e.shape.iter().product();
        if expect != e.data.len() {
            return Err(Error::Invariant(format!(
                "tensor {} shape {:?} does not match {} values",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
    }
    header.push_str("end\n");
    w.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(1 << 16);
    for e in entries {
        buf.clear();
        buf.reserve(e.data.len() * 4);
        for v in e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e2| Error::io(path, e2))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) struct OwnedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub(crate) fn read_tensor_file(path: &Path) -> Result<Vec<OwnedTensor>> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;

    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let mut pos = 0usize;
    let next_line = |raw: &[u8], pos: &mut usize| -> Result<String> {
        let start = *pos;
        while *pos < raw.len() && raw[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= raw.len() {
            return Err(Error::Format(format!(
                "{}: truncated header",
                path.display()
            )));
        }
        let line = std::str::from_utf8(&raw[start..*pos])
            .map_err(|_| Error::Format(format!("{}: non-utf8 header", path.display())))?
            .to_string();
        *pos += 1;
        Ok(line)
    };

    if next_line(&raw, &mut pos)? != MAGIC {
        return Err(bad("missing htensor magic"));
    }
    let count_line = next_line(&raw, &mut pos)?;
    let count: usize = count_line
        .strip_prefix("count ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad count line"))?;

    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(&raw, &mut pos)?;
        let mut parts = line.split(' ');
        let name = parts.next().ok_or_else(|| bad("missing tensor name"))?;
        let dtype = parts.next().ok_or_else(|| bad("missing dtype"))?;
        if dtype != "f32" {
            return Err(bad(&format!("unsupported dtype {dtype}")));
        }
        let shape: Vec<usize> = parts
            .next()
            .ok_or_else(|| bad("missing shape"))?
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad shape"))?;
        let offset: usize = parts
            .next()
            .ok_or_else(|| bad("missing offset"))?
            .parse()
            .map_err(|_| bad("bad offset"))?;
        specs.push((name.to_string(), shape, offset));
    }
    if next_line(&raw, &mut pos)? != "end" {
        return Err(bad("missing end marker"));
    }

    let payload = &raw[pos..];
    let mut out = Vec::with_capacity(count);
    for (name, shape, offset) in specs {
        let len: usize = shape.iter().product();
        let end = offset + len * 4;
        if end > payload.len() {
            return Err(bad(&format!("tensor {name} payload out of bounds")));
        }
        let mut data = Vec::with_capacity(len);
        for chunk in payload[offset..end].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        out.push(OwnedTensor { name, shape, data });
    }
    Ok(out)
}

/// Write `<path>` (container) and `<path>.meta.json` (sidecar).
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let params = &ckpt.model.params;
    let entries: Vec<TensorEntry<'_>> = params
        .layout()
        .iter()
        .map(|spec| TensorEntry {
            name: spec.name.clone(),
            shape: spec.shape.clone(),
            data: &params.data()[spec.offset..spec.offset + spec.len()],
        })
        .collect();
    write_tensor_file(path, &entries)?;
    let meta = CheckpointMeta {
        step: ckpt.step,
        tokens_seen: ckpt.tokens_seen,
        config: ckpt.model.config.clone(),
    };
    let meta_path = meta_path(path);
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let meta_path = meta_path(path);
    let meta: CheckpointMeta = serde_json::from_str(
        &fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
    )?;
    meta.config.validate()?;
    let tensors = read_tensor_file(path)?;
    let mut params = ParamStore::zeros(&meta.config);
    let expected = params.layout().to_vec();
    if tensors.len() != expected.len() {
        return Err(Error::Format(format!(
            "{}: {} tensors, config expects {}",
            path.display(),
            tensors.len(),
            expected.len()
        )));
    }
    for (got, spec) in tensors.iter().zip(expected.iter()) {
        if got.name != spec.name || got.shape != spec.shape {
            return Err(Error::Format(format!(
                "{}: tensor {} {:?} does not match layout {} {:?}",
                path.display(),
                got.name,
                got.shape,
                spec.name,
                spec.shape
            )));
        }
        params.data_mut()[spec.offset..spec.offset + spec.len()].copy_from_slice(&got.data);
    }
    Ok(Checkpoint {
        step: meta.step,
        tokens_seen: meta.tokens_seen,
        model: Model {
            config: meta.config,
            params,
        },
    })
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let model = Model::init(ModelConfig::tiny(42), 42).unwrap();
        let ckpt = Checkpoint {
            step: 17,
            tokens_seen: 34816,
            model,
        };
        let path = dir.path().join("step_17.ckpt");
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.tokens_seen, 34816);
        assert_eq!(back.model.config, ckpt.model.config);
        let a: Vec<u32> = ckpt.model.params.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.model.params.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);

        // re-serialization is byte-identical
        let path2 = dir.path().join("again.ckpt");
        write_checkpoint(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_header_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a tensor file\n").unwrap();
        assert!(read_tensor_file(&path).is_err());
    }
}
