//! Checkpoint files: a text manifest followed by raw little-endian f64s.
//!
//! ```text
//! posealign-ckpt v1
//! meta <key> <value>
//! tensor <name> <d0>[x<d1>...] <byte-offset>
//! ...
//! data
//! <raw little-endian f64 bytes>
//! ```
//!
//! Round-trips are bit-exact: values are written with `f64::to_le_bytes` and
//! read back with `from_le_bytes`.

use super::{ParameterSet, Tensor, TensorError};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &str = "posealign-ckpt v1";

/// Parameter set plus free-form metadata (model kind, architecture sizes).
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub meta: BTreeMap<String, String>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TensorError> {
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    for (k, v) in &ckpt.meta {
        assert!(
            !k.contains(char::is_whitespace) && !v.contains('\n'),
            "meta entries must be whitespace-free keys and single-line values"
        );
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    let mut offset = 0usize;
    for (name, tensor) in ckpt.params.iter() {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("tensor {name} {} {offset}\n", dims.join("x")));
        offset += tensor.numel() * 8;
    }
    manifest.push_str("data\n");

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(manifest.as_bytes())?;
    for (_, tensor) in ckpt.params.iter() {
        for v in tensor.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TensorError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;

    let data_marker = b"data\n";
    let data_start = find_line(&bytes, data_marker).ok_or_else(|| {
        TensorError::CheckpointFormat("missing data section marker".to_string())
    })? + data_marker.len();
    let manifest = std::str::from_utf8(&bytes[..data_start])
        .map_err(|_| TensorError::CheckpointFormat("manifest is not utf-8".to_string()))?;
    let payload = &bytes[data_start..];

    let mut lines = manifest.lines();
    match lines.next() {
        Some(l) if l == MAGIC => {}
        other => {
            return Err(TensorError::CheckpointFormat(format!(
                "bad magic line: {other:?}"
            )))
        }
    }

    let mut ckpt = Checkpoint::default();
    for line in lines {
        if line == "data" {
            break;
        }
        let mut parts = line.splitn(2, ' ');
        match parts.next() {
            Some("meta") => {
                let rest = parts.next().unwrap_or("");
                let (k, v) = rest.split_once(' ').ok_or_else(|| {
                    TensorError::CheckpointFormat(format!("bad meta line: {line:?}"))
                })?;
                ckpt.meta.insert(k.to_string(), v.to_string());
            }
            Some("tensor") => {
                let rest = parts.next().unwrap_or("");
                let fields: Vec<&str> = rest.split(' ').collect();
                if fields.len() != 3 {
                    return Err(TensorError::CheckpointFormat(format!(
                        "bad tensor line: {line:?}"
                    )));
                }
                let name = fields[0];
                let shape: Vec<usize> = fields[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| {
                        TensorError::CheckpointFormat(format!("bad shape in: {line:?}"))
                    })?;
                let offset: usize = fields[2].parse().map_err(|_| {
                    TensorError::CheckpointFormat(format!("bad offset in: {line:?}"))
                })?;
                let numel: usize = shape.iter().product();
                let end = offset + numel * 8;
                if end > payload.len() {
                    return Err(TensorError::CheckpointFormat(format!(
                        "tensor {name} [{offset}, {end}) exceeds payload of {} bytes",
                        payload.len()
                    )));
                }
                let mut data = Vec::with_capacity(numel);
                for chunk in payload[offset..end].chunks_exact(8) {
                    data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
                }
                ckpt.params.insert(name.to_string(), Tensor::new(shape, data));
            }
            other => {
                return Err(TensorError::CheckpointFormat(format!(
                    "unknown manifest entry: {other:?}"
                )))
            }
        }
    }
    Ok(ckpt)
}

fn find_line(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    // the marker must start a line
    haystack
        .windows(needle.len())
        .enumerate()
        .find(|(i, w)| *w == needle && (*i == 0 || haystack[i - 1] == b'\n'))
        .map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("posealign-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ckpt");

        let mut ckpt = Checkpoint::default();
        ckpt.meta.insert("kind".into(), "test".into());
        ckpt.meta.insert("width".into(), "7".into());
        // values chosen to exercise sign, subnormal-ish and non-round bits
        ckpt.params.insert(
            "layer.w".into(),
            Tensor::new(vec![2, 3], vec![0.1, -2.5e-17, 3.0, f64::MIN_POSITIVE, -0.0, 1.0 / 3.0]),
        );
        ckpt.params
            .insert("layer.b".into(), Tensor::new(vec![3], vec![1.0, 2.0, -3.5]));

        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta, ckpt.meta);
        for (name, tensor) in ckpt.params.iter() {
            let got = loaded.params.get(name).unwrap();
            assert_eq!(got.shape(), tensor.shape());
            for (a, b) in got.data().iter().zip(tensor.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "bit mismatch in {name}");
            }
        }

        // saving the loaded checkpoint reproduces the file byte for byte
        let path2 = dir.join("rt2.ckpt");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = std::env::temp_dir().join("posealign-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"not-a-checkpoint\ndata\n").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TensorError::CheckpointFormat(_))
        ));
    }
}
