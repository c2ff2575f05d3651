//! Checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"A2OS2A1"                     7 bytes
//! u64     header length
//! bytes   header: model config as `key = value` lines (UTF-8)
//! u64     tensor count
//! repeat  u64 name length, name bytes,
//!         u64 rank, rank x u64 dims,
//!         numel x f32 elements
//! ```
//!
//! Tensors are written sorted by name, so save -> load -> save round-trips
//! byte-identically.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::ParamVisitor;
use crate::tensor::Scalar;

use super::{ModelConfig, SpikingTransformer};

pub const MAGIC: &[u8; 7] = b"A2OS2A1";

const MAX_HEADER: u64 = 1 << 20;
const MAX_NAME: u64 = 1 << 12;
const MAX_RANK: u64 = 8;
const MAX_ELEMS: u64 = 1 << 28;

/// A checkpoint parsed from bytes: the model config plus named tensors.
#[derive(Debug, Clone)]
pub struct ParsedCheckpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

/// Parses `key = value` lines with `#` comments and blank lines.
pub fn parse_kv_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::config(format!(
                "line {}: duplicate key '{key}'",
                lineno + 1
            )));
        }
    }
    Ok(map)
}

/// Gathers every state tensor of a model (parameters plus batch-norm
/// running statistics), keyed by name.
fn state_tensors<T: Scalar>(model: &mut SpikingTransformer<T>) -> BTreeMap<String, (Vec<usize>, Vec<f32>)> {
    struct Collector {
        out: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    }
    impl<T: Scalar> ParamVisitor<T> for Collector {
        fn visit(&mut self, name: &str, shape: &[usize], data: &mut Vec<T>) {
            let vals = data.iter().map(|v| v.to_f64().unwrap_or(0.0) as f32).collect();
            self.out.insert(name.to_string(), (shape.to_vec(), vals));
        }
    }
    let mut c = Collector { out: BTreeMap::new() };
    model.visit_params(&mut c);
    let mut out = c.out;
    model.for_each_bn(|name, bn| {
        let to_f32 = |v: &[T]| -> Vec<f32> {
            v.iter().map(|x| x.to_f64().unwrap_or(0.0) as f32).collect()
        };
        let n = bn.channels;
        out.insert(format!("{name}.running_mean"), (vec![n], to_f32(&bn.stats.mean)));
        out.insert(format!("{name}.running_var"), (vec![n], to_f32(&bn.stats.var)));
        out.insert(
            format!("{name}.batches"),
            (vec![1], vec![bn.stats.batches as f32]),
        );
    });
    out
}

/// Serializes a model to checkpoint bytes.
pub fn checkpoint_bytes<T: Scalar>(model: &mut SpikingTransformer<T>) -> Result<Vec<u8>> {
    let header = model.config.to_kv_string();
    let tensors = state_tensors(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, (shape, data)) in &tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(model: &mut SpikingTransformer<T>, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what} ({n} bytes needed)"),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Parses checkpoint bytes. Every length field is validated before use, so
/// arbitrary input fails cleanly with a byte offset instead of panicking.
pub fn parse_checkpoint_bytes(bytes: &[u8]) -> Result<ParsedCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, "bad magic, not a checkpoint file"));
    }
    let header_len = r.u64("header length")?;
    if header_len > MAX_HEADER {
        return Err(Error::format(r.pos as u64 - 8, format!("header length {header_len} too large")));
    }
    let header_pos = r.pos;
    let header = std::str::from_utf8(r.take(header_len as usize, "header")?)
        .map_err(|e| Error::format(header_pos as u64, format!("header is not UTF-8: {e}")))?;
    let config = ModelConfig::from_kv(&parse_kv_text(header)?)?;
    let count = r.u64("tensor count")?;
    if count > 1 << 20 {
        return Err(Error::format(r.pos as u64 - 8, format!("tensor count {count} too large")));
    }
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u64("name length")?;
        if name_len > MAX_NAME {
            return Err(Error::format(r.pos as u64 - 8, format!("name length {name_len} too large")));
        }
        let name_pos = r.pos;
        let name = std::str::from_utf8(r.take(name_len as usize, "name")?)
            .map_err(|e| Error::format(name_pos as u64, format!("name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u64("rank")?;
        if rank > MAX_RANK {
            return Err(Error::format(r.pos as u64 - 8, format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let dim = r.u64("dimension")?;
            numel = numel
                .checked_mul(dim)
                .filter(|&n| n <= MAX_ELEMS)
                .ok_or_else(|| {
                    Error::format(r.pos as u64 - 8, format!("tensor '{name}' is too large"))
                })?;
            shape.push(dim as usize);
        }
        let data_bytes = r.take(numel as usize * 4, "tensor elements")?;
        let data: Vec<f32> = data_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::format(name_pos as u64, format!("duplicate tensor '{name}'")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes after last tensor", bytes.len() - r.pos),
        ));
    }
    Ok(ParsedCheckpoint { config, tensors })
}

/// Rebuilds a model from a parsed checkpoint. Every parameter and running
/// statistic must be present with a matching shape, and no extras allowed.
pub fn model_from_parsed<T: Scalar>(parsed: &ParsedCheckpoint) -> Result<SpikingTransformer<T>> {
    let mut model = SpikingTransformer::new(parsed.config.clone(), 0)?;
    let mut used = 0usize;
    let mut missing: Vec<String> = Vec::new();
    {
        struct Loader<'a> {
            tensors: &'a BTreeMap<String, (Vec<usize>, Vec<f32>)>,
            used: &'a mut usize,
            missing: &'a mut Vec<String>,
            error: Option<Error>,
        }
        impl<T: Scalar> ParamVisitor<T> for Loader<'_> {
            fn visit(&mut self, name: &str, shape: &[usize], data: &mut Vec<T>) {
                match self.tensors.get(name) {
                    Some((got_shape, vals)) => {
                        if got_shape != shape && self.error.is_none() {
                            self.error = Some(Error::Compatibility(format!(
                                "tensor '{name}': checkpoint shape {got_shape:?} vs model {shape:?}"
                            )));
                            return;
                        }
                        *data = vals.iter().map(|&v| T::c(v as f64)).collect();
                        *self.used += 1;
                    }
                    None => self.missing.push(name.to_string()),
                }
            }
        }
        let mut loader = Loader {
            tensors: &parsed.tensors,
            used: &mut used,
            missing: &mut missing,
            error: None,
        };
        model.visit_params(&mut loader);
        if let Some(err) = loader.error {
            return Err(err);
        }
    }
    model.for_each_bn(|name, bn| {
        let mean = parsed.tensors.get(&format!("{name}.running_mean"));
        let var = parsed.tensors.get(&format!("{name}.running_var"));
        let batches = parsed.tensors.get(&format!("{name}.batches"));
        match (mean, var, batches) {
            (Some((_, m)), Some((_, v)), Some((_, b)))
                if m.len() == bn.channels && v.len() == bn.channels && b.len() == 1 =>
            {
                bn.stats.mean = m.iter().map(|&x| T::c(x as f64)).collect();
                bn.stats.var = v.iter().map(|&x| T::c(x as f64)).collect();
                bn.stats.batches = b[0] as u64;
                used += 3;
            }
            _ => missing.push(format!("{name}.running_*")),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Compatibility(format!(
            "checkpoint is missing tensors: {}",
            missing.join(", ")
        )));
    }
    if used != parsed.tensors.len() {
        return Err(Error::Compatibility(format!(
            "checkpoint has {} unused tensors",
            parsed.tensors.len() - used
        )));
    }
    Ok(model)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<SpikingTransformer<T>> {
    let bytes = std::fs::read(path)?;
    let parsed = parse_checkpoint_bytes(&bytes)?;
    model_from_parsed(&parsed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_parser_handles_comments_and_blanks() {
        let map = parse_kv_text("# top\n\na = 1 # tail\n b = two \n").unwrap();
        assert_eq!(map["a"], "1");
        assert_eq!(map["b"], "two");
    }

    #[test]
    fn kv_parser_rejects_garbage() {
        assert!(parse_kv_text("no equals sign").is_err());
        assert!(parse_kv_text("a = 1\na = 2").is_err());
    }

    #[test]
    fn parse_rejects_bad_magic() {
        let err = parse_checkpoint_bytes(b"NOTMAGIC").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }

    #[test]
    fn parse_rejects_truncation() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&100u64.to_le_bytes());
        // Header claims 100 bytes but none follow.
        let err = parse_checkpoint_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
