//! Dataset loading: the raw tensor format and CIFAR binary batches.
//!
//! Both parsers work on byte slices, validate every length before use, and
//! report failures with the byte offset — they are also the fuzz targets.

use std::path::Path;

use crate::error::{Error, Result};

/// One labeled image, pixels row-major `C x H x W` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Vec<f32>,
    pub label: u16,
}

/// An in-memory labeled dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_elems(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Per-class sample counts.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_classes];
        for s in &self.samples {
            hist[s.label as usize] += 1;
        }
        hist
    }
}

/// Supported on-disk formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    /// Raw tensor format: magic "SPKT", u32 count, u32 C/H/W, then per
    /// sample a u16 label and C*H*W little-endian f32 pixels.
    Spkt,
    /// CIFAR-10 binary batches: per record 1 label byte + 3072 pixels.
    CifarBatch,
}

pub const SPKT_MAGIC: &[u8; 4] = b"SPKT";

const CIFAR_RECORD: usize = 3073;
const MAX_SAMPLES: u32 = 1 << 24;
const MAX_IMAGE_ELEMS: u64 = 1 << 24;

/// Loads a dataset file, sniffing the format when possible.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    match format {
        DataFormat::Spkt => parse_spkt(&bytes),
        DataFormat::CifarBatch => parse_cifar_batch(&bytes),
    }
}

/// Guesses the format from the file contents: SPKT magic wins, otherwise a
/// whole number of CIFAR records.
pub fn sniff_format(bytes: &[u8]) -> Result<DataFormat> {
    if bytes.len() >= 4 && &bytes[..4] == SPKT_MAGIC {
        return Ok(DataFormat::Spkt);
    }
    if !bytes.is_empty() && bytes.len() % CIFAR_RECORD == 0 {
        return Ok(DataFormat::CifarBatch);
    }
    Err(Error::format(
        0,
        "unrecognized dataset format (no SPKT magic, not CIFAR-sized)",
    ))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
}

/// Parses the raw tensor dataset format.
pub fn parse_spkt(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != SPKT_MAGIC {
        return Err(Error::format(0, "bad magic, expected 'SPKT'"));
    }
    let count = cur.u32("sample count")?;
    if count > MAX_SAMPLES {
        return Err(Error::format(4, format!("sample count {count} too large")));
    }
    let c = cur.u32("channel count")?;
    let h = cur.u32("height")?;
    let w = cur.u32("width")?;
    let elems = (c as u64)
        .checked_mul(h as u64)
        .and_then(|x| x.checked_mul(w as u64))
        .filter(|&x| x > 0 && x <= MAX_IMAGE_ELEMS)
        .ok_or_else(|| {
            Error::format(8, format!("image dims {c}x{h}x{w} out of range"))
        })? as usize;
    let mut samples = Vec::with_capacity(count as usize);
    let mut max_label = 0u16;
    for i in 0..count {
        let label = cur.u16("label")?;
        max_label = max_label.max(label);
        let pix_pos = cur.pos;
        let pix = cur.take(elems * 4, "pixels")?;
        let image: Vec<f32> = pix
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(bad) = image.iter().position(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!(
                "sample {i}: pixel at byte {} outside [0, 1]",
                pix_pos + bad * 4
            )));
        }
        samples.push(Sample { image, label });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            cur.pos as u64,
            format!("{} trailing bytes after last sample", bytes.len() - cur.pos),
        ));
    }
    Ok(Dataset {
        c: c as usize,
        h: h as usize,
        w: w as usize,
        num_classes: max_label as usize + 1,
        samples,
    })
}

/// Serializes a dataset in the raw tensor format.
pub fn spkt_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SPKT_MAGIC);
    out.extend_from_slice(&(ds.samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.c as u32).to_le_bytes());
    out.extend_from_slice(&(ds.h as u32).to_le_bytes());
    out.extend_from_slice(&(ds.w as u32).to_le_bytes());
    for s in &ds.samples {
        out.extend_from_slice(&s.label.to_le_bytes());
        for &p in &s.image {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    out
}

pub fn write_spkt(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, spkt_bytes(ds))?;
    Ok(())
}

/// Parses a CIFAR-10 binary batch: 10 classes, 3x32x32 pixels stored
/// plane-major, scaled into `[0, 1]`.
pub fn parse_cifar_batch(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::format(0, "empty file"));
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
        return Err(Error::format(
            offset,
            format!(
                "file length {} is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        ));
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut samples = Vec::with_capacity(count);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0] as u16;
        if label > 9 {
            return Err(Error::Data(format!(
                "record {i}: label {label} out of range for 10 classes (byte {})",
                i * CIFAR_RECORD
            )));
        }
        let image: Vec<f32> = record[1..].iter().map(|&b| b as f32 / 255.0).collect();
        samples.push(Sample { image, label });
    }
    Ok(Dataset {
        c: 3,
        h: 32,
        w: 32,
        num_classes: 10,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> Dataset {
        Dataset {
            c: 1,
            h: 2,
            w: 2,
            num_classes: 2,
            samples: vec![
                Sample {
                    image: vec![0.0, 0.25, 0.5, 1.0],
                    label: 0,
                },
                Sample {
                    image: vec![1.0, 0.75, 0.5, 0.0],
                    label: 1,
                },
            ],
        }
    }

    #[test]
    fn spkt_round_trip() {
        let ds = tiny_dataset();
        let bytes = spkt_bytes(&ds);
        let back = parse_spkt(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.samples[1].label, 1);
        assert_eq!(back.samples[0].image, ds.samples[0].image);
    }

    #[test]
    fn empty_file_is_format_error_not_crash() {
        assert!(matches!(parse_spkt(&[]), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_cifar_batch(&[]), Err(Error::Format { .. })));
    }

    #[test]
    fn spkt_rejects_trailing_garbage() {
        let mut bytes = spkt_bytes(&tiny_dataset());
        bytes.push(0);
        assert!(matches!(parse_spkt(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn spkt_rejects_out_of_range_pixels() {
        let mut ds = tiny_dataset();
        ds.samples[0].image[1] = 2.0;
        let bytes = spkt_bytes(&ds);
        assert!(matches!(parse_spkt(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn cifar_label_out_of_range() {
        let mut bytes = vec![0u8; CIFAR_RECORD * 2];
        bytes[CIFAR_RECORD] = 10; // second record label
        let err = parse_cifar_batch(&bytes).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn cifar_parses_records() {
        let mut bytes = vec![0u8; CIFAR_RECORD * 3];
        bytes[0] = 1;
        bytes[CIFAR_RECORD] = 9;
        bytes[2 * CIFAR_RECORD + 1] = 255; // first pixel of third record
        let ds = parse_cifar_batch(&bytes).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.samples[0].label, 1);
        assert_eq!(ds.samples[1].label, 9);
        assert_eq!(ds.samples[2].image[0], 1.0);
        assert_eq!(ds.num_classes, 10);
    }
}
