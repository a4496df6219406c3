//! `MLGD` dataset files.
//!
//! Layout (little-endian): magic `MLGD`, version u32, N u32, L u32, H u16, W u16,
//! then N images of `H·W·3` bytes (RGB, row-major), then `N·L` label bytes.

use std::io::{Read, Write};
use std::path::Path;

use super::Split;
use crate::error::{Error, Result};
use crate::labels::LabelMatrix;

pub const DATASET_MAGIC: &[u8; 4] = b"MLGD";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_HEADER_LEN: usize = 20;

pub fn write_dataset(w: &mut impl Write, split: &Split) -> Result<()> {
    let field = |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::Format(format!("{what} too large")));
    let ext = |v: usize| u16::try_from(v).map_err(|_| Error::Format("image extent too large".into()));
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&field(split.len(), "image count")?.to_le_bytes())?;
    w.write_all(&field(split.label_count(), "label count")?.to_le_bytes())?;
    w.write_all(&ext(split.height())?.to_le_bytes())?;
    w.write_all(&ext(split.width())?.to_le_bytes())?;
    w.write_all(split.pixels())?;
    w.write_all(split.labels().as_bytes())?;
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<Split> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < DATASET_HEADER_LEN {
        return Err(Error::Format("truncated dataset header".into()));
    }
    if &bytes[0..4] != DATASET_MAGIC {
        return Err(Error::Format(format!("bad dataset magic {:?}", &bytes[0..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap()) as usize;
    let version = u32_at(4) as u32;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let (n, l, h, w) = (u32_at(8), u32_at(12), u16_at(16), u16_at(18));
    let image_bytes = n * h * w * 3;
    let expected = DATASET_HEADER_LEN + image_bytes + n * l;
    if bytes.len() != expected {
        return Err(Error::Format(format!("dataset body is {} bytes, header implies {expected}", bytes.len())));
    }
    let pixels = bytes[DATASET_HEADER_LEN..DATASET_HEADER_LEN + image_bytes].to_vec();
    let labels = LabelMatrix::new(n, l, bytes[DATASET_HEADER_LEN + image_bytes..].to_vec())
        .map_err(|e| Error::Format(e.to_string()))?;
    Split::new(h, w, pixels, labels)
}

pub fn save_dataset(split: &Split, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::with_capacity(DATASET_HEADER_LEN + split.pixels().len() + split.labels().as_bytes().len());
    write_dataset(&mut buf, split)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Split> {
    let bytes = std::fs::read(path)?;
    read_dataset(&mut bytes.as_slice())
}
