//! Binary checkpoint format.
//!
//! ```text
//! "MLCN" | version u32 | count u32 | count × tensor | [optimizer section]
//! tensor:            name_len u16 | utf-8 name | rank u8 | rank × u32 extent | f32 data
//! optimizer section: "MLOS" | kind u8 | step u64 | count u32 | count × tensor
//! ```
//! All integers and floats are little-endian.

use std::io::{self, Read, Write};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLCN";
pub const CHECKPOINT_VERSION: u32 = 1;
const OPTIMIZER_MAGIC: &[u8; 4] = b"MLOS";

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSection {
    /// 1 = Adam, 2 = SGD.
    pub kind: u8,
    pub step: u64,
    pub buffers: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerSection>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn write_tensors(w: &mut impl Write, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank too large for {name}")))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent too large for {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_tensors(w, &ckpt.tensors)?;
    if let Some(opt) = &ckpt.optimizer {
        w.write_all(OPTIMIZER_MAGIC)?;
        w.write_all(&[opt.kind])?;
        w.write_all(&opt.step.to_le_bytes())?;
        write_tensors(w, &opt.buffers)?;
    }
    Ok(())
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("truncated checkpoint".into())
    } else {
        Error::Io(e)
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b)
}

fn read_tensors(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let count = u32::from_le_bytes(read_array(r)?);
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_array(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let [rank] = read_array::<1>(r)?;
        let shape = (0..rank)
            .map(|_| read_array::<4>(r).map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw).map_err(truncated)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as Real).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let tensors = read_tensors(r)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let optimizer = if rest.is_empty() {
        None
    } else {
        let mut r = rest.as_slice();
        let magic: [u8; 4] = read_array(&mut r)?;
        if &magic != OPTIMIZER_MAGIC {
            return Err(Error::Format("trailing bytes after tensor section".into()));
        }
        let [kind] = read_array::<1>(&mut r)?;
        let step = u64::from_le_bytes(read_array(&mut r)?);
        let buffers = read_tensors(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after optimizer section".into()));
        }
        Some(OptimizerSection { kind, step, buffers })
    };
    Ok(Checkpoint { tensors, optimizer })
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, self)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        read_checkpoint(&mut bytes.as_slice())
    }
}
