use super::{NnError, ParamStore, Tensor};
use std::hash::Hasher;
use std::io::{Read, Write};
use twox_hash::XxHash64;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GZCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch_hash: u64,
    pub records: Vec<(String, bool, Tensor<f32>)>,
}

impl Checkpoint {
    /// Copies every record into the parameter of the same name, checking the
    /// architecture hash and every shape.
    pub fn apply(&self, store: &mut ParamStore<f32>, expected_hash: u64) -> Result<(), NnError> {
        if self.arch_hash != expected_hash {
            return Err(NnError::ArchitectureMismatch { found: self.arch_hash, expected: expected_hash });
        }
        if self.records.len() != store.len() {
            return Err(NnError::Checkpoint(format!("{} records for {} parameters", self.records.len(), store.len())));
        }
        for (name, _, t) in &self.records {
            let id = store.find(name).ok_or_else(|| NnError::Checkpoint(format!("unknown parameter {name}")))?;
            let p = store.get_mut(id);
            if p.value.shape != t.shape {
                return Err(NnError::Checkpoint(format!("{name}: shape {:?} vs {:?}", t.shape, p.value.shape)));
            }
            p.value.data.copy_from_slice(&t.data);
        }
        Ok(())
    }
}

fn digest(bytes: &[u8]) -> u64 {
    let mut h = XxHash64::with_seed(0);
    h.write(bytes);
    h.finish()
}

/// Serialises every parameter (trainable or not) of `store`.
pub fn write_checkpoint<W: Write>(store: &ParamStore<f32>, arch_hash: u64, mut out: W) -> Result<(), NnError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&arch_hash.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.trainable as u8);
        buf.push(p.value.shape.len() as u8);
        for &d in &p.value.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.value.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = digest(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| NnError::Checkpoint("truncated record".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint, NnError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    if bytes.len() < 6 {
        return Err(NnError::Checkpoint("truncated header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(NnError::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    if bytes.len() < 26 {
        return Err(NnError::Checkpoint("checksum mismatch (file truncated)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if digest(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(NnError::Checkpoint("checksum mismatch".into()));
    }
    let mut c = Cursor { bytes: body, pos: 6 };
    let arch_hash = c.u64()?;
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| NnError::Checkpoint("name is not UTF-8".into()))?.to_string();
        let trainable = c.u8()? != 0;
        let rank = c.u8()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| NnError::Checkpoint("oversized tensor".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        records.push((name, trainable, Tensor { shape, data }));
    }
    if c.pos != body.len() {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { arch_hash, records })
}
