//! Reader and writer for the named-tensor archive used by checkpoints.
//! The byte layout is described in [`crate::trainer`].

use std::io::{Read, Write};

use super::{Array, Result, TensorError};

pub const MAGIC: &[u8; 4] = b"LWA1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Array,
}

pub fn write_archive<W: Write>(mut w: W, records: &[NamedTensor]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    for rec in records {
        let name = rec.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = rec.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in rec.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str, record: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TensorError::Archive(format!(
                "truncated {what} in record '{record}' at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str, record: &str) -> Result<u32> {
        let b = self.take(4, what, record)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_archive<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| TensorError::Archive(e.to_string()))?;
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(TensorError::Archive("bad magic bytes".into()));
    }
    let mut cur = Cursor { buf: &buf, pos: 4 };
    let mut out = Vec::new();
    while cur.pos < buf.len() {
        let prev = out.last().map_or("<start>".to_string(), |t: &NamedTensor| t.name.clone());
        let after = format!("after {prev}");
        let name_len = cur.u32("name length", &after)? as usize;
        let name_bytes = cur.take(name_len, "name", &after)?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| TensorError::Archive(format!("record {after}: name is not UTF-8")))?;
        let rank = cur.u32("rank", &name)? as usize;
        if rank > 8 {
            return Err(TensorError::Archive(format!("record '{name}': implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dims", &name)? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = cur.take(n * 8, "payload", &name)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor {
            value: Array::new(shape, data)
                .map_err(|e| TensorError::Archive(format!("record '{name}': {e}")))?,
            name,
        });
    }
    Ok(out)
}
