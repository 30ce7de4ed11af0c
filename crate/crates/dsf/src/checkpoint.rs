//! Little-endian binary container for named f64 tensors.
//!
//! Layout: magic `DSF1`, version u32, tensor count u32, then per tensor:
//! name length u32 + UTF-8 name, rank u32, dims (u32 each), raw f64 values.
//! Used for both parameter checkpoints and generated datasets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DsfError, Result};

pub const MAGIC: &[u8; 4] = b"DSF1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) -> Self {
        let name = name.into();
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        TensorRecord { name, dims, values }
    }
}

pub fn write_records(path: &Path, records: &[TensorRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(r.dims.len() as u32).to_le_bytes())?;
        for &d in &r.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &r.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    reader: R,
    offset: usize,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.reader.read_exact(buf).map_err(|_| DsfError::Parse {
            offset: at,
            message: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len();
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.take(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }
}

pub fn read_records(path: &Path) -> Result<Vec<TensorRecord>> {
    let mut c = Cursor {
        reader: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    c.take(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(DsfError::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(DsfError::Parse {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = c.u32("tensor count")?;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        let name_at = c.offset;
        c.take(&mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| DsfError::Parse {
            offset: name_at,
            message: "tensor name is not valid UTF-8".into(),
        })?;
        let rank = c.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32("dimension")? as usize);
        }
        let n: usize = dims.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(c.f64("tensor values")?);
        }
        records.push(TensorRecord { name, dims, values });
    }
    Ok(records)
}
