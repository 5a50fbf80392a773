//! Checkpoint container: a flat, self-describing list of named float records.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"ATLAB1"
//! record*:
//!   u32  name length in bytes
//!   ...  UTF-8 name
//!   u32  rank
//!   u32  dims[rank]
//!   f64  payload[product(dims)]
//! ```
//!
//! Records are read until EOF. Rank 0 is a single scalar. The container does
//! not interpret names; callers map them to parameters, optimizer moments,
//! and configuration scalars.

use std::io::{Read, Write};

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"ATLAB1";
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_NUMEL: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Record {
    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Record { name: name.into(), shape: Vec::new(), data: vec![value] }
    }
}

pub fn write_records(mut w: impl Write, records: &[Record]) -> Result<()> {
    w.write_all(MAGIC)?;
    for rec in records {
        let numel: usize = rec.shape.iter().product();
        if numel != rec.data.len() {
            return Err(Error::Shape(format!(
                "record {:?}: shape {:?} vs {} values",
                rec.name,
                rec.shape,
                rec.data.len()
            )));
        }
        if rec.name.len() > MAX_NAME || rec.shape.len() > MAX_RANK {
            return Err(Error::Format(format!("record {:?} exceeds format limits", rec.name)));
        }
        w.write_all(&(rec.name.len() as u32).to_le_bytes())?;
        w.write_all(rec.name.as_bytes())?;
        w.write_all(&(rec.shape.len() as u32).to_le_bytes())?;
        for &d in &rec.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &rec.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_records(mut r: impl Read) -> Result<Vec<Record>> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| Error::Format("checkpoint shorter than magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let mut records = Vec::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read(&mut len4)? {
            0 => break, // clean EOF between records
            4 => {}
            n => {
                // A short read mid-field can be a split, so finish the field.
                r.read_exact(&mut len4[n..]).map_err(|_| truncated("record header"))?;
            }
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        if name_len > MAX_NAME {
            return Err(Error::Format(format!("record name length {name_len} exceeds limit {MAX_NAME}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| truncated("record name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;

        let rank = read_u32(&mut r, "record rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("record {name:?}: rank {rank} exceeds limit {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = read_u32(&mut r, "record dim")? as u64;
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel > MAX_NUMEL {
            return Err(Error::Format(format!("record {name:?}: {numel} elements exceeds limit {MAX_NUMEL}")));
        }
        let mut data = Vec::with_capacity(numel as usize);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(|_| truncated("record payload"))?;
            data.push(f64::from_le_bytes(buf));
        }
        records.push(Record { name, shape, data });
    }
    Ok(records)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| truncated(what))?;
    Ok(u32::from_le_bytes(buf))
}

fn truncated(what: &str) -> Error {
    Error::Format(format!("checkpoint truncated while reading {what}"))
}
