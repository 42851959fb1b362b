//! Little-endian primitive encoding shared by the binary file formats.

use std::io::{self, Read, Write};

pub fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn put_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn put_f64s(w: &mut impl Write, v: &[f64]) -> io::Result<()> {
    put_u64(w, v.len() as u64)?;
    let mut buf = Vec::with_capacity(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn put_u32s(w: &mut impl Write, v: &[u32]) -> io::Result<()> {
    put_u64(w, v.len() as u64)?;
    let mut buf = Vec::with_capacity(v.len() * 4);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn put_bytes(w: &mut impl Write, v: &[u8]) -> io::Result<()> {
    put_u64(w, v.len() as u64)?;
    w.write_all(v)
}

pub fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn get_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_len(r: &mut impl Read, width: usize, limit: u64) -> io::Result<usize> {
    let n = get_u64(r)?;
    if n.saturating_mul(width as u64) > limit {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("declared length {n} exceeds the remaining input"),
        ));
    }
    Ok(n as usize)
}

/// Reads a length-prefixed `f64` array; `limit` bounds the byte size.
pub fn get_f64s(r: &mut impl Read, limit: u64) -> io::Result<Vec<f64>> {
    let n = get_len(r, 8, limit)?;
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn get_u32s(r: &mut impl Read, limit: u64) -> io::Result<Vec<u32>> {
    let n = get_len(r, 4, limit)?;
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn get_bytes(r: &mut impl Read, limit: u64) -> io::Result<Vec<u8>> {
    let n = get_len(r, 1, limit)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}
