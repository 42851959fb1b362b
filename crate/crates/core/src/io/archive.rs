//! Self-describing container for retained posterior draws.
//!
//! Layout, all integers little endian:
//!
//! | bytes | content                                         |
//! |-------|-------------------------------------------------|
//! | 8     | magic `CMAPSAMP`                                 |
//! | 4     | format version (`u32`)                           |
//! | 8     | header length `h` (`u64`)                        |
//! | h     | header, UTF-8 JSON ([`ArchiveHeader`])           |
//! | 8     | payload length `n` (`u64`, number of values)     |
//! | 8·n   | payload, `f64`, layout `[sample][cell][taxon]`   |
//! | 32    | SHA-256 of every preceding byte                  |
//!
//! The header carries no timestamps so identical runs give identical files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{get_bytes, get_f64s, get_u32, put_bytes, put_f64s, put_u32};
use crate::error::{Error, Result};
use crate::estimator::PosteriorSamples;
use crate::grid::GridSpec;
use crate::model::TaxonRegistry;

pub const ARCHIVE_MAGIC: &[u8; 8] = b"CMAPSAMP";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub format_version: u32,
    /// `"theta"` for composition draws, `"alpha"` for latent-field draws.
    pub quantity: String,
    pub grid: GridSpec,
    pub taxa: Vec<String>,
    pub n_samples: usize,
    pub t_mc: u32,
    pub seed: u64,
    pub model: String,
    pub software: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl ArchiveHeader {
    pub fn payload_len(&self) -> usize {
        self.n_samples * self.grid.n_data_cells() * self.taxa.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleArchive {
    pub header: ArchiveHeader,
    pub payload: Vec<f64>,
}

impl SampleArchive {
    pub fn from_samples(samples: &PosteriorSamples, seed: u64, model: &str) -> Self {
        SampleArchive {
            header: ArchiveHeader {
                format_version: ARCHIVE_VERSION,
                quantity: "theta".into(),
                grid: samples.grid.clone(),
                taxa: samples.taxa.names().to_vec(),
                n_samples: samples.n_samples,
                t_mc: samples.t_mc,
                seed,
                model: model.into(),
                software: concat!("compmap ", env!("CARGO_PKG_VERSION")).into(),
                metadata: BTreeMap::new(),
            },
            payload: samples.theta.clone(),
        }
    }

    pub fn to_samples(&self) -> Result<PosteriorSamples> {
        if self.header.quantity != "theta" {
            return Err(Error::invalid(format!(
                "archive holds {} draws, not composition samples",
                self.header.quantity
            )));
        }
        PosteriorSamples::new(
            self.header.grid.clone(),
            TaxonRegistry::new(self.header.taxa.clone())?,
            self.header.t_mc,
            self.payload.clone(),
        )
    }

    fn validate(&self) -> Result<()> {
        if self.payload.len() != self.header.payload_len() {
            return Err(Error::invalid(format!(
                "payload has {} values, header implies {}",
                self.payload.len(),
                self.header.payload_len()
            )));
        }
        Ok(())
    }

    /// Serialised bytes, including the checksum trailer.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut buf = Vec::with_capacity(64 + self.payload.len() * 8);
        buf.extend_from_slice(ARCHIVE_MAGIC);
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::invalid(e.to_string()))?;
        let w = (|| -> std::io::Result<()> {
            put_u32(&mut buf, ARCHIVE_VERSION)?;
            put_bytes(&mut buf, &header)?;
            put_f64s(&mut buf, &self.payload)
        })();
        w.expect("writing to memory");
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }
}

pub fn write_samples(archive: &SampleArchive, path: &Path) -> Result<()> {
    let bytes = archive.to_bytes()?;
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

fn read_prefix(r: &mut impl Read, path: &Path, limit: u64) -> Result<ArchiveHeader> {
    let integrity = |m: String| Error::Integrity {
        path: path.into(),
        message: m,
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| integrity("file too short for an archive".into()))?;
    if &magic != ARCHIVE_MAGIC {
        return Err(integrity("not a sample archive".into()));
    }
    let version = get_u32(r).map_err(|e| integrity(e.to_string()))?;
    if version != ARCHIVE_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: version,
            supported: ARCHIVE_VERSION,
        });
    }
    let raw = get_bytes(r, limit).map_err(|e| integrity(format!("header: {e}")))?;
    let header: ArchiveHeader =
        serde_json::from_slice(&raw).map_err(|e| integrity(format!("header: {e}")))?;
    if header.format_version != version {
        return Err(integrity("header and preamble versions disagree".into()));
    }
    Ok(header)
}

/// Reads only the header; the payload is not touched.
pub fn read_header(path: &Path) -> Result<ArchiveHeader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    read_prefix(&mut BufReader::new(file), path, len)
}

pub fn read_samples(path: &Path) -> Result<SampleArchive> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r: &[u8] = &bytes;
    let header = read_prefix(&mut r, path, bytes.len() as u64)?;
    let integrity = |m: String| Error::Integrity {
        path: path.into(),
        message: m,
    };
    if bytes.len() < 32 {
        return Err(integrity("truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(integrity("checksum mismatch (truncated or corrupted file)".into()));
    }
    let payload = get_f64s(&mut r, bytes.len() as u64).map_err(|e| integrity(format!("payload: {e}")))?;
    if r.len() != 32 {
        return Err(integrity("trailing bytes after payload".into()));
    }
    let archive = SampleArchive { header, payload };
    archive
        .validate()
        .map_err(|e| integrity(e.to_string()))?;
    Ok(archive)
}

/// Hex SHA-256 of an archive file.
pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn archive(k: usize, nx: usize, ny: usize, p: usize, fill: impl Fn(usize) -> f64) -> SampleArchive {
        let grid = GridSpec::new(nx, ny, 0).unwrap();
        let theta = (0..k * nx * ny * p).map(fill).collect();
        let s = PosteriorSamples::new(grid, TaxonRegistry::numbered(p), 100, theta).unwrap();
        SampleArchive::from_samples(&s, 9, "car")
    }

    #[test]
    fn size_arithmetic() {
        let a = archive(250, 10, 10, 23, |i| i as f64);
        assert_eq!(a.payload.len(), 575_000);
        assert_eq!(a.header.payload_len(), 250 * 100 * 23);
    }

    #[test]
    fn header_only_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let a = archive(3, 2, 2, 2, |i| (i as f64).sin());
        write_samples(&a, &path).unwrap();
        assert_eq!(read_header(&path).unwrap(), a.header);

        let mut bytes = std::fs::read(&path).unwrap();
        let good = bytes.clone();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_samples(&path), Err(Error::Integrity { .. })));

        let mut flipped = good.clone();
        let n = flipped.len();
        flipped[n - 40] ^= 1;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(read_samples(&path), Err(Error::Integrity { .. })));

        let mut v2 = good;
        v2[8] = 2;
        std::fs::write(&path, &v2).unwrap();
        assert!(matches!(read_samples(&path), Err(Error::Version { found: 2, .. })));
        assert!(matches!(read_header(&path), Err(Error::Version { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_bitwise(k in 1usize..4, nx in 1usize..4, ny in 1usize..4, p in 1usize..4,
                                 vals in proptest::collection::vec(any::<f64>(), 64)) {
            let a = archive(k, nx, ny, p, |i| vals[i % vals.len()]);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("a.bin");
            write_samples(&a, &path).unwrap();
            let b = read_samples(&path).unwrap();
            prop_assert_eq!(&a.header, &b.header);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.payload), bits(&b.payload));
        }
    }
}
